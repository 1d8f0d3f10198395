"""Residual vector quantization with EMA codebooks.

Codebooks are buffers, never optimizer parameters: they move only through
:meth:`ResidualVQ.ema_update`, k-means initialization and dead-code
replacement. The encoder sees the quantizer through a straight-through
estimator.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE

TOKEN_MAGIC = b"XYTK"
TOKEN_VERSION = 1


@dataclass
class RVQConfig:
    num_layers: int = 8
    codebook_size: int = 1024
    dim: int = 64
    ema_decay: float = 0.99
    kmeans_iters: int = 10
    eps: float = 1e-5
    dead_fraction: float = 0.03
    replace_period: int = 200

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")

    def dead_threshold(self, batch_frames: int) -> float:
        return self.dead_fraction * batch_frames / self.codebook_size


def bitrate(cfg: RVQConfig, frame_rate: float) -> float:
    return cfg.num_layers * math.ceil(math.log2(cfg.codebook_size)) * frame_rate


def _sq_dists(x: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    return (x * x).sum(-1, keepdim=True) - 2.0 * x @ codebook.T + (codebook * codebook).sum(-1)[None, :]


def kmeans_init(samples, codebook_size: int, iters: int = 10, seed: int = 0) -> torch.Tensor:
    """k-means++ seeding followed by exactly ``iters`` Lloyd iterations."""
    x = torch.as_tensor(samples, dtype=DTYPE).detach()
    n = x.shape[0]
    if n < codebook_size:
        raise ValueError(f"k-means needs at least {codebook_size} samples, got {n}")
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(-1).numpy()
    for _ in range(1, codebook_size):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(-1).numpy())
    c = x[centers].clone()
    for _ in range(iters):
        assign = _sq_dists(x, c).argmin(-1)
        counts = torch.bincount(assign, minlength=codebook_size).to(DTYPE)
        sums = torch.zeros_like(c).index_add_(0, assign, x)
        filled = counts > 0
        c[filled] = sums[filled] / counts[filled, None]
    return c


@dataclass
class QuantizationResult:
    codes: torch.Tensor  # [..., num_layers] int64
    quantized: list  # per-layer q_i(z_i), detached
    residuals: list  # per-layer z_i (layer inputs), attached to the encoder graph
    sum_quantized: torch.Tensor  # straight-through decoder input
    final_residual: torch.Tensor


class ResidualVQ(nn.Module):
    def __init__(self, cfg: RVQConfig):
        super().__init__()
        self.cfg = cfg
        L, K, D = cfg.num_layers, cfg.codebook_size, cfg.dim
        g = torch.Generator().manual_seed(0)
        init = torch.randn(L, K, D, generator=g, dtype=DTYPE)
        self.register_buffer("codebooks", init)
        self.register_buffer("ema_cluster_size", torch.ones(L, K, dtype=DTYPE))
        self.register_buffer("ema_embed_sum", init.clone())
        self.register_buffer("initted", torch.zeros(1, dtype=DTYPE))

    # ------------------------------------------------------------------
    def quantize_residual(self, z: torch.Tensor) -> QuantizationResult:
        if z.shape[-1] != self.cfg.dim:
            raise ValueError(f"expected dim {self.cfg.dim}, got {z.shape[-1]}")
        lead = z.shape[:-1]
        flat = z.reshape(-1, self.cfg.dim)
        residual = flat
        codes, quantized, residuals = [], [], []
        total = torch.zeros_like(flat)
        for layer in range(self.cfg.num_layers):
            book = self.codebooks[layer]
            idx = _sq_dists(residual.detach(), book).argmin(-1)
            q = book[idx].detach()
            codes.append(idx)
            quantized.append(q.reshape(*lead, -1))
            residuals.append(residual.reshape(*lead, -1))
            total = total + q
            residual = residual - q
        sum_q = flat + (total - flat).detach()
        return QuantizationResult(
            codes=torch.stack(codes, -1).reshape(*lead, self.cfg.num_layers),
            quantized=quantized,
            residuals=residuals,
            sum_quantized=sum_q.reshape(*lead, -1),
            final_residual=residual.reshape(*lead, -1),
        )

    forward = quantize_residual

    def decode_codes(self, codes: torch.Tensor) -> torch.Tensor:
        out = 0
        for layer in range(codes.shape[-1]):
            out = out + self.codebooks[layer][codes[..., layer]]
        return out

    # ------------------------------------------------------------------
    @torch.no_grad()
    def init_from_samples(self, z: torch.Tensor, seed: int = 0) -> None:
        """Layer-by-layer k-means on the residual stream of ``z`` [n, dim]."""
        residual = z.detach().reshape(-1, self.cfg.dim)
        for layer in range(self.cfg.num_layers):
            book = kmeans_init(residual, self.cfg.codebook_size, self.cfg.kmeans_iters, seed + layer)
            self.codebooks[layer] = book
            self.ema_cluster_size[layer] = 1.0
            self.ema_embed_sum[layer] = book
            idx = _sq_dists(residual, book).argmin(-1)
            residual = residual - book[idx]
        self.initted.fill_(1.0)

    @torch.no_grad()
    def ema_update(self, layer: int, residual: torch.Tensor, codes: torch.Tensor) -> None:
        """One EMA step for ``layer`` from assigned residual rows [n, dim]."""
        if residual.numel() == 0:
            return
        d, K = self.cfg.ema_decay, self.cfg.codebook_size
        residual = residual.detach().reshape(-1, self.cfg.dim)
        codes = codes.reshape(-1)
        counts = torch.bincount(codes, minlength=K).to(DTYPE)
        sums = torch.zeros(K, self.cfg.dim, dtype=DTYPE).index_add_(0, codes, residual)
        self.ema_cluster_size[layer] = d * self.ema_cluster_size[layer] + (1 - d) * counts
        self.ema_embed_sum[layer] = d * self.ema_embed_sum[layer] + (1 - d) * sums
        self.codebooks[layer] = self.ema_embed_sum[layer] / (
            self.ema_cluster_size[layer][:, None] + self.cfg.eps)

    @torch.no_grad()
    def ema_update_all(self, result: QuantizationResult, mask: torch.Tensor | None = None) -> None:
        for layer in range(self.cfg.num_layers):
            r = result.residuals[layer].reshape(-1, self.cfg.dim)
            c = result.codes[..., layer].reshape(-1)
            if mask is not None:
                keep = mask.reshape(-1) > 0
                r, c = r[keep], c[keep]
            self.ema_update(layer, r, c)

    @torch.no_grad()
    def replace_dead_codes(self, layer: int, batch: torch.Tensor, seed: int, threshold: float) -> int:
        batch = batch.detach().reshape(-1, self.cfg.dim)
        dead = torch.nonzero(self.ema_cluster_size[layer] < threshold).reshape(-1)
        n = min(len(dead), batch.shape[0])
        if n == 0:
            return 0
        rng = np.random.default_rng(seed)
        rows = torch.as_tensor(rng.choice(batch.shape[0], size=n, replace=False))
        dead = dead[:n]
        self.codebooks[layer, dead] = batch[rows]
        self.ema_embed_sum[layer, dead] = batch[rows]
        self.ema_cluster_size[layer, dead] = 1.0
        return n


    @torch.no_grad()
    def maintain(self, result: QuantizationResult, step: int, seed: int,
                 mask: torch.Tensor | None = None) -> int:
        """Per-step codebook upkeep: EMA update, then dead-code replacement every
        ``replace_period`` steps (``step`` counts from 0). Returns codes replaced."""
        self.ema_update_all(result, mask)
        period = self.cfg.replace_period
        if not period or (step + 1) % period:
            return 0
        valid = (mask.reshape(-1) > 0 if mask is not None
                 else torch.ones(result.codes[..., 0].numel(), dtype=torch.bool))
        thr = self.cfg.dead_threshold(int(valid.sum()))
        replaced = 0
        for layer, r in enumerate(result.residuals):
            rows = r.reshape(-1, r.shape[-1])[valid]
            replaced += self.replace_dead_codes(layer, rows, seed=seed * 7919 + step * 31 + layer, threshold=thr)
        return replaced

def commitment_loss(result: QuantizationResult, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over layers of the per-frame L1 distance to the stop-gradient code, averaged over frames."""
    total = None
    for z, q in zip(result.residuals, result.quantized):
        per_frame = (z - q.detach()).abs().sum(-1)
        if mask is not None:
            term = (per_frame * mask).sum() / mask.sum().clamp(min=1.0)
        else:
            term = per_frame.mean()
        total = term if total is None else total + term
    return total


def codebook_utilization(codes: torch.Tensor, codebook_size: int) -> list[float]:
    """Fraction of codes used at least once, per layer; ``codes`` is [..., layers]."""
    flat = codes.reshape(-1, codes.shape[-1])
    return [float(torch.unique(flat[:, i]).numel()) / codebook_size for i in range(flat.shape[1])]


# --------------------------------------------------------------------------
# Token files


@dataclass
class TokenSequence:
    codes: np.ndarray  # [frames, layers]
    frame_rate: float
    codebook_size: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise ValueError("codes must be [frames, layers]")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise ValueError("code outside codebook range")

    @property
    def num_layers(self) -> int:
        return self.codes.shape[1]

    @property
    def num_frames(self) -> int:
        return self.codes.shape[0]

    def to_bytes(self) -> bytes:
        head = TOKEN_MAGIC + struct.pack(
            "<IIHII", TOKEN_VERSION, int(round(self.frame_rate * 1e6)), self.num_layers,
            self.codebook_size, self.codes.shape[0])
        return head + self.codes.astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TokenSequence":
        if data[:4] != TOKEN_MAGIC:
            raise ValueError("not an XYTK token file")
        version, rate, layers, size, frames = struct.unpack_from("<IIHII", data, 4)
        if version != TOKEN_VERSION:
            raise ValueError(f"unsupported token file version {version}")
        off = 4 + struct.calcsize("<IIHII")
        if len(data) != off + 2 * frames * layers:
            raise ValueError("token file is truncated or has trailing bytes")
        codes = np.frombuffer(data, dtype="<u2", count=frames * layers, offset=off)
        return cls(codes.reshape(frames, layers), rate / 1e6, size)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TokenSequence":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
