"""Differentiable tensor substrate.

Reverse-mode differentiation is torch autograd: every op below records itself
on the autograd graph whenever one of its inputs requires grad, and
:func:`backward` walks that graph once in reverse topological order. What this
module adds on top is the project-wide precision, the named op catalog with
its shape contracts, a finite-difference checker, freezing helpers, the
optimizer/schedule used by both training stages, and the ``XYCK`` checkpoint
format.
"""

from __future__ import annotations

import io
import json
import math
import struct
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)

CKPT_MAGIC = b"XYCK"
CKPT_VERSION = 1


class ShapeError(ValueError):
    pass


class UnknownOpError(KeyError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Op catalog


def conv1d_out_len(in_len: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (in_len + 2 * padding - kernel) // stride + 1


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    if x.dim() != 3 or weight.dim() != 3:
        raise ShapeError(f"conv1d expects [B, C, T] input and [O, I, K] kernel, got {tuple(x.shape)}, {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1] * groups:
        raise ShapeError(f"conv1d channel mismatch: {x.shape[1]} vs {weight.shape[1]}*{groups}")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def transposed_conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    if x.dim() != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"transposed_conv1d channel mismatch: {tuple(x.shape)} vs {tuple(weight.shape)}")
    return F.conv_transpose1d(x, weight, bias, stride=stride, padding=padding)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _same_shape(name):
    def check(a, b):
        if torch.is_tensor(a) and torch.is_tensor(b) and a.shape != b.shape:
            raise ShapeError(f"{name}: {tuple(a.shape)} vs {tuple(b.shape)}")
    return check


def add(a, b):
    _same_shape("add")(a, b)
    return a + b


def sub(a, b):
    _same_shape("sub")(a, b)
    return a - b


def mul(a, b):
    _same_shape("mul")(a, b)
    return a * b


def l1_distance(a, b):
    _same_shape("l1_distance")(a, b)
    return (a - b).abs().sum()


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def embedding(indices, table):
    if indices.numel() and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError("embedding index out of range")
    return F.embedding(indices, table)


def cross_entropy(logits, targets, mask=None):
    """Summed token negative log-likelihood (no per-token averaging)."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is not None:
        nll = nll * mask
    return nll.sum()


def replicate_upsample(x, factor: int, dim: int = -2):
    return torch.repeat_interleave(x, factor, dim=dim)


def concat(tensors, dim: int = -1):
    return torch.cat(list(tensors), dim=dim)


def slice_(x, start: int, stop: int, dim: int = -1):
    return x.narrow(dim, start, stop - start)


OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv1d": conv1d,
    "transposed_conv1d": transposed_conv1d,
    "gelu": F.gelu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "softmax": lambda x, dim=-1: torch.softmax(x, dim=dim),
    "layer_norm": layer_norm,
    "embedding": embedding,
    "concat": concat,
    "slice": slice_,
    "mean": lambda x: x.mean(),
    "sum": lambda x: x.sum(),
    "l1_distance": l1_distance,
    "cross_entropy": cross_entropy,
    "replicate_upsample": replicate_upsample,
}


def op(name: str, *args, **kwargs):
    try:
        fn = OPS[name]
    except KeyError:
        raise UnknownOpError(name) from None
    out = fn(*args, **kwargs)
    if torch.is_tensor(out) and out.is_floating_point() and not torch.isfinite(out).all():
        raise NonFiniteError(f"op {name!r} produced non-finite values")
    return out


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any tensor requiring grad")
    loss.reshape(()).backward()


# --------------------------------------------------------------------------
# Finite differences


def finite_diff_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    eps: float = 1e-6,
    indices: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-8)."""
    point = point.detach().clone().to(DTYPE)
    x = point.clone().requires_grad_(True)
    out = fn(x)
    if not torch.isfinite(out).all():
        raise NonFiniteError("function value is not finite at the check point")
    (grad,) = torch.autograd.grad(out, x, allow_unused=True)
    grad = torch.zeros_like(point) if grad is None else grad
    flat = point.reshape(-1)
    coords = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in coords:
            plus, minus = flat.clone(), flat.clone()
            plus[i] += eps
            minus[i] -= eps
            fp = fn(plus.reshape(point.shape))
            fm = fn(minus.reshape(point.shape))
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                raise NonFiniteError(f"non-finite value near coordinate {i}")
            central = float((fp - fm) / (2 * eps))
            analytic = float(grad.reshape(-1)[i])
            err = abs(analytic - central) / (abs(analytic) + abs(central) + 1e-8)
            worst = max(worst, err)
    return worst


def param_finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: list[tuple[torch.nn.Parameter, int]],
    eps: float = 1e-6,
) -> float:
    """Finite-difference check over selected (parameter, flat index) pairs."""
    for p, _ in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [float(p.grad.reshape(-1)[i]) if p.grad is not None else 0.0 for p, i in params]
    worst = 0.0
    with torch.no_grad():
        for (p, i), a in zip(params, analytic):
            flat = p.data.view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(loss_fn())
            flat[i] = orig - eps
            fm = float(loss_fn())
            flat[i] = orig
            c = (fp - fm) / (2 * eps)
            worst = max(worst, abs(a - c) / (abs(a) + abs(c) + 1e-8))
    return worst


# --------------------------------------------------------------------------
# Parameters, freezing, optimization


def freeze(module: torch.nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
        p.grad = None


def unfreeze(module: torch.nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(True)


def trainable(params) -> list[torch.nn.Parameter]:
    return [p for p in params if p.requires_grad]


def warmup_cosine(total_steps: int, warmup_frac: float = 0.05):
    warm = max(1, int(round(total_steps * warmup_frac)))

    def factor(step: int) -> float:
        if step < warm:
            return (step + 1) / warm
        progress = min(1.0, (step - warm) / max(1, total_steps - warm))
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    return factor


class Optimizer:
    """AdamW with linear warmup, cosine decay and global-norm clipping.

    Only parameters that require grad at construction time are updated, so a
    frozen parameter can never move even if a stray grad appears on it.
    """

    def __init__(self, params, lr: float, total_steps: int, weight_decay: float = 0.01,
                 warmup_frac: float = 0.05, clip_norm: float | None = 1.0):
        self.params = trainable(params)
        self.opt = torch.optim.AdamW(self.params, lr=lr, betas=(0.9, 0.999), eps=1e-8,
                                     weight_decay=weight_decay)
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt, warmup_cosine(total_steps, warmup_frac))
        self.clip_norm = clip_norm

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def step(self) -> float:
        norm = 0.0
        if self.clip_norm is not None:
            norm = float(torch.nn.utils.clip_grad_norm_(self.params, self.clip_norm))
        self.opt.step()
        self.sched.step()
        return norm

    def state_tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {}
        for i, p in enumerate(self.params):
            st = self.opt.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq", "step"):
                if key in st:
                    out[f"{prefix}.{i}.{key}"] = torch.as_tensor(st[key], dtype=DTYPE).reshape(-1) \
                        if key == "step" else st[key]
        out[f"{prefix}.sched_epoch"] = torch.tensor([float(self.sched.last_epoch)])
        return out

    def load_state_tensors(self, prefix: str, tensors: dict[str, torch.Tensor]) -> None:
        for i, p in enumerate(self.params):
            if f"{prefix}.{i}.exp_avg" not in tensors:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(float(tensors[f"{prefix}.{i}.step"][0])),
                "exp_avg": tensors[f"{prefix}.{i}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"{prefix}.{i}.exp_avg_sq"].clone(),
            }
        epoch = int(tensors[f"{prefix}.sched_epoch"][0])
        self.sched.last_epoch = epoch
        for group, lam, base in zip(self.opt.param_groups, self.sched.lr_lambdas, self.sched.base_lrs):
            group["lr"] = base * lam(epoch)


# --------------------------------------------------------------------------
# Checkpoint format


def save_checkpoint(path, tensors: dict[str, torch.Tensor], config: dict | None = None) -> None:
    """Write ``XYCK``: header, named little-endian float64 blobs, then a JSON chunk."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float64).numpy()
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an XYCK checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        tensors[name] = torch.from_numpy(arr.copy())
    config = {}
    if off < len(data):
        (n,) = struct.unpack_from("<I", data, off)
        config = json.loads(data[off + 4:off + 4 + n].decode("utf-8"))
    return tensors, config
