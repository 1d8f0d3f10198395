"""Dual-channel codec network, semantic decoder and discriminator bank.

Rate ladder: mel at 100 Hz -> encoder at 50 Hz -> tokens at 12.5 Hz ->
decoder at 50 Hz -> 100 Hz frames -> ISTFT with a 10 ms hop.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .audio import StftConfig, encoder_mel, istft, stft
from .autodiff import freeze
from .rvq import QuantizationResult, ResidualVQ, RVQConfig, commitment_loss

BOS = 0
SAMPLES_PER_TOKEN_FRAMES = 8  # 100 Hz mel frames per 12.5 Hz token


@dataclass
class EncoderConfig:
    two_channel: bool = True
    freeze_semantic: bool = True
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_mels: int = 80
    ffn_dim: int = 0  # 0 -> 4 * d_model

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class AdapterConfig:
    n_layers: int = 1
    d_model: int = 64
    ffn_dim: int = 256
    n_heads: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("adapter d_model must be divisible by n_heads")


@dataclass
class DecoderConfig:
    upsample_factor: int = 4
    vocos_layers: int = 4
    vocos_dim: int = 64
    hop: int = 160
    freeze_semantic_decoder: bool = True
    text_vocab: int = 28  # BOS + 27 characters
    llm_dim: int = 64
    llm_layers: int = 2
    llm_heads: int = 4


@dataclass
class DiscriminatorConfig:
    mpd_periods: tuple = (2, 3)
    msd_scales: int = 2
    stftd_fft_sizes: tuple = (256, 512)
    channels: int = 16

    def __post_init__(self):
        self.mpd_periods = tuple(int(p) for p in self.mpd_periods)
        self.stftd_fft_sizes = tuple(int(n) for n in self.stftd_fft_sizes)
        if any(p < 2 for p in self.mpd_periods) or len(set(self.mpd_periods)) != len(self.mpd_periods):
            raise ValueError("MPD periods must be distinct and >= 2")


@dataclass
class CodecConfig:
    sample_rate: int = 16000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    rvq: RVQConfig = field(default_factory=lambda: RVQConfig(codebook_size=64))
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    bypass_quantizer: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.decoder.hop * 100 != self.sample_rate:
            raise ValueError(f"hop {self.decoder.hop} * 100 != sample rate {self.sample_rate}")

    @property
    def samples_per_token(self) -> int:
        return self.decoder.hop * SAMPLES_PER_TOKEN_FRAMES

    @property
    def token_rate(self) -> float:
        return self.sample_rate / self.samples_per_token

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        return cls(
            sample_rate=d["sample_rate"],
            encoder=EncoderConfig(**d["encoder"]),
            adapter=AdapterConfig(**d["adapter"]),
            rvq=RVQConfig(**d["rvq"]),
            decoder=DecoderConfig(**d["decoder"]),
            discriminator=DiscriminatorConfig(**d["discriminator"]),
            bypass_quantizer=d.get("bypass_quantizer", False),
            seed=d.get("seed", 0),
        )


# --------------------------------------------------------------------------
# Transformer pieces


def sinusoids(length: int, dim: int) -> torch.Tensor:
    half = dim // 2
    scale = math.log(10000) / max(half - 1, 1)
    inv = torch.exp(-scale * torch.arange(half, dtype=torch.float64))
    t = torch.arange(length, dtype=torch.float64)[:, None] * inv[None, :]
    return torch.cat([torch.sin(t), torch.cos(t)], dim=1)


def normalize_log_mel(mel: torch.Tensor) -> torch.Tensor:
    """Whisper's fixed input scaling, (log10 mel + 4) / 4, from natural-log mel."""
    return (mel / math.log(10.0) + 4.0) / 4.0


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, allowed=None):
        B, T, D = x.shape
        dh = D // self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, dh).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if allowed is not None:
            att = att.masked_fill(~allowed[:, None], -1e9)
        att = torch.softmax(att, dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(B, T, D))


class TransformerLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, ffn: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Linear(ffn, d))

    def forward(self, x, allowed=None):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.ffn(self.ln2(x))


def key_mask(mask: torch.Tensor | None, T: int, causal: bool = False) -> torch.Tensor | None:
    """[B, T, T] boolean "may attend" matrix from a [B, T] validity mask."""
    allowed = None
    if mask is not None:
        allowed = (mask > 0)[:, None, :].expand(-1, T, -1)
    if causal:
        tri = torch.ones(T, T, dtype=torch.bool).tril()[None]
        allowed = tri if allowed is None else allowed & tri
    return allowed


class Transformer(nn.Module):
    def __init__(self, d: int, n_layers: int, n_heads: int, ffn: int):
        super().__init__()
        self.layers = nn.ModuleList(TransformerLayer(d, n_heads, ffn) for _ in range(n_layers))
        self.ln = nn.LayerNorm(d)

    def forward(self, x, allowed=None):
        for layer in self.layers:
            x = layer(x, allowed)
        return self.ln(x)


class Adapter(nn.Module):
    """Small transformer with optional input/output projections."""

    def __init__(self, d_in: int, d_out: int, cfg: AdapterConfig):
        super().__init__()
        d = cfg.d_model
        self.proj_in = nn.Linear(d_in, d) if d_in != d else nn.Identity()
        self.body = Transformer(d, cfg.n_layers, cfg.n_heads, cfg.ffn_dim)
        self.proj_out = nn.Linear(d, d_out) if d_out != d else nn.Identity()

    def forward(self, x, mask=None):
        # inputs already carry position from the encoder; re-adding it drowns content
        x = self.proj_in(x)
        return self.proj_out(self.body(x, key_mask(mask, x.shape[1])))


# --------------------------------------------------------------------------
# Encoder


class EncoderChannel(nn.Module):
    """conv(k3, s1) -> GELU -> conv(k3, s2) -> GELU -> norm -> positions -> transformer.

    Freshly initialised convs emit activations far below the unit-scale
    sinusoids; without the norm the transformer input is almost pure position
    and the decoder learns to ignore the codes.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.conv1 = nn.Conv1d(cfg.n_mels, d, 3, padding=1)
        self.conv2 = nn.Conv1d(d, d, 3, stride=2, padding=1)
        self.transformer = Transformer(d, cfg.n_layers, cfg.n_heads, cfg.ffn_dim or 4 * d)

    def forward(self, mel, mask50=None):
        x = F.gelu(self.conv1(normalize_log_mel(mel).transpose(1, 2)))
        x = F.layer_norm(F.gelu(self.conv2(x)).transpose(1, 2), (x.shape[1],))
        x = x + sinusoids(x.shape[1], x.shape[2]).to(x.dtype)
        return self.transformer(x, key_mask(mask50, x.shape[1]))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, adapter: AdapterConfig):
        super().__init__()
        self.cfg = cfg
        self.acoustic = EncoderChannel(cfg)
        if cfg.two_channel:
            self.semantic = EncoderChannel(cfg)
            self.semantic_adapter = Adapter(cfg.d_model, cfg.d_model, adapter)
            if cfg.freeze_semantic:
                freeze(self.semantic)

    @property
    def out_dim(self) -> int:
        return self.cfg.d_model * (2 if self.cfg.two_channel else 1)

    def forward(self, mel, mask50=None):
        acoustic = self.acoustic(mel, mask50)
        if not self.cfg.two_channel:
            return acoustic
        semantic = self.semantic_adapter(self.semantic(mel, mask50), mask50)
        return torch.cat([semantic, acoustic], dim=-1)


# --------------------------------------------------------------------------
# Quantizer block


@dataclass
class TokenizeOutput:
    codes: torch.Tensor | None  # [B, T12, layers]
    quantized: torch.Tensor  # straight-through sum of code vectors [B, T12, dim]
    features: torch.Tensor  # post-quantizer adapter output
    commit: torch.Tensor
    result: QuantizationResult | None
    pre_quant: torch.Tensor


class Quantizer(nn.Module):
    """adapter -> 4x strided conv -> RVQ -> adapter."""

    def __init__(self, d_in: int, cfg: CodecConfig):
        super().__init__()
        a = cfg.adapter
        self.pre_adapter = Adapter(d_in, a.d_model, a)
        self.downsample = nn.Conv1d(a.d_model, cfg.rvq.dim, cfg.decoder.upsample_factor,
                                    stride=cfg.decoder.upsample_factor)
        self.rvq = ResidualVQ(cfg.rvq)
        self.post_adapter = Adapter(cfg.rvq.dim, a.d_model, a)
        self.bypass = cfg.bypass_quantizer

    def project(self, h50, mask50=None):
        x = self.pre_adapter(h50, mask50)
        return self.downsample(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, h50, mask50=None, mask12=None) -> TokenizeOutput:
        z = self.project(h50, mask50)
        if self.bypass:
            feats = self.post_adapter(z, mask12)
            return TokenizeOutput(None, z, feats, z.new_zeros(()), None, z)
        res = self.rvq(z)
        commit = commitment_loss(res, mask12)
        feats = self.post_adapter(res.sum_quantized, mask12)
        return TokenizeOutput(res.codes, res.sum_quantized, feats, commit, res, z)


# --------------------------------------------------------------------------
# Acoustic decoder


class ConvNeXtBlock(nn.Module):
    def __init__(self, d: int, scale: float):
        super().__init__()
        self.dwconv = nn.Conv1d(d, d, 7, padding=3, groups=d)
        self.norm = nn.LayerNorm(d)
        self.pw1 = nn.Linear(d, 3 * d)
        self.pw2 = nn.Linear(3 * d, d)
        self.gamma = nn.Parameter(torch.full((d,), scale))

    def forward(self, x):  # [B, d, T]
        h = self.dwconv(x).transpose(1, 2)
        h = self.pw2(F.gelu(self.pw1(self.norm(h))))
        return x + (self.gamma * h).transpose(1, 2)


class ISTFTHead(nn.Module):
    """Per-frame log-magnitude and (cos, sin) phase, synthesized by inverse STFT."""

    def __init__(self, d: int, hop: int):
        super().__init__()
        self.cfg = StftConfig(window_len=4 * hop, hop_len=hop)
        self.n_bins = self.cfg.n_bins
        self.out = nn.Linear(d, 3 * self.n_bins)
        with torch.no_grad():
            self.out.bias[: self.n_bins].fill_(-4.0)
        self.register_buffer("gain", torch.tensor(math.sqrt(4 * hop * 3 / 8)))

    def forward(self, x):  # [B, T, d]
        logmag, c, s = self.out(x).split(self.n_bins, dim=-1)
        mag = torch.exp(torch.clamp(logmag, max=math.log(1e2))) * self.gain
        norm = torch.sqrt(c * c + s * s + 1e-8)
        spec = torch.complex(mag * c / norm, mag * s / norm)
        return istft(spec, self.cfg, length=x.shape[1] * self.cfg.hop_len)


class AcousticDecoder(nn.Module):
    def __init__(self, d_in: int, cfg: CodecConfig):
        super().__init__()
        dc, ec = cfg.decoder, cfg.encoder
        d = dc.vocos_dim
        self.up4 = nn.ConvTranspose1d(d_in, d, dc.upsample_factor, stride=dc.upsample_factor)
        self.transformer = Transformer(d, ec.n_layers, ec.n_heads if d % ec.n_heads == 0 else 1, 4 * d)
        self.up2 = nn.ConvTranspose1d(d, d, 4, stride=2, padding=1)
        self.conv = nn.Conv1d(d, d, 3, padding=1)
        self.embed = nn.Conv1d(d, d, 7, padding=3)
        self.norm_in = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(ConvNeXtBlock(d, 1.0 / max(dc.vocos_layers, 1)) for _ in range(dc.vocos_layers))
        self.norm_out = nn.LayerNorm(d)
        self.head = ISTFTHead(d, dc.hop)

    def forward(self, feats, mask12=None):
        x = self.up4(feats.transpose(1, 2)).transpose(1, 2)
        mask50 = None if mask12 is None else torch.repeat_interleave(mask12, 4, dim=1)
        x = self.transformer(x, key_mask(mask50, x.shape[1]))
        x = F.gelu(self.up2(x.transpose(1, 2)))
        x = F.gelu(self.conv(x))
        x = self.embed(x)
        x = self.norm_in(x.transpose(1, 2)).transpose(1, 2)
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm_out(x.transpose(1, 2)))


# --------------------------------------------------------------------------
# Semantic decoder


class CausalLM(nn.Module):
    """Prefix-conditioned causal transformer over characters.

    Prefix frames and text tokens carry separate segment embeddings and each
    segment counts positions from zero.
    """

    def __init__(self, vocab: int, d: int, n_layers: int, n_heads: int):
        super().__init__()
        self.vocab = vocab
        self.tok = nn.Embedding(vocab, d)
        self.seg = nn.Embedding(2, d)
        self.body = Transformer(d, n_layers, n_heads, 4 * d)
        self.head = nn.Linear(d, vocab)

    def forward(self, prefix, prefix_mask, tokens, token_mask=None):
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise ValueError("text token outside vocabulary")
        B, N = tokens.shape
        d = self.tok.embedding_dim
        text = self.tok(tokens) + self.seg.weight[1] + sinusoids(N, d)
        if token_mask is None:
            token_mask = torch.ones(B, N)
        if prefix is None or prefix.shape[1] == 0:
            x, mask, P = text, token_mask, 0
        else:
            P = prefix.shape[1]
            pre = prefix + self.seg.weight[0] + sinusoids(P, d)
            if prefix_mask is None:
                prefix_mask = torch.ones(B, P)
            x = torch.cat([pre, text], dim=1)
            mask = torch.cat([prefix_mask, token_mask], dim=1)
        h = self.body(x, key_mask(mask, x.shape[1], causal=True))
        return self.head(h[:, P:])


class SemanticDecoder(nn.Module):
    def __init__(self, d_in: int, cfg: CodecConfig):
        super().__init__()
        dc = cfg.decoder
        self.adapter = Adapter(d_in, dc.llm_dim, cfg.adapter)
        self.lm = CausalLM(dc.text_vocab, dc.llm_dim, dc.llm_layers, dc.llm_heads)

    def forward(self, feats, mask12, tokens, token_mask=None):
        prefix = self.adapter(feats, mask12) if feats is not None and feats.shape[1] else None
        return self.lm(prefix, mask12, tokens, token_mask)


# --------------------------------------------------------------------------
# Discriminators


def reshape_periodic(x: torch.Tensor, period: int) -> torch.Tensor:
    """[B, T] -> [B, 1, ceil(T/p), p]; column j holds samples j, j+p, j+2p, ..."""
    B, T = x.shape
    if T % period:
        x = F.pad(x, (0, period - T % period), mode="reflect")
    return x.view(B, 1, -1, period)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, ch: int):
        super().__init__()
        self.period = period
        chans = [1, ch // 2, ch, 2 * ch, 2 * ch]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], (5, 1), (3, 1) if i < 3 else (1, 1), padding=(2, 0))
            for i in range(4)
        )
        self.post = nn.Conv2d(chans[-1], 1, (3, 1), padding=(1, 0))

    def forward(self, x):
        h = reshape_periodic(x, self.period)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            feats.append(h)
        return self.post(h), feats


class ScaleDiscriminator(nn.Module):
    def __init__(self, pool: int, ch: int):
        super().__init__()
        self.pool = pool
        self.convs = nn.ModuleList([
            nn.Conv1d(1, ch, 15, padding=7),
            nn.Conv1d(ch, 2 * ch, 41, stride=4, padding=20, groups=math.gcd(ch, 4)),
            nn.Conv1d(2 * ch, 4 * ch, 41, stride=4, padding=20, groups=math.gcd(2 * ch, 16)),
            nn.Conv1d(4 * ch, 4 * ch, 5, padding=2),
        ])
        self.post = nn.Conv1d(4 * ch, 1, 3, padding=1)

    def forward(self, x):
        h = x.unsqueeze(1)
        for _ in range(self.pool):
            h = F.avg_pool1d(h, 4, 2, padding=2)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            feats.append(h)
        return self.post(h), feats


class STFTDiscriminator(nn.Module):
    def __init__(self, n_fft: int, ch: int):
        super().__init__()
        self.cfg = StftConfig(window_len=n_fft, hop_len=n_fft // 4)
        self.convs = nn.ModuleList([
            nn.Conv2d(2, ch, (3, 9), padding=(1, 4)),
            nn.Conv2d(ch, ch, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(ch, ch, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(ch, ch, (3, 3), padding=(1, 1)),
        ])
        self.post = nn.Conv2d(ch, 1, (3, 3), padding=(1, 1))

    def forward(self, x):
        spec = stft(x, self.cfg, normalized=True)
        h = torch.stack([spec.real, spec.imag], dim=1)  # [B, 2, frames, bins]
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return self.post(h), feats


class DiscriminatorBank(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.discs = nn.ModuleList(
            [PeriodDiscriminator(p, ch) for p in cfg.mpd_periods]
            + [ScaleDiscriminator(s, ch) for s in range(cfg.msd_scales)]
            + [STFTDiscriminator(n, ch) for n in cfg.stftd_fft_sizes]
        )

    def __len__(self):
        return len(self.discs)

    def forward(self, x):
        """List of (score map, [layer features]) per discriminator."""
        need = 2 * max(self.cfg.mpd_periods, default=1)
        if x.shape[-1] < max(need, max(self.cfg.stftd_fft_sizes, default=0) // 2 + 1):
            raise ValueError(f"input of {x.shape[-1]} samples is too short for the discriminator bank")
        return [d(x) for d in self.discs]


# --------------------------------------------------------------------------
# Full model


def frame_masks(lengths, n_tokens: int, samples_per_token: int):
    """Validity masks at 12.5, 50 and 100 Hz from per-item sample lengths."""
    lengths = torch.as_tensor(lengths)
    valid = torch.clamp(torch.ceil(lengths / samples_per_token).long(), max=n_tokens)
    m12 = (torch.arange(n_tokens)[None, :] < valid[:, None]).to(torch.float64)
    return m12, torch.repeat_interleave(m12, 4, 1), torch.repeat_interleave(m12, 8, 1)


class CodecModel(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, cfg.adapter)
        self.quantizer = Quantizer(self.encoder.out_dim, cfg)
        self.acoustic_decoder = AcousticDecoder(cfg.adapter.d_model, cfg)
        self.semantic_decoder: SemanticDecoder | None = SemanticDecoder(cfg.adapter.d_model, cfg)
        self.discriminator = DiscriminatorBank(cfg.discriminator)

    def mel(self, wave):
        return encoder_mel(wave, self.cfg.sample_rate, self.cfg.encoder.n_mels)

    def encode(self, mel, mask50=None):
        if mel.shape[1] % 2:
            raise ValueError("mel frame count must be even")
        return self.encoder(mel, mask50)

    def tokenize(self, h50, mask50=None, mask12=None) -> TokenizeOutput:
        if h50.shape[1] % 4:
            raise ValueError("50 Hz frame count must be divisible by 4")
        return self.quantizer(h50, mask50, mask12)

    def decode_audio(self, quantized, mask12=None):
        return self.acoustic_decoder(self.quantizer.post_adapter(quantized, mask12), mask12)

    def decode_text_logits(self, feats, mask12, tokens, token_mask=None):
        if self.semantic_decoder is None:
            raise RuntimeError("semantic decoder has been discarded")
        return self.semantic_decoder(feats, mask12, tokens, token_mask)

    def pad_wave(self, wave):
        """Right-pad [B, L] to a whole number of tokens; returns (padded, lengths)."""
        spt = self.cfg.samples_per_token
        L = wave.shape[-1]
        target = max(spt, -(-L // spt) * spt)
        lengths = torch.full((wave.shape[0],), L)
        return F.pad(wave, (0, target - L)), lengths

    def generator_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("discriminator."):
                yield p

    def discard_semantic_decoder(self):
        self.semantic_decoder = None

    def param_count(self, prefix: str = "", trainable_only: bool = False) -> int:
        return sum(p.numel() for n, p in self.named_parameters()
                   if n.startswith(prefix) and not n.startswith("discriminator.")
                   and (p.requires_grad or not trainable_only))
