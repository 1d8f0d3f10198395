"""Audio I/O, STFT/ISTFT, mel filterbanks and the multi-scale mel loss.

All differentiable paths operate on torch tensors shaped ``[..., samples]``.
Framing is "center" style: the signal is reflect-padded by half a window on
both sides, so a signal of ``L`` samples yields ``1 + L // hop`` frames.
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE

LOG_FLOOR = 1e-5
MEL_SCALES = tuple(range(5, 12))


class AudioFormatError(ValueError):
    """Raised for unreadable, non-mono, non-PCM16 or wrong-rate audio."""


class StftConfigError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.samples, dtype=DTYPE)


@dataclass(frozen=True)
class StftConfig:
    window_len: int
    hop_len: int
    fft_len: int | None = None
    window: str = "hann"

    def __post_init__(self):
        if self.fft_len is None:
            object.__setattr__(self, "fft_len", self.window_len)
        if not 0 < self.hop_len <= self.window_len <= self.fft_len:
            raise StftConfigError(
                f"need 0 < hop <= window <= fft, got hop={self.hop_len} "
                f"window={self.window_len} fft={self.fft_len}"
            )
        if self.window != "hann":
            raise StftConfigError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1


# --------------------------------------------------------------------------
# WAV I/O


def wav_read(path, expected_rate: int | None = None) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as err:
        raise AudioFormatError(f"{path}: malformed WAV header ({err})") from err
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, found {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} != expected {expected_rate}")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def wav_write(path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# STFT / ISTFT


@functools.lru_cache(maxsize=None)
def _hann(n: int) -> np.ndarray:
    # periodic Hann: exact constant overlap-add for hop = n/k
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _window(cfg: StftConfig, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(_hann(cfg.window_len), dtype=like.dtype)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        return x.tensor()
    return torch.as_tensor(x, dtype=DTYPE) if not torch.is_tensor(x) else x


def stft(x, cfg: StftConfig, normalized: bool = False) -> torch.Tensor:
    """Complex half-spectrum frames ``[..., n_frames, fft_len // 2 + 1]``."""
    x = _as_tensor(x)
    w, hop = cfg.window_len, cfg.hop_len
    if x.shape[-1] < w:
        x = torch.nn.functional.pad(x, (0, w - x.shape[-1]))
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, x.shape[-1])
    flat = torch.nn.functional.pad(flat, (w // 2, w // 2), mode="reflect")
    frames = flat[:, 0].unfold(-1, w, hop) * _window(cfg, x)
    if cfg.fft_len > w:
        left = (cfg.fft_len - w) // 2
        frames = torch.nn.functional.pad(frames, (left, cfg.fft_len - w - left))
    spec = torch.fft.rfft(frames, n=cfg.fft_len)
    if normalized:
        spec = spec / float(np.sqrt(np.sum(_hann(w) ** 2)))
    return spec.reshape(*lead, spec.shape[-2], spec.shape[-1])


def wola_envelope_is_constant(cfg: StftConfig, rtol: float = 1e-6) -> bool:
    """True when the squared window overlap-adds to a constant at this hop."""
    w2 = _hann(cfg.window_len) ** 2
    acc = np.zeros(cfg.hop_len)
    for start in range(0, cfg.window_len, cfg.hop_len):
        seg = w2[start:start + cfg.hop_len]
        acc[: len(seg)] += seg
    return bool(np.ptp(acc) <= rtol * np.max(acc))


def istft(spec: torch.Tensor, cfg: StftConfig, length: int | None = None) -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft` (center framing).

    Without ``length`` the output holds ``(n_frames - 1) * hop`` samples, i.e.
    the ``(n_frames - 1) * hop + window_len`` overlap-add buffer minus the
    half-window padding on each side.
    """
    if not wola_envelope_is_constant(cfg):
        raise StftConfigError(
            f"window {cfg.window_len} with hop {cfg.hop_len} does not satisfy COLA"
        )
    w, hop = cfg.window_len, cfg.hop_len
    lead = spec.shape[:-2]
    n_frames = spec.shape[-2]
    frames = torch.fft.irfft(spec.reshape(-1, n_frames, spec.shape[-1]), n=cfg.fft_len)
    if cfg.fft_len > w:
        left = (cfg.fft_len - w) // 2
        frames = frames[..., left:left + w]
    win = _window(cfg, frames)
    frames = frames * win
    total = (n_frames - 1) * hop + w
    out = torch.nn.functional.fold(
        frames.transpose(1, 2), output_size=(1, total), kernel_size=(1, w), stride=(1, hop)
    ).reshape(frames.shape[0], total)
    env = torch.nn.functional.fold(
        (win * win).expand(1, n_frames, w).transpose(1, 2),
        output_size=(1, total), kernel_size=(1, w), stride=(1, hop),
    ).reshape(total)
    env = torch.where(env > 1e-11, env, torch.ones_like(env))
    out = out / env
    out = out[:, w // 2:]
    if length is None:
        length = (n_frames - 1) * hop
    if out.shape[-1] >= length:
        out = out[:, :length]
    else:
        out = torch.nn.functional.pad(out, (0, length - out.shape[-1]))
    return out.reshape(*lead, length)


# --------------------------------------------------------------------------
# Mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    n_mels: int
    fmin: float
    fmax: float
    fft_len: int
    sample_rate: int
    weights: np.ndarray  # [n_mels, fft_len // 2 + 1]
    centers: np.ndarray  # Hz

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.weights, dtype=DTYPE)


@functools.lru_cache(maxsize=None)
def mel_filterbank(
    sample_rate: int, fft_len: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None
) -> MelFilterbank:
    """HTK-scale triangular filters, each averaged over its FFT bin's width.

    Averaging the triangle over ``[f_k - df/2, f_k + df/2]`` instead of
    sampling it at ``f_k`` keeps every row nonempty even when a filter is
    narrower than one bin (short windows), and every bin inside
    ``[fmin, fmax]`` overlaps at least one triangle.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    n_bins = fft_len // 2 + 1
    df = sample_rate / fft_len
    sub = 64
    offsets = ((np.arange(sub) + 0.5) / sub - 0.5) * df
    freqs = np.arange(n_bins)[:, None] * df + offsets[None, :]  # [bins, sub]
    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        tri = np.clip(np.minimum(up, down), 0.0, None)
        weights[m] = tri.mean(axis=1)
    return MelFilterbank(n_mels, fmin, fmax, fft_len, sample_rate, weights, edges[1:-1])


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [n_frames, n_mels] log power
    frame_rate: float


def log_mel_tensor(
    x: torch.Tensor, fb: MelFilterbank, cfg: StftConfig, normalized: bool = True
) -> torch.Tensor:
    """Differentiable log-mel power, ``[..., n_frames, n_mels]``."""
    if fb.fft_len != cfg.fft_len:
        raise StftConfigError(f"filterbank fft_len {fb.fft_len} != stft fft_len {cfg.fft_len}")
    spec = stft(x, cfg, normalized=normalized)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ fb.tensor().T.to(power.dtype)
    return torch.log(torch.clamp(mel, min=LOG_FLOOR))


def log_mel(wav: Waveform, fb: MelFilterbank, cfg: StftConfig, normalized: bool = True) -> MelSpectrogram:
    with torch.no_grad():
        frames = log_mel_tensor(wav.tensor(), fb, cfg, normalized=normalized)
    return MelSpectrogram(frames.numpy(), wav.sample_rate / cfg.hop_len)


def encoder_mel_config(sample_rate: int) -> StftConfig:
    # 25 ms window, 10 ms hop
    win = sample_rate // 40
    return StftConfig(window_len=win, hop_len=sample_rate // 100, fft_len=1 << (win - 1).bit_length())


def encoder_mel(x: torch.Tensor, sample_rate: int, n_mels: int = 80) -> torch.Tensor:
    """Encoder input features at exactly ``len // hop`` frames (100 Hz).

    Center framing produces one extra trailing frame, which is dropped so the
    frame count stays an exact multiple of the token ladder.
    """
    cfg = encoder_mel_config(sample_rate)
    fb = mel_filterbank(sample_rate, cfg.fft_len, n_mels)
    feats = log_mel_tensor(x, fb, cfg)
    return feats[..., : x.shape[-1] // cfg.hop_len, :]


def scale_config(i: int) -> tuple[StftConfig, int]:
    """Window 2**i, hop 2**i / 4, with min(80, 2**(i-2)) mel bands."""
    win = 2 ** i
    return StftConfig(window_len=win, hop_len=win // 4), min(80, 2 ** (i - 2))


def multiscale_mel_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    sample_rate: int,
    mask: torch.Tensor | None = None,
    scales=MEL_SCALES,
) -> torch.Tensor:
    """Sum over scales of the mean absolute log-mel difference.

    ``mask`` (same shape as the waveforms, 1 on valid samples) zeroes padding
    in both signals, so fully padded frames contribute nothing.
    """
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if mask is not None:
        x = x * mask
        x_hat = x_hat * mask
    total = x_hat.new_zeros(())
    for i in scales:
        cfg, n_mels = scale_config(i)
        fb = mel_filterbank(sample_rate, cfg.fft_len, n_mels)
        total = total + (log_mel_tensor(x, fb, cfg) - log_mel_tensor(x_hat, fb, cfg)).abs().mean()
    return total


def dump_frames(path, frames: np.ndarray) -> None:
    """Debug dump: one frame per line, comma-separated decimals."""
    with open(path, "w") as fh:
        for row in np.atleast_2d(frames):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
