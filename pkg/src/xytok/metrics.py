"""CTC, WER and acoustic metrics (STOI, mel-cepstral distance, speaker-similarity proxy)."""

from __future__ import annotations

import math
import warnings

import numpy as np
import scipy.fft
import scipy.signal
import torch

from .audio import StftConfig, Waveform, encoder_mel_config, log_mel, mel_filterbank

BLANK = 0
_NEG = -1e30


class CTCAlignmentError(ValueError):
    """No alignment of the target fits in the available frames."""


def min_ctc_frames(target) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_alignable(T: int, target) -> None:
    U = len(target)
    if T < U:
        raise CTCAlignmentError(f"CTC needs T >= U, got T={T}, U={U}")
    need = min_ctc_frames(target)
    if T < need:
        raise CTCAlignmentError(
            f"target with {need - U} adjacent repeats needs {need} frames, got {T}")
    if T < 2 * U + 1:
        warnings.warn(f"T={T} < 2U+1={2 * U + 1}: alignment margin is thin", stacklevel=3)


def ctc_loss_batch(log_probs: torch.Tensor, targets: list, input_lengths: list) -> torch.Tensor:
    """Per-sequence CTC negative log-likelihood via the log-space forward algorithm.

    ``log_probs`` is [B, T, V+1] (already log-softmaxed); returns [B].
    """
    B, T, _ = log_probs.shape
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = torch.full((B, S), BLANK, dtype=torch.long)
    skip_ok = torch.zeros(B, S, dtype=torch.bool)
    ends = []
    for b, tgt in enumerate(targets):
        _check_alignable(int(input_lengths[b]), tgt)
        for u, lab in enumerate(tgt):
            ext[b, 2 * u + 1] = int(lab)
            if u > 0 and tgt[u - 1] != lab:
                skip_ok[b, 2 * u + 1] = True
        ends.append(2 * len(tgt))
    emit = log_probs.gather(2, ext.unsqueeze(1).expand(B, T, S))  # [B, T, S]
    neg = log_probs.new_full((B, S), _NEG)
    alpha = neg.clone()
    alpha[:, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 1] = emit[:, 0, 1]
    lengths = torch.as_tensor(input_lengths)
    pad1 = log_probs.new_full((B, 1), _NEG)
    pad2 = log_probs.new_full((B, 2), _NEG)
    for t in range(1, T):
        prev1 = torch.cat([pad1, alpha], 1)[:, :S]
        prev2 = torch.where(skip_ok, torch.cat([pad2, alpha], 1)[:, :S], neg)
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), 0) + emit[:, t]
        active = (t < lengths).unsqueeze(1)
        alpha = torch.where(active, new, alpha)
    out = []
    for b, end in enumerate(ends):
        last = alpha[b, end]
        out.append(-(torch.logsumexp(torch.stack([last, alpha[b, end - 1]]), 0) if end > 0 else last))
    return torch.stack(out)


def ctc_loss(logits: torch.Tensor, target) -> torch.Tensor:
    """CTC loss for a single [T, V+1] logit matrix and label sequence."""
    target = [int(t) for t in target]
    if any(t == BLANK for t in target):
        raise ValueError("target contains the blank label")
    log_probs = torch.log_softmax(logits, -1).unsqueeze(0)
    return ctc_loss_batch(log_probs, [target], [logits.shape[0]])[0]


def ctc_greedy_decode(logits, blank: int = BLANK) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.asarray(torch.as_tensor(logits).argmax(-1))
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def edit_distance(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _words(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def wer(hypothesis, reference) -> float:
    ref = _words(reference)
    if not ref:
        raise ValueError("reference must contain at least one word")
    return edit_distance(_words(hypothesis), ref) / len(ref)


def corpus_wer(hypotheses, references) -> float:
    errors = sum(edit_distance(_words(h), _words(r)) for h, r in zip(hypotheses, references))
    total = sum(len(_words(r)) for r in references)
    if total == 0:
        raise ValueError("references contain no words")
    return errors / total


# --------------------------------------------------------------------------
# STOI

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150
STOI_SEGMENT = 30  # frames, 384 ms
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0


def _third_octave_matrix(fs, nfft, num_bands, min_freq):
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        lo_bin = np.argmin((f - lo[i]) ** 2)
        hi_bin = np.argmin((f - hi[i]) ** 2)
        obm[i, lo_bin:hi_bin] = 1.0
    return obm


def _stoi_window():
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frames(x, hop):
    n = (len(x) - STOI_FRAME) // hop + 1
    idx = np.arange(STOI_FRAME)[None, :] + hop * np.arange(max(n, 0))[:, None]
    return x[idx]


def _remove_silent_frames(x, y):
    hop = STOI_FRAME // 2
    w = _stoi_window()
    xf, yf = _frames(x, hop) * w, _frames(y, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - STOI_DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    length = (n - 1) * hop + STOI_FRAME if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + STOI_FRAME] += xf[i]
        ys[i * hop:i * hop + STOI_FRAME] += yf[i]
    return xs, ys


def _stoi_spec(x):
    frames = _frames(x, STOI_FRAME // 2) * _stoi_window()
    return np.fft.rfft(frames, n=STOI_NFFT, axis=1).T  # [bins, frames]


def stoi(x: Waveform, y: Waveform) -> float:
    """Short-time objective intelligibility of ``y`` against clean ``x``.

    Inputs must be 16 kHz; they are decimated to the metric's native 10 kHz
    with a polyphase windowed-sinc filter.
    """
    if x.sample_rate != y.sample_rate:
        raise ValueError("sample rates differ")
    if x.sample_rate != 16000:
        raise ValueError(f"stoi expects 16 kHz input, got {x.sample_rate}")
    if len(x) != len(y):
        raise ValueError("signals must have equal length")
    xs = scipy.signal.resample_poly(x.samples, 5, 8)
    ys = scipy.signal.resample_poly(y.samples, 5, 8)
    xs, ys = _remove_silent_frames(xs, ys)
    X, Y = _stoi_spec(xs), _stoi_spec(ys)
    if X.shape[1] < STOI_SEGMENT:
        raise ValueError("signal too short for STOI after silence removal (needs 384 ms of speech)")
    obm = _third_octave_matrix(STOI_FS, STOI_NFFT, STOI_BANDS, STOI_MIN_FREQ)
    xb = np.sqrt(obm @ np.abs(X) ** 2)
    yb = np.sqrt(obm @ np.abs(Y) ** 2)
    clip = 10 ** (-STOI_BETA / 20)
    eps = np.finfo(float).eps
    scores = []
    for m in range(STOI_SEGMENT, X.shape[1] + 1):
        xseg = xb[:, m - STOI_SEGMENT:m]
        yseg = yb[:, m - STOI_SEGMENT:m]
        alpha = np.linalg.norm(xseg, axis=1, keepdims=True) / (np.linalg.norm(yseg, axis=1, keepdims=True) + eps)
        yp = np.minimum(yseg * alpha, xseg * (1 + clip))
        xc = xseg - xseg.mean(1, keepdims=True)
        yc = yp - yp.mean(1, keepdims=True)
        corr = (xc * yc).sum(1) / (np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + eps)
        scores.append(corr.mean())
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Mel-cepstral distance and speaker proxy


def _log_mel_frames(wav: Waveform, n_mels: int = 80) -> np.ndarray:
    cfg = encoder_mel_config(wav.sample_rate)
    fb = mel_filterbank(wav.sample_rate, cfg.fft_len, n_mels)
    return log_mel(wav, fb, cfg).frames


def mel_cepstral_distance(x: Waveform, y: Waveform, n_ceps: int = 13) -> float:
    """Mean frame-wise distance in dB between cepstra 1..n_ceps."""
    if x.sample_rate != y.sample_rate:
        raise ValueError("sample rates differ")
    n = min(len(x), len(y))
    cx = scipy.fft.dct(0.5 * _log_mel_frames(Waveform(x.samples[:n], x.sample_rate)), type=2, norm="ortho", axis=1)
    cy = scipy.fft.dct(0.5 * _log_mel_frames(Waveform(y.samples[:n], y.sample_rate)), type=2, norm="ortho", axis=1)
    diff = cx[:, 1:n_ceps + 1] - cy[:, 1:n_ceps + 1]
    return float(np.mean(10.0 / math.log(10.0) * np.sqrt(2.0 * (diff ** 2).sum(1))))


def speaker_embedding(wav: Waveform) -> np.ndarray:
    mel = _log_mel_frames(wav)
    shape = mel.mean(0)
    shape = shape - shape.mean()
    spread = mel.std(0)
    spread = spread - spread.mean()
    cfg = StftConfig(window_len=wav.sample_rate // 40, hop_len=wav.sample_rate // 100)
    frames = np.abs(np.fft.rfft(_plain_frames(wav.samples, cfg), axis=1)) ** 2
    freqs = np.fft.rfftfreq(cfg.window_len, 1.0 / wav.sample_rate) / (wav.sample_rate / 2)
    energy = frames.sum(1)
    voiced = energy > 1e-10
    if not voiced.any():
        centroid = rolloff = np.zeros(1)
    else:
        fr = frames[voiced]
        centroid = (fr * freqs).sum(1) / fr.sum(1)
        cum = np.cumsum(fr, 1) / fr.sum(1, keepdims=True)
        rolloff = freqs[np.argmax(cum >= 0.85, axis=1)]
    stats = np.array([centroid.mean(), centroid.std(), rolloff.mean(), rolloff.std()])
    return np.concatenate([shape, spread, 10.0 * stats])


def _plain_frames(x, cfg: StftConfig):
    if len(x) < cfg.window_len:
        x = np.pad(x, (0, cfg.window_len - len(x)))
    n = (len(x) - cfg.window_len) // cfg.hop_len + 1
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop_len * np.arange(n)[:, None]
    return x[idx] * np.hanning(cfg.window_len)


def sim_proxy(x: Waveform, y: Waveform) -> float:
    """Cosine similarity of deterministic spectral speaker embeddings."""
    if x.sample_rate != y.sample_rate:
        raise ValueError("sample rates differ")
    ex, ey = speaker_embedding(x), speaker_embedding(y)
    nx, ny = np.linalg.norm(ex), np.linalg.norm(ey)
    if nx == 0 or ny == 0:
        raise ValueError("silent input has no speaker embedding")
    return float(np.clip(ex @ ey / (nx * ny), -1.0, 1.0))
