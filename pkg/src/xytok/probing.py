"""ASR probing: a frozen-upstream BiLSTM + CTC recognizer, and codec evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .audio import Waveform, wav_read
from .autodiff import Optimizer
from .metrics import corpus_wer, ctc_greedy_decode, ctc_loss_batch, mel_cepstral_distance, sim_proxy, stoi
from .synth import VOCAB, read_manifest
from .training import ids_to_text, text_to_ids

PROBE_RATE = 50.0


def upsample_replicate(frames, rate: float, target: float = PROBE_RATE):
    """Repeat each frame ``ceil(target / rate)`` times when ``rate < target``."""
    if rate <= 0:
        raise ValueError("frame rate must be positive")
    if rate >= target:
        return frames, rate
    k = math.ceil(target / rate)
    if torch.is_tensor(frames):
        return torch.repeat_interleave(frames, k, dim=-2), rate * k
    return np.repeat(np.asarray(frames), k, axis=-2), rate * k


class ProbeModel(nn.Module):
    """Two-layer bidirectional LSTM with a projection onto blank + characters.

    Runs in float32: the probe is a measuring instrument and needs no gradient checks.
    """

    def __init__(self, d_in: int, hidden: int = 64, n_layers: int = 2, vocab: int = len(VOCAB)):
        super().__init__()
        self.register_buffer("mean", torch.zeros(d_in, dtype=torch.float32))
        self.register_buffer("std", torch.ones(d_in, dtype=torch.float32))
        self.lstm = nn.LSTM(d_in, hidden, n_layers, batch_first=True, bidirectional=True, dtype=torch.float32)
        self.proj = nn.Linear(2 * hidden, vocab + 1, dtype=torch.float32)
        with torch.no_grad():
            for name, p in self.lstm.named_parameters():
                if name.startswith("bias_ih"):
                    p[hidden:2 * hidden].fill_(1.0)  # forget gate

    def forward(self, x, lengths):
        h = (x.float() - self.mean) / self.std
        packed = nn.utils.rnn.pack_padded_sequence(h, torch.as_tensor(lengths).cpu(), batch_first=True,
                                                   enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return self.proj(out)


@dataclass
class ProbeConfig:
    hidden: int = 64
    steps: int = 600
    batch_size: int = 8
    lr: float = 3e-3
    seed: int = 0


def _pad(feats: list[np.ndarray]):
    T = max(len(f) for f in feats)
    x = torch.zeros(len(feats), T, feats[0].shape[1], dtype=torch.float32)
    for b, f in enumerate(feats):
        x[b, : len(f)] = torch.as_tensor(f, dtype=torch.float32)
    return x, [len(f) for f in feats]


def probe_decode(probe: ProbeModel, feats: list[np.ndarray], batch_size: int = 32) -> list[str]:
    hyps = []
    with torch.no_grad():
        for s in range(0, len(feats), batch_size):
            chunk = feats[s:s + batch_size]
            x, lengths = _pad(chunk)
            logits = probe(x, lengths)
            for b, f in enumerate(chunk):
                hyps.append(ids_to_text(ctc_greedy_decode(logits[b, : len(f)])))
    return hyps


def probe_train(train_feats: list[np.ndarray], train_texts: list[str],
                dev_feats: list[np.ndarray], dev_texts: list[str],
                cfg: ProbeConfig = ProbeConfig()) -> tuple[ProbeModel, float, list[str]]:
    """Train a BiLSTM-CTC probe on frozen features; return (probe, dev WER, dev hypotheses).

    Features are [T, D] arrays at the probe rate (already upsampled).
    """
    torch.manual_seed(cfg.seed)
    probe = ProbeModel(train_feats[0].shape[1], cfg.hidden)
    allf = np.concatenate(train_feats, 0)
    probe.mean.copy_(torch.as_tensor(allf.mean(0), dtype=torch.float32))
    probe.std.copy_(torch.as_tensor(allf.std(0) + 1e-5, dtype=torch.float32))
    opt = Optimizer(probe.parameters(), cfg.lr, cfg.steps, weight_decay=0.0, clip_norm=5.0)
    targets = [text_to_ids(t) for t in train_texts]
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 23, step])
        idx = rng.choice(len(train_feats), size=min(cfg.batch_size, len(train_feats)), replace=False)
        x, lengths = _pad([train_feats[i] for i in idx])
        log_probs = torch.log_softmax(probe(x, lengths), -1)
        loss = ctc_loss_batch(log_probs, [targets[i] for i in idx], lengths).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    hyps = probe_decode(probe, dev_feats)
    return probe, corpus_wer(hyps, dev_texts), hyps


# --------------------------------------------------------------------------
# Codec evaluation


@dataclass
class EvalReport:
    wer: float | None
    stoi: float
    mcd: float
    sim_proxy: float
    bitrate: float
    n_utterances: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


class IdentityCodec:
    """Reference stub: reconstruction returns its input, embeddings are log-mel frames."""

    sample_rate = 16000
    bitrate = 16000 * 16.0

    def resynthesize(self, wav: Waveform) -> Waveform:
        return Waveform(wav.samples.copy(), wav.sample_rate)

    def quantized_embeddings(self, wav: Waveform):
        from .audio import encoder_mel
        return encoder_mel(wav.tensor()[None], wav.sample_rate)[0].numpy(), 100.0


def codec_features(codec, rows: list[dict], sample_rate: int) -> list[np.ndarray]:
    feats = []
    for r in rows:
        f, rate = codec.quantized_embeddings(wav_read(r["audio"], sample_rate))
        feats.append(upsample_replicate(f, rate)[0])
    return feats


def evaluate_codec(codec, test_manifest, probe_manifests: tuple | None = None,
                   probe_cfg: ProbeConfig = ProbeConfig(), csv_path=None) -> EvalReport:
    """Reconstruct each test utterance, average acoustic metrics, optionally probe WER.

    ``probe_manifests`` is ``(train_manifest, dev_manifest)``.
    """
    rows = read_manifest(test_manifest)
    if not rows:
        raise ValueError("empty test manifest")
    sr = codec.sample_rate
    per_utt = []
    for r in rows:
        wav = wav_read(r["audio"], sr)
        rec = codec.resynthesize(wav)
        n = min(len(wav), len(rec))
        x, y = Waveform(wav.samples[:n], sr), Waveform(rec.samples[:n], sr)
        per_utt.append({"audio": r["audio"], "stoi": stoi(x, y), "mcd": mel_cepstral_distance(x, y),
                        "sim_proxy": sim_proxy(x, y)})
    wer_value = None
    if probe_manifests is not None:
        train_rows, dev_rows = (read_manifest(m) for m in probe_manifests)
        _, wer_value, _ = probe_train(codec_features(codec, train_rows, sr), [r["text"] for r in train_rows],
                                      codec_features(codec, dev_rows, sr), [r["text"] for r in dev_rows],
                                      probe_cfg)
    report = EvalReport(
        wer=wer_value,
        stoi=float(np.mean([u["stoi"] for u in per_utt])),
        mcd=float(np.mean([u["mcd"] for u in per_utt])),
        sim_proxy=float(np.mean([u["sim_proxy"] for u in per_utt])),
        bitrate=float(codec.bitrate),
        n_utterances=len(per_utt),
    )
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["audio", "stoi", "mcd", "sim_proxy"])
            writer.writeheader()
            for u in per_utt:
                writer.writerow(u)
            writer.writerow({"audio": "SUMMARY", "stoi": report.stoi, "mcd": report.mcd,
                             "sim_proxy": report.sim_proxy})
    return report
