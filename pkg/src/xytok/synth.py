"""Synthetic speech-like corpus.

Each character maps to a spectral template (a stack of sinusoidal partials
plus a band of noise). A speaker is a timbre transform applied to every
template: a formant shift scaling all frequencies and a spectral tilt.
Utterances are cross-faded concatenations of per-character units, so frame
labels are known exactly and a probe on them is learnable by construction.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, wav_write

VOCAB = "abcdefghijklmnopqrstuvwxyz "
SPACE = " "
FADE_MS = 8.0
SPECTRUM_GRID = np.arange(0.0, 4000.0, 25.0)


@dataclass(frozen=True)
class Template:
    freqs: tuple  # Hz
    amps: tuple
    noise_center: float
    noise_width: float
    noise_level: float

    def envelope(self, shift: float = 1.0, tilt: float = 0.0) -> np.ndarray:
        """Unit-norm magnitude envelope on a fixed grid; used for distances."""
        grid = SPECTRUM_GRID
        env = np.zeros_like(grid)
        for f, a in zip(self.freqs, self.amps):
            f = f * shift
            env += a * _tilt_gain(f, tilt) * np.exp(-0.5 * ((grid - f) / 40.0) ** 2)
        lo = (self.noise_center - self.noise_width / 2) * shift
        hi = (self.noise_center + self.noise_width / 2) * shift
        env += self.noise_level * ((grid >= lo) & (grid <= hi))
        norm = np.linalg.norm(env)
        return env / norm if norm > 0 else env


def _tilt_gain(f, tilt):
    return (np.maximum(f, 50.0) / 1000.0) ** tilt


@dataclass
class PhonemeBank:
    seed: int
    templates: dict
    unit_ms: float = 80.0
    space_level: float = 0.02
    min_distance: float = 0.0

    def timbre(self, speaker_id: int) -> tuple[float, float]:
        """(formant shift factor, brightness tilt) for a speaker."""
        rng = np.random.default_rng([self.seed, 7919, int(speaker_id)])
        return float(rng.uniform(0.85, 1.15)), float(rng.uniform(-1.0, 1.0))


def gen_phoneme_bank(seed: int = 0, unit_ms: float = 80.0, floor: float = 0.5) -> PhonemeBank:
    """Draw one template per letter, rejecting candidates too close to earlier ones."""
    rng = np.random.default_rng(seed)
    templates: dict[str, Template] = {}
    envs = []
    for ch in VOCAB:
        if ch == SPACE:
            templates[ch] = Template((), (), 2000.0, 4000.0, 1.0)
            continue
        for _ in range(1000):
            n = int(rng.integers(3, 6))
            freqs = np.sort(rng.uniform(200.0, 3200.0, size=n))
            if np.min(np.diff(freqs)) < 120.0:
                continue
            cand = Template(
                freqs=tuple(float(f) for f in freqs),
                amps=tuple(float(a) for a in rng.uniform(0.3, 1.0, size=n)),
                noise_center=float(rng.uniform(600.0, 3000.0)),
                noise_width=float(rng.uniform(200.0, 800.0)),
                noise_level=float(rng.uniform(0.0, 0.3)),
            )
            env = cand.envelope()
            if all(np.linalg.norm(env - e) > floor for e in envs):
                break
        else:
            raise RuntimeError("could not place a separable template; lower the floor")
        templates[ch] = cand
        envs.append(env)
    dists = [np.linalg.norm(a - b) for i, a in enumerate(envs) for b in envs[i + 1:]]
    return PhonemeBank(seed=seed, templates=templates, unit_ms=unit_ms, min_distance=float(min(dists)))


@dataclass(frozen=True)
class UtteranceSpec:
    text: str
    speaker_id: int = 0
    rate_jitter: float = 5.0  # percent, per character
    noise_floor_db: float = -50.0
    sample_rate: int = 16000

    def __post_init__(self):
        if not self.text:
            raise ValueError("utterance text must be nonempty")
        bad = sorted(set(self.text) - set(VOCAB))
        if bad:
            raise ValueError(f"characters outside vocabulary: {bad!r}")


def _spec_seed(spec: UtteranceSpec, bank: PhonemeBank) -> int:
    key = f"{bank.seed}|{spec.speaker_id}|{spec.text}|{spec.rate_jitter}|{spec.noise_floor_db}|{spec.sample_rate}"
    return zlib.crc32(key.encode("utf-8"))


def char_boundaries(spec: UtteranceSpec, bank: PhonemeBank) -> np.ndarray:
    """Sample offsets of each character unit, length ``len(text) + 1``."""
    rng = np.random.default_rng([_spec_seed(spec, bank), 1])
    unit = bank.unit_ms * spec.sample_rate / 1000.0
    jitter = rng.uniform(-spec.rate_jitter, spec.rate_jitter, size=len(spec.text)) / 100.0
    ends = np.cumsum(unit * (1.0 + jitter))
    return np.concatenate([[0], np.round(ends).astype(np.int64)])


def _render_unit(tpl: Template, n: int, sr: int, shift: float, tilt: float, rng) -> np.ndarray:
    t = np.arange(n) / sr
    out = np.zeros(n)
    for f, a in zip(tpl.freqs, tpl.amps):
        f = f * shift
        if f < sr / 2:
            out += a * _tilt_gain(f, tilt) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if tpl.noise_level > 0:
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        lo = (tpl.noise_center - tpl.noise_width / 2) * shift
        hi = (tpl.noise_center + tpl.noise_width / 2) * shift
        band = np.fft.irfft(spec * ((freqs >= lo) & (freqs <= hi)), n=n)
        rms = np.sqrt(np.mean(band ** 2)) + 1e-12
        out += tpl.noise_level * band / rms * 0.5
    return out


def synth_utterance(spec: UtteranceSpec, bank: PhonemeBank) -> tuple[Waveform, str]:
    sr = spec.sample_rate
    rng = np.random.default_rng([_spec_seed(spec, bank), 2])
    shift, tilt = bank.timbre(spec.speaker_id)
    bounds = char_boundaries(spec, bank)
    total = int(bounds[-1])
    fade = int(round(FADE_MS * sr / 1000.0))
    out = np.zeros(total + 2 * fade)
    for ch, start, end in zip(spec.text, bounds[:-1], bounds[1:]):
        n = int(end - start) + 2 * fade
        if ch == SPACE:
            unit = bank.space_level * rng.standard_normal(n)
        else:
            unit = _render_unit(bank.templates[ch], n, sr, shift, tilt, rng)
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(2 * fade) / (2 * fade))
        env = np.ones(n)
        env[: 2 * fade] = ramp
        env[n - 2 * fade:] = ramp[::-1]
        out[start:start + n] += unit * env
    out = out[fade:fade + total]
    out += 10 ** (spec.noise_floor_db / 20.0) * rng.standard_normal(total)
    peak = np.max(np.abs(out))
    if peak > 0:
        out = 0.9 * out / peak
    return Waveform(out, sr), spec.text


def frame_labels(spec: UtteranceSpec, bank: PhonemeBank, frame_rate: float, n_frames: int) -> np.ndarray:
    """Character index (into :data:`VOCAB`) active at each frame center."""
    bounds = char_boundaries(spec, bank)
    centers = (np.arange(n_frames) + 0.5) * spec.sample_rate / frame_rate
    pos = np.clip(np.searchsorted(bounds, centers, side="right") - 1, 0, len(spec.text) - 1)
    return np.array([VOCAB.index(spec.text[i]) for i in pos], dtype=np.int64)


# --------------------------------------------------------------------------
# Corpus


@dataclass
class BigramTextModel:
    seed: int
    min_chars: int = 6
    max_chars: int = 15
    transitions: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 11])
        k = len(VOCAB)
        self.transitions = rng.dirichlet(np.full(k, 0.5), size=k)
        sp = VOCAB.index(SPACE)
        # letters move to a space ~1/4 of the time; a space never repeats
        self.transitions[:, sp] = 0.0
        self.transitions /= self.transitions.sum(1, keepdims=True)
        self.transitions[:sp, :] *= 0.75
        self.transitions[:sp, sp] = 0.25

    def sample(self, rng) -> str:
        sp = VOCAB.index(SPACE)
        while True:
            length = int(rng.integers(self.min_chars, self.max_chars + 1))
            state = sp
            chars = []
            for _ in range(length):
                state = int(rng.choice(len(VOCAB), p=self.transitions[state]))
                chars.append(VOCAB[state])
            text = "".join(chars)
            if text[0] != SPACE and text[-1] != SPACE:
                return text


def read_manifest(path) -> list[dict]:
    """JSON-lines manifest; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                audio = Path(row["audio"])
                row["audio"] = str(audio if audio.is_absolute() else path.parent / audio)
                rows.append(row)
    return rows


def gen_corpus(n_train: int, n_dev: int, n_test: int, seed: int, out_dir, sample_rate: int = 16000,
               n_speakers: int = 8, bank: PhonemeBank | None = None) -> dict[str, Path]:
    """Write ``out_dir/{split}/NNNN.wav`` plus ``out_dir/{split}.jsonl`` manifests."""
    out_dir = Path(out_dir)
    bank = bank or gen_phoneme_bank(seed)
    text_model = BigramTextModel(seed)
    rng = np.random.default_rng([seed, 3])
    train_texts: set[str] = set()
    manifests = {}
    for split, count in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(count):
            text = text_model.sample(rng)
            while split != "train" and text in train_texts:
                text = text_model.sample(rng)
            if split == "train":
                train_texts.add(text)
            speaker = int(rng.integers(n_speakers))
            wav, _ = synth_utterance(UtteranceSpec(text, speaker, sample_rate=sample_rate), bank)
            rel = f"{split}/{i:04d}.wav"
            wav_write(out_dir / rel, wav)
            lines.append(json.dumps({"audio": rel, "text": text}))
        manifest = out_dir / f"{split}.jsonl"
        manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
        manifests[split] = manifest
    return manifests
