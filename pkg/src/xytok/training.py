"""Two-stage training: multi-task pre-training, then GAN post-training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .audio import multiscale_mel_loss, wav_read
from .autodiff import Optimizer, freeze, load_checkpoint, save_checkpoint, unfreeze
from .losses import (PosttrainWeights, PretrainWeights, adv_loss, asr_loss, disc_loss,
                     feat_match_loss, generator_total, pretrain_total, split_bank_output)
from .model import BOS, CodecConfig, CodecModel, frame_masks
from .rvq import codebook_utilization
from .synth import VOCAB, read_manifest

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def text_to_ids(text: str) -> list[int]:
    return [VOCAB.index(c) + 1 for c in text]


def ids_to_text(ids) -> str:
    return "".join(VOCAB[i - 1] for i in ids if 1 <= i <= len(VOCAB))


# --------------------------------------------------------------------------
# Data


class Corpus:
    """In-memory (waveform, transcript) pairs."""

    def __init__(self, waves: list[np.ndarray], texts: list[str], sample_rate: int):
        self.waves = [np.asarray(w, dtype=np.float64) for w in waves]
        self.texts = list(texts)
        self.sample_rate = sample_rate

    @classmethod
    def from_manifest(cls, path, sample_rate: int, limit: int | None = None) -> "Corpus":
        rows = read_manifest(path)[:limit]
        waves = [wav_read(r["audio"], sample_rate).samples for r in rows]
        return cls(waves, [r["text"] for r in rows], sample_rate)

    def __len__(self):
        return len(self.waves)

    def batch(self, indices, max_samples: int):
        """Zero-padded waves [B, max_samples] with lengths and teacher-forcing tensors."""
        B = len(indices)
        wave = torch.zeros(B, max_samples)
        lengths = []
        for b, i in enumerate(indices):
            w = self.waves[i][:max_samples]
            wave[b, : len(w)] = torch.from_numpy(w)
            lengths.append(len(w))
        ids = [text_to_ids(self.texts[i]) for i in indices]
        N = max(len(x) for x in ids)
        targets = torch.zeros(B, N, dtype=torch.long)
        tmask = torch.zeros(B, N)
        for b, x in enumerate(ids):
            targets[b, : len(x)] = torch.tensor(x)
            tmask[b, : len(x)] = 1.0
        inputs = torch.cat([torch.full((B, 1), BOS, dtype=torch.long), targets[:, :-1]], 1)
        return wave, torch.tensor(lengths), inputs, targets, tmask

    def segments(self, indices, seg_samples: int, rng, hop: int):
        """Random crops of ``seg_samples`` (start aligned to ``hop``), zero-padded."""
        wave = torch.zeros(len(indices), seg_samples)
        for b, i in enumerate(indices):
            w = self.waves[i]
            room = max(0, len(w) - seg_samples)
            start = int(rng.integers(room // hop + 1)) * hop
            seg = w[start:start + seg_samples]
            wave[b, : len(seg)] = torch.from_numpy(seg)
        return wave


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    # seeded per step so a resumed run draws the same batches
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=min(batch_size, n), replace=False).tolist()


# --------------------------------------------------------------------------
# Configs and state


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    max_seconds: float = 1.28
    weights: PretrainWeights = field(default_factory=PretrainWeights)
    log_every: int = 10
    ckpt_every: int = 0
    kmeans_batches: int = 8
    lm_warmup_steps: int = 300
    lm_lr: float = 3e-3
    seed: int = 0


@dataclass
class PosttrainConfig:
    steps: int = 1000
    batch_size: int = 4
    gen_lr: float = 2e-4
    disc_lr: float = 2e-3
    segment_seconds: float = 0.64
    weights: PosttrainWeights = field(default_factory=PosttrainWeights)
    log_every: int = 10
    ckpt_every: int = 0
    seed: int = 0


@dataclass
class TrainState:
    stage: str
    step: int = 0
    gen_opt: Optimizer | None = None
    disc_opt: Optimizer | None = None
    seed: int = 0
    usage: list = field(default_factory=list)


def _check_finite(losses: dict, step: int, stage: str) -> None:
    for k, v in losses.items():
        if v is not None and not math.isfinite(v):
            raise TrainingDivergedError(f"{stage} step {step}: loss {k} = {v} ({losses})")


def _max_samples(model: CodecModel, seconds: float) -> int:
    spt = model.cfg.samples_per_token
    return max(1, int(round(seconds * model.cfg.sample_rate / spt))) * spt


# --------------------------------------------------------------------------
# Pre-training


def warmup_semantic_decoder(model: CodecModel, texts: list[str], steps: int, lr: float, seed: int,
                            batch_size: int = 16) -> list[float]:
    """Text-only warm-up of the causal LM before it is (optionally) frozen.

    Half of the batches condition on the transcript's own token embeddings as a
    prefix (a copy task), a quarter add a trailing zero frame, and the rest are
    plain language modelling with no prefix.
    """
    lm = model.semantic_decoder.lm
    opt = Optimizer(lm.parameters(), lr=lr, total_steps=max(steps, 1))
    trace = []
    for step in range(steps):
        rng = np.random.default_rng([seed, 101, step])
        idx = rng.choice(len(texts), size=min(batch_size, len(texts)), replace=False)
        ids = [text_to_ids(texts[i]) for i in idx]
        B, N = len(ids), max(len(x) for x in ids)
        targets = torch.zeros(B, N, dtype=torch.long)
        tmask = torch.zeros(B, N)
        for b, x in enumerate(ids):
            targets[b, : len(x)] = torch.tensor(x)
            tmask[b, : len(x)] = 1.0
        inputs = torch.cat([torch.full((B, 1), BOS, dtype=torch.long), targets[:, :-1]], 1)
        mode = rng.random()
        if mode < 0.75:
            prefix = lm.tok(targets) + 0.1 * torch.as_tensor(rng.standard_normal((B, N, lm.tok.embedding_dim)))
            pmask = tmask.clone()
            if mode >= 0.5:
                prefix = torch.cat([prefix, torch.zeros(B, 1, prefix.shape[-1])], 1)
                pmask = torch.cat([pmask, torch.ones(B, 1)], 1)
            logits = lm(prefix, pmask, inputs, tmask)
        else:
            logits = lm(None, None, inputs, tmask)
        loss = asr_loss(logits, targets, tmask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
    return trace


@torch.no_grad()
def init_codebooks(model: CodecModel, corpus: Corpus, cfg: PretrainConfig) -> None:
    """k-means on pre-quantizer frames from the first training batches."""
    if model.cfg.bypass_quantizer:
        return
    max_samples = _max_samples(model, cfg.max_seconds)
    frames = []
    k = model.cfg.rvq.codebook_size
    step = 0
    while step < cfg.kmeans_batches or sum(len(f) for f in frames) < k:
        idx = batch_indices(len(corpus), cfg.batch_size, cfg.seed, step)
        wave, lengths, *_ = corpus.batch(idx, max_samples)
        m12, m50, _ = frame_masks(lengths, max_samples // model.cfg.samples_per_token,
                                  model.cfg.samples_per_token)
        z = model.quantizer.project(model.encode(model.mel(wave), m50), m50)
        frames.append(z[m12 > 0])
        step += 1
        if step > 10 * cfg.kmeans_batches + k:
            raise ValueError("corpus too small to seed k-means")
    model.quantizer.rvq.init_from_samples(torch.cat(frames), seed=cfg.seed)


def new_pretrain_state(model: CodecModel, cfg: PretrainConfig) -> TrainState:
    return TrainState("pretrain", 0, Optimizer(model.generator_parameters(), cfg.lr, cfg.steps),
                      seed=cfg.seed)


def pretrain_step(batch, model: CodecModel, state: TrainState, cfg: PretrainConfig) -> dict:
    if state.stage != "pretrain":
        raise ValueError("pretrain_step called outside the pretrain stage")
    wave, lengths, inputs, targets, tmask = batch
    spt = model.cfg.samples_per_token
    m12, m50, _ = frame_masks(lengths, wave.shape[1] // spt, spt)
    smask = (torch.arange(wave.shape[1])[None, :] < lengths[:, None]).to(wave.dtype)

    h = model.encode(model.mel(wave), m50)
    tok = model.tokenize(h, m50, m12)
    x_hat = model.acoustic_decoder(tok.features, m12)
    recon = multiscale_mel_loss(wave, x_hat, model.cfg.sample_rate, mask=smask)
    w = cfg.weights
    if w.asr > 0 and model.semantic_decoder is not None:
        logits = model.semantic_decoder(tok.features, m12, inputs, tmask)
        asr = asr_loss(logits, targets, tmask)
    else:
        asr = recon.new_zeros(())
    total = pretrain_total(recon, asr, tok.commit, w)

    state.gen_opt.zero_grad()
    total.backward()
    losses = {"total": total.item(), "recon": recon.item(), "asr": asr.item(), "commit": tok.commit.item()}
    _check_finite(losses, state.step, "pretrain")
    grad_norm = state.gen_opt.step()

    if tok.result is not None:
        model.quantizer.rvq.maintain(tok.result, state.step, state.seed, m12)
        state.usage.append(tok.result.codes[m12 > 0])
    losses["grad_norm"] = grad_norm
    state.step += 1
    return losses


def _log_record(state: TrainState, losses: dict, lr: float, codebook_size: int) -> dict:
    util = None
    if state.usage:
        util = codebook_utilization(torch.cat(state.usage), codebook_size)
        state.usage = []
    return {"step": state.step, "stage": state.stage, "losses": losses, "lr": lr,
            "codebook_utilization": util}


def prepare_pretrain(model: CodecModel, corpus: Corpus, cfg: PretrainConfig) -> TrainState:
    """Warm up and freeze the LM, seed codebooks with k-means, build the optimizer."""
    torch.manual_seed(cfg.seed)
    if model.semantic_decoder is not None and cfg.weights.asr > 0 and cfg.lm_warmup_steps > 0:
        warmup_semantic_decoder(model, corpus.texts, cfg.lm_warmup_steps, cfg.lm_lr, cfg.seed)
    if model.semantic_decoder is not None and model.cfg.decoder.freeze_semantic_decoder:
        freeze(model.semantic_decoder.lm)
    init_codebooks(model, corpus, cfg)
    return new_pretrain_state(model, cfg)


def run_pretrain(model: CodecModel, corpus: Corpus, cfg: PretrainConfig, out_dir=None,
                 callback: Callable[[dict], None] | None = None) -> list[dict]:
    """Prepare, then train; returns the JSON-line records."""
    state = prepare_pretrain(model, corpus, cfg)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_log.jsonl").write_text("")
    return pretrain_loop(model, corpus, cfg, state, out_dir, callback)


def pretrain_loop(model, corpus, cfg, state, out_dir=None, callback=None):
    """Train from ``state.step`` up to ``cfg.steps``, appending to ``out_dir/train_log.jsonl``."""
    max_samples = _max_samples(model, cfg.max_seconds)
    records = []
    log_fh = open(out_dir / "train_log.jsonl", "a") if out_dir else None
    try:
        while state.step < cfg.steps:
            idx = batch_indices(len(corpus), cfg.batch_size, cfg.seed, state.step)
            losses = pretrain_step(corpus.batch(idx, max_samples), model, state, cfg)
            if state.step % cfg.log_every == 0 or state.step == 1 or state.step == cfg.steps:
                rec = _log_record(state, losses, state.gen_opt.lr, model.cfg.rvq.codebook_size)
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if callback:
                    callback(rec)
            if out_dir and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                save_training_checkpoint(out_dir / "checkpoint.xyck", model, state, cfg)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_training_checkpoint(out_dir / "checkpoint.xyck", model, state, cfg)
    return records


def resume_pretrain(path, corpus: Corpus, cfg: PretrainConfig, out_dir=None, callback=None):
    model, state, _ = load_training_checkpoint(path, cfg_steps=cfg.steps, lr=cfg.lr)
    records = pretrain_loop(model, corpus, cfg, state, Path(out_dir) if out_dir else None, callback)
    return model, records


@torch.no_grad()
def mean_recon_loss(model: CodecModel, corpus: Corpus, batch_size: int = 20) -> float:
    """Per-utterance multiscale mel loss through the full codec, averaged over a corpus."""
    spt = model.cfg.samples_per_token
    longest = max(len(w) for w in corpus.waves)
    max_samples = -(-longest // spt) * spt
    total = 0.0
    for s in range(0, len(corpus), batch_size):
        idx = list(range(s, min(s + batch_size, len(corpus))))
        wave, lengths, *_ = corpus.batch(idx, max_samples)
        m12, m50, _ = frame_masks(lengths, max_samples // spt, spt)
        smask = (torch.arange(max_samples)[None, :] < lengths[:, None]).to(wave.dtype)
        x_hat = model.acoustic_decoder(model.tokenize(model.encode(model.mel(wave), m50), m50, m12).features, m12)
        for b in range(len(idx)):
            total += float(multiscale_mel_loss(wave[b:b + 1], x_hat[b:b + 1], model.cfg.sample_rate,
                                               mask=smask[b:b + 1]))
    return total / len(corpus)


# --------------------------------------------------------------------------
# Post-training


def prepare_posttrain(model: CodecModel) -> None:
    """Freeze encoder and quantizer, drop the semantic decoder, keep the rest trainable."""
    model.discard_semantic_decoder()
    freeze(model.encoder)
    freeze(model.quantizer)
    unfreeze(model.acoustic_decoder)
    unfreeze(model.discriminator)


def new_posttrain_state(model: CodecModel, cfg: PosttrainConfig) -> TrainState:
    prepare_posttrain(model)
    return TrainState(
        "posttrain", 0,
        gen_opt=Optimizer(model.acoustic_decoder.parameters(), cfg.gen_lr, cfg.steps),
        disc_opt=Optimizer(model.discriminator.parameters(), cfg.disc_lr, cfg.steps),
        seed=cfg.seed,
    )


def posttrain_step(wave: torch.Tensor, model: CodecModel, state: TrainState, cfg: PosttrainConfig) -> dict:
    if state.stage != "posttrain":
        raise ValueError("posttrain_step called outside the posttrain stage")
    with torch.no_grad():
        tok = model.tokenize(model.encode(model.mel(wave)))
    x_hat = model.acoustic_decoder(tok.features)

    real_scores, real_feats = split_bank_output(model.discriminator(wave))
    fake_scores, _ = split_bank_output(model.discriminator(x_hat.detach()))
    d_loss = disc_loss(real_scores, fake_scores)
    state.disc_opt.zero_grad()
    d_loss.backward()
    state.disc_opt.step()

    fake_scores, fake_feats = split_bank_output(model.discriminator(x_hat))
    with torch.no_grad():
        _, real_feats = split_bank_output(model.discriminator(wave))
    recon = multiscale_mel_loss(wave, x_hat, model.cfg.sample_rate)
    feat = feat_match_loss(real_feats, fake_feats)
    adv = adv_loss(fake_scores)
    g_loss = generator_total(recon, feat, adv, cfg.weights)
    state.gen_opt.zero_grad()
    g_loss.backward()
    for p in model.discriminator.parameters():
        p.grad = None
    state.gen_opt.step()
    losses = {"gen": g_loss.item(), "disc": d_loss.item(), "recon": recon.item(),
              "feat": feat.item(), "adv": adv.item()}
    _check_finite(losses, state.step, "posttrain")
    state.step += 1
    return losses


def run_posttrain(model: CodecModel, corpus: Corpus, cfg: PosttrainConfig, out_dir=None,
                  callback=None, state: TrainState | None = None) -> list[dict]:
    torch.manual_seed(cfg.seed)
    fresh = state is None
    state = state or new_posttrain_state(model, cfg)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        if fresh or state.step == 0:
            (out_dir / "train_log.jsonl").write_text("")
    seg = _max_samples(model, cfg.segment_seconds)
    records = []
    log_fh = open(out_dir / "train_log.jsonl", "a") if out_dir else None
    try:
        while state.step < cfg.steps:
            rng = np.random.default_rng([cfg.seed, 17, state.step])
            idx = batch_indices(len(corpus), cfg.batch_size, cfg.seed, state.step)
            wave = corpus.segments(idx, seg, rng, model.cfg.decoder.hop)
            losses = posttrain_step(wave, model, state, cfg)
            if state.step % cfg.log_every == 0 or state.step == 1 or state.step == cfg.steps:
                rec = _log_record(state, losses, state.gen_opt.lr, model.cfg.rvq.codebook_size)
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if callback:
                    callback(rec)
            if out_dir and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                save_training_checkpoint(out_dir / "checkpoint.xyck", model, state, cfg)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_training_checkpoint(out_dir / "checkpoint.xyck", model, state, cfg)
    return records


# --------------------------------------------------------------------------
# Checkpoints


def save_model(path, model: CodecModel, extra: dict | None = None, tensors: dict | None = None) -> None:
    payload = dict(model.state_dict())
    payload.update(tensors or {})
    meta = {"codec": model.cfg.to_dict(),
            "semantic_decoder": model.semantic_decoder is not None,
            "frozen": sorted(n for n, p in model.named_parameters() if not p.requires_grad)}
    meta.update(extra or {})
    save_checkpoint(path, payload, meta)


def load_model(path) -> tuple[CodecModel, dict, dict]:
    tensors, meta = load_checkpoint(path)
    model = CodecModel(CodecConfig.from_dict(meta["codec"]))
    if not meta.get("semantic_decoder", True):
        model.discard_semantic_decoder()
    own = model.state_dict()
    model.load_state_dict({k: v for k, v in tensors.items() if k in own}, strict=True)
    frozen = set(meta.get("frozen", []))
    for n, p in model.named_parameters():
        p.requires_grad_(n not in frozen)
    rest = {k: v for k, v in tensors.items() if k not in own}
    return model, meta, rest


def save_training_checkpoint(path, model: CodecModel, state: TrainState, cfg) -> None:
    tensors = {}
    if state.gen_opt:
        tensors.update(state.gen_opt.state_tensors("optim.gen"))
    if state.disc_opt:
        tensors.update(state.disc_opt.state_tensors("optim.disc"))
    save_model(path, model, {"train": {"stage": state.stage, "step": state.step, "seed": state.seed,
                                       "config": _jsonable(cfg)}}, tensors)


def load_training_checkpoint(path, cfg_steps: int | None = None, lr: float | None = None):
    model, meta, rest = load_model(path)
    train = meta.get("train", {})
    stage = train.get("stage", "pretrain")
    tcfg = train.get("config", {})
    steps = cfg_steps or tcfg.get("steps", 1)
    state = TrainState(stage, train.get("step", 0), seed=train.get("seed", 0))
    if stage == "pretrain":
        state.gen_opt = Optimizer(model.generator_parameters(), lr or tcfg.get("lr", 1e-3), steps)
        state.gen_opt.load_state_tensors("optim.gen", rest)
    else:
        state.gen_opt = Optimizer(model.acoustic_decoder.parameters(), lr or tcfg.get("gen_lr", 1e-4), steps)
        state.disc_opt = Optimizer(model.discriminator.parameters(), tcfg.get("disc_lr", 1e-3), steps)
        state.gen_opt.load_state_tensors("optim.gen", rest)
        state.disc_opt.load_state_tensors("optim.disc", rest)
    return model, state, meta


def _jsonable(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg), default=str))
