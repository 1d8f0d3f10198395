import json
import math

import pytest
import torch

from xytok.autodiff import freeze
from xytok.gradcheck import tiny_codec_config
from xytok.model import CodecModel
from xytok.synth import UtteranceSpec, gen_phoneme_bank, synth_utterance
from xytok.training import (Corpus, PosttrainConfig, PretrainConfig, TrainingDivergedError, batch_indices,
                            ids_to_text, load_model, load_training_checkpoint, new_pretrain_state,
                            pretrain_step, resume_pretrain, run_posttrain, run_pretrain, save_model,
                            mean_recon_loss, prepare_pretrain, pretrain_loop, save_training_checkpoint,
                            text_to_ids)

TEXTS = ["abc def", "hello", "quiet fox", "zebra", "mild rain", "jump high", "low hum", "vivid"]


@pytest.fixture(scope="module")
def corpus():
    bank = gen_phoneme_bank(0)
    waves = [synth_utterance(UtteranceSpec(t, i % 3), bank)[0].samples for i, t in enumerate(TEXTS)]
    return Corpus(waves, TEXTS, 16000)


def small_pretrain(**kw):
    base = dict(steps=6, batch_size=2, max_seconds=0.8, log_every=1, kmeans_batches=2, lm_warmup_steps=3,
                lr=1e-3)
    base.update(kw)
    return PretrainConfig(**base)


def state_snapshot(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def test_text_ids_roundtrip():
    assert text_to_ids("ab z") == [1, 2, 27, 26]
    assert ids_to_text([1, 2, 27, 26, 0]) == "ab z"


def test_batch_indices_deterministic():
    assert batch_indices(10, 4, 0, 3) == batch_indices(10, 4, 0, 3)
    assert batch_indices(10, 4, 0, 3) != batch_indices(10, 4, 0, 4)


def test_corpus_batch_layout(corpus):
    wave, lengths, inputs, targets, tmask = corpus.batch([0, 1], 2560)
    assert wave.shape == (2, 2560)
    assert inputs[0, 0] == 0 and torch.equal(inputs[0, 1:], targets[0, :-1])
    assert tmask[1].sum() == len(TEXTS[1])


def test_pretrain_freezes_and_codebook_ema(corpus, tmp_path):
    model = CodecModel(tiny_codec_config(False))
    sem = state_snapshot(model.encoder.semantic)
    records = run_pretrain(model, corpus, small_pretrain(), tmp_path)
    assert all(torch.equal(v, model.encoder.semantic.state_dict()[k]) for k, v in sem.items())
    assert all(not p.requires_grad for p in model.semantic_decoder.lm.parameters())
    assert not any(p is model.quantizer.rvq.codebooks for p in model.parameters())
    assert len(records) == 6 and all(math.isfinite(r["losses"]["total"]) for r in records)
    logged = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert logged == json.loads(json.dumps(records))
    assert (tmp_path / "checkpoint.xyck").exists()


def test_frozen_lm_unchanged_during_pretrain(corpus):
    model = CodecModel(tiny_codec_config(False))
    cfg = small_pretrain(lm_warmup_steps=0)
    freeze(model.semantic_decoder.lm)
    lm = state_snapshot(model.semantic_decoder.lm)
    run_pretrain(model, corpus, cfg)
    assert all(torch.equal(v, model.semantic_decoder.lm.state_dict()[k]) for k, v in lm.items())


def test_pretrain_deterministic(corpus):
    traces = []
    for _ in range(2):
        model = CodecModel(tiny_codec_config(False))
        traces.append(json.dumps(run_pretrain(model, corpus, small_pretrain()), sort_keys=True))
    assert traces[0] == traces[1]


def test_resume_matches_uninterrupted(corpus, tmp_path):
    cfg = small_pretrain()
    full = run_pretrain(CodecModel(tiny_codec_config(False)), corpus, cfg)
    model = CodecModel(tiny_codec_config(False))
    state = prepare_pretrain(model, corpus, cfg)
    # stop halfway through the same schedule, checkpoint, resume in a fresh model
    head = pretrain_loop(model, corpus, small_pretrain(steps=3), state)
    save_training_checkpoint(tmp_path / "mid.xyck", model, state, cfg)
    _, tail = resume_pretrain(tmp_path / "mid.xyck", corpus, cfg)
    got = [r["losses"] for r in head] + [r["losses"] for r in tail]
    assert got == [r["losses"] for r in full]


def test_divergence_raises(corpus):
    model = CodecModel(tiny_codec_config(False))
    cfg = small_pretrain()
    state = new_pretrain_state(model, cfg)
    wave, lengths, inputs, targets, tmask = corpus.batch([0, 1], 2560)
    wave = wave.clone()
    wave[0, 5] = float("nan")
    with pytest.raises(TrainingDivergedError):
        pretrain_step((wave, lengths, inputs, targets, tmask), model, state, cfg)


def test_posttrain_contract(corpus, tmp_path):
    model = CodecModel(tiny_codec_config(False))
    run_pretrain(model, corpus, small_pretrain(steps=2))
    enc, quant = state_snapshot(model.encoder), state_snapshot(model.quantizer)
    probe = 0.1 * torch.randn(1, 2560)
    with torch.no_grad():
        before = model.acoustic_decoder(model.tokenize(model.encode(model.mel(probe))).features)
    cfg = PosttrainConfig(steps=3, batch_size=2, segment_seconds=0.16, log_every=1, gen_lr=1e-3)
    records = run_posttrain(model, corpus, cfg, tmp_path)
    assert model.semantic_decoder is None
    assert all(torch.equal(v, model.encoder.state_dict()[k]) for k, v in enc.items())
    assert all(torch.equal(v, model.quantizer.state_dict()[k]) for k, v in quant.items())
    with torch.no_grad():
        after = model.acoustic_decoder(model.tokenize(model.encode(model.mel(probe))).features)
    assert not torch.equal(before, after)
    assert set(records[-1]["losses"]) == {"gen", "disc", "recon", "feat", "adv"}
    m2, state, meta = load_training_checkpoint(tmp_path / "checkpoint.xyck")
    assert state.stage == "posttrain" and state.step == 3 and m2.semantic_decoder is None


def test_model_roundtrip(tmp_path):
    model = CodecModel(tiny_codec_config(False))
    save_model(tmp_path / "m.xyck", model)
    back, meta, rest = load_model(tmp_path / "m.xyck")
    assert not rest
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    assert [p.requires_grad for p in back.parameters()] == [p.requires_grad for p in model.parameters()]


def test_mean_recon_loss_is_per_utterance_average(corpus):
    model = CodecModel(tiny_codec_config(False))
    prepare_pretrain(model, corpus, small_pretrain())
    whole = mean_recon_loss(model, corpus, batch_size=3)
    assert whole == pytest.approx(mean_recon_loss(model, corpus, batch_size=8), rel=1e-9)
    assert whole > 0
