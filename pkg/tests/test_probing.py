import csv

import numpy as np
import pytest
import torch

from xytok.audio import Waveform
from xytok.probing import (EvalReport, IdentityCodec, ProbeConfig, ProbeModel, evaluate_codec, probe_decode,
                           probe_train, upsample_replicate)
from xytok.synth import (VOCAB, BigramTextModel, UtteranceSpec, char_boundaries, frame_labels, gen_corpus,
                         gen_phoneme_bank)


def test_upsample_cases():
    f = np.arange(20.0).reshape(10, 2)
    up, rate = upsample_replicate(f, 12.5)
    assert up.shape == (40, 2) and rate == 50.0
    assert np.array_equal(up[:4], np.repeat(f[:1], 4, 0))
    for r in (50.0, 80.0):
        same, rate = upsample_replicate(f, r)
        assert same is f and rate == r
    t, _ = upsample_replicate(torch.ones(1, 3, 2), 20.0)
    assert t.shape == (1, 9, 2)  # ceil(50 / 20) = 3
    with pytest.raises(ValueError):
        upsample_replicate(f, 0.0)


def test_probe_output_shape_and_padding():
    torch.manual_seed(0)
    probe = ProbeModel(5, hidden=8)
    x = torch.randn(2, 7, 5)
    out = probe(x, [7, 4])
    assert out.shape == (2, 7, len(VOCAB) + 1)
    x2 = x.clone()
    x2[1, 4:] = 100.0
    assert torch.equal(probe(x2, [7, 4])[1, :4], out[1, :4])


def oracle_features(n, seed):
    """One-hot character frames at 50 Hz: separable by construction."""
    bank, model = gen_phoneme_bank(0), BigramTextModel(0)
    rng = np.random.default_rng(seed)
    feats, texts = [], []
    for i in range(n):
        text = model.sample(rng)
        spec = UtteranceSpec(text, i % 8)
        n_frames = int(char_boundaries(spec, bank)[-1] * 50 / 16000)
        feats.append(np.eye(len(VOCAB))[frame_labels(spec, bank, 50.0, n_frames)])
        texts.append(text)
    return feats, texts


@pytest.mark.slow
def test_oracle_features_probe_nearly_perfect():
    tf, tt = oracle_features(200, 0)
    df, dt = oracle_features(40, 1)
    _, dev_wer, _ = probe_train(tf, tt, df, dt, ProbeConfig(steps=600))
    assert dev_wer < 0.05


def test_random_features_probe_fails():
    tf, tt = oracle_features(40, 0)
    df, dt = oracle_features(10, 1)
    rng = np.random.default_rng(3)
    noise = lambda fs: [rng.standard_normal(f.shape) for f in fs]
    _, dev_wer, _ = probe_train(noise(tf), tt, noise(df), dt, ProbeConfig(steps=40, hidden=16))
    assert dev_wer > 0.5


def test_probe_deterministic():
    tf, tt = oracle_features(16, 0)
    runs = [probe_train(tf, tt, tf[:4], tt[:4], ProbeConfig(steps=5, hidden=8)) for _ in range(2)]
    assert runs[0][2] == runs[1][2]
    for a, b in zip(runs[0][0].parameters(), runs[1][0].parameters()):
        assert torch.equal(a, b)
    assert probe_decode(runs[0][0], tf[:4]) == runs[0][2]


def test_eval_report_json_roundtrip():
    r = EvalReport(wer=0.25, stoi=0.9, mcd=3.5, sim_proxy=0.8, bitrate=1000.0, n_utterances=3)
    assert EvalReport.from_json(r.to_json()) == r
    assert r.to_json() == EvalReport.from_json(r.to_json()).to_json()


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return gen_corpus(6, 3, 3, 0, root)


def test_identity_codec_is_near_perfect(tiny_corpus, tmp_path):
    report = evaluate_codec(IdentityCodec(), tiny_corpus["test"], csv_path=tmp_path / "r.csv")
    assert report.stoi > 0.99 and report.sim_proxy == pytest.approx(1.0) and report.mcd == 0.0
    assert report.wer is None and report.n_utterances == 3
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 4 and rows[-1]["audio"] == "SUMMARY"
    assert float(rows[-1]["stoi"]) == pytest.approx(report.stoi)


def test_identity_codec_with_probe(tiny_corpus):
    report = evaluate_codec(IdentityCodec(), tiny_corpus["test"], (tiny_corpus["train"], tiny_corpus["dev"]),
                            ProbeConfig(steps=2, hidden=8))
    assert report.wer is not None and report.wer >= 0


def test_empty_manifest_rejected(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(ValueError):
        evaluate_codec(IdentityCodec(), tmp_path / "empty.jsonl")


def test_identity_embeddings_rate():
    codec = IdentityCodec()
    wav = Waveform(0.1 * np.random.default_rng(0).standard_normal(16000), 16000)
    feats, rate = codec.quantized_embeddings(wav)
    assert rate == 100.0 and feats.shape[0] == 100
