import pytest
import torch

from xytok.gradcheck import tiny_codec_config
from xytok.model import (CodecConfig, CodecModel, DecoderConfig, DiscriminatorConfig, EncoderConfig,
                         frame_masks, reshape_periodic)


@pytest.fixture(scope="module")
def model():
    m = CodecModel(tiny_codec_config(False))
    with torch.no_grad():
        wave = 0.1 * torch.randn(2, 2560)
        z = m.quantizer.project(m.encode(m.mel(wave)))
        m.quantizer.rvq.init_from_samples(torch.cat([z.reshape(-1, 4), torch.randn(16, 4)]), seed=0)
    return m


def test_config_checks():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        CodecConfig(sample_rate=8000)
    with pytest.raises(ValueError):
        DiscriminatorConfig(mpd_periods=(2, 2))
    cfg = CodecConfig()
    assert cfg.samples_per_token == 1280 and cfg.token_rate == 12.5
    assert CodecConfig.from_dict(cfg.to_dict()) == cfg


def test_frame_rate_ladder(model):
    wave = 0.1 * torch.randn(2, 2 * 1280)
    mel = model.mel(wave)
    assert mel.shape[1] == 16  # 100 Hz
    h = model.encode(mel)
    assert h.shape[1] == 8  # 50 Hz
    tok = model.tokenize(h)
    assert tok.codes.shape == (2, 2, 2)  # 12.5 Hz x layers
    x = model.acoustic_decoder(tok.features)
    assert x.shape == wave.shape


def test_odd_lengths_rejected(model):
    with pytest.raises(ValueError):
        model.encode(torch.zeros(1, 15, 16))
    with pytest.raises(ValueError):
        model.tokenize(torch.zeros(1, 6, 16))


def test_semantic_first_concat_and_frozen(model):
    mel = model.mel(0.1 * torch.randn(1, 1280))
    h = model.encode(mel)
    d = model.cfg.encoder.d_model
    sem = model.encoder.semantic_adapter(model.encoder.semantic(mel))
    assert torch.allclose(h[..., :d], sem)
    assert torch.allclose(h[..., d:], model.encoder.acoustic(mel))
    assert all(not p.requires_grad for p in model.encoder.semantic.parameters())
    assert all(p.requires_grad for p in model.encoder.semantic_adapter.parameters())


def test_single_channel_has_no_semantic_branch():
    cfg = tiny_codec_config(False)
    cfg.encoder = EncoderConfig(two_channel=False, d_model=8, n_layers=1, n_heads=2, n_mels=16)
    m = CodecModel(cfg)
    assert not hasattr(m.encoder, "semantic") and m.encoder.out_dim == 8


def test_masks():
    m12, m50, m100 = frame_masks(torch.tensor([2560, 1300, 10]), 2, 1280)
    assert m12.tolist() == [[1, 1], [1, 1], [1, 0]]
    assert m50.shape == (3, 8) and m100.shape == (3, 16)
    assert m50[2].tolist() == [1, 1, 1, 1, 0, 0, 0, 0]


def test_padding_does_not_leak(model):
    """Valid outputs of a short item are unchanged by what sits in its padded tail."""
    base = 0.1 * torch.randn(1, 2560)
    other = base.clone()
    other[:, 1280:] = 0.5 * torch.randn(1, 1280)
    lengths = torch.tensor([1280])
    m12, m50, _ = frame_masks(lengths, 2, 1280)
    outs = []
    for w in (base, other):
        w = w.clone()
        w[:, 1280:] = 0.0
        outs.append(model.tokenize(model.encode(model.mel(w), m50), m50, m12).codes[:, :1])
    assert torch.equal(*outs)


def test_causal_lm_is_causal(model):
    lm = model.semantic_decoder.lm
    tokens = torch.tensor([[0, 3, 4, 5]])
    a = lm(None, None, tokens)
    tokens2 = tokens.clone()
    tokens2[0, 3] = 9
    b = lm(None, None, tokens2)
    assert torch.allclose(a[:, :3], b[:, :3])
    with pytest.raises(ValueError):
        lm(None, None, torch.tensor([[99]]))


def test_istft_head_gain_and_shape(model):
    head = model.acoustic_decoder.head
    x = torch.randn(1, 10, model.cfg.decoder.vocos_dim)
    assert head(x).shape == (1, 10 * 160)


def test_discriminator_bank(model):
    bank = model.discriminator
    out = bank(0.1 * torch.randn(2, 1024))
    assert len(out) == len(bank) == 2 + 2 + 2
    for score, feats in out:
        assert score.shape[0] == 2 and len(feats) == 4
    with pytest.raises(ValueError):
        bank(torch.zeros(1, 4))


def test_reshape_periodic():
    x = torch.arange(12.0)[None]
    r = reshape_periodic(x, 3)
    assert r.shape == (1, 1, 4, 3)
    assert r[0, 0, :, 1].tolist() == [1, 4, 7, 10]


def test_decode_codes_matches_tokenize(model):
    wave = 0.1 * torch.randn(1, 2560)
    tok = model.tokenize(model.encode(model.mel(wave)))
    q = model.quantizer.rvq.decode_codes(tok.codes)
    assert torch.allclose(q, tok.quantized)
    assert torch.allclose(model.decode_audio(q), model.acoustic_decoder(tok.features))


def test_param_count_excludes_discriminator(model):
    total = sum(p.numel() for n, p in model.named_parameters() if not n.startswith("discriminator."))
    assert model.param_count() == total
    assert model.param_count(trainable_only=True) < total


def test_discard_semantic_decoder():
    m = CodecModel(tiny_codec_config(True))
    m.discard_semantic_decoder()
    assert m.semantic_decoder is None
    with pytest.raises(RuntimeError):
        m.decode_text_logits(None, None, torch.zeros(1, 1, dtype=torch.long))
