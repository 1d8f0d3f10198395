"""Finite-difference suite over every differentiable op and loss."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import torch

from .audio import multiscale_mel_loss
from .autodiff import OPS, finite_diff_check, param_finite_diff_check
from .losses import PretrainWeights, adv_loss, asr_loss, disc_loss, feat_match_loss, pretrain_total, split_bank_output
from .metrics import ctc_loss
from .model import (AdapterConfig, CodecConfig, CodecModel, DecoderConfig, DiscriminatorBank,
                    DiscriminatorConfig, EncoderConfig, frame_masks)
from .rvq import RVQConfig, ResidualVQ, commitment_loss

OP_TOL = 1e-3
E2E_TOL = 1e-2


@dataclass
class GradResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(*shape, seed: int) -> torch.Tensor:
    return torch.randn(*shape, generator=_gen(seed))


def _project(fn, out_shape, seed):
    """Contract a tensor-valued fn with a fixed random direction to get a scalar."""
    w = _randn(*out_shape, seed=seed)
    return lambda x: (fn(x) * w).sum()


def op_cases() -> list[tuple[str, callable, torch.Tensor]]:
    """(name, scalar fn, point) for each catalog op; inputs hold <= 64 elements."""
    a, b = _randn(3, 4, seed=1), _randn(4, 2, seed=2)
    c = _randn(3, 4, seed=3)
    x = _randn(1, 2, 10, seed=4)
    wconv, bconv = _randn(3, 2, 3, seed=5), _randn(3, seed=6)
    wt = _randn(2, 3, 4, seed=7)
    table = _randn(6, 5, seed=8)
    idx = torch.tensor([[0, 3, 5, 3]])
    logits = _randn(2, 5, 4, seed=9)
    targets = torch.tensor([[1, 0, 3, 2, 2], [0, 1, 1, 3, 0]])
    seq = _randn(1, 5, 4, seed=10)
    cases = [
        ("add", _project(lambda t: OPS["add"](t, c), (3, 4), 11), a),
        ("sub", _project(lambda t: OPS["sub"](c, t), (3, 4), 12), a),
        ("mul", _project(lambda t: OPS["mul"](t, c), (3, 4), 13), a),
        ("matmul", _project(lambda t: OPS["matmul"](t, b), (3, 2), 14), a),
        ("matmul_rhs", _project(lambda t: OPS["matmul"](a, t), (3, 2), 15), b),
        ("conv1d", _project(lambda t: OPS["conv1d"](t, wconv, bconv, stride=2, padding=1), (1, 3, 5), 16), x),
        ("conv1d_weight", _project(lambda t: OPS["conv1d"](x, t, bconv, stride=2, padding=1), (1, 3, 5), 17), wconv),
        ("transposed_conv1d", _project(lambda t: OPS["transposed_conv1d"](t, wt, stride=2, padding=1),
                                       (1, 3, 20), 18), x),
        ("gelu", _project(OPS["gelu"], (3, 4), 19), a),
        ("tanh", _project(OPS["tanh"], (3, 4), 20), a),
        ("sigmoid", _project(OPS["sigmoid"], (3, 4), 21), a),
        ("softmax", _project(OPS["softmax"], (3, 4), 22), a),
        ("layer_norm", _project(OPS["layer_norm"], (3, 4), 23), a),
        ("embedding", _project(lambda t: OPS["embedding"](idx, t), (1, 4, 5), 24), table),
        ("concat", _project(lambda t: OPS["concat"]([t, c], dim=-1), (3, 8), 25), a),
        ("slice", _project(lambda t: OPS["slice"](t, 1, 3, dim=-1), (3, 2), 26), a),
        ("mean", OPS["mean"], a),
        ("sum", OPS["sum"], a),
        ("l1_distance", lambda t: OPS["l1_distance"](t, c), a),
        ("cross_entropy", lambda t: OPS["cross_entropy"](t, targets), logits),
        ("replicate_upsample", _project(lambda t: OPS["replicate_upsample"](t, 4), (1, 20, 4), 27), seq),
    ]
    return cases


def _small_disc_cfg() -> DiscriminatorConfig:
    return DiscriminatorConfig(mpd_periods=(2, 3), msd_scales=2, stftd_fft_sizes=(64, 128), channels=4)


def loss_cases() -> list[tuple[str, callable, torch.Tensor, list[int] | None]]:
    sr = 16000
    n = 2048
    x = 0.3 * _randn(1, n, seed=30)
    x_hat0 = 0.3 * _randn(1, n, seed=31)
    coords = list(range(0, n, 97))

    logits = _randn(2, 6, 28, seed=32)
    tgt = torch.randint(0, 28, (2, 6), generator=_gen(33))
    tmask = torch.ones(2, 6)
    tmask[1, 4:] = 0

    rvq = ResidualVQ(RVQConfig(num_layers=3, codebook_size=8, dim=4))
    rvq.init_from_samples(_randn(64, 4, seed=34), seed=0)
    z0 = _randn(1, 5, 4, seed=35)

    def commit(z):
        return commitment_loss(rvq(z))

    torch.manual_seed(36)
    bank = DiscriminatorBank(_small_disc_cfg())
    real = 0.3 * _randn(1, 512, seed=37)
    fake0 = 0.3 * _randn(1, 512, seed=38)
    with torch.no_grad():
        real_scores, real_feats = split_bank_output(bank(real))
    wcoords = list(range(0, 512, 41))

    def d_loss(f):
        return disc_loss(real_scores, split_bank_output(bank(f))[0])

    def a_loss(f):
        return adv_loss(split_bank_output(bank(f))[0])

    def fm_loss(f):
        return feat_match_loss(real_feats, split_bank_output(bank(f))[1])

    ctc_logits = _randn(4, 4, seed=39)
    return [
        ("multiscale_mel_loss", lambda t: multiscale_mel_loss(x, t, sr), x_hat0, coords),
        ("asr_loss", lambda t: asr_loss(t, tgt, tmask), logits, None),
        ("commitment_loss", commit, z0, None),
        ("disc_loss", d_loss, fake0, wcoords),
        ("adv_loss", a_loss, fake0, wcoords),
        ("feat_match_loss", fm_loss, fake0, wcoords),
        ("ctc_loss", lambda t: ctc_loss(t, [1, 2]), ctc_logits, None),
    ]


def tiny_codec_config(bypass: bool, seed: int = 0) -> CodecConfig:
    return CodecConfig(
        encoder=EncoderConfig(d_model=8, n_layers=1, n_heads=2, n_mels=16),
        adapter=AdapterConfig(n_layers=1, d_model=8, ffn_dim=16, n_heads=2),
        rvq=RVQConfig(num_layers=2, codebook_size=8, dim=4),
        decoder=DecoderConfig(vocos_layers=1, vocos_dim=8, llm_dim=8, llm_layers=1, llm_heads=2),
        discriminator=_small_disc_cfg(),
        bypass_quantizer=bypass,
        seed=seed,
    )


def end_to_end_cases() -> list[tuple[str, callable, list]]:
    """Full pre-training objective against a sample of trainable parameters.

    The auto-encoder graph has no quantizer, so every parameter is covered.
    With the RVQ in place codes are piecewise constant in encoder weights and the
    straight-through gradient is not a derivative; only parameters downstream of
    the codes are checked there.
    """
    out = []
    wave = 0.3 * _randn(2, 2560, seed=40)
    lengths = torch.tensor([2560, 1800])
    tokens = torch.tensor([[0, 3, 5, 1], [0, 2, 2, 0]])
    targets = torch.tensor([[3, 5, 1, 7], [2, 2, 9, 0]])
    tmask = torch.tensor([[1.0, 1, 1, 1], [1, 1, 1, 0]])
    for bypass in (True, False):
        model = CodecModel(tiny_codec_config(bypass))
        if not bypass:
            with torch.no_grad():
                m12, m50, _ = frame_masks(lengths, 2, 1280)
                z = model.quantizer.project(model.encode(model.mel(wave), m50), m50)
                model.quantizer.rvq.init_from_samples(torch.cat([z.reshape(-1, 4), _randn(16, 4, seed=41)]), seed=0)

        def loss_fn(model=model):
            m12, m50, _ = frame_masks(lengths, 2, 1280)
            smask = (torch.arange(2560)[None] < lengths[:, None]).double()
            tok = model.tokenize(model.encode(model.mel(wave), m50), m50, m12)
            x_hat = model.acoustic_decoder(tok.features, m12)
            recon = multiscale_mel_loss(wave, x_hat, 16000, mask=smask)
            logits = model.semantic_decoder(tok.features, m12, tokens, tmask)
            return pretrain_total(recon, asr_loss(logits, targets, tmask), tok.commit, PretrainWeights())

        prefixes = (("encoder.acoustic", "encoder.semantic_adapter", "quantizer.pre_adapter",
                     "quantizer.downsample") if bypass else ()) + (
            "quantizer.post_adapter", "acoustic_decoder.up4", "acoustic_decoder.blocks",
            "acoustic_decoder.head", "semantic_decoder.adapter", "semantic_decoder.lm")
        picks = []
        for name, p in model.named_parameters():
            if p.requires_grad and name.startswith(prefixes) and name.endswith("weight"):
                g = _gen(len(picks) + 50)
                picks.append((p, int(torch.randint(0, p.numel(), (1,), generator=g))))
        out.append(("end_to_end_" + ("autoencoder" if bypass else "quantized_decoder_side"), loss_fn, picks))
    return out


def run_suite(eps: float = 1e-5) -> tuple[list[GradResult], float]:
    start = time.perf_counter()
    results = []
    with warnings.catch_warnings():
        # the CTC case is deliberately short (T < 2U+1); its thin-margin warning is expected
        warnings.filterwarnings("ignore", message=r"T=\d+ < 2U\+1", category=UserWarning)
        for name, fn, point in op_cases():
            results.append(GradResult("op:" + name, finite_diff_check(fn, point, eps), OP_TOL))
        for name, fn, point, coords in loss_cases():
            results.append(GradResult("loss:" + name, finite_diff_check(fn, point, eps, coords), OP_TOL))
        for name, fn, picks in end_to_end_cases():
            results.append(GradResult(name, param_finite_diff_check(fn, picks, eps), E2E_TOL))
    return results, time.perf_counter() - start
