"""Pre-training and GAN post-training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch

FEAT_EPS = 1e-8


@dataclass
class PretrainWeights:
    asr: float = 20.0
    recon: float = 15.0
    commit: float = 1.0

    def __post_init__(self):
        if min(self.asr, self.recon, self.commit) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class PosttrainWeights:
    recon: float = 15.0
    feat: float = 1.0
    adv: float = 1.0

    def __post_init__(self):
        if min(self.recon, self.feat, self.adv) < 0:
            raise ValueError("loss weights must be non-negative")


def asr_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Summed next-token negative log-likelihood.

    For a batch ``[B, N, V]`` the per-utterance sums are averaged over ``B``;
    tokens are never averaged.
    """
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    nll = -torch.log_softmax(logits, -1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is not None:
        nll = nll * mask
    total = nll.sum()
    return total / logits.shape[0] if logits.dim() == 3 else total


def _value(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def pretrain_total(recon, asr, commit, w: PretrainWeights = PretrainWeights()):
    for name, v in (("recon", recon), ("asr", asr), ("commit", commit)):
        if _value(v) < 0:
            raise ValueError(f"negative {name} loss {_value(v)}")
    return w.asr * asr + w.recon * recon + w.commit * commit


def generator_total(recon, feat, adv, w: PosttrainWeights = PosttrainWeights()):
    return w.recon * recon + w.feat * feat + w.adv * adv


def _pooled(score: torch.Tensor) -> torch.Tensor:
    """Average a score map to one value per batch item."""
    score = torch.as_tensor(score)
    return score.reshape(score.shape[0], -1).mean(1) if score.dim() > 1 else score.reshape(-1)


def disc_loss(real_scores, fake_scores) -> torch.Tensor:
    """LSGAN discriminator loss averaged over the K discriminators."""
    if len(real_scores) == 0:
        raise ValueError("no discriminators")
    total = 0.0
    for r, f in zip(real_scores, fake_scores):
        total = total + ((1 - _pooled(r)) ** 2 + _pooled(f) ** 2).mean()
    return total / len(real_scores)


def adv_loss(fake_scores) -> torch.Tensor:
    if len(fake_scores) == 0:
        raise ValueError("no discriminators")
    total = 0.0
    for f in fake_scores:
        total = total + ((1 - _pooled(f)) ** 2).mean()
    return total / len(fake_scores)


def feat_match_loss(real_feats, fake_feats) -> torch.Tensor:
    """Relative L1 feature matching.

    Each layer contributes mean|real - fake| / mean|real|; layers are averaged
    within a discriminator, then discriminators are averaged. Real features
    are detached so only the generated side receives gradient.
    """
    if len(real_feats) == 0:
        raise ValueError("no discriminators")
    total = 0.0
    for rk, fk in zip(real_feats, fake_feats):
        layer_sum = 0.0
        for r, f in zip(rk, fk):
            r = r.detach()
            layer_sum = layer_sum + (r - f).abs().mean() / (r.abs().mean() + FEAT_EPS)
        total = total + layer_sum / len(rk)
    return total / len(real_feats)


def split_bank_output(outputs):
    return [s for s, _ in outputs], [f for _, f in outputs]
