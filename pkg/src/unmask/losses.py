"""Objective terms for the mask generator, the in-painter and their critics.

Every term is a plain differentiable function of tensors. Norms are
mean-reduced per element so the loss weights do not depend on resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

from .core import LossWeights

EPS = 1e-7

MASK_GEN_TERMS = ("cls", "prior", "size")
INPAINTER_TERMS = ("rf", "recon_l1", "recon_perc", "tv", "style")


def loss_cls(score_target: torch.Tensor) -> torch.Tensor:
    """``-log(1 - p)`` for the classifier's target-class probability, batch mean."""
    p = torch.as_tensor(score_target).clamp(EPS, 1 - EPS)
    return -torch.log1p(-p).mean()


def loss_rf_generator(score_map: torch.Tensor, m_pooled: torch.Tensor) -> torch.Tensor:
    """Negative mean critic score over the in-painted (mask-weighted) region."""
    denom = m_pooled.sum()
    if float(denom.detach()) == 0:
        return score_map.sum() * 0
    return -(m_pooled * score_map).sum() / denom


def loss_local_lsgan_disc(score_map: torch.Tensor, m_pooled: torch.Tensor) -> torch.Tensor:
    """Per-location least-squares loss: target +1 where kept, -1 where in-painted."""
    keep = 1 - m_pooled
    total = score_map.sum() * 0
    if float(keep.detach().sum()) > 0:
        total = total + (keep * (score_map - 1) ** 2).sum() / keep.sum()
    if float(m_pooled.detach().sum()) > 0:
        total = total + (m_pooled * (score_map + 1) ** 2).sum() / m_pooled.sum()
    return total


def loss_prior_pair(scores_prior: torch.Tensor, scores_gen: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(E[D(prior)] - E[D(gen)], -E[D(gen)])``.

    The first value is the critic objective as written; the trainer *ascends*
    it (minimizes its negative) so that prior masks end up scoring higher than
    generated ones. The second is the generator's prior loss.
    """
    scores_prior = torch.as_tensor(scores_prior)
    scores_gen = torch.as_tensor(scores_gen)
    critic = scores_prior.mean() - scores_gen.mean()
    return critic, -scores_gen.mean()


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor, fake: torch.Tensor,
                     generator: torch.Generator | None = None, u: torch.Tensor | None = None) -> torch.Tensor:
    """``E[(||grad D(x_hat)||_2 - 1)^2]`` at per-sample interpolates of real and fake."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ in shape")
    b = real.shape[0]
    if u is None:
        u = torch.rand(b, generator=generator, dtype=real.dtype)
    u = u.to(real.dtype).view(b, *([1] * (real.dim() - 1)))
    x_hat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    out = critic(x_hat).reshape(b, -1).mean(dim=1)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norm = grad.reshape(b, -1).norm(2, dim=1)
    return ((norm - 1) ** 2).mean()


def _features(extractor, x):
    if extractor is None:
        return []
    return extractor(x)


def loss_recon_terms(g_out: torch.Tensor, x: torch.Tensor, extractor=None) -> tuple[torch.Tensor, torch.Tensor]:
    if g_out.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(g_out.shape)} vs {tuple(x.shape)}")
    l1 = (g_out - x).abs().mean()
    perc = g_out.sum() * 0
    if extractor is not None:
        with torch.no_grad():
            target = _features(extractor, x)
        for fg, fx in zip(_features(extractor, g_out), target):
            perc = perc + (fg - fx).abs().mean()
    return l1, perc


def loss_recon(g_out: torch.Tensor, x: torch.Tensor, extractor=None) -> torch.Tensor:
    """Mean-L1 pixel term plus mean-L1 feature distance at every extractor depth."""
    l1, perc = loss_recon_terms(g_out, x, extractor)
    return l1 + perc


def loss_tv(y: torch.Tensor) -> torch.Tensor:
    dv = (y[..., 1:, :] - y[..., :-1, :]).abs()
    dh = (y[..., :, 1:] - y[..., :, :-1]).abs()
    return dv.mean() + dh.mean()


def gram(f: torch.Tensor) -> torch.Tensor:
    b, c, h, w = f.shape
    flat = f.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def loss_style(y: torch.Tensor, x: torch.Tensor, extractor) -> torch.Tensor:
    total = y.sum() * 0
    with torch.no_grad():
        target = [gram(f) for f in _features(extractor, x)]
    for fy, gx in zip(_features(extractor, y), target):
        total = total + (gram(fy) - gx).abs().mean()
    return total


def size_penalty(m: torch.Tensor) -> torch.Tensor:
    """``exp(mean mask value)`` per sample, batch mean; lies in [1, e]."""
    if m.dim() <= 2:
        return torch.exp(m.mean())
    return torch.exp(m.reshape(m.shape[0], -1).mean(dim=1)).mean()


@dataclass
class LossBreakdown:
    terms: dict = field(default_factory=dict)
    total: float | torch.Tensor = 0.0
    objective: str = ""

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v) for k, v in self.terms.items()}
        out["total"] = float(self.total)
        return out


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, terms: Mapping | None = None):
        self.term = term
        self.terms = {k: float(torch.as_tensor(v).detach()) for k, v in (terms or {}).items()}
        super().__init__(f"non-finite loss term {term!r}: {self.terms}")


def _check_finite(terms: Mapping, names):
    for n in names:
        if n not in terms:
            raise KeyError(f"missing loss term {n!r}")
        if not math.isfinite(float(torch.as_tensor(terms[n]).detach())):
            raise NonFiniteLossError(n, terms)


def total_mask_gen(terms: Mapping, w: LossWeights):
    _check_finite(terms, MASK_GEN_TERMS)
    return w.lambda_c * terms["cls"] + w.lambda_p * terms["prior"] + w.lambda_sz * terms["size"]


def total_inpainter(terms: Mapping, w: LossWeights):
    _check_finite(terms, INPAINTER_TERMS)
    recon = terms["recon_l1"] + terms["recon_perc"]
    return w.lambda_rf * terms["rf"] + w.lambda_r * recon + w.lambda_tv * terms["tv"] + w.lambda_sty * terms["style"]
