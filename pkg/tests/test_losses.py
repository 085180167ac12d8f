import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from unmask.core import LossWeights
from unmask.losses import (
    EPS,
    NonFiniteLossError,
    gram,
    gradient_penalty,
    loss_cls,
    loss_local_lsgan_disc,
    loss_prior_pair,
    loss_recon,
    loss_recon_terms,
    loss_rf_generator,
    loss_style,
    loss_tv,
    size_penalty,
    total_inpainter,
    total_mask_gen,
)

from gradcheck_util import max_rel_error

D = torch.float64


class TinyExtractor(nn.Module):
    """Smooth two-depth feature stack standing in for the classifier trunk."""

    def __init__(self):
        super().__init__()
        g = torch.Generator().manual_seed(7)
        self.w1 = nn.Parameter(torch.randn(4, 3, 3, 3, generator=g, dtype=D) * 0.3, requires_grad=False)
        self.w2 = nn.Parameter(torch.randn(5, 4, 3, 3, generator=g, dtype=D) * 0.3, requires_grad=False)

    def forward(self, x):
        f1 = torch.tanh(nn.functional.conv2d(x, self.w1, padding=1))
        f2 = torch.tanh(nn.functional.conv2d(nn.functional.avg_pool2d(f1, 2), self.w2, padding=1))
        return [f1, f2]


def smooth_critic(seed=3):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(1, 1, 3, 3, generator=g, dtype=D)
    return lambda z: torch.tanh(nn.functional.conv2d(z, w, padding=1)).flatten(1).mean(1) * 5


# --- analytic values -------------------------------------------------------

def test_loss_cls_values():
    assert float(loss_cls(torch.tensor([0.5], dtype=D))) == pytest.approx(0.6931, abs=1e-4)
    assert float(loss_cls(torch.tensor([0.0], dtype=D))) == pytest.approx(-math.log(1 - EPS), abs=1e-12)
    assert math.isfinite(float(loss_cls(torch.tensor([1.0], dtype=D))))
    assert float(loss_cls(torch.tensor([1.0], dtype=D))) == pytest.approx(-math.log(EPS), rel=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 0.999), st.floats(0, 0.999))
def test_loss_cls_monotone(a, b):
    la, lb = float(loss_cls(torch.tensor([a], dtype=D))), float(loss_cls(torch.tensor([b], dtype=D)))
    if a < b:
        assert la <= lb


def test_lsgan_disc_values():
    m = torch.zeros(2, 1, 8, 8, dtype=D)
    m[:, :, :4] = 1
    target = torch.where(m > 0, -1.0, 1.0).to(D)
    assert float(loss_local_lsgan_disc(target, m)) == pytest.approx(0, abs=1e-6)
    assert float(loss_local_lsgan_disc(torch.zeros_like(m), m)) == pytest.approx(2, abs=1e-6)
    # empty mask: only the kept term
    assert float(loss_local_lsgan_disc(torch.zeros_like(m), torch.zeros_like(m))) == pytest.approx(1, abs=1e-6)


def test_rf_generator_values():
    m = torch.zeros(1, 1, 4, 4, dtype=D)
    assert float(loss_rf_generator(torch.ones_like(m), m)) == 0
    m[..., :2, :] = 1
    s = torch.full_like(m, 0.25)
    assert float(loss_rf_generator(s, m)) == pytest.approx(-0.25, abs=1e-12)


def test_gradient_penalty_values():
    g = torch.Generator().manual_seed(0)
    real = torch.rand(6, 1, 8, 8, generator=g, dtype=D)
    fake = torch.rand(6, 1, 8, 8, generator=g, dtype=D)
    w = torch.randn(64, generator=g, dtype=D)
    w = w / w.norm()
    unit = lambda z: z.flatten(1) @ w
    assert float(gradient_penalty(unit, real, fake, g)) == pytest.approx(0, abs=1e-6)
    zero = lambda z: z.flatten(1).sum(1) * 0
    assert float(gradient_penalty(zero, real, fake, g)) == pytest.approx(1, abs=1e-6)
    with pytest.raises(ValueError):
        gradient_penalty(unit, real, fake[:3], g)


def test_size_penalty_values():
    assert float(size_penalty(torch.zeros(3, 1, 8, 8))) == pytest.approx(1, abs=1e-6)
    assert float(size_penalty(torch.ones(3, 1, 8, 8))) == pytest.approx(math.e, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_size_penalty_monotone(a, b):
    pa, pb = size_penalty(torch.full((1, 1, 4, 4), a, dtype=D)), size_penalty(torch.full((1, 1, 4, 4), b, dtype=D))
    assert 1 - 1e-12 <= float(pa) <= math.e + 1e-12
    if a <= b:
        assert float(pa) <= float(pb)


def test_prior_pair_sign():
    crit, gen = loss_prior_pair(torch.tensor([2.0, 4.0]), torch.tensor([1.0, 1.0]))
    assert float(crit) == 2.0 and float(gen) == -1.0


def test_recon_tv_style_values():
    x = torch.rand(2, 3, 8, 8, dtype=D)
    ex = TinyExtractor()
    assert float(loss_recon(x, x, ex)) == 0
    assert float(loss_tv(torch.ones(1, 3, 8, 8))) == 0
    assert float(loss_style(x, x, ex)) == 0
    l1, perc = loss_recon_terms(x + 0.5, x)
    assert float(l1) == pytest.approx(0.5) and float(perc) == 0
    with pytest.raises(ValueError):
        loss_recon(x, x[:, :, :4])
    # checkerboard: every neighbour differs by 1
    cb = torch.tensor([[(i + j) % 2 for j in range(8)] for i in range(8)], dtype=D).expand(1, 1, 8, 8)
    assert float(loss_tv(cb)) == pytest.approx(2)


def test_gram_normalization():
    f = torch.ones(1, 2, 3, 3)
    np.testing.assert_allclose(gram(f).numpy(), np.full((1, 2, 2), 9 / 18))


def test_totals_use_weights_and_reject_nan():
    w = LossWeights()
    mg = {"cls": torch.tensor(1.0), "prior": torch.tensor(2.0), "size": torch.tensor(1.5)}
    assert float(total_mask_gen(mg, w)) == pytest.approx(12 + 6 + 27)
    ip = {k: torch.tensor(1.0) for k in ("rf", "recon_l1", "recon_perc", "tv", "style")}
    assert float(total_inpainter(ip, w)) == pytest.approx(2 + 200 + 10 + 3000)
    mg["prior"] = torch.tensor(float("nan"))
    with pytest.raises(NonFiniteLossError, match="prior"):
        total_mask_gen(mg, w)
    with pytest.raises(KeyError):
        total_inpainter({"rf": torch.tensor(1.0)}, w)


# --- gradients vs central finite differences --------------------------------

TOL = 1e-5


@pytest.fixture
def g8():
    return torch.Generator().manual_seed(42)


def test_grad_loss_cls(g8):
    p = torch.rand(5, generator=g8, dtype=D) * 0.9 + 0.05
    assert max_rel_error(loss_cls, [p]) < TOL


def test_grad_rf_generator(g8):
    s = torch.randn(2, 1, 8, 8, generator=g8, dtype=D)
    m = torch.rand(2, 1, 8, 8, generator=g8, dtype=D)
    assert max_rel_error(loss_rf_generator, [s, m]) < TOL


def test_grad_lsgan_disc(g8):
    s = torch.randn(2, 1, 8, 8, generator=g8, dtype=D)
    m = torch.rand(2, 1, 8, 8, generator=g8, dtype=D)
    assert max_rel_error(loss_local_lsgan_disc, [s, m]) < TOL


def test_grad_prior_pair(g8):
    a, b = torch.randn(4, generator=g8, dtype=D), torch.randn(4, generator=g8, dtype=D)
    assert max_rel_error(lambda a, b: loss_prior_pair(a, b)[0], [a, b]) < TOL
    assert max_rel_error(lambda a, b: loss_prior_pair(a, b)[1], [a, b]) < TOL


def test_grad_gradient_penalty_wrt_critic_weights(g8):
    real = torch.rand(3, 1, 8, 8, generator=g8, dtype=D)
    fake = torch.rand(3, 1, 8, 8, generator=g8, dtype=D)
    u = torch.rand(3, generator=g8, dtype=D)
    w0 = torch.randn(1, 1, 3, 3, generator=g8, dtype=D)

    def fn(w):
        critic = lambda z: torch.tanh(nn.functional.conv2d(z, w, padding=1)).flatten(1).mean(1) * 5
        return gradient_penalty(critic, real, fake, u=u)

    assert max_rel_error(fn, [w0]) < TOL


def test_grad_recon(g8):
    ex = TinyExtractor()
    x = torch.randn(2, 3, 8, 8, generator=g8, dtype=D)
    gi = torch.randn(2, 3, 8, 8, generator=g8, dtype=D)
    assert max_rel_error(lambda g: loss_recon(g, x, ex), [gi]) < TOL


def test_grad_tv(g8):
    y = torch.randn(2, 3, 8, 8, generator=g8, dtype=D)
    assert max_rel_error(loss_tv, [y]) < TOL


def test_grad_style(g8):
    ex = TinyExtractor()
    x = torch.randn(2, 3, 8, 8, generator=g8, dtype=D)
    y = torch.randn(2, 3, 8, 8, generator=g8, dtype=D)
    assert max_rel_error(lambda y: loss_style(y, x, ex), [y]) < TOL


def test_grad_size_penalty(g8):
    m = torch.rand(2, 1, 8, 8, generator=g8, dtype=D)
    assert max_rel_error(size_penalty, [m]) < TOL


def test_grad_through_composition(g8):
    """Mask gradient flows through y = (1-m) x + m g into every downstream term."""
    from unmask.core import compose

    ex = TinyExtractor()
    x = torch.randn(1, 3, 8, 8, generator=g8, dtype=D)
    gi = torch.randn(1, 3, 8, 8, generator=g8, dtype=D)
    m = torch.rand(1, 1, 8, 8, generator=g8, dtype=D) * 0.8 + 0.1

    def fn(m):
        y = compose(x, m, gi)
        return loss_tv(y) + loss_style(y, x, ex) + size_penalty(m)

    assert max_rel_error(fn, [m]) < TOL
