import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trice.errors import ConfigError
from trice.nn import Dataset, init_weights, loss, mlp, sgd_step, loss_and_grad
from trice.noise import NoiseSpec
from trice.theory import (DerivativeTriple, expected_update, finite_diff_derivatives,
                          loss_density, loss_q_analytic, loss_q_exact, loss_q_mc, q_from_lossq,
                          roots_for_lossq, stencil_derivatives, taylor_loss)

TWO_TAIL_1SIGMA = 0.317310507862914  # 2(1 - Phi(1)), mpmath
EQ_EXAMPLE = 0.937501570796327  # -0.0625 + 1 + 2*pi*1e-4*0.01/4


def test_taylor_examples():
    d = DerivativeTriple(1, 0.5, 2)
    assert taylor_loss(d, 0.0) == 1
    assert taylor_loss(d, 0.1) == pytest.approx(1.06, rel=1e-15)


def test_roots_example():
    w1, w2, beta = roots_for_lossq(DerivativeTriple(1, 0, 2), 1.25)
    assert (w1, w2, beta) == (-0.5, 0.5, 1.0)


def test_double_root_and_domain_error():
    d = DerivativeTriple(1.0, 0.5, 2.0)
    w1, w2, _ = roots_for_lossq(d, d.minimum)
    assert w1 == w2 == -0.25
    with pytest.raises(ConfigError, match="below quadratic minimum"):
        roots_for_lossq(d, d.minimum - 0.1)
    with pytest.raises(ConfigError):
        roots_for_lossq(DerivativeTriple(1, 0, -1), 2.0)


@given(st.floats(-2, 2), st.floats(-1, 1), st.floats(0.1, 5), st.floats(0.01, 3))
@settings(max_examples=200)
def test_roots_satisfy_equation(f0, f1, f2, extra):
    d = DerivativeTriple(f0, f1, f2)
    lq = d.minimum + extra
    w1, w2, _ = roots_for_lossq(d, lq)
    assert w1 <= w2
    for w in (w1, w2):
        assert taylor_loss(d, w) == pytest.approx(lq, rel=1e-12, abs=1e-12)


def test_q_example():
    assert q_from_lossq(DerivativeTriple(1, 0, 2), 1.25, 0.5) == pytest.approx(TWO_TAIL_1SIGMA,
                                                                              rel=1e-13)
    assert q_from_lossq(DerivativeTriple(1, 0, 2), 1e6, 0.5) == 0.0


def test_q_mc_oracle():
    d = DerivativeTriple(1.0, 0.3, 2.0)
    lq, sigma = 1.2, 0.3
    n = 10**6
    dw = np.random.default_rng(0).normal(0, sigma, n)
    frac = np.mean(taylor_loss(d, dw) >= lq)
    q = q_from_lossq(d, lq, sigma)
    assert abs(frac - q) < 4 * math.sqrt(q * (1 - q) / n)


def test_analytic_example():
    assert loss_q_analytic(DerivativeTriple(1.0, 0.5, 2.0), 0.1, 0.01) == pytest.approx(
        EQ_EXAMPLE, rel=1e-14)
    assert loss_q_analytic(DerivativeTriple(1.0, 1.0, 2.0), 0.1, 0.01) < EQ_EXAMPLE


@given(st.floats(-1, 1), st.floats(0.1, 5), st.floats(0.01, 1), st.floats(0.001, 0.5))
@settings(max_examples=100)
def test_exact_round_trip(f1, f2, sigma, q):
    d = DerivativeTriple(0.5, f1, f2)
    lq = loss_q_exact(d, sigma, q)
    assert q_from_lossq(d, lq, sigma) == pytest.approx(q, abs=1e-9)


def test_f1_direction():
    # closed form falls with |f1|; the upper-tail inversion rises with |f1|
    for f1a, f1b in [(0.0, 0.2), (0.1, 0.5)]:
        a, b = DerivativeTriple(1, f1a, 2), DerivativeTriple(1, f1b, 2)
        assert loss_q_analytic(b, 0.1, 0.01) < loss_q_analytic(a, 0.1, 0.01)
        assert loss_q_exact(b, 0.1, 0.01) > loss_q_exact(a, 0.1, 0.01)


@pytest.mark.parametrize("q,sigma", [(0.01, 0.1), (0.001, 0.5)])
def test_closed_form_is_lower_tail_inversion_at_f1_zero(q, sigma):
    from scipy.optimize import brentq
    from scipy.special import ndtr
    d = DerivativeTriple(1.0, 0.0, 2.0)
    inner = lambda lq: ndtr(roots_for_lossq(d, lq)[1] / sigma) - ndtr(roots_for_lossq(d, lq)[0] / sigma) - q
    lower = brentq(inner, d.f0, d.f0 + d.f2 * sigma ** 2, xtol=1e-16)
    assert loss_q_analytic(d, sigma, q) == pytest.approx(lower, rel=1e-6)


def test_mc_matches_exact():
    d = DerivativeTriple(0.2, -0.4, 1.5)
    sigma, q, n = 0.2, 0.05, 10**6
    exact = loss_q_exact(d, sigma, q)
    mc = loss_q_mc(d, sigma, q, n, np.random.default_rng(4))
    se = math.sqrt(q * (1 - q) / n) / loss_density(d, exact, sigma)
    assert abs(mc - exact) < 4 * se


def test_expected_update():
    d = DerivativeTriple(0.0, 0.0, 1.0, 0.0)
    assert expected_update(d, NoiseSpec("rc", 1.0, 2.0), 1.0) == pytest.approx(0.00849070261682964,
                                                                              rel=1e-12)
    g = DerivativeTriple(0.0, 0.3, 1.0, 2.0)
    assert expected_update(g, NoiseSpec("gaussian", 0.5), 0.1) == pytest.approx(
        -0.1 * (0.3 + 0.25 / 2 * 2.0))


def test_stencil_polynomials():
    d = stencil_derivatives(lambda x: 3 * x ** 2 - x + 1, 0.7, 1e-3)
    assert d.f2 == pytest.approx(6.0, rel=1e-6)
    assert d.f1 == pytest.approx(3.2, rel=1e-9)
    lin = stencil_derivatives(lambda x: 2.5 * x - 4, 1.3, 1e-3)
    assert abs(lin.f2) < 1e-6
    cub = stencil_derivatives(lambda x: x ** 3, 0.5, 1e-2)
    assert cub.f3 == pytest.approx(6.0, rel=1e-6)
    with pytest.raises(ConfigError):
        stencil_derivatives(lambda x: x, 0.0, 0.0)


def test_finite_diff_on_trained_classifier():
    rng = np.random.default_rng(0)
    net = mlp([2, 8, 2])
    x = rng.normal(size=(200, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    data = Dataset(x, y)
    w = init_weights(net, rng)
    for _ in range(800):
        _, grads = loss_and_grad(net, w, x, y)
        w = sgd_step(w, grads, 0.5)
    coords = [(li, int(k)) for li in range(2)
              for k in rng.choice(w.layers[li].weight.size, 50, replace=w.layers[li].weight.size < 50)]
    for c in coords:
        d = finite_diff_derivatives(net, w, c, None, data)
        assert d.f2 >= -1e-6
    d = finite_diff_derivatives(net, w, (0, 0), None, data)
    assert d.f0 == pytest.approx(loss(net, w, x, y))


def test_taylor_error_is_third_order():
    rng = np.random.default_rng(1)
    net = mlp([3, 5, 2])
    x = rng.normal(size=(30, 3))
    y = rng.integers(0, 2, 30)
    w = init_weights(net, rng)
    data = Dataset(x, y)
    d = finite_diff_derivatives(net, w, (0, 4), None, data)
    base = w.layers[0].weight

    def actual(dw):
        ww = base.copy()
        ww.reshape(-1)[4] += dw
        return loss(net, w.with_weights([ww, w.layers[1].weight]), x, y)

    steps = np.array([1e-3, 3e-3, 1e-2, 3e-2, 1e-1])
    err = np.array([abs(taylor_loss(d, h) - actual(h)) for h in steps])
    c = np.max(err / steps ** 3)
    assert np.all(err <= c * steps ** 3 + 1e-12)
    # slope on a log-log fit is close to 3
    slope = np.polyfit(np.log(steps[2:]), np.log(err[2:]), 1)[0]
    assert 2.5 < slope < 3.5
