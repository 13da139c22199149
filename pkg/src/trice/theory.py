"""Single-weight percentile analysis of the loss and of noise-injected updates.

Around a trained weight ``w0`` the loss is approximated by the quadratic

    f(w0 + dw) ~ f0 + f1*dw + f2/2*dw**2

and with ``dw ~ N(0, sigma_d)`` the upper-tail q-percentile of the loss
(``loss_q`` with ``P[f >= loss_q] = q``) follows from the two roots of
``f = loss_q``. Two predictors are provided: :func:`loss_q_analytic`, the
closed-form approximation, and :func:`loss_q_exact`, a numerical inversion of
the root/CDF relation that serves as the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .errors import ConfigError
from .nn import Dataset, Network, NetworkWeights, loss
from .noise import NoiseSpec, analytic_mean, analytic_second_moment


@dataclass(frozen=True)
class DerivativeTriple:
    f0: float
    f1: float
    f2: float
    f3: float | None = None

    @property
    def minimum(self) -> float:
        """Minimum value of the quadratic model (requires f2 > 0)."""
        return self.f0 - self.f1 ** 2 / (2 * self.f2)


def taylor_loss(d: DerivativeTriple, dw):
    return d.f0 + d.f1 * dw + d.f2 / 2 * np.square(dw)


def roots_for_lossq(d: DerivativeTriple, loss_q: float):
    """``(w1, w2, beta)`` with ``taylor_loss(d, w) = loss_q`` at w1 <= w2."""
    if not d.f2 > 0:
        raise ConfigError("second derivative must be positive")
    disc = d.f1 ** 2 - 2 * d.f2 * (d.f0 - loss_q)
    if disc < 0 and disc > -1e-12 * (d.f1 ** 2 + 2 * d.f2 * (abs(d.f0) + abs(loss_q))):
        disc = 0.0  # rounding at the double root
    if disc < 0:
        raise ConfigError(f"loss_q below quadratic minimum ({loss_q} < {d.minimum})")
    beta = math.sqrt(disc)
    return (-d.f1 - beta) / d.f2, (-d.f1 + beta) / d.f2, beta


def q_from_lossq(d: DerivativeTriple, loss_q: float, sigma_d: float) -> float:
    """Probability that the quadratic loss reaches ``loss_q`` or more.

    ``1 - (Phi(w2/sigma_d) - Phi(w1/sigma_d))``, evaluated as the sum of the
    two tails for accuracy when q is small.
    """
    w1, w2, _ = roots_for_lossq(d, loss_q)
    return float(ndtr(w1 / sigma_d) + ndtr(-w2 / sigma_d))


def loss_q_analytic(d: DerivativeTriple, sigma_d: float, q: float) -> float:
    """Closed-form approximation ``-f1**2/(2 f2) + f0 + f2*pi*q**2*sigma_d**2/4``."""
    if not d.f2 > 0:
        raise ConfigError("second derivative must be positive")
    return -d.f1 ** 2 / (2 * d.f2) + d.f0 + d.f2 * math.pi * q ** 2 * sigma_d ** 2 / 4


def loss_q_exact(d: DerivativeTriple, sigma_d: float, q: float) -> float:
    """``loss_q`` solving ``q_from_lossq(d, loss_q, sigma_d) == q`` numerically."""
    if not 0 < q < 1:
        raise ConfigError(f"q must lie in (0, 1), got {q}")
    lo = d.minimum
    span = d.f2 * sigma_d ** 2 + abs(d.f1) * sigma_d + 1e-300
    hi = lo + span
    while q_from_lossq(d, hi, sigma_d) > q:
        hi = lo + 2 * (hi - lo)
    return brentq(lambda x: q_from_lossq(d, x, sigma_d) - q, lo, hi,
                  xtol=1e-15 * max(1.0, abs(hi)), rtol=4 * np.finfo(float).eps, maxiter=500)


def loss_density(d: DerivativeTriple, loss_q: float, sigma_d: float) -> float:
    """Density of ``taylor_loss(d, dw)``, ``dw ~ N(0, sigma_d)``, at ``loss_q``."""
    w1, w2, beta = roots_for_lossq(d, loss_q)
    pdf = lambda w: math.exp(-0.5 * (w / sigma_d) ** 2) / (sigma_d * math.sqrt(2 * math.pi))
    return (pdf(w1) + pdf(w2)) / beta


def loss_q_mc(d: DerivativeTriple, sigma_d: float, q: float, n: int,
              rng: np.random.Generator) -> float:
    """Empirical upper-tail q-percentile of the quadratic loss."""
    from .kpp import kpp_from_samples

    dw = rng.normal(0.0, sigma_d, n)
    return kpp_from_samples(taylor_loss(d, dw), q, higher_is_better=False,
                            keep_samples=False).value


def expected_update(d: DerivativeTriple, noise: NoiseSpec, lr: float) -> float:
    """Expected one-step change of a noise-injected gradient step.

    ``-lr * (f1 + E[dw] f2 + E[dw**2]/2 f3)``; a missing f3 counts as 0.
    """
    f3 = d.f3 or 0.0
    return -lr * (d.f1 + analytic_mean(noise) * d.f2 + analytic_second_moment(noise) / 2 * f3)


def stencil_derivatives(f, x0: float, h: float) -> DerivativeTriple:
    """Central-difference derivatives of a scalar function at ``x0``.

    f1, f2 use the 3-point stencil; f3 the 5-point stencil
    ``(f(2h) - 2f(h) + 2f(-h) - f(-2h)) / (2h**3)``.
    """
    if not h > 0:
        raise ConfigError("h must be positive")
    fm2, fm1, f0, fp1, fp2 = (f(x0 + k * h) for k in (-2, -1, 0, 1, 2))
    return DerivativeTriple(
        f0=f0,
        f1=(fp1 - fm1) / (2 * h),
        f2=(fp1 - 2 * f0 + fm1) / h ** 2,
        f3=(fp2 - 2 * fp1 + 2 * fm1 - fm2) / (2 * h ** 3),
    )


def default_step(w: float) -> float:
    return 1e-3 * max(1.0, abs(w))


def finite_diff_derivatives(network: Network, weights: NetworkWeights, coordinate,
                            h: float | None, dataset: Dataset) -> DerivativeTriple:
    """Derivatives of the dataset loss along one weight coordinate.

    ``coordinate`` is ``(layer_index, flat_index)`` into the weighted layers.
    Only that coordinate is displaced; the loss is the mean cross-entropy.
    """
    layer, flat = coordinate
    base = weights.layers[layer].weight
    w0 = float(base.reshape(-1)[flat])
    step = default_step(w0) if h is None else h

    def f(x):
        w = base.copy()
        w.reshape(-1)[flat] = x
        trial = weights.with_weights([w if i == layer else p.weight
                                      for i, p in enumerate(weights.layers)])
        return loss(network, trial, dataset.inputs, dataset.labels)

    return stencil_derivatives(f, w0, step)
