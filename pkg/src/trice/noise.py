"""Training-noise family: Gaussian plus right/left censored and truncated variants.

All kinds are built from a zero-mean Gaussian ``g ~ N(0, sigma)`` and a
threshold ``c = th * sigma``:

* ``rc``  right-censored: ``min(g, c)``
* ``lc``  left-censored:  ``max(g, -c)``
* ``rt``  right-truncated: ``g`` conditioned on ``g < c``
* ``lt``  left-truncated:  ``g`` conditioned on ``g > -c``

Truncated kinds are drawn by inverse-CDF transform, one uniform per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError

NOISE_KINDS = ("gaussian", "rc", "lc", "rt", "lt")

_ALIASES = {
    "rcgaussian": "rc", "lcgaussian": "lc", "rtgaussian": "rt", "ltgaussian": "lt",
    "rc-gaussian": "rc", "lc-gaussian": "lc", "rt-gaussian": "rt", "lt-gaussian": "lt",
    "gauss": "gaussian",
}


def std_normal_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def std_normal_cdf(x):
    """Standard normal CDF (scipy's ndtr, erf/erfc based, ~1e-16 absolute error)."""
    return ndtr(x)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    sigma: float = 0.0
    th: float = 2.0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        object.__setattr__(self, "kind", kind)
        if not self.sigma >= 0 or not math.isfinite(self.sigma):
            raise ConfigError(f"noise sigma must be finite and >= 0, got {self.sigma}")
        if not math.isfinite(self.th):
            raise ConfigError(f"noise threshold must be finite, got {self.th}")

    @property
    def threshold(self) -> float:
        """Absolute threshold ``th * sigma``."""
        return self.th * self.sigma

    def scaled(self, factor) -> "NoiseSpec":
        return NoiseSpec(self.kind, self.sigma * factor, self.th)


def censor(spec: NoiseSpec, g):
    """Map underlying Gaussian draws to the censored kinds (identity otherwise)."""
    g = np.asarray(g, dtype=np.float64)
    if spec.kind == "rc":
        return np.minimum(g, spec.threshold)
    if spec.kind == "lc":
        return np.maximum(g, -spec.threshold)
    if spec.kind == "gaussian":
        return g
    raise ConfigError(f"{spec.kind} noise is truncated, not censored")


def _open_uniform(rng, size):
    # uniform on the open interval (0, 1), 53-bit resolution
    return (rng.integers(0, 2**53, size=size) + 0.5) * 2.0**-53


def sample(spec: NoiseSpec, rng: np.random.Generator, size=None, scale=1.0):
    """Draw noise samples.

    ``scale`` (scalar or array broadcastable to ``size``) multiplies sigma per
    element, so one call can serve coordinates with different noise scales.
    A zero sigma returns zeros without consuming any randomness.
    """
    if spec.sigma == 0.0:
        return np.zeros(size) if size is not None else 0.0
    sigma = spec.sigma * np.asarray(scale, dtype=np.float64)
    if spec.kind in ("gaussian", "rc", "lc"):
        g = rng.standard_normal(size)
        if spec.kind == "rc":
            g = np.minimum(g, spec.th)
        elif spec.kind == "lc":
            g = np.maximum(g, -spec.th)
        out = g * sigma
    else:
        u = _open_uniform(rng, size)
        z = ndtri(u * ndtr(spec.th))
        # keep the support strictly below the threshold despite rounding
        z = np.minimum(z, np.nextafter(spec.th, -np.inf))
        out = (z if spec.kind == "rt" else -z) * sigma
    return out if size is not None else float(out)


def _standard_moments(kind, c):
    """(E[X], E[X^2]) for the unit-sigma version of ``kind`` with threshold c."""
    if kind == "gaussian":
        return 0.0, 1.0
    pdf = float(std_normal_pdf(c))
    cdf = float(ndtr(c))
    upper = float(ndtr(-c))
    if kind in ("rc", "lc"):
        # E[min(Z, c)] and E[min(Z, c)^2]
        mean = -pdf + c * upper
        second = cdf - c * pdf + c * c * upper
        return (mean if kind == "rc" else -mean), second
    # Z | Z < c
    mean = -pdf / cdf
    second = 1.0 - c * pdf / cdf
    return (mean if kind == "rt" else -mean), second


def analytic_mean(spec: NoiseSpec) -> float:
    return spec.sigma * _standard_moments(spec.kind, spec.th)[0]


def analytic_second_moment(spec: NoiseSpec) -> float:
    return spec.sigma ** 2 * _standard_moments(spec.kind, spec.th)[1]


def analytic_variance(spec: NoiseSpec) -> float:
    return analytic_second_moment(spec) - analytic_mean(spec) ** 2
