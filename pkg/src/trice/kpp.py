"""Monte-Carlo estimation of k-th percentile performance (KPP).

Each Monte-Carlo draw ``i`` gets its own generator derived from
``(seed, i)`` with numpy's ``SeedSequence`` spawn keys, so the sample list
does not depend on evaluation order or on how draws are split across
workers. Samples are sorted ascending and the estimate is the element at
``floor(q * N)`` (clamped to ``N - 1``).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn import Dataset, Evaluator, Network, NetworkWeights
from .quant import DeviceModel, QuantConfig, perturb_weights

Z95 = 1.96
MIN_CI_SAMPLES = 30


def substream(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for draw ``index`` of the stream rooted at ``seed``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(i) for i in index))
    return np.random.Generator(np.random.PCG64(ss))


def _floor(x: float) -> int:
    # absorbs representation error such as 0.29 * 100 = 28.999999999999996
    return math.floor(round(x, 9))


def percentile_index(n: int, q: float) -> int:
    if n < 1:
        raise ConfigError("need at least one sample")
    if not 0 < q < 1:
        raise ConfigError(f"q must lie in (0, 1), got {q}")
    return min(_floor(q * n), n - 1)


def ci_ranks(n: int, q: float) -> tuple[int, int]:
    """Ranks of the distribution-free 95% order-statistic interval around ``q*n``."""
    half = Z95 * math.sqrt(n * q * (1 - q))
    lo = math.floor(n * q - half + 0.5)
    hi = math.floor(n * q + half + 0.5)
    return max(lo, 0), min(hi, n - 1)


def ci_order_statistic(sorted_samples, q: float):
    """95% interval ``(lo, hi, ok)`` for the q-quantile from sorted samples.

    With fewer than 30 samples the widest interval (min, max) is returned and
    ``ok`` is False.
    """
    s = np.asarray(sorted_samples)
    n = len(s)
    if n == 0:
        raise ConfigError("no samples")
    if n < MIN_CI_SAMPLES:
        return float(s[0]), float(s[-1]), False
    r_lo, r_hi = ci_ranks(n, q)
    center = percentile_index(n, q)
    return float(s[min(r_lo, center)]), float(s[max(r_hi, center)]), True


def quantile_standard_error(q: float, n: int, density: float) -> float:
    """Asymptotic std of the sample q-quantile: sqrt(q(1-q)/n) / density."""
    return math.sqrt(q * (1 - q) / n) / density


@dataclass
class KppEstimate:
    value: float
    q: float
    n_samples: int
    ci95: tuple
    samples: np.ndarray | None = field(default=None, repr=False)
    ci_ok: bool = True

    @property
    def ci_halfwidth(self) -> float:
        return (self.ci95[1] - self.ci95[0]) / 2


def kpp_from_samples(samples, q: float, higher_is_better=True, keep_samples=True) -> KppEstimate:
    """KPP of a sample list.

    For higher-is-better metrics (accuracy) this is the q-quantile. For
    lower-is-better metrics (loss) the realistic worst case is the upper tail,
    so the element at ``floor((1 - q) * N)`` of the ascending list is used.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64), kind="stable")
    level = q if higher_is_better else 1 - q
    idx = percentile_index(len(s), level)
    lo, hi, ok = ci_order_statistic(s, level)
    if not ok:
        warnings.warn(f"only {len(s)} samples; reporting (min, max) as the interval", stacklevel=2)
    return KppEstimate(float(s[idx]), q, len(s), (lo, hi), s if keep_samples else None, ok)


def monte_carlo_kpp(performance, n_samples: int, q: float, seed: int, workers=1,
                    higher_is_better=True, keep_samples=True) -> KppEstimate:
    """Run ``performance(i, rng)`` for every draw and summarize.

    ``rng`` is the draw's own substream; with ``workers > 1`` draws run on a
    thread pool and results are stored by index, so any schedule gives the
    same sample list.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    out = np.empty(n_samples)

    def run(i):
        out[i] = performance(i, substream(seed, i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(n_samples)))
    else:
        for i in range(n_samples):
            run(i)
    return kpp_from_samples(out, q, higher_is_better, keep_samples)


def quant_eval(network: Network, weights: NetworkWeights, quant: QuantConfig, model: DeviceModel,
               q: float, dataset: Dataset, n_samples: int, seed: int, workers=1,
               evaluator: Evaluator | None = None, keep_samples=True) -> KppEstimate:
    """KPP of ``weights`` mapped onto devices described by ``model``.

    Every draw re-samples all device deviations and records top-1 accuracy
    on ``dataset``.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate KPP on an empty dataset")
    ev = evaluator if evaluator is not None else Evaluator(network, dataset)
    if model.sigma_d == 0:
        # every draw is the same deterministic quantized model
        acc = ev.accuracy(perturb_weights(weights, quant, model, None))
        return kpp_from_samples(np.full(n_samples, acc), q, keep_samples=keep_samples)

    def performance(i, rng):
        return ev.accuracy(perturb_weights(weights, quant, model, rng))

    return monte_carlo_kpp(performance, n_samples, q, seed, workers, keep_samples=keep_samples)


def write_samples(path, samples):
    """Sample dump: one value per line, ``repr`` precision."""
    with open(path, "w") as fh:
        for v in samples:
            fh.write(f"{float(v)!r}\n")


def read_samples(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([float(line) for line in fh if line.strip()])
