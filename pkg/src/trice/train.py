"""Noise-injection training and the TRICE adaptive search over the noise scale.

Noise scales are expressed in device-conductance units. Before injection a
scale ``s`` is converted to weight space per tensor with the same law that
maps device deviations onto weights (``max_abs / (2**H - 1) * sqrt(sum 4**(iB))``),
so ``sigma_t = sigma_d`` means "as strong as the device variation".
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError
from .kpp import quant_eval, substream
from .nn import Dataset, Evaluator, Network, NetworkWeights, init_weights, loss_and_grad, sgd_step
from .noise import NoiseSpec, sample
from .quant import DeviceModel, QuantConfig, coordinate_std, quantize_weights

log = logging.getLogger(__name__)

CONVERGED_WIDTH = 1e-4
LABELS = ("left", "mid", "right")


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup: int = 5
    lr: float = 0.05
    batch_size: int = 64
    th: float = 2.0
    start: float = 0.0
    end: float | None = None  # None: 2 * sigma_d
    n_train: int = 300
    sigma_d: float = 0.1
    q: float = 0.01
    seed: int = 0
    H: int = 4
    B: int = 2
    device: str = "rram"
    quant_aware: bool = True
    lr_milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.end is None:
            self.end = 2 * self.sigma_d
        if not 0 <= self.start <= self.end:
            raise ConfigError(f"need 0 <= start <= end, got start={self.start}, end={self.end}")
        if self.epochs < 1 or not 0 <= self.warmup < self.epochs:
            raise ConfigError(f"need 0 <= warmup < epochs, got warmup={self.warmup}, "
                              f"epochs={self.epochs}")
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr and batch_size must be positive")
        self.lr_milestones = tuple(self.lr_milestones)
        QuantConfig(self.H, self.B)
        DeviceModel(self.device, self.sigma_d)

    @property
    def quant(self) -> QuantConfig:
        return QuantConfig(self.H, self.B)

    @property
    def device_model(self) -> DeviceModel:
        return DeviceModel(self.device, self.sigma_d)

    def lr_at(self, epoch: int) -> float:
        """Step decay: multiply by ``lr_decay`` at each milestone fraction of the run."""
        drops = sum(epoch >= int(round(m * self.epochs)) for m in self.lr_milestones)
        return self.lr * self.lr_decay ** drops


# ------------------------------------------------------------ noise injection

def noise_injected_step(w: np.ndarray, grad_fn: Callable, noise: NoiseSpec, lr: float,
                        rng: np.random.Generator, scale=1.0) -> np.ndarray:
    """One noise-injection update on a flat parameter vector.

    ``w - lr * grad_fn(w + dw)`` with one fresh ``dw`` per coordinate; the
    noise itself is not kept.
    """
    dw = sample(noise, rng, size=np.shape(w), scale=scale)
    return w - lr * grad_fn(w + dw)


def _noise_scales(weights: NetworkWeights, quant: QuantConfig | None, model: DeviceModel | None):
    """Per-tensor (or per-coordinate) multiplier turning conductance units into weight units."""
    if quant is None:
        return [1.0] * len(weights.layers)
    if model is not None:
        # unit-sigma device model: per-coordinate std of the induced deviation
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            unit = model.with_sigma(1.0)
        return [coordinate_std(p.weight, quant, unit, p.max_abs) for p in weights.layers]
    return [p.max_abs / quant.max_level * quant.noise_gain for p in weights.layers]


def inject_noise(weights: NetworkWeights, noise: NoiseSpec | None, rng: np.random.Generator,
                 quant: QuantConfig | None = None, quant_aware=False,
                 device: DeviceModel | None = None) -> NetworkWeights:
    """Weights as seen by one training forward pass.

    With ``quant_aware`` the base point is the quantized weight ``W_des``.
    ``noise.sigma`` is in conductance units when ``quant`` is given (weight
    units otherwise); passing ``device`` makes the per-coordinate scale follow
    that device's level-dependent variation. Biases are never perturbed.
    """
    base = quantize_weights(weights, quant) if quant_aware else weights
    if noise is None or noise.sigma == 0:
        return base
    scales = _noise_scales(weights, quant, device)
    return base.with_weights([
        p.weight + sample(noise, rng, size=p.weight.shape, scale=s)
        for p, s in zip(base.layers, scales)
    ])


def _straight_through(grads):
    return grads


def noise_train_epoch(network: Network, weights: NetworkWeights, noise: NoiseSpec | None,
                      dataset: Dataset, lr: float, rng: np.random.Generator, batch_size=64,
                      quant: QuantConfig | None = None, quant_aware=False,
                      device: DeviceModel | None = None) -> NetworkWeights:
    """One epoch of noise-injection SGD over a shuffled ``dataset``.

    For every mini-batch a fresh perturbation is drawn, gradients are taken at
    the perturbed (and, with ``quant_aware``, quantized) weights, and the
    clean float weights are updated.
    """
    if len(dataset) == 0:
        raise ConfigError("empty training set")
    order = rng.permutation(len(dataset))
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        noisy = inject_noise(weights, noise, rng, quant, quant_aware, device)
        _, grads = loss_and_grad(network, noisy, dataset.inputs[idx], dataset.labels[idx])
        weights = sgd_step(weights, _straight_through(grads), lr)
    return weights


def train(network: Network, config: TrainConfig, train_data: Dataset, noise: NoiseSpec | None,
          weights: NetworkWeights | None = None, device_scaled=False,
          on_epoch: Callable | None = None) -> NetworkWeights:
    """Run ``config.epochs`` epochs of noise-injection training with a fixed noise."""
    root = substream(config.seed, 0)
    if weights is None:
        weights = init_weights(network, root)
    device = config.device_model if device_scaled else None
    for epoch in range(config.epochs):
        try:
            weights = noise_train_epoch(network, weights, noise, train_data, config.lr_at(epoch),
                                        root, config.batch_size, config.quant,
                                        config.quant_aware, device)
        except NumericError as exc:
            raise NumericError(f"training diverged in epoch {epoch}: {exc}") from exc
        if on_epoch is not None:
            on_epoch(epoch, weights)
    return weights


def train_baseline(network: Network, config: TrainConfig, method: str, train_data: Dataset,
                   weights: NetworkWeights | None = None) -> NetworkWeights:
    """Vanilla training (``none``) or Gaussian injection mirroring the device (``gaussian``).

    The Gaussian baseline's per-coordinate std equals the std of the weight
    deviation the configured device model induces at inference.
    """
    if method == "none":
        return train(network, config, train_data, None, weights)
    if method == "gaussian":
        noise = NoiseSpec("gaussian", config.sigma_d)
        return train(network, config, train_data, noise, weights, device_scaled=True)
    raise ConfigError(f"unknown baseline method {method!r}")


# ------------------------------------------------------------ adaptive search

@dataclass
class SearchState:
    """Search range plus the weights of the left/mid/right candidates."""

    start: float
    end: float
    weights: list = field(default_factory=lambda: [None, None, None])

    @property
    def width(self) -> float:
        return self.end - self.start

    @property
    def converged(self) -> bool:
        return self.width < CONVERGED_WIDTH

    @property
    def candidates(self) -> tuple:
        """(left, mid, right): the three quartiles of [start, end]."""
        s, w = self.start, self.end - self.start
        return s + 1 * w / 4, s + 2 * w / 4, s + 3 * w / 4


def _copy(w):
    return w.copy() if hasattr(w, "copy") else w


def binary_search_update(state: SearchState, winner: str) -> SearchState:
    """Apply one search step given which candidate had the highest KPP.

    mid: ``start, end = left, right`` and both outer models take mid's weights.
    left: ``end = right`` and mid/right take left's weights.
    right: ``start = left`` and left/mid take right's weights.
    """
    if state.converged:
        raise ConfigError("search already converged")
    left, _, right = state.candidates
    w1, w2, w3 = state.weights
    if winner == "mid":
        return SearchState(left, right, [_copy(w2), w2, _copy(w2)])
    if winner == "left":
        return SearchState(state.start, right, [w1, _copy(w1), _copy(w1)])
    if winner == "right":
        return SearchState(left, state.end, [_copy(w3), _copy(w3), w3])
    raise ConfigError(f"winner must be one of {LABELS}, got {winner!r}")


def pick_winner(perf) -> str:
    """Label of the best of (left, mid, right); ties prefer mid, then left."""
    best = max(perf)
    for k in (1, 0, 2):
        if perf[k] == best:
            return LABELS[k]
    raise ConfigError(f"cannot rank KPP values {perf}")


@dataclass
class TriceResult:
    weights: NetworkWeights
    sigma_t: float
    converged: bool
    history: list


def trice(network: Network, config: TrainConfig, train_data: Dataset, val_data: Dataset,
          evaluate: Callable | None = None, train_epoch: Callable | None = None,
          log_file=None, weights: NetworkWeights | None = None) -> TriceResult:
    """Train with right-censored Gaussian noise while searching its scale.

    Three copies of one initial model are trained per epoch at the left, mid
    and right quartiles of [start, end]. After ``warmup`` epochs each is scored
    by KPP on ``val_data`` and the range and weights are updated with
    :func:`binary_search_update`. Once the range is narrower than 1e-4 a
    single model is trained at ``sigma_t = start``. If the epochs run out
    first, the mid candidate and the current mid scale are returned.

    ``evaluate(weights, sigma_t, epoch) -> kpp`` and
    ``train_epoch(weights, noise, epoch, rng) -> weights`` can be injected;
    by default they are :func:`quant_eval` with ``n_train`` draws and
    :func:`noise_train_epoch`. The three candidates of an epoch are scored
    with the same device draws.
    """
    quant = config.quant
    root = substream(config.seed, 0)
    if weights is None:
        weights = init_weights(network, root)
    cand_rngs = [substream(config.seed, 1, k) for k in range(3)]

    if evaluate is None:
        evaluator = Evaluator(network, val_data)
        model = config.device_model

        def evaluate(w, sigma_t, epoch):
            with warnings.catch_warnings():
                # small N_train only affects the unused interval
                warnings.simplefilter("ignore")
                return quant_eval(network, w, quant, model, config.q, val_data, config.n_train,
                                  seed=config.seed * 1_000_003 + epoch, evaluator=evaluator,
                                  keep_samples=False).value

    if train_epoch is None:
        def train_epoch(w, noise, epoch, rng):
            return noise_train_epoch(network, w, noise, train_data, config.lr_at(epoch), rng,
                                     config.batch_size, quant, config.quant_aware)

    state = SearchState(config.start, config.end, [weights, weights.copy(), weights.copy()])
    history = []
    for epoch in range(config.epochs):
        record = {"epoch": epoch, "start": state.start, "end": state.end,
                  "kpp_left": None, "kpp_mid": None, "kpp_right": None, "chosen": None}
        try:
            if state.converged:
                noise = NoiseSpec("rc", state.start, config.th)
                state.weights[0] = train_epoch(state.weights[0], noise, epoch, cand_rngs[0])
                record["sigma_t"] = state.start
            else:
                sigmas = state.candidates
                for k in range(3):
                    noise = NoiseSpec("rc", sigmas[k], config.th)
                    state.weights[k] = train_epoch(state.weights[k], noise, epoch, cand_rngs[k])
                record["sigmas"] = list(sigmas)
                if epoch >= config.warmup:
                    perf = [evaluate(state.weights[k], sigmas[k], epoch) for k in range(3)]
                    winner = pick_winner(perf)
                    record.update(kpp_left=perf[0], kpp_mid=perf[1], kpp_right=perf[2],
                                  chosen=winner, chosen_sigma=sigmas[LABELS.index(winner)])
                    state = binary_search_update(state, winner)
        except NumericError as exc:
            raise NumericError(f"TRICE training diverged in epoch {epoch}: {exc}") from exc
        history.append(record)
        log.info("trice epoch %d: %s", epoch, record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")

    if state.converged:
        return TriceResult(state.weights[0], state.start, True, history)
    return TriceResult(state.weights[1], state.candidates[1], False, history)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["lr_milestones"] = list(config.lr_milestones)
    return d
