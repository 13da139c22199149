"""Noise-injection training with an adaptive right-censored noise search (TRICE),
plus the quantization, device-variation and percentile-evaluation tooling around it."""

from .errors import ConfigError, NumericError, ParseError
from .kpp import KppEstimate, kpp_from_samples, monte_carlo_kpp, quant_eval
from .nn import Dataset, Network, NetworkWeights, forward, lenet, loss_and_grad, mlp
from .noise import NoiseSpec
from .quant import DeviceModel, QuantConfig, perturb_weights
from .train import SearchState, TrainConfig, binary_search_update, train_baseline, trice

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "NumericError", "ParseError", "KppEstimate", "kpp_from_samples",
    "monte_carlo_kpp", "quant_eval", "Dataset", "Network", "NetworkWeights", "forward", "lenet",
    "loss_and_grad", "mlp", "NoiseSpec", "DeviceModel", "QuantConfig", "perturb_weights",
    "SearchState", "TrainConfig", "binary_search_update", "train_baseline", "trice",
]
