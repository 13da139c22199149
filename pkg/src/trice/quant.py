"""Weight quantization, bit-slicing across multi-level devices, and device noise.

A weight ``W`` in a tensor with maximum magnitude ``max_abs`` is stored as a
sign plus an ``H``-bit magnitude level, split across ``H/B`` devices of ``B``
bits each. Device ``i`` holds bits ``i*B .. i*B+B-1`` (device 0 is least
significant). Programming adds a Gaussian deviation to each device
conductance; the read-back weight is

    W_p = sign * max_abs / (2**H - 1) * sum_i (g_i + dg_i) * 2**(i*B)

The sign is digital and error free; biases are never mapped to devices.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import LayerParams, NetworkWeights

DEVICE_KINDS = ("rram", "fefet1", "fefet2")
SIGMA_D_SOFT_LIMIT = 0.4

# conductance-level multipliers of sigma_d for the four-level FeFET models
_FEFET_FACTORS = {"fefet1": (1.0, 4.0, 4.0, 1.0), "fefet2": (1.0, 2.0, 2.0, 1.0)}


@dataclass(frozen=True)
class QuantConfig:
    H: int = 4
    B: int = 2

    def __post_init__(self):
        if not (self.H >= self.B >= 1):
            raise ConfigError(f"need H >= B >= 1, got H={self.H}, B={self.B}")
        if self.H % self.B:
            raise ConfigError(f"H ({self.H}) must be a multiple of B ({self.B})")

    @property
    def H_mod_B_zero(self) -> bool:
        return self.H % self.B == 0

    @property
    def num_devices(self) -> int:
        return self.H // self.B

    @property
    def max_level(self) -> int:
        return 2 ** self.H - 1

    @property
    def place_values(self) -> np.ndarray:
        return 2.0 ** (self.B * np.arange(self.num_devices))

    @property
    def noise_gain(self) -> float:
        """sqrt(sum_i 4**(i*B)): weight-space std per unit of i.i.d. device std."""
        return math.sqrt(float(np.sum(self.place_values ** 2)))


@dataclass(frozen=True)
class DeviceModel:
    kind: str = "rram"
    sigma_d: float = 0.1

    def __post_init__(self):
        kind = self.kind.lower()
        if kind in ("uniformrram", "uniform_rram"):
            kind = "rram"
        if kind not in DEVICE_KINDS:
            raise ConfigError(f"unknown device kind {self.kind!r}; expected one of {DEVICE_KINDS}")
        object.__setattr__(self, "kind", kind)
        if not (self.sigma_d >= 0 and math.isfinite(self.sigma_d)):
            raise ConfigError(f"sigma_d must be finite and >= 0, got {self.sigma_d}")
        if self.sigma_d > SIGMA_D_SOFT_LIMIT:
            warnings.warn(f"sigma_d={self.sigma_d} exceeds the realistic range "
                          f"(<= {SIGMA_D_SOFT_LIMIT})", stacklevel=2)

    def level_sigmas(self, B: int) -> np.ndarray:
        """Conductance-deviation std for each of the ``2**B`` device levels."""
        if self.kind == "rram":
            return np.full(2 ** B, float(self.sigma_d))
        if B != 2:
            raise ConfigError(f"{self.kind} is a four-level device model and needs B=2, got B={B}")
        return self.sigma_d * np.asarray(_FEFET_FACTORS[self.kind])

    def with_sigma(self, sigma_d) -> "DeviceModel":
        return DeviceModel(self.kind, sigma_d)


def quantize_weight(W, H: int, max_abs):
    """Sign and magnitude level of ``W``; works elementwise on arrays.

    ``level = round(clip(|W|, 0, max_abs) / max_abs * (2**H - 1))`` with
    halves rounded away from zero.
    """
    W = np.asarray(W, dtype=np.float64)
    if not np.all(max_abs > 0):
        raise ConfigError("max_abs must be positive")
    if not np.all(np.isfinite(W)):
        raise ConfigError("cannot quantize non-finite weights")
    top = 2 ** H - 1
    mag = np.clip(np.abs(W), 0.0, max_abs) / max_abs * top
    level = np.minimum(np.floor(mag + 0.5), top).astype(np.int64)
    sign = np.where(W < 0, -1, 1)
    if level.ndim == 0:
        return int(sign), int(level)
    return sign, level


def desired_weight(sign, level, H: int, max_abs):
    """``W_des = sign * max_abs / (2**H - 1) * level``."""
    step = max_abs / (2 ** H - 1)
    return sign * (step * np.asarray(level, dtype=np.float64))


def split_devices(level, H: int, B: int):
    """Per-device levels ``g_i = (level >> i*B) mod 2**B``, least significant first.

    Scalars give a tuple; arrays gain a trailing device axis.
    """
    QuantConfig(H, B)
    level = np.asarray(level, dtype=np.int64)
    if np.any(level < 0) or np.any(level > 2 ** H - 1):
        raise ConfigError(f"level out of range [0, {2 ** H - 1}]")
    shifts = B * np.arange(H // B)
    g = (level[..., None] >> shifts) & (2 ** B - 1)
    if g.ndim == 1:
        return tuple(int(v) for v in g)
    return g


def sample_device_noise(model: DeviceModel, g, rng: np.random.Generator, B: int = 2):
    """Conductance deviation for device level(s) ``g`` under ``model``."""
    sig = model.level_sigmas(B)
    g = np.asarray(g, dtype=np.int64)
    if np.any(g < 0) or np.any(g >= len(sig)):
        raise ConfigError(f"device level out of range [0, {len(sig) - 1}]")
    if model.sigma_d == 0:
        return np.zeros(g.shape) if g.ndim else 0.0
    dg = rng.standard_normal(g.shape) * sig[g]
    return dg if g.ndim else float(dg)


def reconstruct(sign, perturbed_levels, H: int, B: int, max_abs):
    """Read-back weight from (possibly perturbed) per-device conductances.

    ``perturbed_levels`` has the device axis last, least significant first.
    """
    q = QuantConfig(H, B)
    levels = np.asarray(perturbed_levels, dtype=np.float64)
    if levels.shape[-1] != q.num_devices:
        raise ConfigError(f"expected {q.num_devices} device values, got {levels.shape[-1]}")
    total = levels @ q.place_values
    out = desired_weight(sign, total, H, max_abs)
    return float(out) if np.ndim(out) == 0 else out


def weight_space_std(quant: QuantConfig, sigma_d, max_abs) -> float:
    """Std of ``W_p - W_des`` for i.i.d. device deviations of std ``sigma_d``."""
    return max_abs / quant.max_level * sigma_d * quant.noise_gain


def coordinate_std(weight, quant: QuantConfig, model: DeviceModel, max_abs) -> np.ndarray:
    """Per-coordinate std of the device-induced weight deviation.

    Equals :func:`weight_space_std` everywhere for uniform devices; for
    level-dependent devices it depends on each coordinate's device levels.
    """
    _, level = quantize_weight(weight, quant.H, max_abs)
    g = split_devices(np.atleast_1d(level), quant.H, quant.B)
    sig = model.level_sigmas(quant.B)[g]
    var = (sig ** 2) @ (quant.place_values ** 2)
    return (max_abs / quant.max_level) * np.sqrt(var).reshape(np.shape(weight))


def _map_tensor(p: LayerParams, quant: QuantConfig, sig=None, rng=None):
    sign, level = quantize_weight(p.weight, quant.H, p.max_abs)
    g = split_devices(level.reshape(-1), quant.H, quant.B).astype(np.float64)
    if sig is not None:
        g = g + rng.standard_normal(g.shape) * sig[g.astype(np.int64)]
    total = (g @ quant.place_values).reshape(p.weight.shape)
    return desired_weight(sign, total, quant.H, p.max_abs)


def quantize_weights(weights: NetworkWeights, quant: QuantConfig) -> NetworkWeights:
    """Every weight replaced by its desired quantized value ``W_des``."""
    return weights.with_weights([_map_tensor(p, quant) for p in weights.layers])


def perturb_weights(weights: NetworkWeights, quant: QuantConfig, model: DeviceModel,
                    rng: np.random.Generator) -> NetworkWeights:
    """One device-variation draw: quantize, split, add device noise, read back.

    Layers are processed in order and each draws one normal per device in
    C order, so a given generator state always yields the same result.
    Biases and the input object are left untouched.
    """
    if model.sigma_d == 0:
        return quantize_weights(weights, quant)
    sig = model.level_sigmas(quant.B)
    return weights.with_weights([_map_tensor(p, quant, sig, rng) for p in weights.layers])
