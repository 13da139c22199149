"""JSON checkpoints holding architecture, weights and training provenance.

Floats are written with ``repr`` precision, which round-trips float64
exactly, so a reloaded model is bit-identical to the saved one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .nn import LayerParams, Network, NetworkWeights, _check_weights

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    network: Network
    weights: NetworkWeights
    provenance: dict = field(default_factory=dict)


def _tensor(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in a.reshape(-1)]}


def _array(d: dict, what: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        values = np.asarray(d["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed tensor {what}: {exc}") from exc
    if values.size != math.prod(shape):
        raise ParseError(f"tensor {what}: {values.size} values for shape {shape}")
    return values.reshape(shape)


def to_dict(ckpt: Checkpoint) -> dict:
    w = ckpt.weights
    return {
        "version": FORMAT_VERSION,
        "architecture": ckpt.network.to_dict(),
        "tensors": [{"weight": _tensor(p.weight), "bias": _tensor(p.bias),
                     "max_abs": float(p.max_abs)} for p in w.layers],
        "act_ranges": None if w.act_ranges is None else [list(map(float, r)) for r in w.act_ranges],
        "provenance": ckpt.provenance,
    }


def from_dict(d: dict) -> Checkpoint:
    if not isinstance(d, dict):
        raise ParseError("checkpoint root must be a JSON object")
    version = d.get("version")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version!r} (expected {FORMAT_VERSION})")
    try:
        network = Network.from_dict(d["architecture"])
        layers = [LayerParams(_array(t["weight"], f"{i}.weight"), _array(t["bias"], f"{i}.bias"),
                              float(t["max_abs"]))
                  for i, t in enumerate(d["tensors"])]
        ranges = d.get("act_ranges")
        weights = NetworkWeights(layers, None if ranges is None else [tuple(r) for r in ranges])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed checkpoint: missing or invalid {exc}") from exc
    except ConfigError as exc:
        raise ParseError(f"checkpoint architecture invalid: {exc}") from exc
    try:
        _check_weights(network, weights)
    except ConfigError as exc:
        raise ParseError(f"checkpoint tensors do not match architecture: {exc}") from exc
    return Checkpoint(network, weights, dict(d.get("provenance") or {}))


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "w") as fh:
        json.dump(to_dict(ckpt), fh)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: corrupt checkpoint ({exc.msg})", exc.pos) from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text checkpoint", exc.start) from exc
    return from_dict(d)
