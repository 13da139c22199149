"""Experiment configuration and (method x sigma_d) sweeps emitting CSV results."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import generate_synthetic, load_dataset, load_mnist, train_val_split
from .errors import ConfigError, NumericError
from .kpp import quant_eval
from .nn import Dataset, Evaluator, calibrate_activations, lenet, mlp
from .noise import NoiseSpec
from .quant import DEVICE_KINDS, DeviceModel, QuantConfig, quantize_weights
from .train import TrainConfig, train, train_baseline, trice

log = logging.getLogger(__name__)

METHODS = ("none", "gaussian", "trice", "rc_manual", "lc", "rt", "lt")
FIXED_NOISE = {"rc_manual": "rc", "lc": "lc", "rt": "rt", "lt": "lt"}
CSV_SCHEMA = "# schema: trice-results v1"
CSV_COLUMNS = ("method", "device", "sigma_d", "q", "kpp", "ci_lo", "ci_hi", "clean_acc", "seed",
               "sigma_t_chosen", "status")


@dataclass
class ExperimentConfig:
    model: str = "lenet"
    hidden: list = field(default_factory=lambda: [64])  # mlp only
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    dataset_file: str | None = None  # saved synthetic dataset (.npz)
    train_limit: int | None = None
    test_limit: int | None = None
    val_fraction: float = 0.1
    val_limit: int | None = None  # cap on the in-training KPP split
    synthetic_classes: int = 4
    synthetic_per_class: int = 200
    H: int = 4
    B: int = 2
    act_bits: int | None = 4
    device: str = "rram"
    sigma_d: list = field(default_factory=lambda: [0.1])
    methods: list = field(default_factory=lambda: ["trice"])
    sigma_t: float | None = None  # fixed-noise methods; None means sigma_d
    epochs: int = 100
    warmup: int = 5
    lr: float = 0.05
    batch_size: int = 64
    th: float = 2.0
    n_train: int = 300
    quant_aware: bool = True
    q: float = 0.01
    n_samples: int = 10000
    seed: int = 0
    repeat: int = 1
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.model not in ("mlp", "lenet"):
            raise ConfigError(f"model must be mlp or lenet, got {self.model!r}")
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"dataset must be mnist or synthetic, got {self.dataset!r}")
        if self.model == "lenet" and self.dataset != "mnist":
            raise ConfigError("lenet needs 28x28 images (dataset mnist)")
        if isinstance(self.sigma_d, (int, float)):
            self.sigma_d = [self.sigma_d]
        if isinstance(self.methods, str):
            self.methods = [self.methods]
        self.sigma_d = [float(s) for s in self.sigma_d]
        self.methods = list(self.methods)
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.device not in DEVICE_KINDS:
            raise ConfigError(f"unknown device {self.device!r}; expected one of {DEVICE_KINDS}")
        if self.dataset == "mnist" and self.dataset_file is None and not os.path.isdir(self.data_dir):
            raise ConfigError(f"data_dir {self.data_dir!r} does not exist")
        if self.dataset_file is not None and not os.path.exists(self.dataset_file):
            raise ConfigError(f"dataset_file {self.dataset_file!r} does not exist")
        if self.repeat < 1 or self.n_samples < 1:
            raise ConfigError("repeat and n_samples must be >= 1")
        if not 0 < self.q < 1:
            raise ConfigError(f"q must lie in (0, 1), got {self.q}")
        QuantConfig(self.H, self.B)
        for s in self.sigma_d:
            DeviceModel(self.device, s)
            self.train_config(s, self.seed)

    def train_config(self, sigma_d: float, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, warmup=self.warmup, lr=self.lr,
                           batch_size=self.batch_size, th=self.th, n_train=self.n_train,
                           sigma_d=sigma_d, q=self.q, seed=seed, H=self.H, B=self.B,
                           device=self.device, quant_aware=self.quant_aware)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        """Read a JSON config; non-None ``overrides`` replace file values."""
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_network(config: ExperimentConfig, in_dim: int, classes: int):
    if config.model == "lenet":
        return lenet(classes, act_bits=config.act_bits)
    return mlp([in_dim, *config.hidden, classes], act_bits=config.act_bits)


def load_data(config: ExperimentConfig, seed: int):
    """(train, validation, test) datasets for one run."""
    if config.dataset == "mnist" and config.dataset_file is None:
        full = load_mnist(config.data_dir, "train", config.train_limit)
        test = load_mnist(config.data_dir, "test", config.test_limit)
    else:
        if config.dataset_file is not None:
            full = load_dataset(config.dataset_file)
        else:
            full = generate_synthetic(config.synthetic_classes, config.synthetic_per_class, seed)
        order = np.random.default_rng(seed).permutation(len(full))
        n_test = len(full) // 5
        test, full = full.subset(order[:n_test]), full.subset(order[n_test:])
        if config.train_limit is not None:
            full = full.subset(np.arange(min(config.train_limit, len(full))))
        if config.test_limit is not None:
            test = test.subset(np.arange(min(config.test_limit, len(test))))
    train_data, val = train_val_split(full, config.val_fraction, seed)
    if config.val_limit is not None:
        val = val.subset(np.arange(min(config.val_limit, len(val))))
    if len(val) == 0:
        val = train_data
    return train_data, val, test


def eval_seed(seed: int) -> int:
    """Seed of the inference-time device draws, shared by every cell of a run."""
    return int(np.random.SeedSequence(seed, spawn_key=(2,)).generate_state(1, np.uint64)[0])


def train_method(network, config: ExperimentConfig, method: str, sigma_d: float, seed: int,
                 train_data: Dataset, val: Dataset, log_file=None):
    """Train one cell; returns (weights, sigma_t or None)."""
    tc = config.train_config(sigma_d, seed)
    if method in ("none", "gaussian"):
        return train_baseline(network, tc, method, train_data), None
    if method == "trice":
        result = trice(network, tc, train_data, val, log_file=log_file)
        return result.weights, result.sigma_t
    sigma_t = sigma_d if config.sigma_t is None else config.sigma_t
    return train(network, tc, train_data, NoiseSpec(FIXED_NOISE[method], sigma_t, config.th)), sigma_t


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_results(path) -> list:
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != CSV_SCHEMA:
            raise ConfigError(f"{path}: expected {CSV_SCHEMA!r}, got {first!r}")
        return list(csv.DictReader(fh))


def _checkpoint_path(config, method, sigma_d, seed):
    return os.path.join(config.checkpoint_dir, f"{method}_sd{sigma_d:g}_seed{seed}.json")


def run_single(config: ExperimentConfig, seed: int, out_dir=None) -> list:
    """Rows for every (method, sigma_d) cell of one seed, in config order.

    ``none`` does not depend on sigma_d and is trained once. A cell whose
    training fails numerically yields a row with status ``failed`` and the
    sweep continues.
    """
    train_data, val, test = load_data(config, seed)
    classes = int(max(train_data.labels.max(), test.labels.max())) + 1
    network = build_network(config, int(np.prod(train_data.inputs.shape[1:])), classes)
    evaluator = Evaluator(network, test)
    quant = QuantConfig(config.H, config.B)
    trained = {}
    rows = []
    for method in config.methods:
        for sigma_d in config.sigma_d:
            row = {"method": method, "device": config.device, "sigma_d": sigma_d, "q": config.q,
                   "seed": seed}
            key = (method, None if method == "none" else sigma_d)
            try:
                if key not in trained:
                    ckpt_path = (_checkpoint_path(config, method, sigma_d, seed)
                                 if config.checkpoint_dir else None)
                    if ckpt_path and os.path.exists(ckpt_path):
                        ck = load_checkpoint(ckpt_path)
                        trained[key] = ck.weights, ck.provenance.get("sigma_t")
                    else:
                        log_file = None
                        if out_dir is not None and method == "trice":
                            log_file = open(os.path.join(
                                out_dir, f"trice_log_sd{sigma_d:g}_seed{seed}.jsonl"), "w")
                        try:
                            weights, sigma_t = train_method(network, config, method, sigma_d,
                                                            seed, train_data, val, log_file)
                        finally:
                            if log_file is not None:
                                log_file.close()
                        if network.act_bits:
                            n_cal = min(len(train_data), 256)
                            weights = calibrate_activations(network, weights,
                                                            train_data.inputs[:n_cal])
                        trained[key] = weights, sigma_t
                        if ckpt_path:
                            os.makedirs(config.checkpoint_dir, exist_ok=True)
                            save_checkpoint(ckpt_path, Checkpoint(network, weights, {
                                "method": method, "seed": seed, "sigma_d": sigma_d,
                                "sigma_t": sigma_t}))
                weights, sigma_t = trained[key]
                clean = evaluator.accuracy(quantize_weights(weights, quant))
                est = quant_eval(network, weights, quant, DeviceModel(config.device, sigma_d),
                                 config.q, test, config.n_samples, eval_seed(seed),
                                 evaluator=evaluator, keep_samples=False)
                row.update(kpp=est.value, ci_lo=est.ci95[0], ci_hi=est.ci95[1], clean_acc=clean,
                           sigma_t_chosen=sigma_t, status="ok")
            except NumericError as exc:
                log.warning("cell %s sigma_d=%s seed=%s failed: %s", method, sigma_d, seed, exc)
                row.update(status=f"failed: {exc}")
            log.info("row %s", row)
            rows.append(row)
    return rows


def summarize(rows) -> list:
    """Mean and sample std of kpp per (method, sigma_d) across seeds."""
    groups = {}
    for r in rows:
        if r.get("status") == "ok":
            groups.setdefault((r["method"], r["sigma_d"]), []).append(r["kpp"])
    out = []
    for (method, sigma_d), vals in groups.items():
        v = np.asarray(vals)
        out.append({"method": method, "sigma_d": sigma_d, "runs": len(v),
                    "kpp_mean": float(v.mean()),
                    "kpp_std": float(v.std(ddof=1)) if len(v) > 1 else 0.0})
    return out


def run_experiment(config: ExperimentConfig, out_dir=None) -> list:
    """Run ``repeat`` seeds (``seed + i``) and write ``results.csv`` into ``out_dir``.

    Rows are ordered by seed, then method, then sigma_d. With ``repeat > 1``
    a ``summary.csv`` with per-cell mean and spread is written as well.
    """
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(config.repeat):
        rows.extend(run_single(config, config.seed + i, out_dir))
    if out_dir is not None:
        with open(os.path.join(out_dir, "results.csv"), "w") as fh:
            fh.write(rows_to_csv(rows))
        if config.repeat > 1:
            with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("method", "sigma_d", "runs", "kpp_mean", "kpp_std"))
                for s in summarize(rows):
                    w.writerow([_fmt(s[k]) for k in ("method", "sigma_d", "runs", "kpp_mean",
                                                     "kpp_std")])
    return rows
