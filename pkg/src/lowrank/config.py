"""Run configuration: the YAML surface, validation, and network presets.

A config is flat key/value YAML; the loader also accepts the same keys
grouped under `policy`, `optimizer`, `training`, `data`, and `output`
sections, flattening them before validation. Command-line flags override
file values field by field.
"""

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import activations, conv
from .factorized import TruncationPolicy, init_low_rank
from .network import DenseLayer, Network
from .optim import ADAM, EULER, IntegratorKind, adam, euler

ARCHS = ("mlp500", "mlp784", "lenet5")
MODES = ("adaptive", "fixed", "dense")

# section name -> {section key: flat field}
_SECTIONS = {
    "policy": {"tau": "tau", "fixed_ranks": "fixed_ranks", "mode": "mode"},
    "optimizer": {"kind": "optimizer", "lr": "lr", "decay": "lr_decay"},
    "training": {
        "epochs": "epochs",
        "batch_size": "batch_size",
        "seed": "seed",
        "freeze_epoch": "freeze_epoch",
        "max_batches": "max_batches",
    },
    "data": {"dir": "data_dir", "dataset": "dataset"},
    "output": {"dir": "out_dir"},
}


@dataclass
class RunConfig:
    arch: str = "mlp500"
    mode: str = "adaptive"
    tau: float = None  # required when mode == "adaptive"
    fixed_ranks: tuple = None  # required when mode == "fixed"
    optimizer: str = ADAM
    lr: float = 1e-3
    lr_decay: float = None  # per-epoch exponential factor, e.g. 0.96
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    data_dir: str = None
    dataset: str = "mnist"  # mnist | synthetic (smoke runs, benchmarks)
    out_dir: str = "runs/latest"
    freeze_epoch: int = None  # adaptive -> fixed switch after this epoch
    max_batches: int = None  # cap iterations per epoch; smoke-run plumbing

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "adaptive":
            if self.tau is None:
                raise ValueError("adaptive mode needs tau")
            if not 0.0 < float(self.tau) < 1.0:
                raise ValueError(f"tau must sit in (0, 1), got {self.tau}")
        if self.mode == "fixed" and not self.fixed_ranks:
            raise ValueError("fixed mode needs fixed_ranks")
        if self.fixed_ranks is not None:
            self.fixed_ranks = tuple(int(r) for r in self.fixed_ranks)
            if any(r < 1 for r in self.fixed_ranks):
                raise ValueError("ranks must be positive")
        if self.optimizer not in (EULER, ADAM):
            raise ValueError(f"optimizer must be euler or adam, got {self.optimizer!r}")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dataset not in ("mnist", "synthetic"):
            raise ValueError(f"dataset must be mnist or synthetic, got {self.dataset!r}")
        if self.lr_decay is not None and not 0.0 < float(self.lr_decay) <= 1.0:
            raise ValueError("lr_decay must sit in (0, 1]")

    def policy(self) -> TruncationPolicy:
        if self.mode == "adaptive":
            return TruncationPolicy.adaptive(float(self.tau))
        # the fixed policy's rank field is per-layer state, not global; any
        # fixed policy leaves ranks alone, so the placeholder value is unused
        return TruncationPolicy.fixed(1)

    def integrator(self) -> IntegratorKind:
        return euler(self.lr) if self.optimizer == EULER else adam(self.lr)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay is None:
            return self.lr
        return self.lr * float(self.lr_decay) ** epoch


def _flatten(doc: dict) -> dict:
    flat = {}
    for key, value in doc.items():
        if key in _SECTIONS and isinstance(value, dict):
            mapping = _SECTIONS[key]
            for sub, sub_value in value.items():
                if sub not in mapping:
                    raise ValueError(f"unknown config key {key}.{sub}")
                flat[mapping[sub]] = sub_value
        else:
            flat[key] = value
    return flat


def load_config(path) -> RunConfig:
    doc = yaml.safe_load(Path(path).read_text())
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> RunConfig:
    flat = _flatten(dict(doc))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(flat) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**flat)


def override(config: RunConfig, **kwargs) -> RunConfig:
    """Non-None keyword values replace config fields."""
    changes = {k: v for k, v in kwargs.items() if v is not None}
    return replace(config, **changes) if changes else config


MLP500_WIDTHS = (784, 500, 500, 500, 500, 10)
MLP784_WIDTHS = (784, 784, 784, 784, 784, 10)


def _mlp(widths, mode, ranks, rng):
    """Hidden layers factorized (or dense), always a dense classifier head."""
    layers = []
    n_hidden = len(widths) - 2
    for i in range(n_hidden):
        n_in, n_out = widths[i], widths[i + 1]
        if mode == "dense":
            w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
            layers.append(
                DenseLayer(weight=w, bias=np.zeros(n_out), activation=activations.RELU)
            )
        else:
            rank = min(n_in, n_out) if ranks is None else ranks[i]
            layers.append(
                init_low_rank(n_out, n_in, rank, activations.RELU, rng)
            )
    n_in, n_out = widths[-2], widths[-1]
    w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
    layers.append(
        DenseLayer(weight=w, bias=np.zeros(n_out), activation=activations.SOFTMAX)
    )
    return layers, None


def build_network(config: RunConfig) -> Network:
    """Seeded network for the configured architecture and mode.

    Adaptive runs start at full rank so the truncation rule, not the
    initialization, decides the compression. Fixed runs start at the given
    ranks.
    """
    rng = np.random.default_rng(config.seed)
    ranks = config.fixed_ranks if config.mode == "fixed" else None
    if config.arch == "lenet5":
        if config.mode == "dense":
            layers, input_shape = conv.lenet5_preset(rng, dense=True)
        else:
            use = conv.LENET5_RANKS_FULL if ranks is None else ranks
            if len(use) != 4:
                raise ValueError(f"lenet5 takes 4 ranks, got {len(use)}")
            layers, input_shape = conv.lenet5_preset(rng, ranks=use)
        return Network(layers, input_shape=input_shape)
    widths = MLP500_WIDTHS if config.arch == "mlp500" else MLP784_WIDTHS
    if ranks is not None and len(ranks) != len(widths) - 2:
        raise ValueError(
            f"{config.arch} has {len(widths) - 2} factorized layers, "
            f"got {len(ranks)} ranks"
        )
    layers, input_shape = _mlp(widths, config.mode, ranks, rng)
    return Network(layers, input_shape=input_shape)
