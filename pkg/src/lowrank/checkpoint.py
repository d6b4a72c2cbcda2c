"""Checkpoint serialization: a JSON manifest plus one raw tensor blob per
array.

Blobs are little-endian IEEE-754 float64, row-major, so a round trip is
bit-exact and any tool can diff or load them. The manifest records the
architecture, per-layer ranks, seed, epoch, metrics, and a sha256 per blob.

Two kinds exist: "train" keeps the full factor set (u, s, v, bias) per
factorized layer; "deploy" keeps only the product u @ s and v, which is all
evaluation needs. A deploy checkpoint loads back as a network whose core is
the identity, so the forward path is unchanged and the logits are bit-equal
to two thin products.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import conv
from .factorized import LowRankFactors
from .network import DenseLayer, Network

FORMAT = "lowrank-checkpoint/1"
TRAIN = "train"
DEPLOY = "deploy"

MANIFEST = "manifest.json"


class CheckpointError(ValueError):
    pass


def _shape_dict(shape: conv.ConvShape) -> dict:
    return {
        "filters": shape.filters,
        "channels": shape.channels,
        "kernel_h": shape.kernel_h,
        "kernel_w": shape.kernel_w,
        "stride": shape.stride,
        "padding": shape.padding,
        "in_h": shape.in_h,
        "in_w": shape.in_w,
    }


def _factor_entry(f: LowRankFactors) -> dict:
    return {
        "activation": f.activation,
        "rank": int(f.rank),
        "rank_fixed": bool(f.rank_fixed),
        "r_min": int(f.r_min),
        "r_max": int(f.r_max),
        "n_out": int(f.n_out),
        "n_in": int(f.n_in),
    }


def describe_network(net: Network) -> dict:
    """JSON-ready architecture block, enough to rebuild the layer skeleton."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, DenseLayer):
            layers.append(
                {
                    "kind": "dense",
                    "activation": layer.activation,
                    "n_out": int(layer.weight.shape[0]),
                    "n_in": int(layer.weight.shape[1]),
                }
            )
        elif isinstance(layer, LowRankFactors):
            layers.append({"kind": "low_rank", **_factor_entry(layer)})
        elif isinstance(layer, conv.LowRankConv):
            layers.append(
                {
                    "kind": "conv",
                    "shape": _shape_dict(layer.shape),
                    **_factor_entry(layer.factors),
                }
            )
        elif isinstance(layer, conv.ConvDense):
            layers.append(
                {
                    "kind": "conv_dense",
                    "shape": _shape_dict(layer.shape),
                    "activation": layer.activation,
                }
            )
        elif isinstance(layer, conv.MaxPool):
            layers.append({"kind": "maxpool"})
        elif isinstance(layer, conv.Flatten):
            layers.append({"kind": "flatten"})
        else:
            raise CheckpointError(f"cannot describe layer {type(layer).__name__}")
    return {
        "layers": layers,
        "input_shape": list(net.input_shape) if net.input_shape else None,
    }


def _layer_tensors(layer, kind):
    """(role, array) pairs to persist for one layer; [] for markers."""
    if isinstance(layer, DenseLayer):
        return [("w", layer.weight), ("bias", layer.bias)]
    if isinstance(layer, conv.ConvDense):
        return [("w", layer.inner.weight), ("bias", layer.inner.bias)]
    f = None
    if isinstance(layer, LowRankFactors):
        f = layer
    elif isinstance(layer, conv.LowRankConv):
        f = layer.factors
    if f is None:
        return []
    if kind == DEPLOY:
        return [("us", f.u @ f.s), ("v", f.v), ("bias", f.bias)]
    return [("u", f.u), ("s", f.s), ("v", f.v), ("bias", f.bias)]


def _blob_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(
    directory, net: Network, *, seed: int, epoch: int, metrics: dict = None,
    kind: str = TRAIN, dataset: str = None,
) -> Path:
    """Write manifest + blobs under `directory`; returns the manifest path."""
    if kind not in (TRAIN, DEPLOY):
        raise CheckpointError(f"kind must be {TRAIN!r} or {DEPLOY!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for i, layer in enumerate(net.layers):
        for role, arr in _layer_tensors(layer, kind):
            data = _blob_bytes(arr)
            name = f"layer{i}_{role}.bin"
            (directory / name).write_bytes(data)
            tensors.append(
                {
                    "layer": i,
                    "role": role,
                    "file": name,
                    "shape": list(arr.shape),
                    "dtype": "float64-le",
                    "order": "C",
                    "sha256": hashlib.sha256(data).hexdigest(),
                }
            )
    ranks = [
        int(net.layers[i].rank)
        if isinstance(net.layers[i], LowRankFactors)
        else int(net.layers[i].factors.rank)
        for i in net.low_rank_indices()
    ]
    manifest = {
        "format": FORMAT,
        "kind": kind,
        "seed": int(seed),
        "epoch": int(epoch),
        "dataset": dataset,
        "metrics": metrics or {},
        "ranks": ranks,
        "architecture": describe_network(net),
        "tensors": tensors,
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _read_blob(directory: Path, entry: dict) -> np.ndarray:
    path = directory / entry["file"]
    if not path.exists():
        raise CheckpointError(f"missing blob {entry['file']}")
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    if digest != entry["sha256"]:
        raise CheckpointError(f"checksum mismatch for {entry['file']}")
    arr = np.frombuffer(data, dtype="<f8").astype(np.float64, copy=True)
    want = tuple(entry["shape"])
    if arr.size != int(np.prod(want, dtype=np.int64)):
        raise CheckpointError(
            f"{entry['file']}: {arr.size} values do not fill shape {want}"
        )
    return arr.reshape(want)


def _rebuild_factors(spec: dict, grab, kind: str) -> LowRankFactors:
    rank = spec["rank"]
    if kind == DEPLOY:
        return LowRankFactors(
            u=grab("us"),
            s=np.eye(rank),
            v=grab("v"),
            bias=grab("bias"),
            activation=spec["activation"],
            rank=rank,
            r_min=spec["r_min"],
            r_max=spec["r_max"],
            rank_fixed=spec["rank_fixed"],
        )
    return LowRankFactors(
        u=grab("u"),
        s=grab("s"),
        v=grab("v"),
        bias=grab("bias"),
        activation=spec["activation"],
        rank=rank,
        r_min=spec["r_min"],
        r_max=spec["r_max"],
        rank_fixed=spec["rank_fixed"],
    )


@dataclass
class Checkpoint:
    net: Network
    manifest: dict

    @property
    def kind(self):
        return self.manifest["kind"]

    @property
    def epoch(self):
        return self.manifest["epoch"]

    @property
    def seed(self):
        return self.manifest["seed"]


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise CheckpointError(f"no {MANIFEST} in {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    kind = manifest["kind"]
    by_layer = {}
    for entry in manifest["tensors"]:
        by_layer.setdefault(entry["layer"], {})[entry["role"]] = entry

    layers = []
    for i, spec in enumerate(manifest["architecture"]["layers"]):
        def grab(role, i=i):
            entry = by_layer.get(i, {}).get(role)
            if entry is None:
                raise CheckpointError(f"layer {i} is missing its {role!r} blob")
            return _read_blob(directory, entry)

        layer_kind = spec["kind"]
        if layer_kind == "dense":
            layers.append(
                DenseLayer(
                    weight=grab("w"), bias=grab("bias"), activation=spec["activation"]
                )
            )
        elif layer_kind == "low_rank":
            layers.append(_rebuild_factors(spec, grab, kind))
        elif layer_kind == "conv":
            layers.append(
                conv.LowRankConv(
                    conv.ConvShape(**spec["shape"]),
                    _rebuild_factors(spec, grab, kind),
                )
            )
        elif layer_kind == "conv_dense":
            layers.append(
                conv.ConvDense(
                    conv.ConvShape(**spec["shape"]),
                    DenseLayer(
                        weight=grab("w"),
                        bias=grab("bias"),
                        activation=spec["activation"],
                    ),
                )
            )
        elif layer_kind == "maxpool":
            layers.append(conv.MaxPool())
        elif layer_kind == "flatten":
            layers.append(conv.Flatten())
        else:
            raise CheckpointError(f"unknown layer kind {layer_kind!r}")
    input_shape = manifest["architecture"]["input_shape"]
    net = Network(layers, input_shape=tuple(input_shape) if input_shape else None)
    return Checkpoint(net=net, manifest=manifest)
