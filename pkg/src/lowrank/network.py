"""Network assembly, forward evaluation, loss/metrics, and the dense
reference backprop.

Activations travel column-wise: a batch of B samples on a layer of width n
is an (n, B) array. Convolutional stacks work on (B, C, H, W) tensors until
a Flatten layer switches back to column layout.

`dense_backprop` differentiates through the *effective* weight of every
layer (materializing u s v' where needed). It is the reference path that the
factor-gradient passes are tested against, and the update rule for the plain
dense baseline; the low-rank training step never calls it.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import activations, conv
from .factorized import LowRankFactors, effective_weight


@dataclass
class DenseLayer:
    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray  # (n_out,)
    activation: str

    def __post_init__(self):
        activations.check_kind(self.activation)
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length does not match weight rows")


@dataclass
class Network:
    layers: list
    input_shape: Optional[tuple] = None  # (C, H, W) when the stack starts conv

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            act = getattr(layer, "activation", None)
            if act == activations.SOFTMAX and i != len(self.layers) - 1:
                raise ValueError("softmax is only permitted on the final layer")

    def low_rank_indices(self):
        return [
            i
            for i, layer in enumerate(self.layers)
            if isinstance(layer, (LowRankFactors, conv.LowRankConv))
        ]


@dataclass
class Batch:
    inputs: np.ndarray  # (n_0, B)
    labels: np.ndarray  # (B,) integer class indices

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("batch wants (n0, B) inputs and (B,) labels")
        if self.inputs.shape[1] != self.labels.shape[0]:
            raise ValueError(
                f"batch size mismatch: {self.inputs.shape[1]} inputs, "
                f"{self.labels.shape[0]} labels"
            )

    @property
    def size(self):
        return self.inputs.shape[1]


@dataclass
class ForwardTape:
    """Per-layer records consumed by backprop; entry layout depends on the
    layer kind (see the *Entry classes below and in conv.py)."""

    entries: list = field(default_factory=list)


@dataclass
class DenseEntry:
    z_prev: np.ndarray  # layer input, (n_in, B)
    a: np.ndarray  # pre-activation, (n_out, B)


def matrix_layer_forward(weight_apply, bias, act, z, record):
    a = weight_apply(z) + bias[:, None]
    out = activations.apply(act, a)
    entry = DenseEntry(z_prev=z, a=a) if record else None
    return out, entry


def to_image_batch(inputs, input_shape):
    c, h, w = input_shape
    b = inputs.shape[1]
    if inputs.shape[0] != c * h * w:
        raise ValueError(
            f"input width {inputs.shape[0]} does not match image shape {input_shape}"
        )
    return np.ascontiguousarray(inputs.T).reshape(b, c, h, w)


def forward(net, batch, record=False):
    """Evaluate the network on a batch.

    Returns (logits, tape). logits are the raw final scores (the softmax tag
    does not normalize here; see cross_entropy_loss). tape is None unless
    record is set.
    """
    if net.input_shape is not None:
        z = to_image_batch(batch.inputs, net.input_shape)
    else:
        z = batch.inputs
    tape = ForwardTape() if record else None
    for layer in net.layers:
        if isinstance(layer, DenseLayer):
            if z.ndim != 2 or layer.weight.shape[1] != z.shape[0]:
                raise ValueError(
                    f"dense layer expects width {layer.weight.shape[1]}, "
                    f"got input of shape {z.shape}"
                )
            w = layer.weight
            z, entry = matrix_layer_forward(
                lambda t: w @ t, layer.bias, layer.activation, z, record
            )
        elif isinstance(layer, LowRankFactors):
            if z.ndim != 2 or layer.n_in != z.shape[0]:
                raise ValueError(
                    f"factorized layer expects width {layer.n_in}, "
                    f"got input of shape {z.shape}"
                )
            u, s, v = layer.u, layer.s, layer.v
            # factored order: project, mix the small core, expand
            z, entry = matrix_layer_forward(
                lambda t: u @ (s @ (v.T @ t)), layer.bias, layer.activation, z, record
            )
        elif isinstance(layer, conv.LowRankConv):
            z, entry = conv.conv_forward(z, layer, record)
        elif isinstance(layer, conv.ConvDense):
            z, entry = conv.conv_dense_forward(z, layer, record)
        elif isinstance(layer, conv.MaxPool):
            z, entry = conv.maxpool_forward(z, record)
        elif isinstance(layer, conv.Flatten):
            z, entry = conv.flatten_forward(z, record)
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
        if record:
            tape.entries.append(entry)
    return z, tape


def softmax_probabilities(logits):
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def check_labels(logits, labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[0]):
        raise ValueError(
            f"label out of range for {logits.shape[0]} classes: "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def cross_entropy_loss(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    logits are pre-softmax scores; the normalization happens here through
    the log-sum-exp form so confident scores cannot overflow.
    """
    labels = check_labels(logits, labels)
    m = logits.max(axis=0)
    lse = m + np.log(np.exp(logits - m).sum(axis=0))
    picked = logits[labels, np.arange(logits.shape[1])]
    return float(np.mean(lse - picked))


def accuracy(logits, labels):
    """Fraction of argmax hits; ties resolve to the lowest index."""
    labels = np.asarray(labels)
    return float(np.mean(np.argmax(logits, axis=0) == labels))


def loss_delta(logits, labels, final_activation):
    """Gradient of the mean cross-entropy w.r.t. the final pre-activation."""
    labels = check_labels(logits, labels)
    p = softmax_probabilities(logits)
    p[labels, np.arange(logits.shape[1])] -= 1.0
    g = p / logits.shape[1]
    if final_activation == activations.RELU:
        # softmax heads are the norm; a relu head still chains correctly
        g = g * activations.derivative(final_activation, logits)
    return g


def dense_backprop(net, tape, labels):
    """Mean-batch gradients of the loss w.r.t. every effective weight/bias.

    Returns a list aligned with net.layers: {'w': ..., 'b': ...} for
    parameterized layers (for factorized layers 'w' is the gradient w.r.t.
    the materialized weight, for conv layers w.r.t. the reshaped kernel),
    None for structural layers.
    """
    if len(tape.entries) != len(net.layers):
        raise ValueError("tape does not match the network")
    grads = [None] * len(net.layers)
    delta = None  # dL/da of the layer being processed
    dz = None  # dL/d(output) propagated to the layer below
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        entry = tape.entries[i]
        if isinstance(layer, (DenseLayer, LowRankFactors)):
            if entry is None or not isinstance(entry, DenseEntry):
                raise ValueError(f"stale tape at layer {i}")
            if i == len(net.layers) - 1:
                delta = loss_delta(entry.a, labels, layer.activation)
            else:
                delta = dz * activations.derivative(layer.activation, entry.a)
            w = (
                layer.weight
                if isinstance(layer, DenseLayer)
                else effective_weight(layer)
            )
            if entry.z_prev.shape[0] != w.shape[1]:
                raise ValueError(f"stale tape at layer {i}")
            grads[i] = {"w": delta @ entry.z_prev.T, "b": delta.sum(axis=1)}
            dz = w.T @ delta
        elif isinstance(layer, conv.LowRankConv):
            is_last = i == len(net.layers) - 1
            dz, grads[i] = conv.conv_backward_dense(layer, entry, dz, labels, is_last)
        elif isinstance(layer, conv.ConvDense):
            if i == len(net.layers) - 1:
                raise ValueError("a convolution cannot be the final layer")
            dz, grads[i] = conv.conv_dense_backward(layer, entry, dz)
        elif isinstance(layer, conv.MaxPool):
            dz = conv.maxpool_backward(entry, dz)
        elif isinstance(layer, conv.Flatten):
            dz = conv.flatten_backward(entry, dz)
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
    return grads
