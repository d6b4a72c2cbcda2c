"""Convolution as a matrix contraction on unfolded patches.

A kernel tensor (F, C, J, K) is held as its reshaped (F, C*J*K) matrix in
factorized form, and the image batch is unfolded so that convolution becomes
u @ (s @ (v.T @ patches)) per sample, never materializing the kernel. The
orientation is cross-correlation (no kernel flip), matching the direct
oracle used in the tests.
"""

from dataclasses import dataclass

import numpy as np

from . import activations
from .factorized import LowRankFactors, effective_weight, init_low_rank


@dataclass
class ConvShape:
    filters: int
    channels: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    in_h: int
    in_w: int

    def __post_init__(self):
        for name in ("filters", "channels", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        for span, kern in ((self.in_h, self.kernel_h), (self.in_w, self.kernel_w)):
            if (span + 2 * self.padding - kern) % self.stride != 0:
                raise ValueError(
                    f"stride {self.stride} does not tile input {span} "
                    f"with kernel {kern} and padding {self.padding}"
                )
            if span + 2 * self.padding < kern:
                raise ValueError("kernel larger than padded input")

    @property
    def out_h(self):
        return (self.in_h + 2 * self.padding - self.kernel_h) // self.stride + 1

    @property
    def out_w(self):
        return (self.in_w + 2 * self.padding - self.kernel_w) // self.stride + 1

    @property
    def patch_len(self):
        return self.channels * self.kernel_h * self.kernel_w

    @property
    def n_locations(self):
        return self.out_h * self.out_w


@dataclass
class LowRankConv:
    """Factorized convolution: factors act on the reshaped kernel matrix,
    n_out = filters, n_in = C*J*K. The factor bias is the per-filter bias."""

    shape: ConvShape
    factors: LowRankFactors

    def __post_init__(self):
        if self.factors.n_out != self.shape.filters:
            raise ValueError("factor rows do not match filter count")
        if self.factors.n_in != self.shape.patch_len:
            raise ValueError("factor columns do not match patch length")

    @property
    def activation(self):
        return self.factors.activation

    @property
    def bias(self):
        return self.factors.bias


@dataclass
class MaxPool:
    """2x2 max pooling with stride 2; spatial dims must be even."""


@dataclass
class Flatten:
    """(B, C, H, W) -> (C*H*W, B) transition into the dense stack."""


def unfold(z, shape):
    """Stack sliding kernel patches into columns.

    z: (B, C, U, V) -> (B, C*J*K, L) with L = out_h * out_w. Patch entries
    are ordered channel-major, then kernel row, then kernel column, matching
    kernel.reshape(F, C*J*K).
    """
    b, c, u, v = z.shape
    if c != shape.channels or u != shape.in_h or v != shape.in_w:
        raise ValueError(f"image batch {z.shape} does not match {shape}")
    p = shape.padding
    if p:
        zp = np.zeros((b, c, u + 2 * p, v + 2 * p))
        zp[:, :, p : p + u, p : p + v] = z
    else:
        zp = z
    win = np.lib.stride_tricks.sliding_window_view(
        zp, (shape.kernel_h, shape.kernel_w), axis=(2, 3)
    )
    win = win[:, :, :: shape.stride, :: shape.stride]  # (B, C, U', V', J, K)
    win = win.transpose(0, 1, 4, 5, 2, 3)  # (B, C, J, K, U', V')
    return np.ascontiguousarray(win).reshape(b, shape.patch_len, shape.n_locations)


def fold(g, shape, batch_size):
    """Adjoint of unfold: scatter-add patch columns back onto the image.

    g: (B, C*J*K, L) -> (B, C, U, V). Overlapping patch positions accumulate,
    which is exactly the input-gradient of the unfolding.
    """
    p = shape.padding
    hp = shape.in_h + 2 * p
    wp = shape.in_w + 2 * p
    buf = np.zeros((batch_size, shape.channels, hp, wp))
    g6 = g.reshape(
        batch_size,
        shape.channels,
        shape.kernel_h,
        shape.kernel_w,
        shape.out_h,
        shape.out_w,
    )
    s = shape.stride
    for j in range(shape.kernel_h):
        for k in range(shape.kernel_w):
            buf[
                :,
                :,
                j : j + s * shape.out_h : s,
                k : k + s * shape.out_w : s,
            ] += g6[:, :, j, k]
    if p:
        return buf[:, :, p : p + shape.in_h, p : p + shape.in_w]
    return buf


def contract(mat, patches):
    """(rows, cols) x (B, cols, L) -> (B, rows, L)."""
    return np.einsum("rc,bcl->brl", mat, patches, optimize=True)


@dataclass
class ConvEntry:
    z_unf: np.ndarray  # (B, CJK, L)
    a: np.ndarray  # pre-activation, (B, F, L)
    vz: np.ndarray = None  # (B, r, L) cache for the core phases


def conv_forward(z, layer, record=False):
    """Factored convolution: out = u (s (v' patches)) + bias, then activation."""
    if z.ndim != 4:
        raise ValueError(f"conv layer expects (B, C, H, W), got shape {z.shape}")
    shape = layer.shape
    f = layer.factors
    z_unf = unfold(z, shape)
    vz = contract(f.v.T, z_unf)
    a = contract(f.u, contract(f.s, vz)) + f.bias[None, :, None]
    out = activations.apply(f.activation, a)
    out = out.reshape(z.shape[0], shape.filters, shape.out_h, shape.out_w)
    entry = ConvEntry(z_unf=z_unf, a=a, vz=vz) if record else None
    return out, entry


def conv_backward_dense(layer, entry, dz, labels, is_last):
    """Reference-path gradients w.r.t. the reshaped kernel and the input.

    dz is the loss gradient w.r.t. this layer's (B, F, U', V') output.
    Returns (dz_input, {'w': dW_resh, 'b': dbias}).
    """
    if is_last:
        raise ValueError("a convolution cannot be the final layer")
    if entry is None:
        raise ValueError("stale tape for conv layer")
    shape = layer.shape
    b = entry.z_unf.shape[0]
    g = dz.reshape(b, shape.filters, shape.n_locations)
    g = g * activations.derivative(layer.activation, entry.a)
    w = effective_weight(layer.factors)  # fine here: this is the oracle path
    dw = np.einsum("bfl,bcl->fc", g, entry.z_unf, optimize=True)
    db = g.sum(axis=(0, 2))
    dz_unf = contract(w.T, g)
    return fold(dz_unf, shape, b), {"w": dw, "b": db}


def maxpool_forward(z, record=False):
    if z.ndim != 4:
        raise ValueError(f"pooling expects (B, C, H, W), got shape {z.shape}")
    b, c, h, w = z.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
    tiles = z.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(tiles).reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(flat, axis=-1)  # first maximum wins ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    entry = (idx, z.shape) if record else None
    return out, entry


def maxpool_backward(entry, dz):
    idx, in_shape = entry
    b, c, h, w = in_shape
    buf = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(buf, idx[..., None], dz[..., None], axis=-1)
    buf = buf.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(buf).reshape(b, c, h, w)


def flatten_forward(z, record=False):
    if z.ndim != 4:
        raise ValueError(f"flatten expects (B, C, H, W), got shape {z.shape}")
    b = z.shape[0]
    out = z.reshape(b, -1).T
    entry = z.shape if record else None
    return out, entry


def flatten_backward(entry, dz):
    return np.ascontiguousarray(dz.T).reshape(entry)


LENET5_RANKS_FULL = (20, 50, 500, 10)


def lenet5_preset(rng=None, ranks=None, dense=False):
    """The 28x28 grayscale stack: 20@5x5 conv, pool, 50@5x5 conv, pool,
    800->500 relu, 500->10 head.

    Padding 0 on both convs, so the spatial dims run 28->24->12->8->4 and the
    flatten hands 50*4*4 = 800 features to the first dense layer. With
    dense=True every parameterized layer is a plain DenseLayer (the
    full-rank reference). Otherwise conv1, conv2 and the 800->500 layer are
    factorized at `ranks` (defaults: half the full rank, rounded up) and the
    head is a factorized layer pinned at rank 10, which at width 10 is
    functionally dense.

    Returns (layers, input_shape).
    """
    from .network import DenseLayer  # local import, network.py imports us

    shape1 = ConvShape(20, 1, 5, 5, stride=1, padding=0, in_h=28, in_w=28)
    shape2 = ConvShape(50, 20, 5, 5, stride=1, padding=0, in_h=12, in_w=12)
    if rng is None:
        rng = np.random.default_rng(0)
    if dense:
        def dense_init(n_out, n_in, act):
            w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
            return DenseLayer(weight=w, bias=np.zeros(n_out), activation=act)

        layers = [
            ConvDense(shape1, dense_init(20, 25, activations.RELU)),
            MaxPool(),
            ConvDense(shape2, dense_init(50, 500, activations.RELU)),
            MaxPool(),
            Flatten(),
            dense_init(500, 800, activations.RELU),
            dense_init(10, 500, activations.SOFTMAX),
        ]
        return layers, (1, 28, 28)
    if ranks is None:
        ranks = (10, 25, 250, 10)
    r1, r2, r3, r4 = ranks
    layers = [
        LowRankConv(shape1, init_low_rank(20, 25, r1, activations.RELU, rng)),
        MaxPool(),
        LowRankConv(shape2, init_low_rank(50, 500, r2, activations.RELU, rng)),
        MaxPool(),
        Flatten(),
        init_low_rank(500, 800, r3, activations.RELU, rng),
        init_low_rank(10, 500, r4, activations.SOFTMAX, rng, rank_fixed=True),
    ]
    return layers, (1, 28, 28)


@dataclass
class ConvDense:
    """Plain (unfactorized) convolution for the dense reference stack; the
    kernel lives as the reshaped (F, C*J*K) matrix of an inner DenseLayer."""

    shape: ConvShape
    inner: "object"  # DenseLayer

    @property
    def activation(self):
        return self.inner.activation

    @property
    def weight(self):
        return self.inner.weight

    @property
    def bias(self):
        return self.inner.bias


def conv_dense_forward(z, layer, record=False):
    shape = layer.shape
    z_unf = unfold(z, shape)
    a = contract(layer.weight, z_unf) + layer.bias[None, :, None]
    out = activations.apply(layer.activation, a)
    out = out.reshape(z.shape[0], shape.filters, shape.out_h, shape.out_w)
    entry = ConvEntry(z_unf=z_unf, a=a) if record else None
    return out, entry


def conv_dense_backward(layer, entry, dz):
    shape = layer.shape
    b = entry.z_unf.shape[0]
    g = dz.reshape(b, shape.filters, shape.n_locations)
    g = g * activations.derivative(layer.activation, entry.a)
    dw = np.einsum("bfl,bcl->fc", g, entry.z_unf, optimize=True)
    db = g.sum(axis=(0, 2))
    dz_unf = contract(layer.weight.T, g)
    return fold(dz_unf, shape, b), {"w": dw, "b": db}
