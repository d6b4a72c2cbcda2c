"""The factorized training step.

One step runs four taped passes over the same minibatch:

  1. K pass: each factorized layer acts as K (v' z) with K = u s held as one
     matrix; the pass returns dL/dK for every such layer at once.
  2. L pass: same idea transposed, W = u L' with L = v s'.
  3. S pass: after the bases are refreshed (and augmented, when adaptive),
     the core s is integrated from dL/dS; plain dense layers take their
     weight/bias update from this pass.
  4. Bias pass: evaluated at the new, possibly truncated factors, matching
     the update order of the underlying scheme.

Gradients come from hand-taped backward sweeps in each parameterization;
the identities dK = (dW) v, dL = (dW)' u, dS = u' (dW) v tie them to the
dense reference gradients and are pinned by the test suite.
"""

from dataclasses import dataclass, field

import numpy as np

from . import activations, conv
from .factorized import (
    LowRankFactors,
    basis_update,
    project_core,
    truncate,
)
from .network import (
    DenseLayer,
    accuracy,
    cross_entropy_loss,
    loss_delta,
    to_image_batch,
)
from .optim import one_step_integrate

PHASE_K = "k"
PHASE_L = "l"
PHASE_S = "s"


def factors_of(layer):
    if isinstance(layer, LowRankFactors):
        return layer
    if isinstance(layer, conv.LowRankConv):
        return layer.factors
    return None


@dataclass
class PhaseResult:
    loss: float
    logits: np.ndarray
    grads: list  # aligned with net.layers; dict per layer or None


def phase_matrix(f, phase, override):
    """The tensor the phase differentiates: K = u s, L = v s', or s itself."""
    if override is not None:
        return override
    if phase == PHASE_K:
        return f.u @ f.s
    if phase == PHASE_L:
        return f.v @ f.s.T
    return f.s


def phase_pass(net, batch, phase, overrides=None, want_grads=True):
    """Forward + backward in the given factor parameterization.

    overrides maps layer index -> replacement phase matrix, which is what
    lets finite differences probe the loss as a function of K, L, or S
    directly. Returns a PhaseResult whose grads contain, per low-rank layer,
    {phase: dPhaseMatrix, 'bias': dbias}, and per dense layer {'w','b'}.
    """
    if phase not in (PHASE_K, PHASE_L, PHASE_S):
        raise ValueError(f"unknown phase {phase!r}")
    overrides = overrides or {}
    z = (
        to_image_batch(batch.inputs, net.input_shape)
        if net.input_shape is not None
        else batch.inputs
    )
    records = []
    for i, layer in enumerate(net.layers):
        f = factors_of(layer)
        if isinstance(layer, DenseLayer):
            a = layer.weight @ z + layer.bias[:, None]
            rec = ("dense", z, a)
        elif isinstance(layer, LowRankFactors):
            mat = phase_matrix(f, phase, overrides.get(i))
            if phase == PHASE_K:
                vz = f.v.T @ z
                a = mat @ vz + f.bias[:, None]
                rec = ("lr", z, a, vz, mat)
            elif phase == PHASE_L:
                a = f.u @ (mat.T @ z) + f.bias[:, None]
                rec = ("lr", z, a, None, mat)
            else:
                vz = f.v.T @ z
                a = f.u @ (mat @ vz) + f.bias[:, None]
                rec = ("lr", z, a, vz, mat)
        elif isinstance(layer, conv.LowRankConv):
            mat = phase_matrix(f, phase, overrides.get(i))
            z_unf = conv.unfold(z, layer.shape)
            if phase == PHASE_K:
                vz = conv.contract(f.v.T, z_unf)
                a = conv.contract(mat, vz) + f.bias[None, :, None]
            elif phase == PHASE_L:
                a = conv.contract(f.u, conv.contract(mat.T, z_unf))
                a = a + f.bias[None, :, None]
                vz = None
            else:
                vz = conv.contract(f.v.T, z_unf)
                a = conv.contract(f.u, conv.contract(mat, vz)) + f.bias[None, :, None]
            rec = ("conv", z_unf, a, vz, mat, layer.shape, z.shape[0])
        elif isinstance(layer, conv.ConvDense):
            z_unf = conv.unfold(z, layer.shape)
            a = conv.contract(layer.weight, z_unf) + layer.bias[None, :, None]
            rec = ("conv_dense", z_unf, a, layer.shape, z.shape[0])
        elif isinstance(layer, conv.MaxPool):
            out, entry = conv.maxpool_forward(z, record=True)
            records.append(("pool", entry))
            z = out
            continue
        elif isinstance(layer, conv.Flatten):
            out, entry = conv.flatten_forward(z, record=True)
            records.append(("flatten", entry))
            z = out
            continue
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
        records.append(rec)
        act = layer.activation
        if rec[0] in ("conv", "conv_dense"):
            b = z.shape[0]
            z = activations.apply(act, a).reshape(
                b, layer.shape.filters, layer.shape.out_h, layer.shape.out_w
            )
        else:
            z = activations.apply(act, a)

    logits = z
    loss = cross_entropy_loss(logits, batch.labels)
    if not want_grads:
        return PhaseResult(loss=loss, logits=logits, grads=[])

    grads = [None] * len(net.layers)
    dz = None
    n_layers = len(net.layers)
    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        rec = records[i]
        kind = rec[0]
        if kind in ("dense", "lr"):
            a = rec[2]
            if i == n_layers - 1:
                g = loss_delta(a, batch.labels, layer.activation)
            else:
                g = dz * activations.derivative(layer.activation, a)
            if kind == "dense":
                _, z_prev, _ = rec
                grads[i] = {"w": g @ z_prev.T, "b": g.sum(axis=1)}
                dz = layer.weight.T @ g
            else:
                _, z_prev, _, vz, mat = rec
                f = factors_of(layer)
                if phase == PHASE_K:
                    grads[i] = {PHASE_K: g @ vz.T, "bias": g.sum(axis=1)}
                    dz = f.v @ (mat.T @ g)
                elif phase == PHASE_L:
                    grads[i] = {PHASE_L: z_prev @ (g.T @ f.u), "bias": g.sum(axis=1)}
                    dz = mat @ (f.u.T @ g)
                else:
                    ug = f.u.T @ g
                    grads[i] = {PHASE_S: ug @ vz.T, "bias": g.sum(axis=1)}
                    dz = f.v @ (mat.T @ ug)
        elif kind in ("conv", "conv_dense"):
            if i == n_layers - 1:
                raise ValueError("a convolution cannot be the final layer")
            if kind == "conv":
                _, z_unf, a, vz, mat, shape, bsz = rec
            else:
                _, z_unf, a, shape, bsz = rec
            g = dz.reshape(bsz, shape.filters, shape.n_locations)
            g = g * activations.derivative(layer.activation, a)
            if kind == "conv_dense":
                grads[i] = {
                    "w": np.einsum("bfl,bcl->fc", g, z_unf, optimize=True),
                    "b": g.sum(axis=(0, 2)),
                }
                dz_unf = conv.contract(layer.weight.T, g)
            else:
                f = factors_of(layer)
                if phase == PHASE_K:
                    grads[i] = {
                        PHASE_K: np.einsum("bfl,brl->fr", g, vz, optimize=True),
                        "bias": g.sum(axis=(0, 2)),
                    }
                    dz_unf = conv.contract(f.v, conv.contract(mat.T, g))
                elif phase == PHASE_L:
                    ug = conv.contract(f.u.T, g)
                    grads[i] = {
                        PHASE_L: np.einsum("bcl,brl->cr", z_unf, ug, optimize=True),
                        "bias": g.sum(axis=(0, 2)),
                    }
                    dz_unf = conv.contract(mat, ug)
                else:
                    ug = conv.contract(f.u.T, g)
                    grads[i] = {
                        PHASE_S: np.einsum("bul,bvl->uv", ug, vz, optimize=True),
                        "bias": g.sum(axis=(0, 2)),
                    }
                    dz_unf = conv.contract(f.v, conv.contract(mat.T, ug))
            dz = conv.fold(dz_unf, shape, bsz)
        elif kind == "pool":
            dz = conv.maxpool_backward(rec[1], dz)
        elif kind == "flatten":
            dz = conv.flatten_backward(rec[1], dz)
    return PhaseResult(loss=loss, logits=logits, grads=grads)


def phase_loss(net, batch, phase, layer_index=None, matrix=None):
    """Loss of the phase-parameterized forward; for derivative checks."""
    overrides = {layer_index: matrix} if layer_index is not None else None
    return phase_pass(net, batch, phase, overrides, want_grads=False).loss


def k_gradients(net, batch):
    return phase_pass(net, batch, PHASE_K).grads


def l_gradients(net, batch):
    return phase_pass(net, batch, PHASE_L).grads


def s_gradients(net, batch):
    return phase_pass(net, batch, PHASE_S).grads


@dataclass
class StepInfo:
    loss: float
    accuracy: float
    ranks: list = field(default_factory=list)


def dlrt_step(net, batch, policy, integrator, states, audit_hook=None):
    """One full training step over all layers, in place.

    Factorized layers run the K/L integrations, the basis refresh (with
    augmentation when the policy adapts and the layer's rank is not pinned),
    the core integration, the truncation, and the bias update at the final
    factors. Dense layers integrate their plain gradients from the S pass.
    Returns pre-update loss/accuracy and the post-update ranks.
    """
    lr_idx = net.low_rank_indices()
    kres = phase_pass(net, batch, PHASE_K)
    lres = phase_pass(net, batch, PHASE_L)
    staged = {}
    for i in lr_idx:
        f = factors_of(net.layers[i])
        adaptive_here = policy.is_adaptive and not f.rank_fixed
        k_old = f.u @ f.s
        l_old = f.v @ f.s.T
        k_new = one_step_integrate(
            k_old, kres.grads[i][PHASE_K], integrator, states, (i, "k")
        )
        l_new = one_step_integrate(
            l_old, lres.grads[i][PHASE_L], integrator, states, (i, "l")
        )
        u_new, v_new, m, n = basis_update(f, k_new, l_new, adaptive_here)
        s_tilde = project_core(f.s, m, n)
        if audit_hook is not None:
            audit_hook(i, f.u, f.s, f.v, u_new, s_tilde, v_new, adaptive_here)
        staged[i] = (f.u.shape[1], adaptive_here)
        f.u, f.v, f.s = u_new, v_new, s_tilde
    sres = phase_pass(net, batch, PHASE_S)
    for i, layer in enumerate(net.layers):
        if i in staged:
            f = factors_of(layer)
            old_rank, adaptive_here = staged[i]
            s_new = one_step_integrate(
                f.s, sres.grads[i][PHASE_S], integrator, states, (i, "s")
            )
            if adaptive_here:
                u_t, s_t, v_t, r = truncate(
                    s_new, f.u, f.v, policy, f.r_min, f.r_max
                )
                if r != old_rank:
                    for tag in ("k", "l", "s"):
                        states.reset((i, tag))
                f.u, f.s, f.v, f.rank = u_t, s_t, v_t, r
            else:
                f.s = s_new
        elif isinstance(layer, DenseLayer):
            layer.weight = one_step_integrate(
                layer.weight, sres.grads[i]["w"], integrator, states, (i, "w")
            )
            layer.bias = one_step_integrate(
                layer.bias, sres.grads[i]["b"], integrator, states, (i, "b")
            )
        elif isinstance(layer, conv.ConvDense):
            layer.inner.weight = one_step_integrate(
                layer.inner.weight, sres.grads[i]["w"], integrator, states, (i, "w")
            )
            layer.inner.bias = one_step_integrate(
                layer.inner.bias, sres.grads[i]["b"], integrator, states, (i, "b")
            )
    bres = phase_pass(net, batch, PHASE_S)
    for i in lr_idx:
        f = factors_of(net.layers[i])
        f.bias = one_step_integrate(
            f.bias, bres.grads[i]["bias"], integrator, states, (i, "bias")
        )
    return StepInfo(
        loss=kres.loss,
        accuracy=accuracy(kres.logits, batch.labels),
        ranks=[factors_of(net.layers[i]).rank for i in lr_idx],
    )


def dense_step(net, batch, integrator, states):
    """Plain gradient-descent step for the unfactorized baseline."""
    from .network import dense_backprop, forward

    logits, tape = forward(net, batch, record=True)
    grads = dense_backprop(net, tape, batch.labels)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, DenseLayer):
            target = layer
        elif isinstance(layer, conv.ConvDense):
            target = layer.inner
        elif grads[i] is None:
            continue
        else:
            raise ValueError("dense_step only updates unfactorized layers")
        target.weight = one_step_integrate(
            target.weight, grads[i]["w"], integrator, states, (i, "w")
        )
        target.bias = one_step_integrate(
            target.bias, grads[i]["b"], integrator, states, (i, "b")
        )
    return StepInfo(
        loss=cross_entropy_loss(logits, batch.labels),
        accuracy=accuracy(logits, batch.labels),
    )


@dataclass
class ParameterReport:
    eval_params: int
    train_params: int
    full_params: int
    per_layer: list

    @property
    def eval_compression(self):
        return 1.0 - self.eval_params / self.full_params

    @property
    def train_compression(self):
        return 1.0 - self.train_params / self.full_params


def parameter_counts(net):
    """Weight-only parameter accounting (biases excluded).

    A dense layer holds n_out * n_in either way. A factorized layer stores
    r (n_in + n_out) at evaluation time and, while training,
    2 r (n_in + n_out) + 4 r^2 to cover the augmented bases and core.
    Compression ratios compare against the dense twin.
    """
    eval_p = 0
    train_p = 0
    full_p = 0
    rows = []
    for i, layer in enumerate(net.layers):
        f = factors_of(layer)
        if f is not None:
            n_in, n_out, r = f.n_in, f.n_out, f.rank
            e = r * (n_in + n_out)
            t = 2 * r * (n_in + n_out) + 4 * r * r
            full = n_out * n_in
        elif isinstance(layer, DenseLayer):
            full = layer.weight.shape[0] * layer.weight.shape[1]
            e = t = full
            r = min(layer.weight.shape)
        elif isinstance(layer, conv.ConvDense):
            full = layer.inner.weight.shape[0] * layer.inner.weight.shape[1]
            e = t = full
            r = min(layer.inner.weight.shape)
        else:
            continue
        eval_p += e
        train_p += t
        full_p += full
        rows.append(
            {"layer": i, "rank": r, "eval": e, "train": t, "full": full}
        )
    return ParameterReport(
        eval_params=eval_p, train_params=train_p, full_params=full_p, per_layer=rows
    )
