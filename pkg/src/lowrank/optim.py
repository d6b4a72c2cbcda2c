"""One-step integration of parameter tensors: explicit Euler and Adam.

The training step treats every update as integrating the gradient flow of a
single tensor from 0 to lr. Euler gives plain SGD; Adam keeps bias-corrected
moment state per named tensor. State is keyed by (layer index, factor tag)
and is dropped whenever the keyed tensor changes shape, which happens when a
layer's rank moves.
"""

from dataclasses import dataclass, field

import numpy as np

EULER = "euler"
ADAM = "adam"


@dataclass
class IntegratorKind:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in (EULER, ADAM):
            raise ValueError(f"unknown integrator {self.kind!r}")
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")

    def with_lr(self, lr):
        return IntegratorKind(self.kind, lr, self.beta1, self.beta2, self.eps)


def euler(lr=0.2):
    return IntegratorKind(EULER, lr)


def adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return IntegratorKind(ADAM, lr, beta1, beta2, eps)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class OptimizerStates:
    entries: dict = field(default_factory=dict)

    def fetch(self, key, shape):
        """Return the state for key, resetting it if the shape moved."""
        st = self.entries.get(key)
        if st is None or st.m.shape != shape:
            st = AdamState(m=np.zeros(shape), v=np.zeros(shape))
            self.entries[key] = st
        return st

    def reset(self, key):
        self.entries.pop(key, None)

    def reset_layer(self, layer_index):
        for key in [k for k in self.entries if k[0] == layer_index]:
            del self.entries[key]


def reset_state(states, key):
    states.reset(key)


def one_step_integrate(param, grad, kind, states=None, key=None):
    """One integrator step on a tensor; returns the updated tensor.

    Euler: param - lr * grad. Adam: bias-corrected moment update; the state
    under `key` is mutated. Gradients must be finite.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for parameter {key!r}")
    if kind.kind == EULER:
        return param - kind.lr * grad
    if states is None or key is None:
        raise ValueError("adam needs an OptimizerStates and a key")
    st = states.fetch(key, param.shape)
    st.t += 1
    st.m = kind.beta1 * st.m + (1.0 - kind.beta1) * grad
    st.v = kind.beta2 * st.v + (1.0 - kind.beta2) * grad * grad
    m_hat = st.m / (1.0 - kind.beta1**st.t)
    v_hat = st.v / (1.0 - kind.beta2**st.t)
    return param - kind.lr * m_hat / (np.sqrt(v_hat) + kind.eps)
