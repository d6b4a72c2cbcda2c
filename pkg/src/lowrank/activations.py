"""Activation tags shared by dense, factorized, and convolutional layers."""

import numpy as np

RELU = "relu"
SOFTMAX = "softmax"
IDENTITY = "identity"

VALID = frozenset({RELU, SOFTMAX, IDENTITY})


def check_kind(kind):
    if kind not in VALID:
        raise ValueError(f"unknown activation {kind!r}")
    return kind


def apply(kind, a):
    """Apply the activation to pre-activation values.

    The softmax tag marks the classification head: the forward pass emits the
    raw scores and the normalization is fused into the cross-entropy loss, so
    here softmax behaves like identity.
    """
    if kind == RELU:
        return np.maximum(a, 0.0)
    if kind in (SOFTMAX, IDENTITY):
        return a
    raise ValueError(f"unknown activation {kind!r}")


def derivative(kind, a):
    """Entrywise derivative evaluated at the pre-activation values.

    relu'(0) is defined as 0. For softmax the returned ones are correct
    because the loss gradient is taken with respect to the raw scores.
    """
    if kind == RELU:
        return (a > 0.0).astype(np.float64)
    if kind in (SOFTMAX, IDENTITY):
        return np.ones_like(a)
    raise ValueError(f"unknown activation {kind!r}")
