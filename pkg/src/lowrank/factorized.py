"""Low-rank layer state: U s V' factors plus the basis and core updates.

A factorized layer keeps its weight as u @ s @ v.T with orthonormal u and v.
The operations here implement the per-step basis refresh (with optional
augmentation by the previous bases) and the singular-value truncation that
adapts the rank.
"""

from dataclasses import dataclass, field

import numpy as np

from . import activations
from .linalg import frobenius_norm, orthonormal_range, svd_small


@dataclass
class TruncationPolicy:
    """Either adaptive(tau) or fixed(rank).

    Adaptive mode truncates the singular values of the updated core so the
    discarded tail has two-norm at most tau times the Frobenius norm of the
    whole spectrum. Fixed mode never changes ranks during stepping.
    """

    mode: str
    tau: float = 0.0
    rank: int = 0

    @classmethod
    def adaptive(cls, tau):
        if not (0.0 < tau < 1.0):
            raise ValueError(f"tau must lie in (0, 1), got {tau}")
        return cls(mode="adaptive", tau=float(tau))

    @classmethod
    def fixed(cls, rank):
        if rank < 1:
            raise ValueError(f"fixed rank must be >= 1, got {rank}")
        return cls(mode="fixed", rank=int(rank))

    @property
    def is_adaptive(self):
        return self.mode == "adaptive"


@dataclass
class LowRankFactors:
    """State of one factorized dense layer.

    u : (n_out, r) orthonormal columns
    s : (r, r) core (diagonal right after a truncation, dense otherwise)
    v : (n_in, r) orthonormal columns
    rank_fixed layers keep their rank even when the surrounding policy is
    adaptive; the classifier head of the convolutional preset uses this.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    bias: np.ndarray
    activation: str
    rank: int
    r_min: int = 2
    r_max: int = field(default=0)
    rank_fixed: bool = False

    def __post_init__(self):
        activations.check_kind(self.activation)
        if self.r_max <= 0:
            self.r_max = min(self.n_in, self.n_out)
        if not (1 <= self.rank <= self.r_max):
            raise ValueError(f"rank {self.rank} outside [1, {self.r_max}]")

    @property
    def n_out(self):
        return self.u.shape[0]

    @property
    def n_in(self):
        return self.v.shape[0]


def init_low_rank(n_out, n_in, rank, activation, rng, rank_fixed=False, r_min=2):
    """Seeded random factors: orthonormalized Gaussian bases, scaled core.

    The core is scaled by sqrt(2 / n_in) so the effective weight matches the
    usual fan-in heuristic for relu stacks; biases start at zero.
    """
    rank = int(rank)
    if not 1 <= rank <= min(n_out, n_in):
        raise ValueError(
            f"rank {rank} outside [1, {min(n_out, n_in)}] for a "
            f"{n_out}x{n_in} layer"
        )
    u = orthonormal_range(rng.standard_normal((n_out, rank)))
    v = orthonormal_range(rng.standard_normal((n_in, rank)))
    s = rng.standard_normal((rank, rank)) * np.sqrt(2.0 / n_in)
    return LowRankFactors(
        u=u,
        s=s,
        v=v,
        bias=np.zeros(n_out),
        activation=activation,
        rank=rank,
        r_min=min(r_min, rank),
        rank_fixed=rank_fixed,
    )


def effective_weight(layer):
    """Materialize u @ s @ v.T. Only for oracles, checkpoint tooling and
    dense-reference paths; the training step never forms it."""
    return layer.u @ layer.s @ layer.v.T


def basis_update(layer, k_new, l_new, adaptive):
    """New orthonormal bases from the integrated K and L factors.

    With augmentation the previous bases are appended before
    orthonormalization, so the old span survives into the new one and the
    truncation that follows can roll the rank back down. Returns
    (u_new, v_new, m, n) where m = u_new.T @ u_old and n = v_new.T @ v_old
    project the old core onto the new bases.
    """
    if k_new.shape != (layer.n_out, layer.rank):
        raise ValueError(f"k_new shape {k_new.shape} does not match layer")
    if l_new.shape != (layer.n_in, layer.rank):
        raise ValueError(f"l_new shape {l_new.shape} does not match layer")
    if adaptive:
        u_new = orthonormal_range(np.hstack([k_new, layer.u]))
        v_new = orthonormal_range(np.hstack([l_new, layer.v]))
    else:
        u_new = orthonormal_range(k_new)
        v_new = orthonormal_range(l_new)
    m = u_new.T @ layer.u
    n = v_new.T @ layer.v
    return u_new, v_new, m, n


def project_core(s, m, n):
    """Old core re-expressed in the new bases: m @ s @ n.T."""
    if m.shape[1] != s.shape[0] or n.shape[1] != s.shape[1]:
        raise ValueError(
            f"projection shapes {m.shape}, {n.shape} do not fit core {s.shape}"
        )
    return m @ s @ n.T


def truncation_rank(sigma, tau, r_min, r_max):
    """Smallest r whose discarded tail satisfies the threshold, then clamped.

    The threshold is tau * ||sigma||_2 (the Frobenius norm of the diagonal
    core). tail(r) = sqrt(sum_{i > r} sigma_i^2) computed from the high end.
    """
    total = float(np.linalg.norm(sigma))
    theta = tau * total
    tail = np.sqrt(np.cumsum((sigma * sigma)[::-1]))[::-1]  # tail[i] over sigma[i:]
    r = len(sigma)
    for cand in range(len(sigma) + 1):
        rest = tail[cand] if cand < len(sigma) else 0.0
        if rest <= theta:
            r = cand
            break
    return max(r_min, min(r, r_max, len(sigma)))


def truncate(s_new, u, v, policy, r_min=2, r_max=None):
    """SVD-truncate the updated core and rotate the bases accordingly.

    Returns (u_t, s_t, v_t, rank). Adaptive mode picks the smallest rank
    whose tail two-norm is at most tau * ||sigma||_F; fixed mode cuts to
    policy.rank regardless of the spectrum.
    """
    p, sigma, q = svd_small(s_new)
    if r_max is None:
        r_max = min(u.shape[0], v.shape[0])
    if policy.is_adaptive:
        r = truncation_rank(sigma, policy.tau, r_min, r_max)
    else:
        r = max(1, min(policy.rank, r_max, len(sigma)))
    u_t = u @ p[:, :r]
    v_t = v @ q[:, :r]
    return u_t, np.diag(sigma[:r]), v_t, r


def orthonormality_defect(layer):
    """max of ||u'u - I||_F and ||v'v - I||_F, for invariant checks."""
    r_u = layer.u.shape[1]
    r_v = layer.v.shape[1]
    du = frobenius_norm(layer.u.T @ layer.u - np.eye(r_u))
    dv = frobenius_norm(layer.v.T @ layer.v - np.eye(r_v))
    return max(du, dv)
