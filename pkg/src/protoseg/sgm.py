"""Cross-attention grouping of patch tokens onto group tokens.

The assignment logits are ``Q(G) K(S)^T`` (q x m, no 1/sqrt(d) scale).  Each
patch column picks one group through a straight-through Gumbel-Softmax, and
the clustered tokens are ``A V(S) + G``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array, NumericsError, Tensor, straight_through


def noise_rng(seed: int, step: int = 0, level: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, step, level)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step, level])))


def sample_gumbel(shape, seed: int, step: int = 0, level: int = 0) -> Array:
    return noise_rng(seed, step, level).gumbel(size=shape)


def one_hot_columns(scores: Array) -> Array:
    """One-hot along the group axis (-2) at the argmax; ties go to the lowest index."""
    idx = np.argmax(scores, axis=-2)
    hard = np.zeros_like(scores)
    np.put_along_axis(hard, np.expand_dims(idx, -2), 1.0, axis=-2)
    return hard


@dataclass
class GroupingParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    gumbel_temperature: float = 1.0

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1:
            raise NumericsError("projections must share one d x d shape")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise NumericsError("projections must be square")
        if not self.gumbel_temperature > 0:
            raise NumericsError("invalid temperature")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class AssignmentMatrix:
    values: Tensor  # (..., q, m)
    mode: str  # "soft" | "hard"


def gumbel_softmax_st(logits, temperature: float = 1.0, seed: int | None = 0, hard: bool = True,
                      noise: Array | None = None, step: int = 0, level: int = 0) -> AssignmentMatrix:
    """Column-wise Gumbel-Softmax over the group axis of (..., q, m) logits.

    ``noise`` overrides the sampled Gumbel draw; ``seed=None`` with no
    explicit noise disables perturbation entirely.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise NumericsError("non-finite logits")
    if not temperature > 0:
        raise NumericsError("invalid temperature")
    if noise is None:
        noise = np.zeros(logits.shape) if seed is None else sample_gumbel(logits.shape, seed, step, level)
    perturbed = (logits + noise) * (1.0 / temperature)
    soft = perturbed.softmax(axis=-2)
    if not hard:
        return AssignmentMatrix(soft, "soft")
    return AssignmentMatrix(straight_through(one_hot_columns(perturbed.data), soft), "hard")


def assignment_logits(s: Tensor, g: Tensor, params: GroupingParams) -> Tensor:
    return (g @ params.w_q) @ (s @ params.w_k).T


def group_block(s: Tensor, g: Tensor, params: GroupingParams, seed: int | None = 0,
                hard: bool = True, noise: Array | None = None, step: int = 0,
                level: int = 0) -> tuple[Tensor, AssignmentMatrix]:
    """Pool (..., m, d) tokens onto (..., q, d) groups; returns (S_hat, A)."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    g = g if isinstance(g, Tensor) else Tensor(g)
    d = params.dim
    if s.shape[-1] != d or g.shape[-1] != d:
        raise NumericsError(f"dimension mismatch: tokens {s.shape}, groups {g.shape}, params d={d}")
    logits = assignment_logits(s, g, params)
    a = gumbel_softmax_st(logits, params.gumbel_temperature, seed, hard, noise, step, level)
    s_hat = a.values @ (s @ params.w_v) + g
    return s_hat, a
