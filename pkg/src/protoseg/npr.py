"""Non-learnable prototypical regularization.

Prototypes are estimated from source features by EM with an exponential
inner-product kernel (identity covariance, no mixture weights), matched to
group tokens by maximum total cosine similarity, filtered by a similarity
threshold, and used as contrastive targets.  Prototypes never carry
gradient; everything in the EM half operates on plain arrays.

Array arguments accept leading batch axes: sources are (..., m, d),
prototypes (..., q, d), responsibilities (..., q, m).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import Array, NumericsError, Tensor, pairwise_cosine

log = logging.getLogger(__name__)

EMPTY_COMPONENT = 1e-12


@dataclass(frozen=True)
class EmConfig:
    iterations: int = 10
    normalize_source: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("EM needs at least one iteration")


def _plain(x) -> Array:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def e_step(v, p) -> Array:
    """Responsibilities y_ij = exp(p_i . v_j) / sum_i' exp(p_i' . v_j)."""
    v, p = _plain(v), _plain(p)
    if v.shape[-1] != p.shape[-1]:
        raise NumericsError(f"feature width mismatch: {v.shape[-1]} vs {p.shape[-1]}")
    logits = p @ np.swapaxes(v, -1, -2)
    logits = logits - logits.max(axis=-2, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-2, keepdims=True)


def m_step(v, y, previous=None) -> Array:
    """Weighted means p_i = sum_j y_ij v_j / sum_j y_ij.

    A component whose total weight is below 1e-12 keeps its ``previous``
    value; without one this is an error.
    """
    v, y = _plain(v), _plain(y)
    mass = y.sum(axis=-1, keepdims=True)
    empty = mass < EMPTY_COMPONENT
    p = (y @ v) / np.where(empty, 1.0, mass)
    if np.any(empty):
        if previous is None:
            raise NumericsError("empty component")
        log.debug("empty component: keeping %d previous prototypes", int(empty.sum()))
        p = np.where(empty, _plain(previous), p)
    return p


def run_em(v, p0, cfg: EmConfig = EmConfig()) -> tuple[Array, Array]:
    """Alternate E and M steps ``cfg.iterations`` times; returns (P_T, Y_T).

    Y_T is the responsibility matrix of the last E step.  Inputs are read as
    constants, so nothing here is differentiable.
    """
    v, p = _plain(v), _plain(p0)
    if v.shape[-1] != p.shape[-1]:
        raise NumericsError(f"feature width mismatch: {v.shape[-1]} vs {p.shape[-1]}")
    if cfg.normalize_source:
        v = v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    y = None
    for _ in range(cfg.iterations):
        y = e_step(v, p)
        p = m_step(v, y, previous=p)
    return p, y


def reconstruct(y, p) -> Array:
    """V' = Y^T P."""
    y, p = _plain(y), _plain(p)
    if y.shape[-2] != p.shape[-2]:
        raise NumericsError(f"shape mismatch: Y {y.shape} vs P {p.shape}")
    return np.swapaxes(y, -1, -2) @ p


@dataclass(frozen=True)
class MatchResult:
    """Pairs (group_idx[k], proto_idx[k]) with their cosine similarities.

    ``permutation[i]`` is the prototype matched to group i, or -1.
    """

    group_idx: Array
    proto_idx: Array
    similarities: Array
    selected: Array
    n_groups: int
    n_protos: int

    @property
    def permutation(self) -> Array:
        perm = np.full(self.n_groups, -1, dtype=int)
        perm[self.group_idx] = self.proto_idx
        return perm

    @property
    def total(self) -> float:
        return float(self.similarities.sum())


def match_similarity(sim) -> MatchResult:
    """Maximum-total-similarity assignment over min(rows, cols) pairs."""
    sim = np.asarray(sim, dtype=np.float64)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    order = np.argsort(rows, kind="stable")
    rows, cols = rows[order], cols[order]
    vals = sim[rows, cols]
    return MatchResult(rows, cols, vals, np.ones(len(rows), dtype=bool), sim.shape[0], sim.shape[1])


def cosine_matrix(g, p) -> Array:
    g, p = _plain(g), _plain(p)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    pn = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(gn == 0.0) or np.any(pn == 0.0):
        raise NumericsError("degenerate vector")
    return np.clip((g / gn) @ np.swapaxes(p / pn, -1, -2), -1.0, 1.0)


def hungarian_match(g, p) -> MatchResult:
    """Match the rows of G (q' x d) to the rows of P (q x d) by cosine similarity."""
    return match_similarity(cosine_matrix(g, p))


def hrs_select(match: MatchResult, phi: float = 0.1) -> MatchResult:
    """Keep only pairs whose similarity is strictly above ``phi``."""
    return replace(match, selected=match.similarities > phi)


def contrastive_from_similarity(sim: Tensor, group_idx: Array, proto_idx: Array,
                                selected: Array, tau: float = 0.1) -> Tensor:
    """Symmetric matched-pair contrastive loss from a (..., qg, qp) similarity tensor.

    ``group_idx``/``proto_idx``/``selected`` are (..., k).  Each selected pair
    contributes -log softmax over prototypes (group anchor) and -log softmax
    over groups (prototype anchor); all rows stay in the denominators.  With
    fewer groups than prototypes only the group-anchored term is used, with
    more groups only the prototype-anchored one.  Returns a (...,) tensor,
    averaged over the k pairs.
    """
    qg, qp = sim.shape[-2], sim.shape[-1]
    k = group_idx.shape[-1]
    batch = sim.shape[:-2]
    bidx = np.indices(batch + (k,))[:-1] if batch else ()
    index = (*bidx, group_idx, proto_idx)
    weight = np.asarray(selected, dtype=np.float64)
    scaled = sim * (1.0 / tau)
    total = None
    if qg <= qp:
        left = scaled.log_softmax(axis=-1)[index]
        total = left * weight
    if qg >= qp:
        right = scaled.log_softmax(axis=-2)[index] * weight
        total = right if total is None else total + right
    return total.sum(axis=-1) * (-1.0 / k)


def pg_loss_matched(g: Tensor, p, match: MatchResult, tau: float = 0.1) -> Tensor:
    """PG loss for one sample: G (q' x d) against unpermuted prototypes P (q x d)."""
    g = g if isinstance(g, Tensor) else Tensor(g)
    sim = pairwise_cosine(g, Tensor(_plain(p)))
    return contrastive_from_similarity(sim, match.group_idx, match.proto_idx, match.selected, tau)


def pg_loss(g: Tensor, p_h, selected=None, tau: float = 0.1) -> Tensor:
    """PG loss with G and matched prototypes P_h already row-aligned."""
    g = g if isinstance(g, Tensor) else Tensor(g)
    p_h = _plain(p_h)
    q = g.shape[-2]
    if p_h.shape[-2] != q:
        raise NumericsError("aligned PG loss needs equal group and prototype counts")
    idx = np.broadcast_to(np.arange(q), g.shape[:-2] + (q,))
    if selected is None:
        selected = np.ones(idx.shape, dtype=bool)
    sim = pairwise_cosine(g, Tensor(p_h))
    return contrastive_from_similarity(sim, idx, idx, np.asarray(selected), tau)
