"""Image-text contrastive loss and the full training objective."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import NumericsError, Tensor


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def it_contrastive(z_i, z_t, tau: float = 0.1) -> Tensor:
    """Symmetric InfoNCE over the n x n cosine matrix; the diagonal holds the positives.

    Rows of ``z_i`` and ``z_t`` are expected to be unit vectors already.
    """
    z_i, z_t = _t(z_i), _t(z_t)
    n = z_i.shape[0]
    if n < 2:
        raise NumericsError("batch too small")
    if z_t.shape != z_i.shape:
        raise NumericsError(f"embedding shapes differ: {z_i.shape} vs {z_t.shape}")
    logits = (z_i @ z_t.T) * (1.0 / tau)
    diag = (np.arange(n), np.arange(n))
    i2t = logits.log_softmax(axis=-1)[diag]
    t2i = logits.log_softmax(axis=-2)[diag]
    return (i2t + t2i).sum() * (-0.5 / n)


def total_loss(it, pg_image: Sequence, pg_text: Sequence, lam: float = 0.1,
               beta: float = 0.01) -> Tensor:
    """L_IT + sum over levels and samples of (lam * PG_image + beta * PG_text).

    ``pg_image``/``pg_text`` hold one entry per level; each entry is a scalar
    or a per-sample vector that is summed.
    """
    out = _t(it)
    for term in pg_image:
        if lam:
            out = out + _t(term).sum() * lam
    for term in pg_text:
        if beta:
            out = out + _t(term).sum() * beta
    return out
