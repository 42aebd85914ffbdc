"""Experiment runners shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import npr, train
from .config import RunConfig
from .model import EncoderConfig


@dataclass
class AblationRow:
    seed: int
    miou_npr: float
    miou_base: float
    compact_npr: float
    compact_base: float
    var_npr: float
    var_base: float


def with_encoder(cfg: RunConfig, **changes) -> RunConfig:
    enc = EncoderConfig(**{**cfg.encoder.to_dict(), **changes})
    return replace(cfg, encoder=enc)


def ablation(cfg: RunConfig, seeds, log=None) -> list[AblationRow]:
    """Train each seed twice, with NPR as configured and with lam = beta = 0."""
    rows = []
    for seed in seeds:
        base_cfg = replace(cfg, seed=seed)
        res = {}
        for tag, run_cfg in (("npr", base_cfg), ("base", with_encoder(base_cfg, lam=0.0, beta=0.0))):
            t, e = train.datasets(run_cfg)
            state = train.train(run_cfg, train_set=t, eval_set=e)
            res[tag] = train.evaluate(state, e)
        row = AblationRow(seed, res["npr"].seg.miou, res["base"].seg.miou,
                          res["npr"].compactness, res["base"].compactness,
                          res["npr"].dim_variance, res["base"].dim_variance)
        if log:
            log(row)
        rows.append(row)
    return rows


def em_scaling(m: int = 8192, q: int = 32, d: int = 64, iterations: int = 10, repeats: int = 5,
               seed: int = 0) -> tuple[float, float, float]:
    """Median wall time of prototype generation at m and 2m sources, and their ratio.

    The two sizes are timed alternately so slow drift in machine load hits
    both medians alike.
    """
    rng = np.random.default_rng(seed)
    p0 = rng.normal(size=(q, d)) * 0.1
    small, large = rng.normal(size=(m, d)), rng.normal(size=(2 * m, d))
    cfg = npr.EmConfig(iterations)
    npr.run_em(small, p0, cfg)
    npr.run_em(large, p0, cfg)
    t_small, t_large = [], []
    for _ in range(repeats):
        for v, out in ((small, t_small), (large, t_large)):
            t0 = time.perf_counter()
            npr.run_em(v, p0, cfg)
            out.append(time.perf_counter() - t0)
    a, b = float(np.median(t_small)), float(np.median(t_large))
    return a, b, b / a
