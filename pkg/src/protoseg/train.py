"""Training loop, evaluation, checkpoints, and gradient-check suites."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container, metrics, npr
from .config import RunConfig
from .losses import it_contrastive
from .model import (EncoderConfig, as_tensors, class_embeddings, ema_update, encode_text,
                    forward_loss, infer_segmentation, init_params, init_prototypes, t_npr_loss)
from .numerics import Tensor, grad_check
from .synthdata import SceneConfig, SceneSet, gen_scenes

log = logging.getLogger(__name__)

CSV_FIELDS = ["step", "loss", "it", "pg_image", "pg_text", "miou", "compactness", "dim_variance"]


# -- optimizers ---------------------------------------------------------------

class Optimizer:
    def __init__(self, params: dict[str, np.ndarray], kind: str = "adam", momentum: float = 0.9,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind = kind
        self.momentum = momentum
        self.betas, self.eps = betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()} if kind == "adam" else None
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for k in sorted(params):
            g = grads[k]
            if self.kind == "sgd":
                self.m[k] = self.momentum * self.m[k] + g
                params[k] = params[k] - lr * self.m[k]
                continue
            b1, b2 = self.betas
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


def lr_at(step: int, total: int, base: float, warmup_frac: float) -> float:
    """Linear warmup then cosine decay to zero."""
    warm = int(round(warmup_frac * total))
    if step < warm:
        return base * (step + 1) / warm
    span = max(1, total - warm)
    return 0.5 * base * (1.0 + math.cos(math.pi * (step - warm) / span))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# -- state --------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: RunConfig
    params: dict[str, np.ndarray]
    protos: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in sorted(self.params.items())}
        out.update({f"proto/{k}": v for k, v in sorted(self.protos.items())})
        return out


def save_checkpoint(path, state: TrainState) -> None:
    container.save(path, state.tensors())


def load_checkpoint(path, cfg: RunConfig) -> TrainState:
    raw = container.load(path)
    params = {k[len("param/"):]: v for k, v in raw.items() if k.startswith("param/")}
    protos = {k[len("proto/"):]: v for k, v in raw.items() if k.startswith("proto/")}
    expected = init_params(cfg.encoder, cfg.seed)
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise ValueError(f"checkpoint {path} does not match config: parameter {k}")
    return TrainState(cfg, params, protos)


def datasets(cfg: RunConfig) -> tuple[SceneSet, SceneSet]:
    train = gen_scenes(cfg.scene, cfg.n_train, cfg.seed)
    evals = gen_scenes(cfg.scene, cfg.n_eval, cfg.seed + cfg.eval_seed_offset)
    return train, evals


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalResult:
    seg: metrics.SegEval
    compactness: float
    dim_variance: float
    dim_mean: float

    def to_dict(self) -> dict:
        out = self.seg.to_dict()
        out.update(compactness=self.compactness, dim_variance=self.dim_variance, dim_mean=self.dim_mean)
        return out


def evaluate(state: TrainState, scenes: SceneSet, chunk: int = 100) -> EvalResult:
    enc_cfg = state.cfg.encoder
    k = state.cfg.scene.num_classes
    p = as_tensors(state.params, requires_grad=False)
    cls = class_embeddings(p, k)
    preds, comp, groups = [], [], []
    for start in range(0, len(scenes), chunk):
        sl = slice(start, start + chunk)
        seg = infer_segmentation(scenes.patches[sl], cls, p, state.protos, enc_cfg)
        preds.append(seg.labels)
        u = seg.encoded.units[0]
        comp.append(metrics.compactness(u.sgm_input.data, u.assignment.values.data, u.groups.data)
                    * len(seg.labels))
        groups.append(u.groups.data)
    pred = np.concatenate(preds)
    seg_eval = metrics.miou(pred, scenes.masks, k)
    mean, var = metrics.dim_variance(np.concatenate(groups))
    return EvalResult(seg_eval, float(sum(comp) / len(scenes)), float(var.mean()), float(mean.mean()))


# -- training -----------------------------------------------------------------

def npr_weights(cfg: RunConfig, step: int) -> tuple[float, float]:
    warm = int(round(cfg.encoder.warmup_frac * cfg.optim.steps))
    if step < warm:
        return 0.0, 0.0
    return cfg.encoder.lam, cfg.encoder.beta


def train(cfg: RunConfig, out_dir=None, train_set: SceneSet | None = None,
          eval_set: SceneSet | None = None, eval_every: int | None = None) -> TrainState:
    """Train from scratch; deterministic in ``cfg``.

    When ``out_dir`` is given, writes ``config.json``, ``metrics.csv`` and
    ``checkpoint.pgt`` there.
    """
    if train_set is None or eval_set is None:
        t, e = datasets(cfg)
        train_set = train_set if train_set is not None else t
        eval_set = eval_set if eval_set is not None else e
    enc_cfg, opt_cfg = cfg.encoder, cfg.optim
    state = TrainState(cfg, init_params(enc_cfg, cfg.seed), init_prototypes(enc_cfg, cfg.seed))
    opt = Optimizer(state.params, opt_cfg.optimizer, opt_cfg.momentum)
    order_rng = np.random.default_rng([cfg.seed, 0xBA7C])
    writer = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
    t0 = time.perf_counter()
    try:
        for step in range(opt_cfg.steps):
            idx = order_rng.choice(len(train_set), size=opt_cfg.batch_size, replace=False)
            batch = train_set.subset(np.sort(idx))
            lam, beta = npr_weights(cfg, step)
            p = as_tensors(state.params)
            outp = forward_loss(p, state.protos, enc_cfg, batch.patches, batch.captions,
                                cfg.seed, step, lam, beta)
            outp.loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}
            clip_grads(grads, opt_cfg.grad_clip)
            opt.step(state.params, grads, lr_at(step, opt_cfg.steps, opt_cfg.lr, opt_cfg.lr_warmup_frac))
            for lv, unit in enumerate(outp.encoded.units):
                key = f"l{lv}.image"
                state.protos[key] = ema_update(state.protos[key], unit.p_t, enc_cfg.ema_gamma)
                if unit.text_t is not None:
                    key = f"l{lv}.text"
                    state.protos[key] = ema_update(state.protos[key], unit.text_t, enc_cfg.ema_gamma)
            last = step == opt_cfg.steps - 1
            if step % opt_cfg.log_every == 0 or last:
                row = {
                    "step": step,
                    "loss": float(outp.loss.data),
                    "it": float(outp.it.data),
                    "pg_image": float(sum(t.data.sum() for t in outp.pg_image)),
                    "pg_text": float(sum(t.data.sum() for t in outp.pg_text)),
                    "miou": "", "compactness": "", "dim_variance": "",
                }
                if last or (eval_every and step % eval_every == 0):
                    ev = evaluate(state, eval_set)
                    row.update(miou=ev.seg.miou, compactness=ev.compactness, dim_variance=ev.dim_variance)
                state.history.append(row)
                if writer is not None:
                    writer.writerow(row)
                log.info("step %d loss %.4f it %.4f (%.1fs)", step, row["loss"], row["it"],
                         time.perf_counter() - t0)
    finally:
        if writer is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint.pgt", state)
    return state


# -- gradient suites ------------------------------------------------------------

GRADCHECK_SCENE = SceneConfig(grid=(4, 4), d_raw=4, num_classes=3, classes_per_scene=(1, 2),
                              blob_size=(1, 2), feature_noise=0.1)
GRADCHECK_ENCODER = EncoderConfig(d_raw=4, d=8, c=8, vocab=4, q=(4, 2), layers_per_level=1,
                                  gumbel_temperature=1.0)


def model_grad_errors(enc_cfg: EncoderConfig = GRADCHECK_ENCODER,
                      scene_cfg: SceneConfig = GRADCHECK_SCENE, seed: int = 0, batch: int = 3,
                      step: float = 1e-5, params=None, protos=None) -> dict[str, float]:
    """Max relative error of dL_ALL/dW for every parameter matrix W.

    Gumbel assignments are soft (the hard forward is piecewise constant) and
    every stop-gradient quantity (EM outputs, matchings, HRS masks) is frozen
    at its base-point value, which is exactly what the analytic gradient
    differentiates.
    """
    scenes = gen_scenes(scene_cfg, batch, seed + 17)
    params = init_params(enc_cfg, seed) if params is None else params
    protos = init_prototypes(enc_cfg, seed) if protos is None else protos
    base = forward_loss(as_tensors(params), protos, enc_cfg, scenes.patches, scenes.captions,
                        seed, 0, enc_cfg.lam, enc_cfg.beta, hard=False)
    caches = base.caches
    errors = {}
    for name in sorted(params):
        def loss(x, name=name):
            p = as_tensors(params, requires_grad=False)
            p[name] = x
            return forward_loss(p, protos, enc_cfg, scenes.patches, scenes.captions, seed, 0,
                                enc_cfg.lam, enc_cfg.beta, hard=False, caches=caches).loss
        errors[name] = grad_check(loss, params[name], step)
    return errors


def stop_gradient_leaks(enc_cfg: EncoderConfig = GRADCHECK_ENCODER,
                        scene_cfg: SceneConfig = GRADCHECK_SCENE, seed: int = 0) -> dict[str, float]:
    """Largest |gradient| reaching each prototype tensor (must be exactly 0)."""
    scenes = gen_scenes(scene_cfg, 3, seed + 17)
    params = as_tensors(init_params(enc_cfg, seed))
    protos = {k: Tensor(v, requires_grad=True) for k, v in init_prototypes(enc_cfg, seed).items()}
    out = forward_loss(params, protos, enc_cfg, scenes.patches, scenes.captions, seed, 0,
                       enc_cfg.lam, enc_cfg.beta)
    out.loss.backward()
    return {k: 0.0 if t.grad is None else float(np.abs(t.grad).max()) for k, t in protos.items()}


def loss_grad_errors(seed: int = 0, step: float = 1e-5, points: int = 10) -> dict[str, float]:
    """pg_loss, t_npr_loss and it_contrastive against central differences at random points."""
    rng = np.random.default_rng([seed, 0x6C])
    worst = {"pg_loss": 0.0, "pg_loss_unequal": 0.0, "t_npr_loss": 0.0, "it_contrastive": 0.0}
    for _ in range(points):
        g0 = rng.normal(size=(4, 8))
        p = g0 + 0.3 * rng.normal(size=(4, 8))
        match = npr.hrs_select(npr.hungarian_match(g0, p), 0.1)
        p_h = p[match.permutation]
        sel = match.selected
        worst["pg_loss"] = max(worst["pg_loss"], grad_check(lambda x: npr.pg_loss(x, p_h, sel, 0.1), g0, step))
        p6 = rng.normal(size=(6, 8))
        m6 = npr.hungarian_match(g0, p6)
        worst["pg_loss_unequal"] = max(worst["pg_loss_unequal"],
                                       grad_check(lambda x: npr.pg_loss_matched(x, p6, m6, 0.1), g0, step))
        z = rng.normal(size=8)
        z /= np.linalg.norm(z)
        t0 = rng.normal(size=(4, 1))
        _, _, order = t_npr_loss(Tensor(g0), t0, z)
        t_t, _ = npr.run_em(z[:, None], t0)
        fixed = _FrozenText(t_t, order)
        worst["t_npr_loss"] = max(worst["t_npr_loss"],
                                  grad_check(lambda x: t_npr_loss(x, t0, z, cache=fixed)[0], g0, step))
        zt = rng.normal(size=(5, 8))
        zt /= np.linalg.norm(zt, axis=1, keepdims=True)
        zi0 = rng.normal(size=(5, 8))

        def it_loss(x):
            norm = (x * x).sum(axis=-1, keepdims=True).sqrt()
            return it_contrastive(x / norm, zt, 0.1)

        worst["it_contrastive"] = max(worst["it_contrastive"], grad_check(it_loss, zi0, step))
    return worst


@dataclass
class _FrozenText:
    text_t: np.ndarray
    text_order: tuple


def gradcheck_report(seed: int = 0) -> dict:
    suites = {f"loss/{k}": v for k, v in loss_grad_errors(seed).items()}
    suites.update({f"model/{k}": v for k, v in model_grad_errors(seed=seed).items()})
    leaks = stop_gradient_leaks(seed=seed)
    report = {
        "suites": {k: {"max_rel_error": v, "pass": bool(v < 1e-4)} for k, v in suites.items()},
        "stop_gradient": {k: {"max_abs_grad": v, "pass": v == 0.0} for k, v in leaks.items()},
    }
    report["pass"] = all(s["pass"] for s in report["suites"].values()) and all(
        s["pass"] for s in report["stop_gradient"].values())
    return report


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
