"""Command-line entry point: ``protoseg {gen-data,train,eval,gradcheck,em-run}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, npr, train
from .config import ConfigError, RunConfig, load
from .synthdata import gen_dataset, load_dataset


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load(args.config, overrides)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(cfg.to_json())


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args, "data")
    n = cfg.n_train if args.split == "train" else cfg.n_eval
    seed = cfg.seed if args.split == "train" else cfg.seed + cfg.eval_seed_offset
    manifest = gen_dataset(cfg.scene, n, seed, out)
    _echo(cfg, out)
    print(f"wrote {manifest['n_scenes']} scenes to {out}")
    return 0


def _scenes(path):
    if path is None:
        return None
    return load_dataset(path)[1]


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, "run")
    state = train.train(cfg, out, train_set=_scenes(args.data), eval_set=_scenes(args.eval_data),
                        eval_every=args.eval_every)
    last = state.history[-1]
    print(f"step {last['step']} loss {last['loss']:.6f} eval mIoU {last['miou']:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args, "run")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pgt"
    state = train.load_checkpoint(ckpt, cfg)
    scenes = _scenes(args.data)
    if scenes is None:
        scenes = train.datasets(cfg)[1]
    result = train.evaluate(state, scenes)
    _echo(cfg, out)
    train.write_json(out / "eval.json", result.to_dict())
    print(f"mIoU {result.seg.miou!r}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    out = _out(args, "gradcheck")
    report = train.gradcheck_report(cfg.seed)
    _echo(cfg, out)
    train.write_json(out / "gradcheck.json", report)
    for name, s in sorted(report["suites"].items()):
        print(f"{'PASS' if s['pass'] else 'FAIL'} {name}: max rel error {s['max_rel_error']:.3e}")
    for name, s in sorted(report["stop_gradient"].items()):
        print(f"{'PASS' if s['pass'] else 'FAIL'} stop-gradient {name}: max |grad| {s['max_abs_grad']:.3e}")
    return 0 if report["pass"] else 1


def two_cluster_fixture(seed: int = 0, m: int = 40, d: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Two well-separated Gaussian blobs and a deterministic two-prototype start."""
    rng = np.random.default_rng([seed, 0xE3])
    centers = np.zeros((2, d))
    centers[0, 0], centers[1, 0] = -3.0, 3.0
    v = centers[np.arange(m) % 2] + 0.3 * rng.normal(size=(m, d))
    p0 = centers * 0.1 + rng.normal(scale=0.1, size=(2, d))
    return v, p0


def em_trace(v, p0, cfg: npr.EmConfig) -> list[np.ndarray]:
    """Prototypes after each iteration (index 0 is the start)."""
    p = np.asarray(p0, dtype=np.float64)
    src = np.asarray(v, dtype=np.float64)
    if cfg.normalize_source:
        src = src / np.maximum(np.linalg.norm(src, axis=-1, keepdims=True), 1e-12)
    trace = [p]
    for _ in range(cfg.iterations):
        p = npr.m_step(src, npr.e_step(src, p), previous=p)
        trace.append(p)
    return trace


def cmd_em_run(args) -> int:
    cfg = _config(args)
    out = _out(args, "em")
    if args.data:
        t = container.load(args.data)
        if "v" not in t or "p0" not in t:
            raise ConfigError(f"{args.data}: expected tensors 'v' and 'p0'")
        v, p0 = t["v"], t["p0"]
    else:
        v, p0 = two_cluster_fixture(cfg.seed)
    em = npr.EmConfig(args.iterations or cfg.encoder.em_iterations, cfg.encoder.em_normalize)
    trace = em_trace(v, p0, em)
    container.save(out / "em_trace.pgt", {"v": v, "p0": p0, "trace": np.stack(trace)})
    train.write_json(out / "em_trace.json", {"iterations": em.iterations,
                                             "prototypes": [p.tolist() for p in trace]})
    _echo(cfg, out)
    with np.printoptions(precision=6, suppress=True):
        for i, p in enumerate(trace):
            print(f"iter {i}: {p.tolist()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="K=V", help="override a config field (JSON value)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        return p

    p = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train and write checkpoint.pgt + metrics.csv"))
    p.add_argument("--data", help="training dataset dir (default: generated from config)")
    p.add_argument("--eval-data", help="evaluation dataset dir (default: generated from config)")
    p.add_argument("--eval-every", type=int, help="evaluate every N steps as well as at the end")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint, write eval.json"))
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.pgt)")
    p.add_argument("--data", help="evaluation dataset dir (default: generated from config)")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="run every gradient suite"))
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("em-run", help="trace EM prototypes per iteration"))
    p.add_argument("--data", help="PGT file holding tensors 'v' (m x d) and 'p0' (q x d)")
    p.add_argument("--iterations", type=int, help="EM iterations (default: encoder.em_iterations)")
    p.set_defaults(func=cmd_em_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
