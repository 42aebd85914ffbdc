"""NPR on/off over several seeds: mIoU, level-1 compactness and dim variance.

    python scripts/ablation.py --seeds 10 --set optim.steps=1000 --out ablation.json
"""

import argparse
import json
from dataclasses import asdict

from protoseg import config
from protoseg.experiments import ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="K=V")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = config.load(args.config, args.set)

    def show(r):
        print(f"seed {r.seed}: mIoU {r.miou_npr:.4f} vs {r.miou_base:.4f} | "
              f"compactness {r.compact_npr:.4f} vs {r.compact_base:.4f} | "
              f"dim var {r.var_npr:.4f} vs {r.var_base:.4f}", flush=True)

    rows = ablation(cfg, range(args.first_seed, args.first_seed + args.seeds), log=show)
    wins = {
        "miou": sum(r.miou_npr > r.miou_base for r in rows),
        "compactness": sum(r.compact_npr < r.compact_base for r in rows),
        "dim_variance": sum(r.var_npr > r.var_base for r in rows),
    }
    print(f"NPR wins out of {len(rows)}: {wins}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"config": cfg.to_dict(), "rows": [asdict(r) for r in rows], "wins": wins}, fh, indent=2)


if __name__ == "__main__":
    main()
