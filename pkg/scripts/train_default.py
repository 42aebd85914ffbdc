"""Train the default configuration and report eval metrics along the way.

    python scripts/train_default.py --set optim.steps=3000 --eval-every 500 --out runs/default
"""

import argparse
import logging
import time

from protoseg import config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="K=V")
    ap.add_argument("--eval-every", type=int, default=500)
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = config.load(args.config, args.set)
    t0 = time.perf_counter()
    state = train.train(cfg, args.out, eval_every=args.eval_every)
    for row in state.history:
        if row["miou"] != "":
            print(f"step {row['step']:5d}  mIoU {row['miou']:.4f}  compactness {row['compactness']:.4f}  "
                  f"dim var {row['dim_variance']:.4f}")
    print(f"wall time {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
