"""Desk-scale exp1: PE against NDIGO-4 over five seeds, then a comparison table.

    python3 scripts/run_exp1.py --out runs/exp1 [--steps 100000] [--seeds 0 1 2 3 4]
"""

import argparse
import logging
from pathlib import Path

from ndigo.harness import RunConfig, compare, run


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/exp1")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--rewards", nargs="+", default=["pe", "ndigo-4"])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    log = logging.getLogger("exp1")

    out = Path(args.out)
    dirs = []
    for reward in args.rewards:
        cfg = RunConfig.preset("exp1", reward=reward, steps=args.steps, seeds=args.seeds,
                               out=str(out / reward))
        log.info("training %s", reward)
        dirs.append(run(cfg, log=log.info)["dir"])
    compare(dirs, out / "comparison")
    print((out / "comparison" / "comparison.md").read_text())


if __name__ == "__main__":
    main()
