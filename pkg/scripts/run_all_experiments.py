"""Every experiment preset against every reward kind it lists.

Takes many CPU hours at the default budget; --steps scales it down.
"""

import argparse
import logging
from pathlib import Path

from ndigo.harness import EXPERIMENT_REWARDS, RunConfig, compare, run


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--experiments", nargs="+", default=list(EXPERIMENT_REWARDS))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    log = logging.getLogger("all")

    for exp in args.experiments:
        dirs = []
        for reward in EXPERIMENT_REWARDS[exp]:
            cfg = RunConfig.preset(exp, reward=reward, steps=args.steps, seeds=args.seeds,
                                   out=str(Path(args.out) / exp / reward))
            log.info("%s %s", exp, reward)
            dirs.append(run(cfg, log=log.info)["dir"])
        compare(dirs, Path(args.out) / exp / "comparison")


if __name__ == "__main__":
    main()
