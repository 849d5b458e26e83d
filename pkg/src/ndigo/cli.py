"""Command line entry point: ``ndigo run|compare|oracle-verify|render``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import EXPERIMENT_REWARDS, RunConfig, compare, default_output_root, load_checkpoint, render_episode, run
from .oracle import load_world, verify_ndigo_identity

log = logging.getLogger("ndigo")


def _cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    overrides = {}
    if args.seed:
        overrides["seeds"] = args.seed
    if args.reward:
        overrides["reward"] = args.reward
    if args.steps:
        overrides["steps"] = args.steps
    if args.eval_episodes:
        overrides["eval_episodes"] = args.eval_episodes
    if args.model:
        overrides["model_preset"] = args.model
    cfg = cfg.replace(**overrides)
    out = args.out or str(default_output_root() / cfg.run_name())
    cfg = cfg.replace(out=out)
    result = run(cfg, log=log.info)
    print(Path(result["dir"], "summary.md").read_text())
    return 0


def _cmd_compare(args) -> int:
    out = args.out or str(default_output_root() / "comparison")
    result = compare(args.dirs, out)
    print(Path(out, "comparison.md").read_text())
    return 0 if result["tables"] else 1


def _cmd_oracle(args) -> int:
    m = load_world(args.world)
    ok = True
    reports = []
    for H in args.horizon:
        rep = verify_ndigo_identity(m, H, args.episodes, seed=args.seed, t=args.t)
        reports.append(json.loads(rep.to_json()))
        ok &= rep.passed
        log.info("%s H=%d mean_reward=%.6g ig_diff=%.6g |err|=%.3g se=%.3g %s", m.name, H,
                 rep.mean_reward, rep.mean_ig_diff, rep.abs_error, rep.std_error,
                 "PASS" if rep.passed else "FAIL")
    text = json.dumps(reports if len(reports) > 1 else reports[0], indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0 if ok else 1


def _cmd_render(args) -> int:
    cfg, seed, qnet, _, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"episode_{args.episode}.png")
    render_episode(cfg, qnet, seed, args.episode, out)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndigo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate agents")
    r.add_argument("--config", required=True,
                   help=f"YAML run config or a preset ({', '.join(EXPERIMENT_REWARDS)})")
    r.add_argument("--seed", type=int, action="append", help="repeatable; overrides config seeds")
    r.add_argument("--out", help="run directory")
    r.add_argument("--reward", help="pe, pg, icm or ndigo-H")
    r.add_argument("--steps", type=int)
    r.add_argument("--eval-episodes", type=int)
    r.add_argument("--model", choices=["tiny", "full"])
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="merge run summaries into tables")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=_cmd_compare)

    o = sub.add_parser("oracle-verify", help="check the reward / information-gain identity")
    o.add_argument("--world", required=True, help="builtin name, tabular JSON or gridworld YAML")
    o.add_argument("--horizon", type=int, action="append", required=True)
    o.add_argument("--episodes", type=int, default=100_000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--t", type=int, default=1, help="time index of the attributed observation")
    o.add_argument("--out")
    o.set_defaults(func=_cmd_oracle)

    d = sub.add_parser("render", help="top-down PNG of an evaluation episode")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--episode", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=_cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
