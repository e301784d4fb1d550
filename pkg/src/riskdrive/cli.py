"""Command-line front end: train / eval / selftest."""

from __future__ import annotations

import argparse
import sys

from .harness import (
    ABLATIONS,
    ALGOS,
    build_run_config,
    evaluate,
    load_config_file,
    selftest,
    train,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskdrive")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one seeded training run")
    p_train.add_argument("--config", default=None,
                         help="key=value file; CLI flags override it")
    p_train.add_argument("--scenario", type=int, default=None, choices=(1, 2, 3, 4, 6))
    p_train.add_argument("--flow", type=int, default=None, choices=(1, 2))
    p_train.add_argument("--algo", default=None, choices=ALGOS)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--episodes", type=int, default=None)
    p_train.add_argument("--ablate", default=None,
                         help="comma list from " + ",".join(ABLATIONS))
    p_train.add_argument("--out", default=None)

    p_eval = sub.add_parser("eval", help="deterministic rollouts from a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=50)
    p_eval.add_argument("--out", required=True)

    sub.add_parser("selftest", help="quick built-in consistency checks")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "train":
        file_values = load_config_file(args.config)
        cfg = build_run_config(
            file_values, scenario=args.scenario, flow=args.flow, algo=args.algo,
            seed=args.seed, episodes=args.episodes, ablate=args.ablate, out=args.out)
        result = train(cfg)
        print(f"wrote {result['metrics']}")
        print(f"wrote {result['checkpoint']} (hash {result['hash'][:12]})")
        return 0
    if args.command == "eval":
        result = evaluate(args.checkpoint, args.episodes, args.out)
        print(f"wrote {result['metrics']}")
        print(f"sr={result['sr']:.3f} cr={result['cr']:.3f} tnc={result['tnc']}")
        return 0
    if args.command == "selftest":
        return selftest()
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
