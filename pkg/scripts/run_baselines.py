"""Baseline comparison sweep (gtr2l / sac / sac_lag / idm) on one scenario."""

import argparse

from riskdrive.cli import main as cli

ALGOS = ("gtr2l", "sac", "sac_lag", "idm")


def run(out_root: str, scenario: int, flow: int, seeds, episodes: int | None):
    for algo in ALGOS:
        for seed in seeds:
            args = ["train", "--scenario", str(scenario), "--flow", str(flow),
                    "--algo", algo, "--seed", str(seed),
                    "--out", f"{out_root}/{algo}_seed{seed}"]
            if episodes is not None:
                args += ["--episodes", str(episodes)]
            cli(args)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/baselines")
    ap.add_argument("--scenario", type=int, default=1)
    ap.add_argument("--flow", type=int, default=2)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--episodes", type=int, default=None)
    a = ap.parse_args()
    run(a.out, a.scenario, a.flow, a.seeds, a.episodes)
