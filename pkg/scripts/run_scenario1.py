"""Five-seed scenario-1 sweep for the full method, both traffic flows."""

import argparse

from riskdrive.cli import main as cli


def run(out_root: str, seeds, flows, episodes: int | None):
    for flow in flows:
        for seed in seeds:
            args = ["train", "--scenario", "1", "--flow", str(flow), "--algo", "gtr2l",
                    "--seed", str(seed),
                    "--out", f"{out_root}/s1_flow{flow}_seed{seed}"]
            if episodes is not None:
                args += ["--episodes", str(episodes)]
            cli(args)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/scenario1")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--flows", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--episodes", type=int, default=None)
    a = ap.parse_args()
    run(a.out, a.seeds, a.flows, a.episodes)
