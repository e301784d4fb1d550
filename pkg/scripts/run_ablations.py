"""Ablation sweep: full model vs w/o adaptive horizon, w/o opponent levels,
w/o both, and w/o the barrier, on the signalized-corridor scenario."""

import argparse

from riskdrive.cli import main as cli

VARIANTS = {
    "full": None,
    "no_ah": "ah",
    "no_gr": "gr",
    "no_ahgr": "ah,gr",
    "no_rc": "rc",
}


def run(out_root: str, scenario: int, flow: int, seeds, episodes: int | None):
    for name, flags in VARIANTS.items():
        for seed in seeds:
            args = ["train", "--scenario", str(scenario), "--flow", str(flow),
                    "--algo", "gtr2l", "--seed", str(seed),
                    "--out", f"{out_root}/{name}_seed{seed}"]
            if flags:
                args += ["--ablate", flags]
            if episodes is not None:
                args += ["--episodes", str(episodes)]
            cli(args)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--scenario", type=int, default=3)
    ap.add_argument("--flow", type=int, default=1)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--episodes", type=int, default=None)
    a = ap.parse_args()
    run(a.out, a.scenario, a.flow, a.seeds, a.episodes)
