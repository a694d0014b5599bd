#!/usr/bin/env python3
"""Trace identities Z(t) = D_{t,0} Y(t) and U(t, z) = D_{t,z} Y(t) on the shipped configs."""
import argparse
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from delaybsde.config import load_config
from delaybsde.regression import RankDeficiencyWarning
from delaybsde.experiments import execute

ROOT = Path(__file__).resolve().parent.parent
NAMES = ("brownian_baseline", "jump_baseline", "linear_y")


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n-paths", type=int, default=4000)
    p.add_argument("configs", nargs="*", default=[str(ROOT / "configs" / f"{n}.yaml") for n in NAMES])
    args = p.parse_args()
    warnings.simplefilter("ignore", RankDeficiencyWarning)
    status = 0
    for path in args.configs:
        cfg = load_config(path)
        cfg = replace(cfg, n_paths=args.n_paths, malliavin=replace(cfg.malliavin, enabled=True))
        res = execute(cfg)
        print(f"== {Path(path).stem}: delta={res.delta:.4g} all_pass={res.trace.all_pass}")
        print(res.trace.to_csv(), end="")
        status |= not res.trace.all_pass
    return int(status)


if __name__ == "__main__":
    sys.exit(main())
