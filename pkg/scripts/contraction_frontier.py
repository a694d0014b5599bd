#!/usr/bin/env python3
"""Sweep the Lipschitz constant of a base config and compare delta with the observed Picard ratios.

The contraction constant is a sufficient bound, so the empirical frontier
(last-ratio crossing 1) usually sits far to the right of delta = 1.
"""
import argparse
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from delaybsde.bsde_solver import DivergenceError
from delaybsde.config import load_config
from delaybsde.regression import RankDeficiencyWarning
from delaybsde.experiments import apply_axis, execute

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=str(ROOT / "configs" / "affine_delay.yaml"))
    p.add_argument("--k-min", type=float, default=0.01)
    p.add_argument("--k-max", type=float, default=20.0)
    p.add_argument("--points", type=int, default=9)
    p.add_argument("--n-paths", type=int, default=2000)
    p.add_argument("--max-iter", type=int, default=30)
    args = p.parse_args()
    warnings.simplefilter("ignore", RankDeficiencyWarning)

    base = load_config(args.config)
    base = replace(base, n_paths=args.n_paths, malliavin=replace(base.malliavin, enabled=False),
                   solver=replace(base.solver, max_iter=args.max_iter))
    print(f"{'K':>9} {'delta':>10} {'converged':>9} {'iters':>5} {'last_ratio':>10}")
    for K in np.geomspace(args.k_min, args.k_max, args.points):
        cfg = apply_axis(base, "K", K)
        try:
            res = execute(cfg)
        except DivergenceError:
            print(f"{K:9.4g} {'-':>10} {'diverged':>9}")
            continue
        r = res.report
        last = r.ratios[-1] if r.ratios else float("nan")
        print(f"{K:9.4g} {res.delta:10.4g} {str(r.converged):>9} {r.iterations:5d} {last:10.4g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
