"""Monte-Carlo solver for BSDEs with time-delayed generators driven by
Brownian motion and a compensated compound-Poisson measure, plus Malliavin
gradient computation and trace-identity checks."""

__version__ = "0.1.0"

from delaybsde.levy_paths import (
    LevyModel,
    PathEnsemble,
    TimeGrid,
    build_time_grid,
    compensated_increment,
    insert_jump,
    jump_intensity_m,
    simulate_ensemble,
)
from delaybsde.delay_kernel import DelayMeasure, beta_weight, delayed_average, make_delay_measure
from delaybsde.generators import (
    Generator,
    TerminalCondition,
    contraction_delta,
    empirical_lipschitz,
    optimize_beta,
)
from delaybsde.bsde_solver import PicardReport, SolutionTriple, picard_step, residual, solve

__all__ = [
    "DelayMeasure",
    "Generator",
    "LevyModel",
    "PathEnsemble",
    "PicardReport",
    "SolutionTriple",
    "TerminalCondition",
    "TimeGrid",
    "beta_weight",
    "build_time_grid",
    "compensated_increment",
    "contraction_delta",
    "delayed_average",
    "empirical_lipschitz",
    "insert_jump",
    "jump_intensity_m",
    "make_delay_measure",
    "optimize_beta",
    "picard_step",
    "residual",
    "simulate_ensemble",
    "solve",
]
