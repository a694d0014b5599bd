"""Experiment configuration: a strict YAML schema mapped onto frozen dataclasses.

Unknown keys are rejected at every level, because a silent typo in K, beta or
the delay measure would invalidate an experiment.

Schema (all sections optional except where noted)::

    model:      {sigma: 1.0, marks: [[z, lambda], ...]}
    grid:       {T: 1.0, n_steps: 50}
    n_paths:    10000
    master_seed: 0
    alpha:      {type: dirac|uniform|weighted, v: 0.0, n_atoms: 1, gamma: 0.0, atoms: [[v, w], ...]}
    generator:  {name: zero|linear_y|linear_z|affine|tanh, coefficients: {...}}
    terminal:   {name: zero|brownian|brownian_square|jump_sum|combo, params: {...}}
    beta:       optimize | <positive number>
    solver:     {tol, max_iter, degree, contraction_slack, divergence_guard, scheme, lagged_features}
    malliavin:  {enabled, stride, nodes, marks, tolerance, relative, reuse_models}
    output:     {dir, format: csv|json}
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from delaybsde.bsde_solver import LAGGED_MODES, SolverConfig
from delaybsde.delay_kernel import DelayMeasure, make_delay_measure
from delaybsde.generators import Generator, TerminalCondition, make_generator, make_terminal
from delaybsde.levy_paths import LevyModel, TimeGrid, build_time_grid, jump_intensity_m

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Schema violation or a name that does not resolve."""


@dataclass(frozen=True)
class ModelSection:
    sigma: float = 1.0
    marks: tuple = ()


@dataclass(frozen=True)
class GridSection:
    T: float = 1.0
    n_steps: int = 50


@dataclass(frozen=True)
class AlphaSection:
    type: str = "dirac"
    v: float = 0.0
    n_atoms: int = 1
    gamma: float = 0.0
    atoms: tuple = ()


@dataclass(frozen=True)
class GeneratorSection:
    name: str = "zero"
    coefficients: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TerminalSection:
    name: str = "brownian"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SolverSection:
    tol: float = 1e-14
    max_iter: int = 60
    degree: int = 2
    contraction_slack: float = 0.1
    divergence_guard: float = 1e12
    scheme: str = "joint"
    lagged_features: str = "window"


@dataclass(frozen=True)
class MalliavinSection:
    enabled: bool = False
    stride: int = 10
    nodes: tuple | None = None
    marks: tuple = ("brownian",)
    tolerance: float = 0.05
    relative: bool = False
    reuse_models: bool = False


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"
    format: str = "csv"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = ModelSection()
    grid: GridSection = GridSection()
    n_paths: int = 10000
    master_seed: int = 0
    alpha: AlphaSection = AlphaSection()
    generator: GeneratorSection = GeneratorSection()
    terminal: TerminalSection = TerminalSection()
    beta: float | str = "optimize"
    solver: SolverSection = SolverSection()
    malliavin: MalliavinSection = MalliavinSection()
    output: OutputSection = OutputSection()

    # -- resolved objects --------------------------------------------------------

    def levy_model(self) -> LevyModel:
        return LevyModel(sigma=self.model.sigma, marks=tuple(tuple(m) for m in self.model.marks))

    def time_grid(self) -> TimeGrid:
        return build_time_grid(self.grid.T, self.grid.n_steps)

    def delay_measure(self) -> DelayMeasure:
        a = self.alpha
        return make_delay_measure(a.type, v=a.v, n_atoms=a.n_atoms, gamma=a.gamma,
                                  atoms=[tuple(x) for x in a.atoms], T=self.grid.T)

    def make_generator(self) -> Generator:
        coef = dict(self.generator.coefficients)
        m_total = float(coef.pop("m_total", jump_intensity_m(self.levy_model())))
        return make_generator(self.generator.name, m_total=m_total, **coef)

    def make_terminal(self) -> TerminalCondition:
        return make_terminal(self.terminal.name, **self.terminal.params)

    def solver_config(self, **overrides) -> SolverConfig:
        return SolverConfig(**{**asdict(self.solver), **overrides})

    def fixed_beta(self) -> float | None:
        return None if self.beta == "optimize" else float(self.beta)

    # -- serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, master_seed=int(seed))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_SECTIONS = {
    "model": ModelSection, "grid": GridSection, "alpha": AlphaSection, "generator": GeneratorSection,
    "terminal": TerminalSection, "solver": SolverSection, "malliavin": MalliavinSection, "output": OutputSection,
}


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def _section(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    values = {}
    for f in fields(cls):
        if f.name in data:
            v = data[f.name]
            if isinstance(v, dict):
                v = dict(v)
            if f.type == "float" and isinstance(v, str):
                # YAML 1.1 leaves 1e-14 as a string
                try:
                    v = float(v)
                except ValueError:
                    raise ConfigError(f"{where}.{f.name}: expected a number, got {v!r}") from None
            values[f.name] = _tuplify(v)
    return cls(**values)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and validate a config from a parsed mapping."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    values = {name: _section(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    for key in ("n_paths", "master_seed", "beta"):
        if key in data:
            values[key] = data[key]
    if isinstance(values.get("beta"), str) and values["beta"] != "optimize":
        try:
            values["beta"] = float(values["beta"])
        except ValueError:
            raise ConfigError(f"beta must be 'optimize' or a positive number, got {values['beta']!r}") from None
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Resolve every name and range once so failures surface before any simulation."""
    try:
        if not isinstance(cfg.n_paths, int) or cfg.n_paths < 2:
            raise ValueError("n_paths must be an integer >= 2")
        if not isinstance(cfg.master_seed, int) or cfg.master_seed < 0:
            raise ValueError("master_seed must be a non-negative integer")
        if cfg.beta != "optimize":
            if isinstance(cfg.beta, bool) or not isinstance(cfg.beta, (int, float)) or not cfg.beta > 0:
                raise ValueError("beta must be 'optimize' or a positive number")
        model = cfg.levy_model()
        cfg.time_grid()
        cfg.delay_measure()
        cfg.make_generator()
        cfg.make_terminal()
        s = cfg.solver
        if s.scheme not in ("joint", "plain"):
            raise ValueError(f"unknown solver scheme {s.scheme!r}")
        if s.lagged_features not in LAGGED_MODES:
            raise ValueError(f"unknown lagged_features mode {s.lagged_features!r}")
        if s.degree < 0 or s.max_iter < 1 or not s.tol > 0:
            raise ValueError("solver needs degree >= 0, max_iter >= 1, tol > 0")
        m = cfg.malliavin
        for mark in m.marks:
            if mark != "brownian" and not (isinstance(mark, int) and 0 <= mark < model.n_marks):
                raise ValueError(f"malliavin mark {mark!r} is neither 'brownian' nor a mark index")
        if m.stride < 1:
            raise ValueError("malliavin stride must be >= 1")
        if m.nodes is not None and any(not (0 <= j < cfg.grid.n_steps) for j in m.nodes):
            raise ValueError("malliavin nodes must lie in [0, n_steps)")
        if cfg.output.format not in ("csv", "json"):
            raise ValueError("output format must be csv or json")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML config, or the config embedded in a run manifest (JSON)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        # YAML 1.1 reads exponents without a decimal point (1e-14) as strings, so JSON goes through json
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    if isinstance(data, dict) and "config_hash" in data and "config" in data:
        data = data["config"]
    return config_from_dict(data)
