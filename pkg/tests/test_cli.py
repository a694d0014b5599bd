import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from delaybsde.cli import main
from delaybsde.config import config_from_dict
from delaybsde.experiments import (EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, EXIT_TOLERANCE, convergence_study, sweep,
                                   sweep_configs)

ROOT = Path(__file__).parent.parent

SMALL = {
    "grid": {"T": 1.0, "n_steps": 10},
    "n_paths": 1000,
    "master_seed": 1,
    "generator": {"name": "zero"},
    "terminal": {"name": "brownian"},
    "beta": 1.0,
    "malliavin": {"enabled": True, "stride": 3},
}


def write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def test_run_zero_generator_all_pass(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", write(tmp_path, SMALL), "--out", str(out)]) == EXIT_OK
    assert "trace all_pass=True" in capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO((out / "trace.csv").read_text())))
    assert rows and all(r["pass"] == "1" for r in rows)
    man = json.loads((out / "manifest.json").read_text())
    assert set(man) >= {"config_hash", "code_version", "seeds", "delta", "timings", "outputs"}
    assert "picard.csv" in man["outputs"]


def test_reruns_are_byte_identical(tmp_path):
    cfg = write(tmp_path, {**SMALL, "generator": {"name": "linear_y", "coefficients": {"c": 0.5}},
                           "alpha": {"type": "dirac", "v": -0.2}})
    for d in ("a", "b"):
        assert main(["run", "--config", cfg, "--out", str(tmp_path / d)]) == EXIT_OK
    for name in ("picard.csv", "trace.csv", "solution.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_roundtrip_bit_exact(tmp_path):
    first = tmp_path / "first"
    cfg = write(tmp_path, {**SMALL, "generator": {"name": "tanh", "coefficients": {"a": 0.5, "b": 0.3}},
                           "alpha": {"type": "uniform", "n_atoms": 3, "gamma": 0.4}, "beta": "optimize",
                           "solver": {"tol": 1e-9}})
    assert main(["run", "--config", cfg, "--out", str(first)]) == EXIT_OK
    second = tmp_path / "second"
    assert main(["run", "--config", str(first / "manifest.json"), "--out", str(second)]) == EXIT_OK
    a, b = np.load(first / "solution.npz"), np.load(second / "solution.npz")
    for key in ("Y", "Z", "U"):
        assert a[key].tobytes() == b[key].tobytes()
    assert (first / "picard.csv").read_bytes() == (second / "picard.csv").read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (first, second))
    assert ma["config_hash"] == mb["config_hash"]


def test_trace_verb_on_stored_solution(tmp_path):
    out = tmp_path / "out"
    main(["run", "--config", write(tmp_path, SMALL), "--out", str(out)])
    again = tmp_path / "again"
    assert main(["trace", "--config", str(out / "manifest.json"), "--out", str(again)]) == EXIT_OK
    assert (again / "trace.csv").read_bytes() == (out / "trace.csv").read_bytes()


def test_trace_without_solution(tmp_path):
    assert main(["trace", "--config", write(tmp_path, SMALL)]) == EXIT_CONFIG


def test_json_format(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", write(tmp_path, SMALL), "--out", str(out), "--format", "json"]) == EXIT_OK
    data = json.loads((out / "picard.json").read_text())
    assert data["schema_version"] == 1
    assert json.loads((out / "trace.json").read_text())["all_pass"] is True


def test_seed_override(tmp_path):
    cfg = write(tmp_path, {**SMALL, "malliavin": {"enabled": False}})
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed-override", "9"])
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seeds"]["master_seed"] == 9
    assert (tmp_path / "a" / "solution.npz").read_bytes() != (tmp_path / "b" / "solution.npz").read_bytes()


@pytest.mark.parametrize("patch", [{"alpha": {"type": "dirac", "v": 0.5}}, {"generator": {"name": "nope"}},
                                   {"gridd": {}}])
def test_config_errors_exit(tmp_path, patch):
    assert main(["run", "--config", write(tmp_path, {**SMALL, **patch})]) == EXIT_CONFIG


def test_divergence_exit(tmp_path):
    assert main(["run", "--config", str(ROOT / "configs" / "divergence.yaml"), "--out", str(tmp_path)]) == \
        EXIT_DIVERGENCE


def test_tolerance_exit(tmp_path):
    cfg = {**SMALL, "generator": {"name": "linear_y", "coefficients": {"c": -3.0}}, "malliavin": {"enabled": False},
           "alpha": {"type": "dirac", "v": -0.5}, "solver": {"max_iter": 5}}
    assert main(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_TOLERANCE


def test_exit_codes_unique():
    codes = [EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_TOLERANCE]
    assert len(set(codes)) == len(codes)


# -- sweeps ---------------------------------------------------------------------------------

AFFINE = {**SMALL, "model": {"marks": [[1.0, 2.0]]}, "malliavin": {"enabled": False},
          "alpha": {"type": "dirac", "v": -0.25}, "beta": "optimize",
          "generator": {"name": "affine", "coefficients": {"a": 0.1, "b": 0.1, "c": 0.1, "d0": 0.1}},
          "terminal": {"name": "combo", "params": {"a": 1.0, "b": [1.0]}}}


def test_k_sweep_below_one_converges():
    rows = sweep(config_from_dict(AFFINE), {"K": [0.02, 0.05, 0.08]})
    assert [r[10] for r in rows] == ["ok"] * 3
    assert all(r[6] < 1 and r[7] for r in rows)
    assert [r[2] for r in rows] == pytest.approx([0.02, 0.05, 0.08])


def test_k_sweep_crossing_one_records_transition():
    base = {**AFFINE, "solver": {"max_iter": 15}, "alpha": {"type": "dirac", "v": -0.5},
            "generator": {"name": "linear_y", "coefficients": {"c": 0.5}}, "model": {"marks": []},
            "terminal": {"name": "brownian"}}
    rows = sweep(config_from_dict(base), {"K": [0.05, 8.0, 100.0]})
    deltas = [r[6] for r in rows]
    assert deltas[0] < 1 < deltas[1]
    assert rows[0][7] is True
    assert [r[10] for r in rows][-1] in ("ok", "divergence")
    assert rows[-1][7] is False


def test_empty_sweep_is_base_run():
    cfg = config_from_dict(AFFINE)
    assert sweep_configs(cfg, {}) == [cfg]
    assert len(sweep(cfg, {})) == 1


def test_sweep_cli_product(tmp_path, capsys):
    out = tmp_path / "s"
    rc = main(["sweep", "--config", write(tmp_path, AFFINE), "--out", str(out), "--axis", "T=0.5,1.0",
               "--axis", "n_paths=400,800", "--workers", "2"])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((out / "sweep.csv").read_text())))
    assert [(float(r["T"]), int(r["n_paths"])) for r in rows] == [(0.5, 400), (0.5, 800), (1.0, 400), (1.0, 800)]


def test_sweep_bad_axis(tmp_path):
    assert main(["sweep", "--config", write(tmp_path, AFFINE), "--axis", "gamma=1"]) == EXIT_CONFIG
    assert main(["sweep", "--config", write(tmp_path, AFFINE), "--axis", "T"]) == EXIT_CONFIG


def test_sweep_records_failures_and_continues():
    rows = sweep(config_from_dict(AFFINE), {"T": [1.0, 0.1]})
    # dirac(-0.25) lies beyond a horizon of 0.1
    assert [r[10] for r in rows] == ["ok", "error"]


# -- convergence studies -------------------------------------------------------------------


def test_brownian_z_rate():
    cfg = config_from_dict({**SMALL, "n_paths": 500, "malliavin": {"enabled": False}})
    table = convergence_study(cfg, levels=4, mode="paths", replicates=6, scheme="plain")
    assert table.has_reference
    assert -0.65 <= table.slopes["z"] <= -0.35


def test_deterministic_case_is_exact():
    cfg = config_from_dict({**SMALL, "generator": {"name": "affine", "coefficients": {"d0": 1.0}},
                            "terminal": {"name": "zero"}, "malliavin": {"enabled": False}})
    table = convergence_study(cfg, levels=3, mode="both")
    assert all(r[4] < 1e-13 and r[5] < 1e-13 for r in table.rows)


def test_affine_self_differences_shrink():
    cfg = config_from_dict({**AFFINE, "n_paths": 2000})
    table = convergence_study(cfg, levels=4, mode="steps")
    diffs = [r[8] for r in table.rows[1:]]
    assert not table.has_reference
    assert diffs[-1] < diffs[0]


def test_converge_cli(tmp_path, capsys):
    cfg = write(tmp_path, {**SMALL, "malliavin": {"enabled": False}})
    assert main(["converge", "--config", cfg, "--out", str(tmp_path), "--levels", "2", "--mode", "paths"]) == EXIT_OK
    assert (tmp_path / "convergence.csv").read_text().startswith("level,n_paths,n_steps")
    assert "slopes:" in capsys.readouterr().out
