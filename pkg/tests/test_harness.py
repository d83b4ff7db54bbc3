import dataclasses
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from priorlearn.harness import (
    EnvironmentSpec,
    ExperimentConfig,
    ResultsTable,
    _darcy_truth,
    _diffusion_truth,
    build_dataset,
    desk_spec,
    emit_report,
    generate_tasks,
    load_checkpoint,
    load_tasks,
    make_environment,
    run_experiment,
    save_checkpoint,
    save_tasks,
    state_from_checkpoint,
    state_to_checkpoint,
    train_variant,
    _initial_state,
)
from priorlearn.hyper import HyperConfig
from priorlearn.predictors import predict_mean_independent
from priorlearn.space import Field, Grid


TINY_DIFFUSION = EnvironmentSpec("diffusion", "simple", 6, 3, 40, 80, 36, 0)
TINY_DARCY = EnvironmentSpec("darcy", "simple", 6, 3, 24, 48, 9, 0)


def _tiny(problem, regime="simple", seed=0):
    base = TINY_DIFFUSION if problem == "diffusion" else TINY_DARCY
    return dataclasses.replace(base, regime=regime, seed=seed)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def test_diffusion_generator_parameter_ranges():
    grid = Grid(1, 50)
    x = grid.axis_coords

    def fit_params(vals):
        # strip the envelope, then the slope+offset leave the oscillation;
        # amplitude 'a' is recovered by projection onto sin(2(5x - b))
        prof = vals / np.exp(-20.0 * (x - 0.5) ** 2)
        basis = np.column_stack([x, np.ones_like(x), np.sin(10.0 * x),
                                 np.cos(10.0 * x)])
        coef, *_ = np.linalg.lstsq(basis, prof, rcond=None)
        return np.hypot(coef[2], coef[3])

    rng = np.random.default_rng(0)
    for _ in range(200):
        f = _diffusion_truth(rng, "simple", grid)
        a = fit_params(f.values)
        assert 5.0 - 1e-8 <= a <= 15.0 + 1e-8


def test_diffusion_generator_slope_mean():
    grid = Grid(1, 11)
    x = grid.axis_coords
    rng = np.random.default_rng(1)
    slopes = []
    for _ in range(10_000):
        f = _diffusion_truth(rng, "simple", grid)
        prof = f.values / np.exp(-20.0 * (x - 0.5) ** 2)
        basis = np.column_stack([5.0 * x, np.ones_like(x),
                                 np.sin(10.0 * x), np.cos(10.0 * x)])
        coef, *_ = np.linalg.lstsq(basis, prof, rcond=None)
        slopes.append(coef[0])
    # beta ~ N(0.5, 0.5): the MC mean over 10^4 draws is within 5 sigma/sqrt(N)
    assert abs(np.mean(slopes) - 0.5) < 5.0 * np.sqrt(0.5) / 100.0


def test_complex_branch_fractions_and_symmetry():
    grid = Grid(1, 21)
    rng = np.random.default_rng(2)
    n = 10_000
    signs = 0
    # near x = 0.15 the oscillation sits at its positive peak, so the
    # profile there is positive for the + branch with overwhelming
    # probability; its sign reads off the branch
    idx = 3
    for _ in range(n):
        f = _diffusion_truth(rng, "complex", grid)
        signs += f.values[idx] > 0
    frac = signs / n
    assert abs(frac - 0.5) < 3.0 * 0.5 / np.sqrt(n)


def test_darcy_generator_three_bumps_and_envelope():
    grid = Grid(2, 30)
    rng = np.random.default_rng(3)
    for _ in range(50):
        f = _darcy_truth(rng, "simple", grid)
        assert np.all(f.values >= -1e-12)
        # max bump amplitude is bounded by 3 * max a3 * 1 = 12
        assert f.values.max() <= 12.0
    rng = np.random.default_rng(4)
    vals = _darcy_truth(rng, "complex", grid).values
    assert vals.min() < 0 or vals.max() > 0


def test_darcy_complex_sign_symmetry():
    grid = Grid(2, 20)
    rng = np.random.default_rng(5)
    n = 2000
    pos = sum(_darcy_truth(rng, "complex", grid).values.sum() > 0
              for _ in range(n))
    assert abs(pos / n - 0.5) < 3.0 * 0.5 / np.sqrt(n)


# ---------------------------------------------------------------------------
# environments and tasks
# ---------------------------------------------------------------------------


def test_generate_tasks_deterministic():
    env = make_environment(_tiny("diffusion"))
    t1 = generate_tasks(env, 3, 7)
    t2 = generate_tasks(env, 3, 7)
    for a, b in zip(t1, t2):
        np.testing.assert_array_equal(a.observations[0].y,
                                      b.observations[0].y)
        np.testing.assert_array_equal(a.truth.values, b.truth.values)


def test_darcy_tasks_noise_scaling():
    env = make_environment(_tiny("darcy"))
    for task in generate_tasks(env, 3, 0):
        assert task.m == env.spec.m_points
        assert task.observations[0].y.shape == (env.spec.m_points,)
        assert task.observations[0].tau > 0.0


def test_datasets_share_observation_count():
    env = make_environment(_tiny("darcy"))
    ds = build_dataset(env, 4, 0)
    assert ds.m == env.spec.m_points


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def test_results_table_csv_round_trip(tmp_path):
    table = ResultsTable(
        itn=[1, 2],
        errors={"unlearned": [0.9123456789012345, 0.5],
                "dependent": [0.25, 1.0 / 3.0]},
        config={"seed": 0},
    )
    paths = emit_report(table, str(tmp_path))
    text = open(paths[0]).read()
    lines = text.strip().split("\n")
    assert lines[0] == "itn,unlearned,dependent"
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        assert int(cells[0]) == table.itn[i]
        assert float(cells[1]) == table.errors["unlearned"][i]
        assert float(cells[2]) == table.errors["dependent"][i]
    payload = json.loads(open(paths[1]).read())
    assert payload["errors"] == table.errors


def test_run_experiment_unlearned_descent():
    spec = _tiny("diffusion")
    cfg = ExperimentConfig(spec, variants=("unlearned",), max_itn=6)
    table = run_experiment(cfg)
    errs = table.column("unlearned")
    assert errs[-1] <= errs[0]
    assert np.all(np.asarray(errs) >= 0.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    path = str(tmp_path / "c.ckpt")
    meta = {"variant": "independent", "note": "x"}
    sections = {"theta1": np.linspace(0.0, 1.0, 7),
                "theta2": np.array([[1.0, 2.0], [3.0, 4.0]])}
    save_checkpoint(path, meta, sections)
    meta2, sections2 = load_checkpoint(path)
    assert meta2 == meta
    for k in sections:
        np.testing.assert_array_equal(sections[k], sections2[k])


def test_state_checkpoint_round_trip(tmp_path):
    spec = _tiny("diffusion")
    env = make_environment(spec)
    for variant in ("independent", "dependent"):
        cfg = HyperConfig(seed=3, n_cov_modes=0)
        state = _initial_state(env, variant, cfg)
        meta, sections = state_to_checkpoint(state, variant, spec)
        path = str(tmp_path / f"{variant}.ckpt")
        save_checkpoint(path, meta, sections)
        meta2, sections2 = load_checkpoint(path)
        state2 = state_from_checkpoint(env, meta2, sections2)
        np.testing.assert_array_equal(state.to_vector(), state2.to_vector())


def test_tasks_round_trip(tmp_path):
    spec = _tiny("darcy")
    env = make_environment(spec)
    tasks = generate_tasks(env, 3, 0)
    path = str(tmp_path / "t.tasks")
    save_tasks(path, spec, "train", tasks)
    env2, split, ds = load_tasks(path)
    assert split == "train"
    assert ds.n == 3
    for a, b in zip(tasks, ds.tasks):
        np.testing.assert_array_equal(a.observations[0].y,
                                      b.observations[0].y)
        np.testing.assert_array_equal(a.input_data.values,
                                      b.input_data.values)


# ---------------------------------------------------------------------------
# training-facing properties
# ---------------------------------------------------------------------------


def test_complex_independent_mean_smaller_than_branch_norm():
    # the two branches cancel on average, so the learned task-independent
    # mean must be much smaller than a typical single-branch truth
    spec = dataclasses.replace(_tiny("diffusion", regime="complex"),
                               n_train=20)
    env = make_environment(spec)
    ds = build_dataset(env, spec.n_train, spec.seed)
    cfg = HyperConfig(lr_schedule=((300, 1e-3),), seed=0, optimizer="adam",
                      evidence="linearized", beta=10.0, n_cov_modes=0)
    state = train_variant(env, ds, "independent", cfg)
    mean = predict_mean_independent(state.predictor)
    mass = env.mass
    mean_norm = np.sqrt(mean.values @ mass.dot(mean.values))
    truth_norms = [np.sqrt(t.truth.values @ mass.dot(t.truth.values))
                   for t in ds.tasks]
    assert mean_norm < 0.5 * np.mean(truth_norms)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "priorlearn.cli", *args],
        capture_output=True, text=True,
    )


def test_cli_determinism_bitwise(tmp_path):
    data = tmp_path / "data"
    out = [tmp_path / "r1", tmp_path / "r2"]
    r = _run_cli("gen-data", "--env", "diffusion", "--regime", "simple",
                 "--seed", "0", "--out", str(data),
                 "--n-train", "3", "--n-test", "2")
    assert r.returncode == 0, r.stderr
    for o in out:
        r = _run_cli("invert", "--prior", "unlearned",
                     "--tasks", str(data / "test.tasks"),
                     "--max-itn", "3", "--out", str(o))
        assert r.returncode == 0, r.stderr
    csv1 = (out[0] / "results.csv").read_bytes()
    csv2 = (out[1] / "results.csv").read_bytes()
    assert csv1 == csv2


def test_cli_config_error_exit_codes(tmp_path):
    r = _run_cli("invert", "--prior", "dependent",
                 "--tasks", "/nonexistent", "--out", str(tmp_path))
    assert r.returncode == 2
    r = _run_cli("train-prior", "--config", "/nonexistent.json")
    assert r.returncode == 2


def test_cli_bounds_subcommand(tmp_path):
    inputs = {
        "kind": "subgaussian_indep",
        "inputs": {"n": 100, "m": 10, "empirical": 0.4,
                   "kl_hyper": 2.0, "kl_base_sum": 30.0},
        "params": {"s1_sq": 0.1, "s2_sq": 0.2},
        "out": str(tmp_path / "b"),
        "sweep": {"param": "m", "values": [10, 40]},
    }
    path = tmp_path / "inputs.json"
    path.write_text(json.dumps(inputs))
    r = _run_cli("bounds", "--inputs", str(path))
    assert r.returncode == 0, r.stderr
    payload = json.loads((tmp_path / "b" / "bound.json").read_text())
    assert payload["total"] > 0
    sweep = (tmp_path / "b" / "bound_sweep.csv").read_text().strip()
    assert sweep.splitlines()[0] == "m,bound"
    assert len(sweep.splitlines()) == 3
