import json

import numpy as np
import pandas as pd
import pytest

from src.config import PRESETS, RunConfig
from src.field_solver import Grid2D, SourceParams
from src.hybrid import (
    build_context,
    field_error_report,
    field_errors,
    initial_state,
    replay_stage,
    run_experiment,
    run_sequential,
    run_stage,
    select_network_design,
)
from src.observe import Design, SourceFamily, SourceModel
from src.records import StageStatus, substream
from tests.conftest import tiny_config

REF = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 1.0], [2.0, 0.0, 1.0]])


# =============================================================================
# Field errors
# =============================================================================

def test_field_errors_total_and_local():
    grid = Grid2D(0.0, 1.0, 0.0, 1.0, 3, 3)
    model = REF.copy()
    model[0, 0] = 2.0
    model[2, 2] = 0.5
    errs = field_errors(model, REF, grid, Design(0.0, 0.0, 0.03), radius=0.04)
    assert errs.mse == pytest.approx(1.25 / 9)
    assert errs.re == pytest.approx(1.5 / 8)
    assert errs.local_mse == pytest.approx(0.25)
    assert errs.local_re == pytest.approx(0.25)


def test_identical_models_have_no_field_error(coarse_physics):
    src = SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.45, 0.25, 0.25, 2.0))
    report = field_error_report(src, src, src, coarse_physics, 0.035, Design(0.5, 0.5, 0.035))
    assert set(report) == {
        f"{scope}_{kind}_{which}" for scope in ("total", "local") for kind in ("mse", "re") for which in ("corrected", "uncorrected")
    }
    assert all(v == 0.0 for v in report.values())


def test_stronger_model_source_shows_field_error(coarse_physics):
    truth = SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.45, 0.25, 0.25, 2.0))
    wrong = SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.45, 0.25, 0.25, 3.0))
    report = field_error_report(truth, wrong, truth, coarse_physics, 0.035, Design(0.5, 0.5, 0.035))
    assert report["total_re_corrected"] == 0.0
    assert report["total_re_uncorrected"] == pytest.approx(0.5, rel=1e-10)


# =============================================================================
# Flows
# =============================================================================

def test_sequential_run_writes_every_artifact(prefect_harness, tiny_cfg):
    out = tiny_cfg.out_path
    records = run_sequential(tiny_cfg, out=str(out))
    assert [r.stage for r in records] == [1, 2, 3]
    assert records[0].status is StageStatus.NETWORK_STEP_SKIPPED
    assert all(r.status is StageStatus.COMPLETED for r in records[1:])

    d_prev = tiny_cfg.schedule.initial_design
    for r in records:
        assert abs(r.d_g[0] - d_prev[0]) <= 0.2 + 1e-12 and abs(r.d_g[1] - d_prev[1]) <= 0.2 + 1e-12
        d_prev = r.d_g
    for r in records[1:]:
        assert abs(r.d_nn[0] - r.d_g[0]) <= 0.2 + 1e-12
        assert r.design_iterations <= tiny_cfg.network.max_iters
        assert np.all(np.diff(r.eig_trace) >= 0.0)
        assert r.map_after_training is not None

    assert len((out / "stages.jsonl").read_text().splitlines()) == 3
    for name in ("posterior_stage_1.csv", "kl_trace_stage_2.csv", "design_trajectory_stage_3.csv",
                 "design_profile_stage_2.csv", "theta_trajectory.csv", "field_errors.csv"):
        assert (out / name).exists(), name
    post = pd.read_csv(out / "posterior_stage_3.csv")
    assert post["prob"].sum() == pytest.approx(1.0, abs=1e-9)
    fields = pd.read_csv(out / "field_errors.csv")
    assert "next_local_mse_corrected" in fields.columns
    theta = pd.read_csv(out / "theta_trajectory.csv")
    assert theta["theta_s_before"].iloc[0] == 3.0


def test_stage_replay_is_deterministic(prefect_harness, tiny_cfg):
    ctx = build_context(tiny_cfg)
    state = initial_state(tiny_cfg)
    root = np.random.SeedSequence(tiny_cfg.seed)
    first = run_stage(state, ctx, 1, substream(root, 1))
    second_a = run_stage(first.state, ctx, 2, substream(root, 2))
    second_b = replay_stage(first.state, ctx, second_a.record)
    a, b = second_a.record.to_json_dict(), second_b.to_json_dict()
    a.pop("wall_time")
    b.pop("wall_time")
    assert a == b


def test_baseline_skips_the_network_and_summary_is_written(prefect_harness, tmp_path):
    cfg = tiny_config(output_dir=str(tmp_path / "cmp"), compare_baseline=True, schedule__stage_times=[0.030, 0.035])
    summary = run_experiment(cfg)
    baseline = summary["baseline"]
    assert baseline["statuses"] == ["NETWORK_STEP_SKIPPED", "NETWORK_STEP_SKIPPED"]
    assert baseline["final_theta"] == [3.0]
    assert isinstance(summary["beats_baseline"], bool)
    on_disk = json.loads((tmp_path / "cmp" / "metrics_summary.json").read_text())
    assert on_disk["final_distance"] == summary["final_distance"]
    assert (tmp_path / "cmp" / "baseline" / "stages.jsonl").exists()
    assert json.loads((tmp_path / "cmp" / "manifest.json").read_text())["noise_std"] == 0.05


def test_structural_run_trains_the_network(prefect_harness, tmp_path):
    cfg = tiny_config("structural-coarse", output_dir=str(tmp_path / "nn"), schedule__stage_times=[0.030, 0.035])
    records = run_sequential(cfg, out=str(cfg.out_path))
    last = records[-1]
    assert last.status is StageStatus.COMPLETED
    assert len(last.theta_after) == 37
    assert last.training_loss[1] <= last.training_loss[0]
    header = pd.read_csv(cfg.out_path / "net_params_stage_2.csv").columns
    assert header[0] == "W1[4x2]_0"


# =============================================================================
# Full coarse runs (slow)
# =============================================================================

def _preset(name: str, tmp_path, seed: int, **updates) -> RunConfig:
    data = PRESETS[name].model_dump()
    data.update(seed=seed, output_dir=str(tmp_path / f"{name}-{seed}"))
    for key, value in updates.items():
        section, _, field = key.partition("__")
        if field:
            data[section][field] = value
        else:
            data[section] = value
    return RunConfig.model_validate(data)


@pytest.mark.slow
def test_network_design_raises_the_kl_profile(prefect_harness, tmp_path):
    cfg = _preset("parametric-coarse", tmp_path, 0, network__max_iters=40)
    ctx = build_context(cfg)
    model = cfg.initial_model()
    model = model.with_source(model.source.with_location(cfg.truth.theta_x, cfg.truth.theta_y))
    result = select_network_design.fn(Design(0.6, 0.4, 0.035), model, ctx, np.random.SeedSequence(7))
    profile = result.profile
    start, final = result.trajectory.designs[0], result.trajectory.final
    assert (final.x, final.y) != (start.x, start.y)
    assert profile["initial"].shape == (cfg.network.iterations,)
    assert np.all(profile["final"] > profile["initial"])


@pytest.mark.slow
def test_parametric_runs_recover_strength_and_beat_the_baseline(prefect_harness, tmp_path):
    summaries = [run_experiment(_preset("parametric-coarse", tmp_path, seed, compare_baseline=True)) for seed in range(10)]
    errors = [abs(s["final_theta"][0] - 2.0) for s in summaries]
    assert np.mean(errors) < 0.3
    assert sum(s["beats_baseline"] for s in summaries) >= 8


@pytest.mark.slow
def test_flattened_far_prior_still_recovers_strength(prefect_harness, tmp_path):
    prior = {"kind": "gaussian", "mean": (0.85, 0.85), "std": 0.1, "flatten_power": 0.2, "n_nodes": 51}
    errors = []
    for seed in range(10):
        records = run_sequential(_preset("parametric-coarse", tmp_path, seed, prior=prior))
        errors.append(abs(records[-1].theta_after[0] - 2.0))
    assert np.mean(errors) < 0.3


@pytest.mark.slow
def test_structural_correction_lowers_local_field_error(prefect_harness, tmp_path):
    frames = []
    for seed in range(5):
        cfg = _preset("structural-coarse", tmp_path, seed)
        run_sequential(cfg, out=str(cfg.out_path))
        frames.append(pd.read_csv(cfg.out_path / "field_errors.csv"))
    mean = pd.concat(frames).groupby("stage")[["local_mse_corrected", "local_mse_uncorrected"]].mean()
    later = mean.loc[2:6]
    assert len(later) == 5
    assert (later["local_mse_corrected"] < later["local_mse_uncorrected"]).sum() >= 3
