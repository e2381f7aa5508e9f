"""
Run artifacts: JSON-lines stage records, CSV series and the run manifest.

Everything is plain text so results can be plotted without this package.
"""

import json
import os
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

from src.discrepancy_net import NetParams
from src.records import StageRecord


def ensure_dir(path: Path | str) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def write_json_atomic(path: Path, payload: dict) -> Path:
    """Write to a sibling temp file then rename over the target."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


def write_manifest(out: Path, manifest: dict) -> Path:
    return write_json(ensure_dir(out) / "manifest.json", manifest)


def append_stage_record(out: Path, record: StageRecord) -> Path:
    path = ensure_dir(out) / "stages.jsonl"
    with path.open("a") as fh:
        fh.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
    return path


def read_stage_records(out: Path) -> list[dict]:
    path = Path(out) / "stages.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# =============================================================================
# CSV series
# =============================================================================

def write_posterior(out: Path, stage: int, thetas: np.ndarray, probs: np.ndarray, tag: str = "") -> Path:
    df = pd.DataFrame({"theta_x": thetas[:, 0], "theta_y": thetas[:, 1], "prob": probs})
    path = ensure_dir(out) / f"posterior_stage_{stage}{tag}.csv"
    df.to_csv(path, index=False)
    return path


def write_kl_trace(out: Path, stage: int, kl_trace: Iterable[float], clip_counts: Iterable[int]) -> Path:
    kl = list(kl_trace)
    clips = list(clip_counts) or [0] * len(kl)
    df = pd.DataFrame({"iteration": np.arange(1, len(kl) + 1), "kl": kl, "clipped": clips})
    path = ensure_dir(out) / f"kl_trace_stage_{stage}.csv"
    df.to_csv(path, index=False)
    return path


def write_design_trajectory(out: Path, stage: int, designs: list[tuple[float, float]], values: list[float]) -> Path:
    df = pd.DataFrame({
        "iteration": np.arange(len(designs)),
        "x": [d[0] for d in designs],
        "y": [d[1] for d in designs],
        "eig": values,
    })
    path = ensure_dir(out) / f"design_trajectory_stage_{stage}.csv"
    df.to_csv(path, index=False)
    return path


def write_design_profile(out: Path, stage: int, profile: dict[str, np.ndarray]) -> Path:
    """Seed-averaged KL per EKI iteration for selected designs of one trajectory (one column each)."""
    n = max(len(v) for v in profile.values())
    df = pd.DataFrame({"iteration": np.arange(1, n + 1), **{k: np.asarray(v) for k, v in profile.items()}})
    path = ensure_dir(out) / f"design_profile_stage_{stage}.csv"
    df.to_csv(path, index=False)
    return path


def write_theta_trajectory(out: Path, rows: list[dict]) -> Path:
    path = ensure_dir(out) / "theta_trajectory.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def write_field_errors(out: Path, rows: list[dict]) -> Path:
    path = ensure_dir(out) / "field_errors.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def write_net_params(out: Path, stage: int, values: np.ndarray) -> Path:
    p = NetParams(np.asarray(values, dtype=float))
    path = ensure_dir(out) / f"net_params_stage_{stage}.csv"
    pd.DataFrame([p.values], columns=NetParams.header()).to_csv(path, index=False)
    return path


def read_net_params(path: Path) -> np.ndarray:
    return pd.read_csv(path).to_numpy(dtype=float)[0]


def write_table(out: Path, name: str, rows: list[dict]) -> Path:
    path = ensure_dir(out) / name
    pd.DataFrame(rows).to_csv(path, index=False)
    return path
