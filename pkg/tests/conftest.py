import numpy as np
import pytest
from prefect.testing.utilities import prefect_test_harness

from src.config import PRESETS, RunConfig
from src.field_solver import Grid2D, SolverSettings, VelocityLaw
from src.observe import Physics


@pytest.fixture(scope="session")
def prefect_harness():
    with prefect_test_harness():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def coarse_grid() -> Grid2D:
    return Grid2D(nx=21, ny=21)


@pytest.fixture
def settings() -> SolverSettings:
    return SolverSettings(horizon=0.055)


@pytest.fixture
def coarse_physics(coarse_grid, settings) -> Physics:
    return Physics(grid=coarse_grid, velocity=VelocityLaw(20.0), settings=settings)


def tiny_config(preset: str = "parametric-coarse", **updates) -> RunConfig:
    """Coarse preset cut down so a full stage runs in seconds."""
    data = PRESETS[preset].model_dump()
    data["prior"]["n_nodes"] = 11
    data["physical"].update(eig_samples=8, lattice=3)
    data["network"].update(eig_samples=2, iterations=2, max_iters=3, profile_seeds=2)
    data["training"]["max_epochs"] = 20
    data["schedule"]["stage_times"] = [0.030, 0.035, 0.040]
    for key, value in updates.items():
        section, _, name = key.partition("__")
        if name:
            data[section][name] = value
        else:
            data[section] = value
    return RunConfig.model_validate(data)


@pytest.fixture
def tiny_cfg(tmp_path) -> RunConfig:
    return tiny_config(output_dir=str(tmp_path / "run"))
