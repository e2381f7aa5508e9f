"""
Stage records and seed bookkeeping for the sequential design loop.
"""

import enum
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np


class StageStatus(enum.Enum):
    COMPLETED = "COMPLETED"
    NETWORK_STEP_SKIPPED = "NETWORK_STEP_SKIPPED"
    NETWORK_STEP_FAILED = "NETWORK_STEP_FAILED"


class DesignStopReason(enum.Enum):
    MAX_ITERATIONS = "MAX_ITERATIONS"
    BOUNDARY = "BOUNDARY"
    TOLERANCE = "TOLERANCE"
    ZERO_GRADIENT = "ZERO_GRADIENT"
    NO_ASCENT = "NO_ASCENT"


def substream(seed: np.random.SeedSequence, *path: int) -> np.random.SeedSequence:
    """
    Child seed at `path` below `seed`.

    Equal to the child obtained by spawning, but computed from the spawn key so
    it does not depend on how many children were spawned before.
    """
    return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(int(p) for p in path))


@dataclass(frozen=True)
class SeedRecord:
    """Entropy and spawn key of a SeedSequence; enough to rebuild it exactly."""

    entropy: int
    spawn_key: tuple[int, ...]

    @classmethod
    def of(cls, seed: np.random.SeedSequence) -> "SeedRecord":
        return cls(entropy=int(seed.entropy), spawn_key=tuple(int(k) for k in seed.spawn_key))

    def rebuild(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.entropy, spawn_key=self.spawn_key)


@dataclass
class StageRecord:
    """
    Audit trail of one stage. Fields are filled in the order the stage runs;
    the record is serialized once the stage finishes.
    """

    stage: int
    stage_time: float
    seed: SeedRecord
    status: StageStatus = StageStatus.COMPLETED
    d_g: tuple[float, float] | None = None
    y_g: float | None = None
    eig_physical: float | None = None
    map_estimate: tuple[float, float] | None = None
    distance: float | None = None
    sigma_eq: float | None = None
    map_after_training: tuple[float, float] | None = None
    distance_after_training: float | None = None
    sigma_eq_after_training: float | None = None
    d_nn: tuple[float, float] | None = None
    y_nn: float | None = None
    design_stop: DesignStopReason | None = None
    design_iterations: int = 0
    eig_trace: list[float] = field(default_factory=list)
    design_trajectory: list[tuple[float, float]] = field(default_factory=list)
    theta_before: list[float] | None = None
    theta_after: list[float] | None = None
    training_loss: tuple[float, float] | None = None
    kl_trace: list[float] = field(default_factory=list)
    clip_counts: list[int] = field(default_factory=list)
    error: str | None = None
    wall_time: dict[str, float] = field(default_factory=dict)
    peak_bytes: int | None = None

    def to_json_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["status"] = self.status.value
        out["design_stop"] = self.design_stop.value if self.design_stop else None
        out["seed"] = {"entropy": str(self.seed.entropy), "spawn_key": list(self.seed.spawn_key)}
        return _plain(out)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value
