"""
Observation operator and forward map.

Measurements are bilinear interpolations of a concentration snapshot at a
design location, plus Gaussian noise for the truth system. The forward map
G(theta, d) is a PDE solve followed by interpolation.

Inside ensemble methods every member is observed at the same design, so G is
evaluated through a point kernel: the adjoint influence fields of the
interpolation weights (value, d/dx, d/dy). One adjoint march per design then
gives predictions, design gradients and parameter gradients for any number
of source fields.
"""

import enum
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from src.discrepancy_net import N_PARAMS, TrainingRecord, nn_forward, nn_input_grad, nn_param_vjp
from src.eki.core import MemberResponse, Observation
from src.errors import OutOfBoundsError
from src.field_solver import (
    Grid2D,
    ScalarFieldSeries,
    SolverSettings,
    SourceParams,
    VelocityLaw,
    bilinear_stencil,
    cauchy_source,
    cauchy_source_jacobian,
    gaussian_source,
    gaussian_source_jacobian,
    influence_fields,
    point_weights,
    solve,
)

DEFAULT_STEP = 0.2
GRID_NUDGE = 1e-9


# =============================================================================
# Designs and measurements
# =============================================================================

@dataclass(frozen=True)
class Design:
    x: float
    y: float
    stage_time: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise OutOfBoundsError(f"design ({self.x}, {self.y}) outside [0,1]^2")

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def moved(self, x: float, y: float) -> "Design":
        return Design(float(x), float(y), self.stage_time)


@dataclass(frozen=True)
class DesignBox:
    """Feasible rectangle: the step box around the previous design intersected with [0,1]^2."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    @classmethod
    def around(cls, prev: Design | None, step: float = DEFAULT_STEP) -> "DesignBox":
        if prev is None:
            return cls(0.0, 1.0, 0.0, 1.0)
        box = cls(max(0.0, prev.x - step), min(1.0, prev.x + step), max(0.0, prev.y - step), min(1.0, prev.y + step))
        if box.x_lo > box.x_hi or box.y_lo > box.y_hi:
            raise OutOfBoundsError(f"step box around ({prev.x}, {prev.y}) does not meet [0,1]^2")
        return box

    def project(self, x: float, y: float) -> tuple[float, float, bool]:
        """Clip (x, y) into the box; the flag reports whether clipping happened."""
        px = min(max(x, self.x_lo), self.x_hi)
        py = min(max(y, self.y_lo), self.y_hi)
        return px, py, (px != x or py != y)

    def contains(self, x: float, y: float) -> bool:
        return self.x_lo <= x <= self.x_hi and self.y_lo <= y <= self.y_hi

    def lattice(self, n: int) -> list[tuple[float, float]]:
        xs = np.linspace(self.x_lo, self.x_hi, n) if self.x_hi > self.x_lo else np.array([self.x_lo])
        ys = np.linspace(self.y_lo, self.y_hi, n) if self.y_hi > self.y_lo else np.array([self.y_lo])
        return [(float(x), float(y)) for x in xs for y in ys]


def project_design(x: float, y: float, prev: Design | None, stage_time: float, step: float = DEFAULT_STEP) -> Design:
    px, py, _ = DesignBox.around(prev, step).project(x, y)
    return Design(px, py, stage_time)


def nudge_off_grid(x: float, y: float, grid: Grid2D, box: DesignBox | None = None, eps: float = GRID_NUDGE) -> tuple[float, float]:
    """Move a coordinate lying within eps of a grid line to eps off it, staying inside the box."""
    box = box or DesignBox(0.0, 1.0, 0.0, 1.0)

    def shift(value: float, origin: float, h: float, lo: float, hi: float) -> float:
        line = origin + round((value - origin) / h) * h
        if abs(value - line) >= eps:
            return value
        up = line + eps
        return up if up <= hi else line - eps

    return shift(x, grid.x_min, grid.hx, box.x_lo, box.x_hi), shift(y, grid.y_min, grid.hy, box.y_lo, box.y_hi)


@dataclass(frozen=True)
class Measurement:
    design: Design
    value: float
    noise_var: float

    def __post_init__(self):
        if not self.noise_var > 0.0:
            raise ValueError(f"noise_var must be positive, got {self.noise_var}")


def interpolate_with_grad(snapshot: np.ndarray, grid: Grid2D, x: float, y: float) -> tuple[float, float, float]:
    """Bilinear value at (x, y) and its exact derivatives along x and y."""
    i, j, fx, fy = bilinear_stencil(grid, x, y)
    u00, u10 = snapshot[i, j], snapshot[i + 1, j]
    u01, u11 = snapshot[i, j + 1], snapshot[i + 1, j + 1]
    value = (1 - fx) * (1 - fy) * u00 + fx * (1 - fy) * u10 + (1 - fx) * fy * u01 + fx * fy * u11
    gx = ((1 - fy) * (u10 - u00) + fy * (u11 - u01)) / grid.hx
    gy = ((1 - fx) * (u01 - u00) + fx * (u11 - u10)) / grid.hy
    return float(value), float(gx), float(gy)


def measure_truth(
    truth: ScalarFieldSeries,
    d: Design,
    noise_var: float,
    seed: np.random.SeedSequence | int,
) -> Measurement:
    """Noisy truth reading; the same seed always gives the same value."""
    clean, _, _ = interpolate_with_grad(truth.at(d.stage_time), truth.grid, d.x, d.y)
    rng = np.random.default_rng(seed)
    return Measurement(design=d, value=clean + float(np.sqrt(noise_var) * rng.standard_normal()), noise_var=noise_var)


# =============================================================================
# Source models
# =============================================================================

class SourceFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    CAUCHY = "cauchy"
    CAUCHY_NN = "cauchy_nn"


class Calibrated(str, enum.Enum):
    """Which block of the source parameters an inference step works on."""

    LOCATION = "location"
    STRENGTH = "strength"
    NETWORK = "network"


@dataclass(frozen=True, eq=False)
class SourceModel:
    family: SourceFamily
    params: SourceParams
    net: np.ndarray | None = None

    def __post_init__(self):
        if self.family is SourceFamily.CAUCHY_NN:
            net = np.zeros(N_PARAMS) if self.net is None else np.asarray(self.net, dtype=float).ravel()
            if net.size != N_PARAMS:
                raise ValueError(f"network correction needs {N_PARAMS} parameters, got {net.size}")
            object.__setattr__(self, "net", net)
        elif self.net is not None:
            raise ValueError(f"{self.family.value} source takes no network parameters")

    def vector(self, calibrated: Calibrated) -> np.ndarray:
        if calibrated is Calibrated.LOCATION:
            return np.array([self.params.theta_x, self.params.theta_y])
        if calibrated is Calibrated.STRENGTH:
            return np.array([self.params.theta_s])
        self._require_net()
        return self.net.copy()

    def with_vector(self, calibrated: Calibrated, v) -> "SourceModel":
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if calibrated is Calibrated.LOCATION:
            return replace(self, params=replace(self.params, theta_x=float(v[0]), theta_y=float(v[1])))
        if calibrated is Calibrated.STRENGTH:
            return replace(self, params=replace(self.params, theta_s=float(v[0])))
        self._require_net()
        return replace(self, net=v.copy())

    def with_location(self, theta_x: float, theta_y: float) -> "SourceModel":
        return self.with_vector(Calibrated.LOCATION, [theta_x, theta_y])

    def _require_net(self):
        if self.family is not SourceFamily.CAUCHY_NN:
            raise ValueError(f"{self.family.value} source has no network parameters")

    def _offsets(self, grid: Grid2D) -> np.ndarray:
        zx, zy = grid.mesh()
        return np.column_stack([(zx - self.params.theta_x).ravel(), (zy - self.params.theta_y).ravel()])

    def field(self, grid: Grid2D) -> np.ndarray:
        mesh = grid.mesh()
        if self.family is SourceFamily.GAUSSIAN:
            return gaussian_source(mesh, 0.0, self.params)
        base = cauchy_source(mesh, 0.0, self.params)
        if self.family is SourceFamily.CAUCHY_NN:
            offsets = self._offsets(grid)
            base = base + nn_forward(offsets[:, 0], offsets[:, 1], self.net).reshape(grid.shape)
        return base

    def fields(self, grid: Grid2D, calibrated: Calibrated, thetas: np.ndarray) -> np.ndarray:
        """Source fields (B, nx, ny) for a batch of calibrated vectors (B, p)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        return np.stack([self.with_vector(calibrated, t).field(grid) for t in thetas])

    def _jacobian(self, grid: Grid2D, calibrated: Calibrated) -> np.ndarray:
        """d source / d calibrated block as fields (p, nx, ny); location and strength blocks only."""
        mesh = grid.mesh()
        full = (gaussian_source_jacobian if self.family is SourceFamily.GAUSSIAN else cauchy_source_jacobian)(mesh, self.params)
        if calibrated is Calibrated.STRENGTH:
            return full[3:4]
        jac = full[0:2].copy()
        if self.family is SourceFamily.CAUCHY_NN:
            ig = nn_input_grad(self._offsets(grid), self.net)
            jac -= ig.T.reshape((2,) + grid.shape)
        return jac

    def sensitivities(self, grid: Grid2D, calibrated: Calibrated, thetas: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """
        d (lam_c . s(theta_b)) / d theta_b for every member b and kernel channel c, shape (B, C, p).
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        lam = np.asarray(lam, dtype=float)
        if lam.ndim == 2:
            lam = lam[None]
        out = []
        for t in thetas:
            member = self.with_vector(calibrated, t)
            if calibrated is Calibrated.NETWORK:
                out.append(nn_param_vjp(member._offsets(grid), member.net, lam.reshape(lam.shape[0], -1)))
            else:
                out.append(np.einsum("pxy,cxy->cp", member._jacobian(grid, calibrated), lam))
        return np.stack(out)


@dataclass(frozen=True)
class Physics:
    grid: Grid2D
    velocity: VelocityLaw
    settings: SolverSettings = SolverSettings()


@dataclass(frozen=True, eq=False)
class ModelConfig:
    physics: Physics
    source: SourceModel
    calibrated: Calibrated

    def with_source(self, source: SourceModel) -> "ModelConfig":
        return replace(self, source=source)


def forward_map_G(theta, d: Design, cfg: ModelConfig) -> float:
    """PDE solve under the calibrated vector theta, interpolated at d."""
    model = cfg.source.with_vector(cfg.calibrated, theta)
    ph = cfg.physics
    series = solve(model.field(ph.grid), ph.velocity, ph.grid, d.stage_time, [d.stage_time], ph.settings)
    value, _, _ = interpolate_with_grad(series.values[0], ph.grid, d.x, d.y)
    return value


def solve_truth(model: SourceModel, physics: Physics, stage_times: list[float]) -> ScalarFieldSeries:
    return solve(model.field(physics.grid), physics.velocity, physics.grid, max(stage_times), stage_times, physics.settings)


# =============================================================================
# Point kernels
# =============================================================================

@lru_cache(maxsize=128)
def point_kernel(physics: Physics, x: float, y: float, t: float) -> np.ndarray:
    """
    Influence fields (3, nx, ny) of the interpolated value at (x, y, t) and of
    its x and y derivatives. Cached per (physics, point, time); read-only.
    """
    grid = physics.grid
    kern = influence_fields(point_weights(grid, x, y), physics.velocity, grid, t, physics.settings)
    kern.flags.writeable = False
    return kern


def _contract(fields: np.ndarray, kern: np.ndarray) -> np.ndarray:
    return np.einsum("bxy,cxy->bc", fields, kern)


@dataclass(frozen=True, eq=False)
class KernelForwardMap:
    """Ensemble forward map G(theta, d) with the calibrated block of `cfg.source` varying."""

    cfg: ModelConfig

    def _kernel(self, d: Design) -> np.ndarray:
        return point_kernel(self.cfg.physics, float(d.x), float(d.y), float(d.stage_time))

    def workspace_nbytes(self, n_members: int) -> int:
        nx, ny = self.cfg.physics.grid.shape
        return 8 * n_members * nx * ny

    def predict(self, d: Design, thetas: np.ndarray) -> np.ndarray:
        fields = self.cfg.source.fields(self.cfg.physics.grid, self.cfg.calibrated, thetas)
        return _contract(fields, self._kernel(d))[:, :1]

    def respond(self, d: Design, thetas: np.ndarray) -> MemberResponse:
        grid = self.cfg.physics.grid
        kern = self._kernel(d)
        fields = self.cfg.source.fields(grid, self.cfg.calibrated, thetas)
        c = _contract(fields, kern)
        sens = self.cfg.source.sensitivities(grid, self.cfg.calibrated, thetas, kern[:1])
        return MemberResponse(g=c[:, :1], dg_dd=c[:, None, 1:], dg_dtheta=sens, fields=fields)


@dataclass(frozen=True, eq=False)
class TruthObservation:
    """y(d) read noise-free from the truth field, with its interpolation gradient."""

    truth: ScalarFieldSeries

    def __call__(self, d: Design) -> Observation:
        v, gx, gy = interpolate_with_grad(self.truth.at(d.stage_time), self.truth.grid, d.x, d.y)
        return Observation(value=np.array([v]), grad=np.array([[gx, gy]]))


@dataclass(frozen=True, eq=False)
class PredictedObservation:
    """y(d) predicted by the model at a fixed calibrated vector."""

    forward: KernelForwardMap
    theta: np.ndarray

    def __call__(self, d: Design) -> Observation:
        r = self.forward.respond(d, np.atleast_2d(self.theta))
        return Observation(value=r.g[0], grad=r.dg_dd[0])


@dataclass(frozen=True, eq=False)
class DatasetPredictor:
    """Predictions of every training record under the calibrated block; feeds discrepancy_net.train."""

    cfg: ModelConfig
    records: tuple[TrainingRecord, ...]

    def _kernels(self) -> np.ndarray:
        return np.stack([point_kernel(self.cfg.physics, float(r.x), float(r.y), float(r.stage_time))[0] for r in self.records])

    def predict(self, params: np.ndarray) -> np.ndarray:
        fields = self.cfg.source.fields(self.cfg.physics.grid, self.cfg.calibrated, params)
        return _contract(fields, self._kernels())

    def value_and_jacobian(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        params = np.atleast_2d(params)
        kernels = self._kernels()
        grid = self.cfg.physics.grid
        fields = self.cfg.source.fields(grid, self.cfg.calibrated, params)
        pred = _contract(fields, kernels)[0]
        jac = self.cfg.source.sensitivities(grid, self.cfg.calibrated, params, kernels)[0]
        return pred, jac
