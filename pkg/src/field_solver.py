"""
2D convection-diffusion solver for the contaminant testbed.

    du/dt = lap(u) - v(t) . grad(u) + S(z; theta),   u(z, 0) = 0

on a rectangle with zero-flux (homogeneous Neumann) walls. The scheme is a
finite-volume flux form: central differences for diffusion and first-order
upwind for advection, stepped with explicit Euler. Every interior face moves
mass from one node to its neighbour, so the discrete sum of u changes per step
only by the injected source.

Solves are batched over source fields: arrays are shaped (B, nx, ny) with
"ij" indexing (axis 1 is x, axis 2 is y).

The discrete adjoint of the stepper gives influence fields: for an
observation w . u(t_obs), the field Lam with w . u(t_obs) = Lam . s for every
time-independent source s. Point sensitivities with respect to source
parameters are then contractions of Lam with the source Jacobian.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from src.errors import InstabilityError, MissingCheckpointError, MissingSnapshotError, OutOfBoundsError
from src.logs import get_logger

SOURCE_PARAM_NAMES = ("theta_x", "theta_y", "theta_h", "theta_s")

# Index-space distance below which a coordinate is treated as lying on a grid line.
NODE_SNAP = 1e-10


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True)
class Grid2D:
    x_min: float = -2.0
    x_max: float = 3.0
    y_min: float = -2.0
    y_max: float = 3.0
    nx: int = 101
    ny: int = 101

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds must satisfy x_min < x_max and y_min < y_max")

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def xs(self) -> np.ndarray:
        return self.x_min + self.hx * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.y_min + self.hy * np.arange(self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def window(self, lo: float = 0.0, hi: float = 1.0) -> tuple[slice, slice]:
        """Index slices of the smallest block of cells covering [lo, hi]^2."""
        if not (self.contains(lo, lo) and self.contains(hi, hi)):
            raise OutOfBoundsError(f"window [{lo}, {hi}]^2 is not inside the grid")

        def span(h: float, origin: float, n: int) -> slice:
            a = (lo - origin) / h
            b = (hi - origin) / h
            first = int(math.floor(a + NODE_SNAP))
            last = int(math.ceil(b - NODE_SNAP))
            return slice(max(first, 0), min(max(last, first + 1), n - 1) + 1)

        return span(self.hx, self.x_min, self.nx), span(self.hy, self.y_min, self.ny)

    def subgrid(self, window: tuple[slice, slice]) -> "Grid2D":
        sx, sy = window
        xs, ys = self.xs[sx], self.ys[sy]
        return Grid2D(float(xs[0]), float(xs[-1]), float(ys[0]), float(ys[-1]), len(xs), len(ys))

    def describe(self) -> dict:
        return {
            "x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max,
            "nx": self.nx, "ny": self.ny, "hx": self.hx, "hy": self.hy,
        }


@dataclass(frozen=True)
class SourceParams:
    theta_x: float
    theta_y: float
    theta_h: float
    theta_s: float

    def __post_init__(self):
        if not self.theta_h > 0.0:
            raise ValueError(f"theta_h must be positive, got {self.theta_h}")
        if not (0.0 <= self.theta_x <= 1.0 and 0.0 <= self.theta_y <= 1.0):
            raise OutOfBoundsError(f"source location ({self.theta_x}, {self.theta_y}) outside [0,1]^2")

    def as_array(self) -> np.ndarray:
        return np.array([self.theta_x, self.theta_y, self.theta_h, self.theta_s])


@dataclass(frozen=True)
class VelocityLaw:
    """v_x(t) = v_y(t) = coefficient * t."""

    coefficient: float

    def at(self, t: float) -> tuple[float, float]:
        v = self.coefficient * t
        return v, v


@dataclass(frozen=True)
class TimeSchedule:
    """Uniform explicit-Euler step lattice t_k = k * dt."""

    dt: float

    def steps_to(self, t: float) -> int:
        k = int(round(t / self.dt))
        if k < 1 or abs(k * self.dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a positive multiple of the step {self.dt}")
        return k

    def times(self, n_steps: int) -> np.ndarray:
        return self.dt * np.arange(n_steps)


@dataclass(frozen=True)
class SolverSettings:
    """
    Time-step and safety knobs.

    The step is cfl * min(h^2/4, h/(|v_x|+|v_y|)) evaluated at the horizon, then
    shrunk so that it divides `quantum`. Solves sharing a horizon therefore share
    one step lattice, and every stage time that is a multiple of the quantum lands
    exactly on a step.
    """

    cfl: float = 0.4
    dt: float | None = None
    horizon: float | None = None
    quantum: float = 0.005
    blowup: float = 1e6

    def schedule(self, grid: Grid2D, vel: VelocityLaw, t_end: float) -> TimeSchedule:
        if self.dt is not None:
            return TimeSchedule(self.dt)
        horizon = max(self.horizon or 0.0, t_end)
        h = min(grid.hx, grid.hy)
        vx, vy = vel.at(horizon)
        limit = h * h / 4.0
        speed = abs(vx) + abs(vy)
        if speed > 0.0:
            limit = min(limit, h / speed)
        dt_max = self.cfl * limit
        return TimeSchedule(self.quantum / math.ceil(self.quantum / dt_max - 1e-12))


@dataclass(frozen=True)
class ScalarFieldSeries:
    grid: Grid2D
    snapshot_times: tuple[float, ...]
    values: np.ndarray
    schedule: TimeSchedule | None = None
    velocity: VelocityLaw | None = None
    window: tuple[slice, slice] | None = field(default=None, compare=False)

    def __post_init__(self):
        times = np.asarray(self.snapshot_times, dtype=float)
        if times.size and np.any(np.diff(times) <= 0.0):
            raise ValueError("snapshot_times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise InstabilityError("field series holds non-finite values")

    def index_of(self, t: float) -> int:
        for i, ts in enumerate(self.snapshot_times):
            if abs(ts - t) <= 1e-12 * max(1.0, abs(t)):
                return i
        raise MissingSnapshotError(f"no snapshot at t={t} (have {list(self.snapshot_times)})")

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index_of(t)]


# =============================================================================
# Source terms
# =============================================================================

def _point(z) -> tuple[np.ndarray, np.ndarray]:
    zx, zy = z
    return np.asarray(zx, dtype=float), np.asarray(zy, dtype=float)


def gaussian_source(z, t: float, p: SourceParams) -> np.ndarray:
    """(theta_s / 2 pi theta_h^2) exp(-|theta - z|^2 / 2 theta_h^2); t is unused."""
    zx, zy = _point(z)
    r2 = (p.theta_x - zx) ** 2 + (p.theta_y - zy) ** 2
    return p.theta_s / (2.0 * np.pi * p.theta_h ** 2) * np.exp(-r2 / (2.0 * p.theta_h ** 2))


def cauchy_source(z, t: float, p: SourceParams) -> np.ndarray:
    """3 theta_s / (pi (|theta - z|^2 / 2 theta_h^2 + 2 theta_h^2)); t is unused."""
    zx, zy = _point(z)
    r2 = (p.theta_x - zx) ** 2 + (p.theta_y - zy) ** 2
    return 3.0 * p.theta_s / (np.pi * (r2 / (2.0 * p.theta_h ** 2) + 2.0 * p.theta_h ** 2))


def gaussian_source_jacobian(z, p: SourceParams) -> np.ndarray:
    """Derivatives of gaussian_source in SOURCE_PARAM_NAMES order, stacked on axis 0."""
    zx, zy = _point(z)
    h2 = p.theta_h ** 2
    dx, dy = p.theta_x - zx, p.theta_y - zy
    r2 = dx ** 2 + dy ** 2
    shape = np.exp(-r2 / (2.0 * h2)) / (2.0 * np.pi * h2)
    s = p.theta_s * shape
    return np.stack([
        -s * dx / h2,
        -s * dy / h2,
        s * (r2 / (h2 * p.theta_h) - 2.0 / p.theta_h),
        shape,
    ])


def cauchy_source_jacobian(z, p: SourceParams) -> np.ndarray:
    zx, zy = _point(z)
    h2 = p.theta_h ** 2
    dx, dy = p.theta_x - zx, p.theta_y - zy
    r2 = dx ** 2 + dy ** 2
    q = r2 / (2.0 * h2) + 2.0 * h2
    outer = -3.0 * p.theta_s / (np.pi * q ** 2)
    return np.stack([
        outer * dx / h2,
        outer * dy / h2,
        outer * (-r2 / (h2 * p.theta_h) + 4.0 * p.theta_h),
        3.0 / (np.pi * q),
    ])


SourceFunction = Callable[[tuple[np.ndarray, np.ndarray], float], np.ndarray]


def source_field(source: SourceFunction | np.ndarray, grid: Grid2D) -> np.ndarray:
    """Evaluate a time-independent source on the grid nodes."""
    if callable(source):
        return np.asarray(source(grid.mesh(), 0.0), dtype=float) * np.ones(grid.shape)
    values = np.asarray(source, dtype=float)
    if values.shape[-2:] != grid.shape:
        raise ValueError(f"source field shape {values.shape} does not match grid {grid.shape}")
    return values


# =============================================================================
# Discrete operator and its transpose
# =============================================================================

def _apply_operator(u: np.ndarray, vx: float, vy: float, grid: Grid2D) -> np.ndarray:
    """L u for a batch u of shape (B, nx, ny): diffusion plus upwind advection, zero wall flux."""
    out = np.zeros_like(u)

    fx = (u[:, 1:, :] - u[:, :-1, :]) / grid.hx ** 2
    out[:, :-1, :] += fx
    out[:, 1:, :] -= fx
    fy = (u[:, :, 1:] - u[:, :, :-1]) / grid.hy ** 2
    out[:, :, :-1] += fy
    out[:, :, 1:] -= fy

    if vx != 0.0:
        ax = vx / grid.hx * (u[:, :-1, :] if vx > 0.0 else u[:, 1:, :])
        out[:, :-1, :] -= ax
        out[:, 1:, :] += ax
    if vy != 0.0:
        ay = vy / grid.hy * (u[:, :, :-1] if vy > 0.0 else u[:, :, 1:])
        out[:, :, :-1] -= ay
        out[:, :, 1:] += ay
    return out


def _apply_adjoint(lam: np.ndarray, vx: float, vy: float, grid: Grid2D) -> np.ndarray:
    """L^T lam; the diffusion part is symmetric, advection moves to the upwind node."""
    out = np.zeros_like(lam)

    fx = (lam[:, 1:, :] - lam[:, :-1, :]) / grid.hx ** 2
    out[:, :-1, :] += fx
    out[:, 1:, :] -= fx
    fy = (lam[:, :, 1:] - lam[:, :, :-1]) / grid.hy ** 2
    out[:, :, :-1] += fy
    out[:, :, 1:] -= fy

    if vx != 0.0:
        gx = vx / grid.hx * (lam[:, 1:, :] - lam[:, :-1, :])
        if vx > 0.0:
            out[:, :-1, :] += gx
        else:
            out[:, 1:, :] += gx
    if vy != 0.0:
        gy = vy / grid.hy * (lam[:, :, 1:] - lam[:, :, :-1])
        if vy > 0.0:
            out[:, :, :-1] += gy
        else:
            out[:, :, 1:] += gy
    return out


# =============================================================================
# Forward solves
# =============================================================================

def solve_batch(
    sources: np.ndarray,
    vel: VelocityLaw,
    grid: Grid2D,
    snapshot_times: list[float] | tuple[float, ...],
    settings: SolverSettings = SolverSettings(),
    window: tuple[slice, slice] | None = None,
) -> np.ndarray:
    """
    March a batch of source fields and return snapshots shaped (B, n_snap, wx, wy).

    With `window`, only the nodes inside the window are stored; the march
    itself always runs on the full grid.
    """
    s = np.asarray(sources, dtype=float)
    if s.ndim == 2:
        s = s[None]
    if s.shape[1:] != grid.shape:
        raise ValueError(f"source batch shape {s.shape} does not match grid {grid.shape}")
    times = tuple(float(t) for t in snapshot_times)
    if not times or min(times) <= 0.0:
        raise ValueError("snapshot_times must be a non-empty subset of (0, t_end]")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("snapshot_times must be strictly increasing")

    schedule = settings.schedule(grid, vel, times[-1])
    targets = {schedule.steps_to(t): i for i, t in enumerate(times)}
    n_steps = max(targets)
    wx, wy = window if window is not None else (slice(None), slice(None))

    u = np.zeros_like(s)
    stored = np.empty((s.shape[0], len(times)) + u[:, wx, wy].shape[1:])
    for k in range(n_steps):
        vx, vy = vel.at(k * schedule.dt)
        u = u + schedule.dt * (_apply_operator(u, vx, vy, grid) + s)
        peak = float(np.max(np.abs(u)))
        if not np.isfinite(peak) or peak > settings.blowup:
            raise InstabilityError(
                f"field exceeded blow-up bound {settings.blowup:g} at step {k + 1} "
                f"(dt={schedule.dt:.3e}, t={(k + 1) * schedule.dt:.4f})"
            )
        if k + 1 in targets:
            stored[:, targets[k + 1]] = u[:, wx, wy]
    return stored


def solve(
    source: SourceFunction | np.ndarray,
    vel: VelocityLaw,
    grid: Grid2D,
    t_end: float,
    snapshot_times: list[float] | tuple[float, ...],
    settings: SolverSettings = SolverSettings(),
) -> ScalarFieldSeries:
    times = tuple(float(t) for t in snapshot_times)
    if times and max(times) > t_end + 1e-12:
        raise ValueError(f"snapshot time {max(times)} beyond t_end={t_end}")
    values = solve_batch(source_field(source, grid), vel, grid, times, settings)[0]
    schedule = settings.schedule(grid, vel, times[-1])
    get_logger().debug(
        f"solve: {grid.nx}x{grid.ny} grid, dt={schedule.dt:.3e}, {schedule.steps_to(times[-1])} steps, "
        f"{len(times)} snapshots"
    )
    return ScalarFieldSeries(grid=grid, snapshot_times=times, values=values, schedule=schedule, velocity=vel)


# =============================================================================
# Observation weights and adjoint
# =============================================================================

def bilinear_stencil(grid: Grid2D, x: float, y: float) -> tuple[int, int, float, float]:
    """Lower-left node (i, j) of the cell holding (x, y) and the local fractions (fx, fy)."""
    if not grid.contains(x, y):
        raise OutOfBoundsError(f"point ({x}, {y}) outside grid [{grid.x_min},{grid.x_max}]x[{grid.y_min},{grid.y_max}]")

    def locate(value: float, lo: float, h: float, n: int) -> tuple[int, float]:
        t = (value - lo) / h
        if abs(t - round(t)) < NODE_SNAP:
            t = float(round(t))
        i = min(int(math.floor(t)), n - 2)
        return i, t - i

    i, fx = locate(x, grid.x_min, grid.hx, grid.nx)
    j, fy = locate(y, grid.y_min, grid.hy, grid.ny)
    return i, j, fx, fy


def point_weights(grid: Grid2D, x: float, y: float) -> np.ndarray:
    """
    Bilinear weights as fields, shaped (3, nx, ny): w, dw/dx, dw/dy.

    w . u is the interpolated value; the other two give its exact derivative
    with respect to the point (piecewise constant per cell).
    """
    i, j, fx, fy = bilinear_stencil(grid, x, y)
    w = np.zeros((3,) + grid.shape)
    w[0, i, j] = (1 - fx) * (1 - fy)
    w[0, i + 1, j] = fx * (1 - fy)
    w[0, i, j + 1] = (1 - fx) * fy
    w[0, i + 1, j + 1] = fx * fy
    w[1, i, j] = -(1 - fy) / grid.hx
    w[1, i + 1, j] = (1 - fy) / grid.hx
    w[1, i, j + 1] = -fy / grid.hx
    w[1, i + 1, j + 1] = fy / grid.hx
    w[2, i, j] = -(1 - fx) / grid.hy
    w[2, i + 1, j] = -fx / grid.hy
    w[2, i, j + 1] = (1 - fx) / grid.hy
    w[2, i + 1, j + 1] = fx / grid.hy
    return w


def influence_fields(
    weights: np.ndarray,
    vel: VelocityLaw,
    grid: Grid2D,
    t_obs: float,
    settings: SolverSettings = SolverSettings(),
    schedule: TimeSchedule | None = None,
) -> np.ndarray:
    """
    Discrete adjoint of the stepper for a batch of observation weights.

    Returns Lam (same shape as `weights`) such that w . u(t_obs) = Lam . s for any
    time-independent source s, with u produced by solve_batch on the same step
    lattice. Lam = sum_k dt lam_{k+1}, lam_K = w, lam_k = lam_{k+1} + dt L_k^T lam_{k+1}.
    """
    lam = np.asarray(weights, dtype=float)
    if lam.ndim == 2:
        lam = lam[None]
    schedule = schedule or settings.schedule(grid, vel, t_obs)
    n_steps = schedule.steps_to(t_obs)
    total = np.zeros_like(lam)
    for k in range(n_steps - 1, -1, -1):
        total += schedule.dt * lam
        if k > 0:
            vx, vy = vel.at(k * schedule.dt)
            lam = lam + schedule.dt * _apply_adjoint(lam, vx, vy, grid)
    return total if np.ndim(weights) == 3 else total[0]


def adjoint_point_sensitivity(
    series: ScalarFieldSeries,
    obs: tuple[tuple[float, float], int],
    source_jacobian: Callable[[tuple[np.ndarray, np.ndarray]], np.ndarray],
) -> np.ndarray:
    """
    Gradient of the interpolated snapshot value at `obs` with respect to the
    source parameters, by the discrete adjoint of the stepper.

    `obs` is ((x, y), snapshot_index); `source_jacobian(mesh)` returns the
    per-parameter source derivatives stacked on axis 0. The series must carry
    the step schedule and velocity it was produced with.
    """
    if series.schedule is None or series.velocity is None:
        raise MissingCheckpointError("field series carries no step schedule; re-run solve() to record it")
    (x, y), index = obs
    if not 0 <= index < len(series.snapshot_times):
        raise MissingSnapshotError(f"snapshot index {index} out of range")
    grid = series.grid
    lam = influence_fields(
        point_weights(grid, x, y)[0], series.velocity, grid, series.snapshot_times[index], schedule=series.schedule
    )
    jac = np.asarray(source_jacobian(grid.mesh()), dtype=float)
    return np.tensordot(jac, lam, axes=([-2, -1], [0, 1]))
