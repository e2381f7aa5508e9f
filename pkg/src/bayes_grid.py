"""
Grid-based Bayesian inference for the source location (theta_x, theta_y).

The belief lives on a fixed n x n lattice over [0,1]^2 (51 x 51 by default),
stored as a flat probability vector with node k = i * n + j at
(i / (n-1), j / (n-1)). Predictions G(theta_k, d) for every node come from a
PredictionCache built once per stage and model state; every candidate design
and every EIG sample reads from it.
"""

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp, rel_entr

from src.errors import DegenerateUpdateError, SupportViolationError
from src.field_solver import Grid2D, bilinear_stencil, solve_batch
from src.logs import get_logger
from src.metrics import SymMatrix, equivalent_std, gaussian_density, gaussian_log_density, map_distance
from src.observe import Design, DesignBox, Measurement, ModelConfig

DEFAULT_NODES = 51
NORMALIZATION_TOL = 1e-12


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True, eq=False)
class GridPosterior:
    probs: np.ndarray
    n: int = DEFAULT_NODES

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).ravel()
        if p.size != self.n * self.n:
            raise ValueError(f"expected {self.n * self.n} probabilities, got {p.size}")
        if np.any(p < 0.0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_weights(cls, weights: np.ndarray, n: int = DEFAULT_NODES) -> "GridPosterior":
        w = np.asarray(weights, dtype=float).ravel()
        total = w.sum()
        if not (np.isfinite(total) and total > 0.0):
            raise DegenerateUpdateError(f"cannot normalize weights with total {total!r}")
        return cls(w / total, n)

    @classmethod
    def uniform(cls, n: int = DEFAULT_NODES) -> "GridPosterior":
        return cls(np.full(n * n, 1.0 / (n * n)), n)

    @classmethod
    def gaussian(cls, mean: tuple[float, float], std: float, n: int = DEFAULT_NODES) -> "GridPosterior":
        """Isotropic Gaussian evaluated at the lattice nodes and renormalized."""
        thetas = lattice(n)
        r2 = (thetas[:, 0] - mean[0]) ** 2 + (thetas[:, 1] - mean[1]) ** 2
        return cls.from_weights(np.exp(-0.5 * r2 / std ** 2), n)

    @property
    def thetas(self) -> np.ndarray:
        return lattice(self.n)

    @property
    def mean(self) -> np.ndarray:
        return self.probs @ self.thetas

    def covariance(self) -> SymMatrix:
        dev = self.thetas - self.mean
        return SymMatrix((dev * self.probs[:, None]).T @ dev)


@dataclass(frozen=True)
class PhysMAP:
    theta_x_star: float
    theta_y_star: float
    index: int

    @property
    def location(self) -> tuple[float, float]:
        return (self.theta_x_star, self.theta_y_star)


@dataclass(frozen=True)
class PosteriorSummary:
    map: PhysMAP
    distance: float
    sigma_eq: float


def lattice(n: int = DEFAULT_NODES) -> np.ndarray:
    """Node coordinates (n*n, 2) in flat index order."""
    axis = np.linspace(0.0, 1.0, n)
    tx, ty = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([tx.ravel(), ty.ravel()])


# =============================================================================
# Prediction cache
# =============================================================================

@dataclass(frozen=True, eq=False)
class PredictionCache:
    """
    Snapshots of the model field for every solved lattice node, stored on the
    block of grid cells covering [0,1]^2.

    With stride > 1 only every stride-th node per axis is solved and node
    predictions are interpolated linearly in (theta_x, theta_y).
    """

    values: np.ndarray
    window_grid: Grid2D
    stage_times: tuple[float, ...]
    n: int
    stride: int
    fingerprint: tuple[float, ...] = field(default=())

    @classmethod
    def build(
        cls,
        cfg: ModelConfig,
        stage_times: list[float],
        n: int = DEFAULT_NODES,
        stride: int = 1,
        n_jobs: int = 1,
        chunk: int = 64,
    ) -> "PredictionCache":
        if stride < 1 or (n - 1) % stride:
            raise ValueError(f"stride {stride} must divide n - 1 = {n - 1}")
        logger = get_logger()
        ph = cfg.physics
        window = ph.grid.window(0.0, 1.0)
        solved = lattice((n - 1) // stride + 1)
        times = tuple(sorted(float(t) for t in stage_times))

        def run(block: np.ndarray) -> np.ndarray:
            sources = np.stack([cfg.source.with_location(tx, ty).field(ph.grid) for tx, ty in block])
            return solve_batch(sources, ph.velocity, ph.grid, times, ph.settings, window=window)

        blocks = [solved[i:i + chunk] for i in range(0, len(solved), chunk)]
        parts = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(run)(b) for b in blocks)
        values = np.concatenate(parts)
        logger.info(
            f"prediction cache: {len(solved)} node solves (stride {stride}), times {list(times)}, "
            f"{values.nbytes / 1e6:.1f} MB"
        )
        return cls(
            values=values, window_grid=ph.grid.subgrid(window), stage_times=times, n=n, stride=stride,
            fingerprint=cache_fingerprint(cfg),
        )

    def is_valid_for(self, cfg: ModelConfig) -> bool:
        return self.fingerprint == cache_fingerprint(cfg)

    def predictions(self, d: Design) -> np.ndarray:
        """G(theta_k, d) for every lattice node, flat order."""
        try:
            t_idx = next(i for i, t in enumerate(self.stage_times) if abs(t - d.stage_time) <= 1e-12)
        except StopIteration:
            raise KeyError(f"prediction cache holds no snapshot at t={d.stage_time}") from None
        i, j, fx, fy = bilinear_stencil(self.window_grid, d.x, d.y)
        v = self.values[:, t_idx]
        solved = ((1 - fx) * (1 - fy) * v[:, i, j] + fx * (1 - fy) * v[:, i + 1, j]
                  + (1 - fx) * fy * v[:, i, j + 1] + fx * fy * v[:, i + 1, j + 1])
        if self.stride == 1:
            return solved
        m = (self.n - 1) // self.stride + 1
        axis = np.linspace(0.0, 1.0, m)
        interp = RegularGridInterpolator((axis, axis), solved.reshape(m, m), method="linear")
        return interp(lattice(self.n))


def cache_fingerprint(cfg: ModelConfig) -> tuple[float, ...]:
    """Everything besides the location that changes model predictions."""
    src = cfg.source
    net = tuple(src.net.tolist()) if src.net is not None else ()
    return (src.family.value, src.params.theta_h, src.params.theta_s) + net


# =============================================================================
# Likelihood, update, utility
# =============================================================================

def likelihood_grid(y: Measurement, d: Design, cache: PredictionCache) -> np.ndarray:
    return gaussian_density(y.value, cache.predictions(d), y.noise_var)


def log_likelihood_grid(y: Measurement, d: Design, cache: PredictionCache) -> np.ndarray:
    return gaussian_log_density(y.value, cache.predictions(d), y.noise_var)


def posterior_update(prior: GridPosterior, likelihood: np.ndarray) -> GridPosterior:
    """Pointwise product with the likelihood, renormalized."""
    lik = np.asarray(likelihood, dtype=float)
    if not np.all(np.isfinite(lik)):
        raise ValueError("likelihood must be finite")
    weights = prior.probs * lik
    if not weights.sum() > 0.0:
        raise DegenerateUpdateError("posterior has no mass: likelihood vanishes on the prior support")
    return GridPosterior.from_weights(weights, prior.n)


def posterior_update_log(prior: GridPosterior, log_likelihood: np.ndarray) -> GridPosterior:
    """Same update computed from log-likelihoods; survives likelihoods that underflow."""
    with np.errstate(divide="ignore"):
        logw = np.log(prior.probs) + np.asarray(log_likelihood, dtype=float)
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateUpdateError("posterior has no mass: log-weights are all -inf")
    return GridPosterior.from_weights(np.exp(logw - top), prior.n)


def kl_utility(posterior: GridPosterior, prior: GridPosterior) -> float:
    """Sum of p_post ln(p_post / p_prior) with 0 ln 0 = 0."""
    if np.any((posterior.probs > 0.0) & (prior.probs == 0.0)):
        raise SupportViolationError("posterior puts mass on nodes where the prior has none")
    return float(np.sum(rel_entr(posterior.probs, prior.probs)))


def eig_physical(
    d: Design,
    prior: GridPosterior,
    noise_var: float,
    n_samples: int,
    cache: PredictionCache,
    seed: np.random.SeedSequence,
) -> float:
    """
    Monte Carlo EIG: draw theta from the prior lattice and y = G(theta, d) + noise,
    then average the KL of the resulting posteriors. The seed fixes the draws,
    so candidates scored with one seed share them.
    """
    rng = np.random.default_rng(seed)
    u = rng.random(n_samples)
    z = rng.standard_normal(n_samples)
    cdf = np.cumsum(prior.probs)
    nodes = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), prior.probs.size - 1)
    preds = cache.predictions(d)
    ys = preds[nodes] + np.sqrt(noise_var) * z

    with np.errstate(divide="ignore"):
        log_prior = np.log(prior.probs)
    logw = log_prior[None, :] + gaussian_log_density(ys[:, None], preds[None, :], noise_var)
    post = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    post /= post.sum(axis=1, keepdims=True)
    return float(np.mean(np.sum(rel_entr(post, prior.probs[None, :]), axis=1)))


@dataclass(frozen=True)
class PhysicalDesignChoice:
    design: Design
    eig: float
    candidates: list[tuple[float, float, float]]


def optimize_design_physical(
    d_prev: Design,
    prior: GridPosterior,
    stage_time: float,
    cache: PredictionCache,
    noise_var: float,
    n_samples: int,
    seed: np.random.SeedSequence,
    step: float = 0.2,
    n_lattice: int = 9,
) -> PhysicalDesignChoice:
    """
    Exhaustive EIG search over an n_lattice x n_lattice lattice spanning the
    step box around d_prev (intersected with [0,1]^2). d_prev itself is
    candidate 0, so it wins every tie.
    """
    box = DesignBox.around(d_prev, step)
    points = [(d_prev.x, d_prev.y)] + [p for p in box.lattice(n_lattice) if p != (d_prev.x, d_prev.y)]
    scores = np.array([
        eig_physical(Design(x, y, stage_time), prior, noise_var, n_samples, cache, seed) for x, y in points
    ])
    best = int(np.argmax(scores))
    choice = Design(points[best][0], points[best][1], stage_time)
    get_logger().info(
        f"physical design: ({choice.x:.3f}, {choice.y:.3f}) EIG={scores[best]:.4f} over {len(points)} candidates"
    )
    return PhysicalDesignChoice(
        design=choice, eig=float(scores[best]), candidates=[(x, y, float(s)) for (x, y), s in zip(points, scores)]
    )


def flatten_prior(p: GridPosterior, power: float) -> GridPosterior:
    """p_i^power renormalized; power < 1 spreads a peaked prior toward uniform."""
    if not power > 0.0:
        raise ValueError(f"flattening power must be positive, got {power}")
    return GridPosterior.from_weights(p.probs ** power, p.n)


def map_estimate(post: GridPosterior) -> PhysMAP:
    """Argmax node; ties go to the lowest flat index."""
    k = int(np.argmax(post.probs))
    tx, ty = post.thetas[k]
    return PhysMAP(theta_x_star=float(tx), theta_y_star=float(ty), index=k)


def posterior_metrics(post: GridPosterior, truth: tuple[float, float]) -> PosteriorSummary:
    m = map_estimate(post)
    return PosteriorSummary(map=m, distance=map_distance(m.location, truth), sigma_eq=equivalent_std(post.covariance()))
