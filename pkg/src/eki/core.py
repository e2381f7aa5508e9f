"""
Ensemble Kalman inversion (perturbed-observation variant).

Each iteration moves every member with the Kalman gain built from ensemble
statistics:

    theta_j <- theta_j + C_tg (C_gg + Gamma)^-1 (y + eps_j - g_j)

All iterations condition on the same observation y. The information gained is
scored by the closed-form Gaussian KL between the initial and current
ensembles, and averaging that score over sampled (theta, eta) pairs gives the
reparameterized expected information gain.

Random draws are taken up front (perturbations shaped (K, J, q)) so repeated
evaluations, and the gradient engine in src.eki.ad_engine, see the same
realization.
"""

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from src.errors import NumericalFailureError
from src.logs import get_logger
from src.metrics import DEFAULT_JITTER, JitterPolicy, SymMatrix, condition_number, logdet_spd
from src.records import substream


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True)
class Ensemble:
    members: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        m = np.asarray(self.members, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if m.ndim != 2:
            raise ValueError(f"ensemble members must be a (J, d) array, got shape {m.shape}")
        if m.shape[0] < 2:
            raise ValueError(f"ensemble needs J >= 2 members, got {m.shape[0]}")
        if not np.all(np.isfinite(m)):
            raise ValueError("ensemble members must be finite")
        object.__setattr__(self, "members", m)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def anomalies(self) -> np.ndarray:
        return self.members - self.mean

    def covariance(self) -> np.ndarray:
        a = self.anomalies()
        return a.T @ a / (self.size - 1)


@dataclass(frozen=True)
class EnsembleStats:
    mean_theta: np.ndarray
    mean_g: np.ndarray
    c_tt: np.ndarray
    c_tg: np.ndarray
    c_gg: np.ndarray
    theta_anom: np.ndarray
    g_anom: np.ndarray


StatsFn = Callable[["Ensemble", np.ndarray], EnsembleStats]


@dataclass(frozen=True)
class NoiseModel:
    gamma: np.ndarray

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if g.shape[0] != g.shape[1] or not np.allclose(g, g.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(g).max())):
            raise ValueError("noise covariance must be a symmetric matrix")
        try:
            chol = np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise ValueError("noise covariance must be positive definite") from exc
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def isotropic(cls, var: float, dim: int = 1) -> "NoiseModel":
        return cls(var * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.dim)) @ self._chol.T


@dataclass(frozen=True)
class KalmanGain:
    """K_n = C_tg (C_gg + Gamma)^-1 with the factor of S = C_gg + Gamma kept for reverse passes."""

    gain: np.ndarray
    s_factor: tuple
    stats: EnsembleStats

    def solve_s(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self.s_factor, rhs)


@dataclass(frozen=True)
class KLValue:
    value: float
    clipped: int


@dataclass(frozen=True)
class EKIRun:
    trajectory: list[Ensemble]
    kl_trace: np.ndarray
    clip_counts: np.ndarray
    predictions: list[np.ndarray]

    @property
    def final(self) -> Ensemble:
        return self.trajectory[-1]

    @property
    def kl(self) -> float:
        return float(self.kl_trace[-1])


@dataclass(frozen=True)
class MemberResponse:
    """
    Per-member predictions (J, q) with design (J, q, 2) and parameter (J, q, p)
    derivatives. `fields` optionally carries the member source fields the
    predictions were contracted from, for workspace accounting.
    """

    g: np.ndarray
    dg_dd: np.ndarray
    dg_dtheta: np.ndarray
    fields: np.ndarray | None = None


class EnsembleForwardMap(Protocol):
    """Predictions for a batch of parameter vectors at one design, shape (J, q)."""

    def predict(self, design, thetas: np.ndarray) -> np.ndarray: ...

    def respond(self, design, thetas: np.ndarray) -> MemberResponse: ...

    def workspace_nbytes(self, n_members: int) -> int:
        """Bytes of short-lived workspace one predict() call needs beyond its output."""


@dataclass(frozen=True)
class Observation:
    """Observed value y(d), shape (q,), and its design gradient dy/dd, shape (q, 2)."""

    value: np.ndarray
    grad: np.ndarray


ObservationProvider = Callable[[object], Observation]


# =============================================================================
# Statistics and the analysis step
# =============================================================================

def ensemble_stats(ens: Ensemble, g: np.ndarray) -> EnsembleStats:
    """Ensemble means and covariances with 1/(J-1) normalization."""
    g = np.asarray(g, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[0] != ens.size:
        raise ValueError(f"predictions hold {g.shape[0]} rows for an ensemble of {ens.size}")
    mean_t = ens.mean
    mean_g = g.mean(axis=0)
    a = ens.members - mean_t
    b = g - mean_g
    norm = ens.size - 1
    return EnsembleStats(
        mean_theta=mean_t,
        mean_g=mean_g,
        c_tt=a.T @ a / norm,
        c_tg=a.T @ b / norm,
        c_gg=b.T @ b / norm,
        theta_anom=a,
        g_anom=b,
    )


def kalman_gain(stats: EnsembleStats, noise: NoiseModel) -> KalmanGain:
    s = stats.c_gg + noise.gamma
    try:
        factor = cho_factor(s)
    except LinAlgError as exc:
        raise NumericalFailureError("innovation covariance C_gg + Gamma is not positive definite") from exc
    gain = cho_solve(factor, stats.c_tg.T).T
    return KalmanGain(gain=gain, s_factor=factor, stats=stats)


def kalman_analysis(
    ens: Ensemble,
    y: np.ndarray,
    g: np.ndarray,
    noise: NoiseModel,
    perturbation: np.ndarray,
    stats_fn: StatsFn = ensemble_stats,
) -> tuple[Ensemble, KalmanGain, np.ndarray]:
    """One perturbed-observation update; returns the new ensemble, the gain and the innovations."""
    g = np.asarray(g, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    gain = kalman_gain(stats_fn(ens, g), noise)
    innovations = np.atleast_1d(y) + perturbation - g
    updated = Ensemble(ens.members + innovations @ gain.gain.T, iteration=ens.iteration + 1)
    return updated, gain, innovations


def eki_step(
    ens: Ensemble,
    y: np.ndarray,
    g: np.ndarray,
    noise: NoiseModel,
    rng: np.random.Generator | np.ndarray,
    stats_fn: StatsFn = ensemble_stats,
) -> Ensemble:
    """
    Update every member against its own perturbed copy of y.

    `rng` is either a Generator (perturbations drawn here) or a pre-drawn
    (J, q) perturbation array.
    """
    perturbation = noise.sample(rng, ens.size) if isinstance(rng, np.random.Generator) else np.asarray(rng)
    return kalman_analysis(ens, y, g, noise, perturbation, stats_fn)[0]


def draw_perturbations(noise: NoiseModel, n_iter: int, size: int, seed: np.random.SeedSequence) -> np.ndarray:
    """Perturbed-observation noise for a whole run, shape (n_iter, size, q)."""
    rng = np.random.default_rng(seed)
    return np.stack([noise.sample(rng, size) for _ in range(n_iter)]) if n_iter else np.zeros((0, size, noise.dim))


# =============================================================================
# Ensemble KL
# =============================================================================

@dataclass(frozen=True)
class GaussianReference:
    """
    Gaussian fit of the initial ensemble, prepared once for repeated KL scoring.

    When the initial covariance is ill-conditioned, the same jitter is added to
    it and to every compared covariance. Log-determinants clip eigenvalues at
    the jitter floor.
    """

    mean: np.ndarray
    cov: np.ndarray
    precision: np.ndarray
    logdet: float
    floor: float
    jitter: float
    clipped: int

    @classmethod
    def from_ensemble(cls, ens0: Ensemble, policy: JitterPolicy = DEFAULT_JITTER) -> "GaussianReference":
        raw = SymMatrix(ens0.covariance())
        floor = policy.floor(raw)
        if not floor > 0.0:
            raise NumericalFailureError("initial ensemble covariance is zero; KL reference undefined")
        jitter = floor if condition_number(raw) > policy.max_condition else 0.0
        cov = raw.values + jitter * np.eye(raw.dim)
        try:
            factor = cho_factor(cov)
        except LinAlgError as exc:
            raise NumericalFailureError("initial ensemble covariance is singular after regularization") from exc
        precision = cho_solve(factor, np.eye(raw.dim))
        precision = 0.5 * (precision + precision.T)
        ld = logdet_spd(SymMatrix(cov), floor=floor)
        if jitter or ld.clipped:
            get_logger().warning(
                f"KL reference: jitter={jitter:.3e}, {ld.clipped} eigenvalue(s) clipped at {floor:.3e} (d={raw.dim})"
            )
        return cls(mean=ens0.mean, cov=cov, precision=precision, logdet=ld.value, floor=floor, jitter=jitter, clipped=ld.clipped)

    @property
    def dim(self) -> int:
        return self.mean.size

    def regularized(self, ens: Ensemble) -> np.ndarray:
        return SymMatrix(ens.covariance()).values + self.jitter * np.eye(self.dim)

    def kl(self, ens: Ensemble) -> KLValue:
        if ens.dim != self.dim:
            raise ValueError(f"ensemble dimension {ens.dim} differs from reference dimension {self.dim}")
        cov_k = self.regularized(ens)
        ld = logdet_spd(SymMatrix(cov_k), floor=self.floor)
        delta = ens.mean - self.mean
        # tr(P0 Sigma_K) - d written as tr(P0 (Sigma_K - Sigma_0)); P0 is symmetric
        trace_term = float(np.sum(self.precision * (cov_k - self.cov)))
        value = 0.5 * (trace_term + self.logdet - ld.value + float(delta @ self.precision @ delta))
        return KLValue(value=value, clipped=ld.clipped)


def ensemble_kl(ens0: Ensemble, ensK: Ensemble, policy: JitterPolicy = DEFAULT_JITTER) -> float:
    """Closed-form KL between Gaussian fits of ensK and ens0, in nats."""
    return GaussianReference.from_ensemble(ens0, policy).kl(ensK).value


# =============================================================================
# Iterated EKI
# =============================================================================

def run_eki(
    ens0: Ensemble,
    y: np.ndarray,
    noise: NoiseModel,
    n_iter: int,
    forward: Callable[[np.ndarray], np.ndarray],
    seed: np.random.SeedSequence | None = None,
    perturbations: np.ndarray | None = None,
    stats_fn: StatsFn = ensemble_stats,
    kl_tol: float | None = None,
    reference: GaussianReference | None = None,
) -> EKIRun:
    """
    Apply n_iter EKI updates against the same observation y.

    Args:
        forward: Maps members (J, d) to predictions (J, q)
        seed: Seed for the perturbations when `perturbations` is not given
        kl_tol: Optional early stop once the KL increment drops below it

    Returns:
        EKIRun with the ensemble trajectory (ens0 first) and the KL trace
        D(ens0, ens_n) for n = 1..K actually run
    """
    if n_iter < 1:
        raise ValueError(f"run_eki needs at least one iteration, got {n_iter}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if perturbations is None:
        if seed is None:
            raise ValueError("run_eki needs a seed or pre-drawn perturbations")
        perturbations = draw_perturbations(noise, n_iter, ens0.size, seed)
    reference = reference or GaussianReference.from_ensemble(ens0)
    logger = get_logger()

    trajectory, predictions, kls, clips = [ens0], [], [], []
    ens = ens0
    for n in range(n_iter):
        g = np.asarray(forward(ens.members), dtype=float).reshape(ens.size, -1)
        ens, _, _ = kalman_analysis(ens, y, g, noise, perturbations[n], stats_fn)
        score = reference.kl(ens)
        trajectory.append(ens)
        predictions.append(g)
        kls.append(score.value)
        clips.append(score.clipped)
        logger.debug(f"EKI iteration {n + 1}/{n_iter}: KL={score.value:.6f} clipped={score.clipped}")
        if kl_tol is not None and n > 0 and abs(kls[-1] - kls[-2]) < kl_tol:
            logger.debug(f"EKI early stop at iteration {n + 1}: KL increment below {kl_tol:g}")
            break

    return EKIRun(trajectory=trajectory, kl_trace=np.array(kls), clip_counts=np.array(clips), predictions=predictions)


# =============================================================================
# Expected information gain
# =============================================================================

@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    var: float | np.ndarray

    @property
    def dim(self) -> int:
        return np.atleast_1d(self.mean).size

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        return mean + np.sqrt(self.var) * rng.standard_normal((n, mean.size))


@dataclass(frozen=True)
class EIGSample:
    """One frozen (theta, eta) pair plus the ensemble and perturbations its EKI run uses."""

    theta: np.ndarray
    eta: np.ndarray
    ensemble: Ensemble
    perturbations: np.ndarray


@dataclass(frozen=True)
class EIGEstimate:
    value: float
    sample_values: np.ndarray
    kl_traces: np.ndarray


def draw_eig_samples(
    prior: GaussianPrior,
    noise: NoiseModel,
    n_samples: int,
    n_iter: int,
    size: int,
    seed: np.random.SeedSequence,
) -> list[EIGSample]:
    """Sample m draws from substream m of `seed`, so samples do not depend on how many are drawn."""
    if n_samples < 1:
        raise ValueError(f"EIG needs at least one outer sample, got {n_samples}")
    samples = []
    for m in range(n_samples):
        rng_pair = np.random.default_rng(substream(seed, m, 0))
        theta = prior.sample(rng_pair, 1)[0]
        eta = noise.sample(rng_pair, 1)[0]
        ensemble = Ensemble(prior.sample(np.random.default_rng(substream(seed, m, 1)), size))
        perturbations = draw_perturbations(noise, n_iter, size, substream(seed, m, 2))
        samples.append(EIGSample(theta=theta, eta=eta, ensemble=ensemble, perturbations=perturbations))
    return samples


def sample_observation(sample: EIGSample, design, forward: EnsembleForwardMap, observation: ObservationProvider | None) -> np.ndarray:
    """y^m = G(theta^m, d) + eta^m, or y(d) + eta^m when an observation provider is given."""
    base = observation(design).value if observation is not None else forward.predict(design, sample.theta[None])[0]
    return np.atleast_1d(base) + sample.eta


def eig_estimate(
    design,
    prior: GaussianPrior,
    noise: NoiseModel,
    n_samples: int,
    n_iter: int,
    size: int,
    forward: EnsembleForwardMap,
    seed: np.random.SeedSequence | None = None,
    samples: Sequence[EIGSample] | None = None,
    observation: ObservationProvider | None = None,
    stats_fn: StatsFn = ensemble_stats,
    n_jobs: int = 1,
) -> EIGEstimate:
    """Monte Carlo mean of the ensemble KL after n_iter EKI steps over frozen (theta, eta) samples."""
    if samples is None:
        if seed is None:
            raise ValueError("eig_estimate needs a seed or pre-drawn samples")
        samples = draw_eig_samples(prior, noise, n_samples, n_iter, size, seed)

    def one(sample: EIGSample) -> EKIRun:
        y = sample_observation(sample, design, forward, observation)
        return run_eki(
            sample.ensemble, y, noise, n_iter, lambda th: forward.predict(design, th),
            perturbations=sample.perturbations, stats_fn=stats_fn,
        )

    runs = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(s) for s in samples)
    values = np.array([r.kl for r in runs])
    return EIGEstimate(value=float(values.mean()), sample_values=values, kl_traces=np.stack([r.kl_trace for r in runs]))
