"""
Design gradients of the ensemble KL and of the EIG.

The ensemble after K EKI iterations depends on the design d through the
observation y(d), through the member predictions G(theta_n, d) at every
iteration, and through the members themselves. The reverse pass walks the
iterations backwards, applying the vector-Jacobian product of one Kalman
update at a time:

    Theta_{n+1} = Theta_n + R_n K_n^T,   R_n = y + E_n - G(Theta_n, d)
    K_n = C_tg S^-1,   S = C_gg + Gamma

Perturbations E_n are frozen, so d enters only through y, G and Theta_n.

Strategies:
    forward     value only
    tape        keeps every iteration's member responses (and source fields)
    checkpoint  keeps only Theta_n; responses are recomputed during the reverse
                pass and the replayed update must reproduce Theta_{n+1} exactly
"""

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from src.eki.core import (
    EIGSample,
    Ensemble,
    EnsembleForwardMap,
    GaussianPrior,
    GaussianReference,
    KalmanGain,
    MemberResponse,
    NoiseModel,
    Observation,
    ObservationProvider,
    draw_eig_samples,
    draw_perturbations,
    kalman_analysis,
)
from src.errors import CheckpointReplayError, MissingCheckpointError
from src.logs import get_logger
from src.metrics import SymMatrix, clipped_inverse
from src.observe import Design, DesignBox, nudge_off_grid
from src.records import DesignStopReason

__all__ = [
    "AllocationMeter",
    "CheckpointStore",
    "DesignGradient",
    "DesignTrajectory",
    "KalmanGain",
    "MemberResponse",
    "Observation",
    "Strategy",
    "grad_eig_wrt_design",
    "grad_kl_wrt_design",
    "optimize_design",
]


class Strategy(str, enum.Enum):
    FORWARD = "forward"
    TAPE = "tape"
    CHECKPOINT = "checkpoint"


@dataclass(frozen=True)
class DesignGradient:
    value: float
    grad: np.ndarray
    kl_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clip_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    peak_bytes: int = 0

    def __post_init__(self):
        if not np.isfinite(self.value) or not np.all(np.isfinite(self.grad)):
            raise ValueError(f"non-finite design gradient: value={self.value}, grad={self.grad}")


class AllocationMeter:
    """
    Counts bytes of arrays the gradient engine keeps alive.

    `hold` adds arrays that stay resident for the whole evaluation; `transient` records
    a short-lived workspace on top of the held total. Peak is the largest sum
    seen.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0

    def hold(self, *arrays: np.ndarray | None) -> int:
        n = sum(a.nbytes for a in arrays if a is not None)
        self.current += n
        self.peak = max(self.peak, self.current)
        return n

    def transient(self, *arrays: np.ndarray | None):
        self.transient_bytes(sum(a.nbytes for a in arrays if a is not None))

    def transient_bytes(self, nbytes: int):
        self.peak = max(self.peak, self.current + nbytes)


class CheckpointStore:
    """Per-iteration saved members, and responses when taping."""

    def __init__(self, meter: AllocationMeter, keep_responses: bool):
        self.meter = meter
        self.keep_responses = keep_responses
        self._thetas: dict[int, np.ndarray] = {}
        self._responses: dict[int, MemberResponse] = {}

    def save(self, n: int, theta: np.ndarray, response: MemberResponse | None = None):
        self._thetas[n] = theta
        self.meter.hold(theta)
        if self.keep_responses and response is not None:
            self._responses[n] = response
            self.meter.hold(response.g, response.dg_dd, response.dg_dtheta, response.fields)

    def theta(self, n: int) -> np.ndarray:
        if n not in self._thetas:
            raise MissingCheckpointError(f"no saved ensemble for EKI iteration {n}")
        return self._thetas[n]

    def response(self, n: int) -> MemberResponse | None:
        return self._responses.get(n)


# =============================================================================
# Reverse pass pieces
# =============================================================================

def _kl_seed(reference: GaussianReference, ens: Ensemble) -> np.ndarray:
    """d KL / d Theta_K for the closed-form ensemble KL."""
    size = ens.size
    delta = ens.mean - reference.mean
    d_mean = reference.precision @ delta
    cov_k = SymMatrix(reference.regularized(ens))
    s_hat = 0.5 * (reference.precision - clipped_inverse(cov_k, reference.floor))
    return np.outer(np.ones(size), d_mean) / size + 2.0 * ens.anomalies() @ s_hat / (size - 1)


def _step_vjp(
    theta_bar: np.ndarray,
    gain: KalmanGain,
    innovations: np.ndarray,
    response: MemberResponse,
    truncate: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Pull the adjoint of Theta_{n+1} back through one update.

    Returns (adjoint of Theta_n, design-gradient contribution via G, adjoint of y).
    """
    stats = gain.stats
    norm = theta_bar.shape[0] - 1
    a, b = stats.theta_anom, stats.g_anom

    r_bar = theta_bar @ gain.gain
    k_bar = theta_bar.T @ innovations
    g_bar = -r_bar
    y_bar = r_bar.sum(axis=0)

    c_tg_bar = gain.solve_s(k_bar.T).T
    c_gg_bar = -gain.solve_s(stats.c_tg.T @ c_tg_bar)
    b_bar = a @ c_tg_bar / norm + b @ (c_gg_bar + c_gg_bar.T) / norm
    g_bar = g_bar + b_bar - b_bar.mean(axis=0)

    d_bar = np.einsum("jq,jqk->k", g_bar, response.dg_dd)
    if truncate:
        return theta_bar, d_bar, y_bar

    a_bar = b @ c_tg_bar.T / norm
    prev = theta_bar + a_bar - a_bar.mean(axis=0) + np.einsum("jq,jqp->jp", g_bar, response.dg_dtheta)
    return prev, d_bar, y_bar


def grad_kl_wrt_design(
    d: Design,
    ens0: Ensemble,
    observation: Observation | ObservationProvider,
    forward: EnsembleForwardMap,
    noise: NoiseModel,
    n_iter: int,
    seed: np.random.SeedSequence | None = None,
    perturbations: np.ndarray | None = None,
    strategy: Strategy = Strategy.CHECKPOINT,
    truncate_theta_chain: bool = False,
    reference: GaussianReference | None = None,
    meter: AllocationMeter | None = None,
) -> DesignGradient:
    """
    Ensemble KL after n_iter EKI steps at design d, with its gradient in (d_x, d_y).

    The value is computed with the same operations as run_eki, so it matches
    run_eki bit for bit under the same perturbations.

    Args:
        observation: y(d) and dy/dd, or a provider evaluated at d
        seed: Seed for the perturbations when `perturbations` is not given
        truncate_theta_chain: Drop the dependence of K_n and G on earlier members
    """
    if n_iter < 1:
        raise ValueError(f"grad_kl_wrt_design needs at least one iteration, got {n_iter}")
    strategy = Strategy(strategy)
    obs = observation if isinstance(observation, Observation) else observation(d)
    y = np.atleast_1d(obs.value)
    if perturbations is None:
        if seed is None:
            raise ValueError("grad_kl_wrt_design needs a seed or pre-drawn perturbations")
        perturbations = draw_perturbations(noise, n_iter, ens0.size, seed)
    reference = reference or GaussianReference.from_ensemble(ens0)
    meter = meter or AllocationMeter()
    store = CheckpointStore(meter, keep_responses=strategy is Strategy.TAPE)

    ens = ens0
    kls, clips = [], []
    for n in range(n_iter):
        if strategy is Strategy.TAPE:
            response = forward.respond(d, ens.members)
            store.save(n, ens.members, response)
            g = response.g
        else:
            store.save(n, ens.members)
            g = forward.predict(d, ens.members)
            meter.transient_bytes(g.nbytes + forward.workspace_nbytes(ens.size))
        ens, _, _ = kalman_analysis(ens, y, g, noise, perturbations[n])
        score = reference.kl(ens)
        kls.append(score.value)
        clips.append(score.clipped)
    value = kls[-1]

    if strategy is Strategy.FORWARD:
        return DesignGradient(value=value, grad=np.zeros(2), kl_trace=np.array(kls), clip_counts=np.array(clips), peak_bytes=meter.peak)

    theta_bar = _kl_seed(reference, ens)
    grad = np.zeros(2)
    y_bar = np.zeros_like(y)
    stored_next = ens.members
    for n in range(n_iter - 1, -1, -1):
        theta_n = store.theta(n)
        response = store.response(n)
        if response is None:
            response = forward.respond(d, theta_n)
            meter.transient(response.g, response.dg_dd, response.dg_dtheta, response.fields)
        replayed, gain, innovations = kalman_analysis(Ensemble(theta_n, iteration=n), y, response.g, noise, perturbations[n])
        if not np.array_equal(replayed.members, stored_next):
            raise CheckpointReplayError(f"replay of EKI iteration {n} did not reproduce the stored ensemble")
        theta_bar, d_part, y_part = _step_vjp(theta_bar, gain, innovations, response, truncate_theta_chain)
        grad += d_part
        y_bar += y_part
        stored_next = theta_n

    grad += y_bar @ np.atleast_2d(obs.grad)
    return DesignGradient(value=value, grad=grad, kl_trace=np.array(kls), clip_counts=np.array(clips), peak_bytes=meter.peak)


def _sample_observation(sample: EIGSample, d: Design, forward: EnsembleForwardMap, observation: ObservationProvider | None) -> Observation:
    if observation is not None:
        base = observation(d)
        return Observation(value=np.atleast_1d(base.value) + sample.eta, grad=base.grad)
    r = forward.respond(d, sample.theta[None])
    return Observation(value=r.g[0] + sample.eta, grad=r.dg_dd[0])


def grad_eig_wrt_design(
    d: Design,
    prior: GaussianPrior,
    noise: NoiseModel,
    n_samples: int,
    n_iter: int,
    size: int,
    forward: EnsembleForwardMap,
    seed: np.random.SeedSequence | None = None,
    samples: Sequence[EIGSample] | None = None,
    observation: ObservationProvider | None = None,
    strategy: Strategy = Strategy.CHECKPOINT,
    truncate_theta_chain: bool = False,
    n_jobs: int = 1,
) -> DesignGradient:
    """Mean value and gradient over frozen (theta, eta) samples, one KL gradient per sample."""
    if samples is None:
        if seed is None:
            raise ValueError("grad_eig_wrt_design needs a seed or pre-drawn samples")
        samples = draw_eig_samples(prior, noise, n_samples, n_iter, size, seed)

    def one(sample: EIGSample) -> DesignGradient:
        return grad_kl_wrt_design(
            d, sample.ensemble, _sample_observation(sample, d, forward, observation), forward, noise, n_iter,
            perturbations=sample.perturbations, strategy=strategy, truncate_theta_chain=truncate_theta_chain,
        )

    parts = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(s) for s in samples)
    return DesignGradient(
        value=float(np.mean([p.value for p in parts])),
        grad=np.mean([p.grad for p in parts], axis=0),
        kl_trace=np.mean([p.kl_trace for p in parts], axis=0),
        clip_counts=np.sum([p.clip_counts for p in parts], axis=0),
        peak_bytes=max(p.peak_bytes for p in parts),
    )


# =============================================================================
# Design optimization
# =============================================================================

@dataclass
class DesignTrajectory:
    designs: list[Design]
    values: list[float]
    grads: list[np.ndarray]
    stop: DesignStopReason = DesignStopReason.MAX_ITERATIONS

    @property
    def final(self) -> Design:
        return self.designs[-1]

    @property
    def iterations(self) -> int:
        return len(self.designs) - 1


def optimize_design(
    d0: Design,
    objective: Callable[[Design, int], DesignGradient],
    box: DesignBox,
    grid=None,
    step: float = 0.01,
    max_iters: int = 70,
    tol: float | None = None,
    max_halvings: int = 6,
    resample_each_step: bool = False,
) -> DesignTrajectory:
    """
    Projected normalized gradient ascent with monotone acceptance.

    Each iteration moves `step` along grad/|grad|, projects into `box` and
    halves the step until the objective does not decrease. Stops at max_iters,
    on a zero gradient, when no step ascends, when the accepted move was
    clipped by the box, or when the gain drops below `tol`.

    `objective(design, realization)` must evaluate both designs of one
    comparison under the same realization. With resample_each_step every
    iteration uses a fresh realization index; otherwise index 0 throughout.
    """
    logger = get_logger()

    def place(x: float, y: float) -> Design:
        if grid is not None:
            x, y = nudge_off_grid(x, y, grid, box)
        return d0.moved(x, y)

    d = place(d0.x, d0.y)
    cur = objective(d, 0)
    traj = DesignTrajectory(designs=[d], values=[cur.value], grads=[cur.grad])

    for it in range(max_iters):
        realization = it if resample_each_step else 0
        if resample_each_step and it > 0:
            cur = objective(d, realization)
        norm = float(np.linalg.norm(cur.grad))
        if norm == 0.0:
            traj.stop = DesignStopReason.ZERO_GRADIENT
            break

        alpha = step
        accepted = None
        for _ in range(max_halvings + 1):
            px, py, clipped = box.project(*(d.xy + alpha * cur.grad / norm))
            cand_d = place(px, py)
            cand = objective(cand_d, realization)
            if cand.value >= cur.value:
                accepted = (cand_d, cand, clipped)
                break
            alpha *= 0.5
        if accepted is None:
            traj.stop = DesignStopReason.NO_ASCENT
            break

        cand_d, cand, clipped = accepted
        gain = cand.value - cur.value
        d, cur = cand_d, cand
        traj.designs.append(d)
        traj.values.append(cur.value)
        traj.grads.append(cur.grad)
        logger.debug(f"design iteration {it + 1}: d=({d.x:.4f}, {d.y:.4f}) value={cur.value:.6f}")

        if clipped:
            traj.stop = DesignStopReason.BOUNDARY
            break
        if tol is not None and gain < tol:
            traj.stop = DesignStopReason.TOLERANCE
            break

    logger.info(
        f"design optimization: {traj.iterations} step(s), stop={traj.stop.value}, "
        f"value {traj.values[0]:.5f} -> {traj.values[-1]:.5f}"
    )
    return traj
