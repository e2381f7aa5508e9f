"""
Prefect flows for the hybrid sequential design loop.

Each stage:
1. picks the physical design by exhaustive EIG search on the grid posterior
2. measures the truth there and updates the posterior, giving a MAP location
3. (stage 2 onward, corrected runs only) picks the network design by
   gradient ascent on the ensemble EIG with the MAP location fixed
4. measures the truth at that design and retrains the calibrated block
5. redoes the stage's Bayesian update under the retrained model

The posterior after step 5 is the next stage's prior.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from prefect import flow, get_run_logger, task
from prefect.cache_policies import NONE

from src import artifacts
from src.bayes_grid import (
    GridPosterior,
    PredictionCache,
    flatten_prior,
    log_likelihood_grid,
    optimize_design_physical,
    posterior_metrics,
    posterior_update_log,
)
from src.config import RunConfig
from src.discrepancy_net import TrainingRecord, TrainingResult, TrainingSet, eki_mean_update, train
from src.eki.ad_engine import DesignGradient, DesignTrajectory, Strategy, grad_eig_wrt_design, optimize_design
from src.eki.core import GaussianPrior, NoiseModel, draw_eig_samples, eig_estimate
from src.field_solver import Grid2D, ScalarFieldSeries, solve_batch
from src.metrics import mean_squared_error, relative_error
from src.observe import (
    Calibrated,
    Design,
    DesignBox,
    DatasetPredictor,
    KernelForwardMap,
    Measurement,
    ModelConfig,
    Physics,
    SourceModel,
    TruthObservation,
    measure_truth,
    solve_truth,
)
from src.records import SeedRecord, StageRecord, StageStatus, substream

LOCAL_RADIUS = 0.04


# =============================================================================
# Loop state
# =============================================================================

@dataclass(frozen=True, eq=False)
class LoopState:
    """Everything a stage reads from the previous one."""

    prior: GridPosterior
    model: ModelConfig
    d_prev: Design
    data: TrainingSet = field(default_factory=TrainingSet)
    cache: PredictionCache | None = None


@dataclass(frozen=True, eq=False)
class StageContext:
    """Run-wide, read-only inputs of every stage."""

    cfg: RunConfig
    truth: ScalarFieldSeries
    truth_source: SourceModel
    uncorrected: SourceModel
    correction: bool


def initial_prior(cfg: RunConfig) -> GridPosterior:
    p = cfg.prior
    prior = GridPosterior.uniform(p.n_nodes) if p.kind == "uniform" else GridPosterior.gaussian(p.mean, p.std, p.n_nodes)
    if p.flatten_power is not None:
        prior = flatten_prior(prior, p.flatten_power)
    return prior


def initial_state(cfg: RunConfig) -> LoopState:
    return LoopState(prior=initial_prior(cfg), model=cfg.initial_model(), d_prev=cfg.initial_design())


def build_context(cfg: RunConfig, correction: bool | None = None) -> StageContext:
    physics = cfg.physics()
    truth_source = cfg.truth_source()
    return StageContext(
        cfg=cfg,
        truth=solve_truth(truth_source, physics, cfg.schedule.stage_times),
        truth_source=truth_source,
        uncorrected=cfg.initial_model().source,
        correction=cfg.correction if correction is None else correction,
    )


# =============================================================================
# Field errors
# =============================================================================

@dataclass(frozen=True)
class FieldErrors:
    mse: float
    re: float
    local_mse: float
    local_re: float


def _local_block(grid: Grid2D, x: float, y: float, radius: float) -> tuple[slice, slice]:
    """Nodes of the cells covering [x-r, x+r] x [y-r, y+r], clipped to the grid."""

    def span(c: float, origin: float, h: float, n: int) -> slice:
        lo = int(np.floor((c - radius - origin) / h + 1e-10))
        hi = int(np.ceil((c + radius - origin) / h - 1e-10))
        return slice(max(lo, 0), min(max(hi, lo + 1), n - 1) + 1)

    return span(x, grid.x_min, grid.hx, grid.nx), span(y, grid.y_min, grid.hy, grid.ny)


def field_errors(model_field: np.ndarray, truth_field: np.ndarray, grid: Grid2D, design: Design, radius: float = LOCAL_RADIUS) -> FieldErrors:
    """MSE and relative error over the whole reporting grid and in the block around `design`."""
    sx, sy = _local_block(grid, design.x, design.y, radius)
    return FieldErrors(
        mse=mean_squared_error(model_field, truth_field),
        re=relative_error(model_field, truth_field),
        local_mse=mean_squared_error(model_field[sx, sy], truth_field[sx, sy]),
        local_re=relative_error(model_field[sx, sy], truth_field[sx, sy]),
    )


def report_fields(physics: Physics, sources: list[SourceModel], stage_time: float) -> tuple[Grid2D, np.ndarray]:
    """Snapshots at stage_time on the [0,1]^2 reporting window, one per source."""
    window = physics.grid.window(0.0, 1.0)
    fields = np.stack([s.field(physics.grid) for s in sources])
    snaps = solve_batch(fields, physics.velocity, physics.grid, [stage_time], physics.settings, window=window)[:, 0]
    return physics.grid.subgrid(window), snaps


def field_error_report(
    corrected: SourceModel,
    uncorrected: SourceModel,
    truth: SourceModel,
    physics: Physics,
    stage_time: float,
    design: Design,
    radius: float = LOCAL_RADIUS,
) -> dict:
    """
    Corrected and uncorrected model fields against the truth at one stage.

    Both models sit at the same location so only the calibrated block differs.
    """
    grid, (u_corr, u_unc, u_true) = report_fields(physics, [corrected, uncorrected, truth], stage_time)
    c = field_errors(u_corr, u_true, grid, design, radius)
    u = field_errors(u_unc, u_true, grid, design, radius)
    return {
        "total_mse_corrected": c.mse, "total_re_corrected": c.re,
        "total_mse_uncorrected": u.mse, "total_re_uncorrected": u.re,
        "local_mse_corrected": c.local_mse, "local_re_corrected": c.local_re,
        "local_mse_uncorrected": u.local_mse, "local_re_uncorrected": u.local_re,
    }


# =============================================================================
# Tasks
# =============================================================================

@task(name="build_prediction_cache", cache_policy=NONE)
def build_prediction_cache(model: ModelConfig, stage_times: list[float], n_nodes: int, stride: int, threads: int) -> PredictionCache:
    return PredictionCache.build(model, stage_times, n=n_nodes, stride=stride, n_jobs=threads)


@task(name="select_physical_design", cache_policy=NONE)
def select_physical_design(
    d_prev: Design, prior: GridPosterior, stage_time: float, cache: PredictionCache, cfg: RunConfig, seed: np.random.SeedSequence,
):
    return optimize_design_physical(
        d_prev, prior, stage_time, cache, cfg.noise_var, cfg.physical.eig_samples, seed,
        step=cfg.schedule.step, n_lattice=cfg.physical.lattice,
    )


@task(name="take_measurement", cache_policy=NONE)
def take_measurement(truth: ScalarFieldSeries, d: Design, noise_var: float, seed: np.random.SeedSequence) -> Measurement:
    logger = get_run_logger()
    y = measure_truth(truth, d, noise_var, seed)
    logger.info(f"Measured y={y.value:.5f} at ({d.x:.4f}, {d.y:.4f}), t={d.stage_time}")
    return y


@task(name="update_physical_belief", cache_policy=NONE)
def update_physical_belief(prior: GridPosterior, y: Measurement, cache: PredictionCache) -> GridPosterior:
    return posterior_update_log(prior, log_likelihood_grid(y, y.design, cache))


@dataclass(frozen=True, eq=False)
class NetworkDesignResult:
    trajectory: DesignTrajectory
    final_gradient: DesignGradient
    profile: dict[str, np.ndarray]


@task(name="select_network_design", cache_policy=NONE)
def select_network_design(
    d_start: Design, model: ModelConfig, ctx: StageContext, seed: np.random.SeedSequence,
) -> NetworkDesignResult:
    """Gradient ascent on the ensemble EIG around the physical design, location fixed at the MAP."""
    cfg = ctx.cfg
    net = cfg.network
    forward = KernelForwardMap(model)
    prior = GaussianPrior(mean=model.source.vector(model.calibrated), var=net.prior_var)
    noise = NoiseModel.isotropic(cfg.noise_var)
    observation = TruthObservation(ctx.truth) if net.design_data_source == "measured" else None
    realizations: dict[int, list] = {}

    def objective(d: Design, realization: int) -> DesignGradient:
        if realization not in realizations:
            realizations[realization] = draw_eig_samples(
                prior, noise, net.eig_samples, net.iterations, net.ensemble_size, substream(seed, 0, realization)
            )
        return grad_eig_wrt_design(
            d, prior, noise, net.eig_samples, net.iterations, net.ensemble_size, forward,
            samples=realizations[realization], observation=observation, strategy=Strategy(net.strategy),
            truncate_theta_chain=net.truncate_theta_chain, n_jobs=cfg.threads,
        )

    box = DesignBox.around(d_start, net.box)
    traj = optimize_design(
        d_start, objective, box, grid=model.physics.grid, step=net.step, max_iters=net.max_iters,
        tol=net.tol, max_halvings=net.max_halvings, resample_each_step=net.resample_each_step,
    )
    final = objective(traj.final, traj.iterations if net.resample_each_step else 0)

    profile = {}
    if net.profile_seeds:
        picks = {"initial": traj.designs[0], "intermediate": traj.designs[len(traj.designs) // 2], "final": traj.final}
        for label, d in picks.items():
            est = eig_estimate(
                d, prior, noise, net.profile_seeds, net.iterations, net.ensemble_size, forward,
                seed=substream(seed, 1), observation=observation, n_jobs=cfg.threads,
            )
            profile[label] = est.kl_traces.mean(axis=0)
    return NetworkDesignResult(trajectory=traj, final_gradient=final, profile=profile)


@task(name="train_discrepancy", cache_policy=NONE)
def train_discrepancy(model: ModelConfig, data: TrainingSet, cfg: RunConfig, seed: np.random.SeedSequence) -> TrainingResult:
    settings = cfg.training_settings()
    predictor = DatasetPredictor(model, data.records)
    p0 = model.source.vector(model.calibrated)
    if settings.update_rule == "eki_mean":
        return eki_mean_update(p0, data, predictor, cfg.noise_var, seed, settings)
    return train(p0, data, predictor, settings)


@task(name="write_stage_artifacts", retries=2, retry_delay_seconds=5, cache_policy=NONE)
def write_stage_artifacts(out: str, record: StageRecord, posterior: GridPosterior, profile: dict, net_params: np.ndarray | None) -> str:
    artifacts.append_stage_record(out, record)
    artifacts.write_posterior(out, record.stage, posterior.thetas, posterior.probs)
    if record.kl_trace:
        artifacts.write_kl_trace(out, record.stage, record.kl_trace, record.clip_counts)
    if record.design_trajectory:
        artifacts.write_design_trajectory(out, record.stage, record.design_trajectory, record.eig_trace)
    if profile:
        artifacts.write_design_profile(out, record.stage, profile)
    if net_params is not None:
        artifacts.write_net_params(out, record.stage, net_params)
    return out


# =============================================================================
# Flows
# =============================================================================

@dataclass(frozen=True, eq=False)
class StageOutcome:
    state: LoopState
    record: StageRecord
    posterior: GridPosterior
    field_row: dict
    incoming_local: dict
    profile: dict


def _local_only(row: dict) -> dict:
    return {k: v for k, v in row.items() if k.startswith("local_")}


@flow(name="run_stage", log_prints=True, validate_parameters=False)
def run_stage(state: LoopState, ctx: StageContext, stage: int, seed: np.random.SeedSequence) -> StageOutcome:
    """One stage of the hybrid loop; `stage` is 1-based."""
    logger = get_run_logger()
    cfg = ctx.cfg
    times = cfg.schedule.stage_times
    stage_time = times[stage - 1]
    physics = state.model.physics
    record = StageRecord(stage=stage, stage_time=stage_time, seed=SeedRecord.of(seed))
    calibrated = state.model.calibrated
    theta_before = state.model.source.vector(calibrated)
    record.theta_before = theta_before.tolist()
    logger.info(f"[STAGE {stage}] t={stage_time}, theta={_short(theta_before)}")

    # -- physical design ------------------------------------------------------
    clock = time.perf_counter()
    cache = state.cache
    if cache is None or not cache.is_valid_for(state.model) or stage_time not in cache.stage_times:
        cache = build_prediction_cache(state.model, times[stage - 1:], state.prior.n, cfg.physical.cache_stride, cfg.threads)
    record.wall_time["cache"] = time.perf_counter() - clock

    clock = time.perf_counter()
    choice = select_physical_design(state.d_prev, state.prior, stage_time, cache, cfg, substream(seed, 0))
    d_g = choice.design
    y_g = take_measurement(ctx.truth, d_g, cfg.noise_var, substream(seed, 1))
    posterior = update_physical_belief(state.prior, y_g, cache)
    summary = posterior_metrics(posterior, (ctx.truth_source.params.theta_x, ctx.truth_source.params.theta_y))
    record.wall_time["physical"] = time.perf_counter() - clock
    record.d_g, record.y_g, record.eig_physical = (d_g.x, d_g.y), y_g.value, choice.eig
    record.map_estimate, record.distance, record.sigma_eq = summary.map.location, summary.distance, summary.sigma_eq
    logger.info(
        f"[STAGE {stage}] d_G=({d_g.x:.3f}, {d_g.y:.3f}) MAP={summary.map.location} "
        f"D={summary.distance:.4f} sigma_eq={summary.sigma_eq:.4f}"
    )

    map_model = state.model.with_source(state.model.source.with_location(*summary.map.location))
    incoming_local = _local_only(field_error_report(
        map_model.source, ctx.uncorrected.with_location(*summary.map.location), ctx.truth_source, physics, stage_time, d_g,
    ))

    # -- network design and training -----------------------------------------
    model, data, final_posterior, profile = map_model, state.data, posterior, {}
    if not ctx.correction or stage == 1:
        record.status = StageStatus.NETWORK_STEP_SKIPPED
        logger.info(f"[STAGE {stage}] network step skipped ({'baseline run' if not ctx.correction else 'first stage'})")
    else:
        try:
            clock = time.perf_counter()
            design = select_network_design(d_g, map_model, ctx, substream(seed, 2))
            record.wall_time["network_design"] = time.perf_counter() - clock
            traj = design.trajectory
            d_nn = traj.final
            record.d_nn = (d_nn.x, d_nn.y)
            record.design_stop, record.design_iterations = traj.stop, traj.iterations
            record.eig_trace = list(traj.values)
            record.design_trajectory = [(d.x, d.y) for d in traj.designs]
            record.kl_trace = design.final_gradient.kl_trace.tolist()
            record.clip_counts = design.final_gradient.clip_counts.tolist()
            record.peak_bytes = design.final_gradient.peak_bytes
            profile = design.profile

            y_nn = take_measurement(ctx.truth, d_nn, cfg.noise_var, substream(seed, 3))
            record.y_nn = y_nn.value
            data = data.append(TrainingRecord(x=d_nn.x, y=d_nn.y, stage_time=stage_time, value=y_nn.value, stage=stage))

            clock = time.perf_counter()
            result = train_discrepancy(map_model, data, cfg, substream(seed, 4))
            record.wall_time["training"] = time.perf_counter() - clock
            record.training_loss = (result.loss_initial, result.loss_final)
            model = map_model.with_source(map_model.source.with_vector(calibrated, result.params))

            clock = time.perf_counter()
            cache = build_prediction_cache(model, times[stage - 1:], state.prior.n, cfg.physical.cache_stride, cfg.threads)
            final_posterior = update_physical_belief(state.prior, y_g, cache)
            after = posterior_metrics(final_posterior, (ctx.truth_source.params.theta_x, ctx.truth_source.params.theta_y))
            record.wall_time["recondition"] = time.perf_counter() - clock
            record.map_after_training = after.map.location
            record.distance_after_training, record.sigma_eq_after_training = after.distance, after.sigma_eq
            model = model.with_source(model.source.with_location(*after.map.location))
            logger.info(
                f"[STAGE {stage}] d_NN=({d_nn.x:.3f}, {d_nn.y:.3f}) stop={traj.stop.value}, "
                f"loss {result.loss_initial:.3e} -> {result.loss_final:.3e}, D after retraining={after.distance:.4f}"
            )
        except Exception as e:
            logger.error(f"[STAGE {stage}] network step failed, keeping theta: {e}")
            record.status = StageStatus.NETWORK_STEP_FAILED
            record.error = f"{type(e).__name__}: {e}"
            model, data, final_posterior = map_model, state.data, posterior

    record.theta_after = model.source.vector(calibrated).tolist()
    final_map = posterior_metrics(final_posterior, (ctx.truth_source.params.theta_x, ctx.truth_source.params.theta_y)).map
    field_row = {"stage": stage, "stage_time": stage_time, **field_error_report(
        model.source.with_location(*final_map.location), ctx.uncorrected.with_location(*final_map.location),
        ctx.truth_source, physics, stage_time, d_g,
    )}

    next_state = LoopState(prior=final_posterior, model=model, d_prev=d_g, data=data, cache=cache)
    return StageOutcome(
        state=next_state, record=record, posterior=final_posterior, field_row=field_row,
        incoming_local=incoming_local, profile=profile,
    )


def _short(theta: np.ndarray) -> str:
    return f"{theta[0]:.4f}" if theta.size == 1 else f"|theta|={np.linalg.norm(theta):.4f} ({theta.size} params)"


def _theta_row(record: StageRecord) -> dict:
    before, after = np.asarray(record.theta_before), np.asarray(record.theta_after)
    row = {"stage": record.stage, "stage_time": record.stage_time, "status": record.status.value}
    if before.size == 1:
        row.update(theta_s_before=float(before[0]), theta_s_after=float(after[0]))
    else:
        row.update(theta_norm_before=float(np.linalg.norm(before)), theta_norm_after=float(np.linalg.norm(after)))
    return row


@flow(name="run_sequential", log_prints=True, validate_parameters=False)
def run_sequential(cfg: RunConfig, n_stages: int | None = None, correction: bool | None = None, out: str | None = None) -> list[StageRecord]:
    """
    Thread posterior, designs and calibrated parameters through the stages.

    The stage seed is child `i` of the run seed, so corrected and baseline
    runs with one seed see the same measurement noise at the same design.
    """
    logger = get_run_logger()
    n_stages = n_stages or len(cfg.schedule.stage_times)
    if not 1 <= n_stages <= len(cfg.schedule.stage_times):
        raise ValueError(f"n_stages must be in [1, {len(cfg.schedule.stage_times)}], got {n_stages}")
    ctx = build_context(cfg, correction)
    state = initial_state(cfg)
    root = np.random.SeedSequence(cfg.seed)
    records, field_rows, theta_rows = [], [], []
    logger.info(f"Starting {'corrected' if ctx.correction else 'baseline'} run '{cfg.name}' with {n_stages} stage(s), seed={cfg.seed}")

    for stage in range(1, n_stages + 1):
        outcome = run_stage(state, ctx, stage, substream(root, stage))
        if field_rows:
            field_rows[-1].update({f"next_{k}": v for k, v in outcome.incoming_local.items()})
        records.append(outcome.record)
        field_rows.append(outcome.field_row)
        theta_rows.append(_theta_row(outcome.record))
        if out is not None:
            net = outcome.state.model.source.net if outcome.state.model.calibrated is Calibrated.NETWORK else None
            write_stage_artifacts(out, outcome.record, outcome.posterior, outcome.profile, net)
        state = outcome.state

    if out is not None:
        artifacts.write_theta_trajectory(out, theta_rows)
        artifacts.write_field_errors(out, field_rows)
    statuses = {s.value: sum(r.status is s for r in records) for s in StageStatus}
    logger.info(f"Run '{cfg.name}' complete: {statuses}, final D={final_distance(records[-1]):.4f}")
    return records


def final_distance(record: StageRecord) -> float:
    return record.distance_after_training if record.distance_after_training is not None else record.distance


def summarize(records: list[StageRecord]) -> dict:
    last = records[-1]
    return {
        "stages": len(records),
        "final_distance": final_distance(last),
        "final_sigma_eq": last.sigma_eq_after_training if last.sigma_eq_after_training is not None else last.sigma_eq,
        "final_map": list(last.map_after_training or last.map_estimate),
        "final_theta": last.theta_after,
        "distance_trace": [final_distance(r) for r in records],
        "statuses": [r.status.value for r in records],
    }


@flow(name="run_experiment", log_prints=True, validate_parameters=False)
def run_experiment(cfg: RunConfig) -> dict:
    """
    Corrected run, plus the uncorrected baseline when compare_baseline is set.

    The metrics summary is written only after every run finished.
    """
    logger = get_run_logger()
    out = artifacts.ensure_dir(cfg.out_path)
    artifacts.write_manifest(out, cfg.manifest())
    logger.info("=" * 60)
    logger.info(f"Hybrid design experiment '{cfg.name}' -> {out}")
    logger.info("=" * 60)

    records = run_sequential(cfg, out=str(out))
    summary = {"name": cfg.name, "seed": cfg.seed, "correction": cfg.correction, **summarize(records)}
    if cfg.compare_baseline and cfg.correction:
        baseline = run_sequential(cfg, correction=False, out=str(out / "baseline"))
        summary["baseline"] = summarize(baseline)
        summary["beats_baseline"] = summary["final_distance"] < summary["baseline"]["final_distance"]

    artifacts.write_json_atomic(out / "metrics_summary.json", summary)
    logger.info(f"Experiment complete: {summary}")
    return summary


def replay_stage(state: LoopState, ctx: StageContext, record: StageRecord) -> StageRecord:
    """Rerun one stage from its recorded seed and the state it started from."""
    return run_stage(state, ctx, record.stage, record.seed.rebuild()).record


__all__ = [
    "LoopState",
    "StageContext",
    "StageOutcome",
    "build_context",
    "field_error_report",
    "field_errors",
    "initial_state",
    "replay_stage",
    "run_experiment",
    "run_sequential",
    "run_stage",
]
