"""
Command-line entry point.

    python -m src.cli run --config parametric-coarse.json
    python -m src.cli gradcheck --config parametric-coarse --truncate
    python -m src.cli bench --config structural --sweep ensemble-size
    python -m src.cli presets --out presets/

The config path falls back to ADEKI_CONFIG. Configs are validated before
anything is written. Exit status is 2 on a config or run error, and 1 when
gradcheck finds a design outside the tolerance.
"""

import argparse
import json
import sys
import time

import numpy as np
from scipy.stats import linregress

from src import artifacts
from src.config import PRESETS, RunConfig, load_run_config, with_overrides
from src.eki.ad_engine import AllocationMeter, Strategy, grad_kl_wrt_design
from src.eki.core import Ensemble, GaussianPrior, NoiseModel, draw_perturbations
from src.errors import AdekiError
from src.hybrid import run_experiment
from src.logs import get_logger
from src.observe import Design, KernelForwardMap, ModelConfig, TruthObservation, point_kernel, solve_truth
from src.records import substream

CELL_MARGIN = 2.0


# =============================================================================
# Shared setup
# =============================================================================

def _truth_located_model(cfg: RunConfig) -> ModelConfig:
    """Initial model placed at the true source location."""
    model = cfg.initial_model()
    t = cfg.truth
    return model.with_source(model.source.with_location(t.theta_x, t.theta_y))


def _initial_ensemble(model: ModelConfig, size: int, prior_var: float, seed: np.random.SeedSequence) -> Ensemble:
    prior = GaussianPrior(mean=model.source.vector(model.calibrated), var=prior_var)
    return Ensemble(prior.sample(np.random.default_rng(seed), size))


def interior_designs(cfg: RunConfig, n: int, margin: float, seed: np.random.SeedSequence, stage_time: float) -> list[Design]:
    """Uniform designs in [0,1]^2 at least `margin` away from every grid line."""
    grid = cfg.grid.build()
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        x, y = rng.uniform(0.0, 1.0, 2)
        fx = (x - grid.x_min) / grid.hx
        fy = (y - grid.y_min) / grid.hy
        if min(abs(fx - round(fx)) * grid.hx, abs(fy - round(fy)) * grid.hy) > margin:
            out.append(Design(float(x), float(y), stage_time))
    return out


def _relative(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(fd)), float(np.linalg.norm(analytic)))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(analytic - fd)) / scale


# =============================================================================
# Subcommands
# =============================================================================

def cmd_run(cfg: RunConfig) -> int:
    summary = run_experiment(cfg)
    print(json.dumps(summary, indent=2))
    return 0


def gradcheck(cfg: RunConfig, truncate: bool | None = None) -> list[dict]:
    """
    Analytic design gradient of the ensemble KL against central differences
    under common random numbers, at cell-interior designs.
    """
    logger = get_logger()
    gc = cfg.gradcheck
    truncate = gc.truncate_theta_chain if truncate is None else truncate
    stage_time = cfg.schedule.stage_times[min(gc.stage, len(cfg.schedule.stage_times) - 1)]
    root = np.random.SeedSequence(cfg.seed)
    model = _truth_located_model(cfg)
    forward = KernelForwardMap(model)
    noise = NoiseModel.isotropic(cfg.noise_var)
    observation = TruthObservation(solve_truth(cfg.truth_source(), model.physics, cfg.schedule.stage_times))
    ens0 = _initial_ensemble(model, gc.ensemble_size, cfg.network.prior_var, substream(root, 0))
    eps = draw_perturbations(noise, gc.iterations, gc.ensemble_size, substream(root, 1))
    designs = interior_designs(cfg, gc.n_designs, CELL_MARGIN * gc.fd_step, substream(root, 2), stage_time)

    def kl(d: Design) -> float:
        return grad_kl_wrt_design(d, ens0, observation, forward, noise, gc.iterations, perturbations=eps, strategy=Strategy.FORWARD).value

    rows = []
    for d in designs:
        res = grad_kl_wrt_design(d, ens0, observation, forward, noise, gc.iterations, perturbations=eps, truncate_theta_chain=truncate)
        h = gc.fd_step
        fd = np.array([
            (kl(d.moved(d.x + h, d.y)) - kl(d.moved(d.x - h, d.y))) / (2 * h),
            (kl(d.moved(d.x, d.y + h)) - kl(d.moved(d.x, d.y - h))) / (2 * h),
        ])
        rel = _relative(res.grad, fd)
        rows.append({
            "x": d.x, "y": d.y, "stage_time": d.stage_time, "kl": res.value,
            "grad_x": res.grad[0], "grad_y": res.grad[1], "fd_x": fd[0], "fd_y": fd[1],
            "rel_error": rel, "passed": rel < gc.tolerance, "truncated": truncate,
        })
        logger.debug(f"gradcheck ({d.x:.4f}, {d.y:.4f}): rel_error={rel:.3e}")
    return rows


def cmd_gradcheck(cfg: RunConfig, truncate: bool | None = None) -> int:
    logger = get_logger()
    rows = gradcheck(cfg, truncate)
    path = artifacts.write_table(artifacts.ensure_dir(cfg.out_path), "gradcheck.csv", rows)
    passed = sum(r["passed"] for r in rows)
    worst = max(r["rel_error"] for r in rows)
    verdict = "PASS" if passed == len(rows) else "FAIL"
    logger.info(f"gradcheck {verdict}: {passed}/{len(rows)} designs within {cfg.gradcheck.tolerance:g} (worst {worst:.3e}) -> {path}")
    print(f"{verdict} {passed}/{len(rows)} worst_rel_error={worst:.3e}")
    return 0 if verdict == "PASS" else 1


def bench(cfg: RunConfig, sweep: str) -> tuple[list[dict], list[dict]]:
    """
    Time and metered peak memory of one design-gradient evaluation per
    sweep point, strategy and repetition; plus a linear fit of time per strategy.
    """
    logger = get_logger()
    b = cfg.bench
    root = np.random.SeedSequence(cfg.seed)
    model = _truth_located_model(cfg)
    forward = KernelForwardMap(model)
    noise = NoiseModel.isotropic(cfg.noise_var)
    stage_time = cfg.schedule.stage_times[-1]
    observation = TruthObservation(solve_truth(cfg.truth_source(), model.physics, cfg.schedule.stage_times))
    d = interior_designs(cfg, 1, 1e-3, substream(root, 0), stage_time)[0]
    point_kernel(model.physics, d.x, d.y, d.stage_time)

    if sweep == "ensemble-size":
        points = [(j, b.fixed_iterations) for j in b.ensemble_sizes]
    elif sweep == "iterations":
        points = [(b.fixed_ensemble_size, k) for k in b.iterations]
    else:
        raise ValueError(f"unknown sweep '{sweep}' (expected ensemble-size or iterations)")

    rows = []
    for size, n_iter in points:
        ens0 = _initial_ensemble(model, size, cfg.network.prior_var, substream(root, 1, size))
        eps = draw_perturbations(noise, n_iter, size, substream(root, 2, size, n_iter))
        for strategy in b.strategies:
            for rep in range(b.repetitions):
                meter = AllocationMeter()
                start = time.perf_counter()
                res = grad_kl_wrt_design(d, ens0, observation, forward, noise, n_iter, perturbations=eps, strategy=Strategy(strategy), meter=meter)
                elapsed = time.perf_counter() - start
                rows.append({
                    "sweep": sweep, "ensemble_size": size, "iterations": n_iter, "strategy": strategy,
                    "repetition": rep, "seconds": elapsed, "peak_bytes": meter.peak, "kl": res.value,
                })
            logger.info(f"bench J={size} K={n_iter} {strategy}: peak {meter.peak / 1e6:.2f} MB")

    fits = []
    x_key = "ensemble_size" if sweep == "ensemble-size" else "iterations"
    for strategy in b.strategies:
        sel = [r for r in rows if r["strategy"] == strategy]
        xs = np.array([r[x_key] for r in sel], dtype=float)
        ts = np.array([r["seconds"] for r in sel])
        peaks = np.array([r["peak_bytes"] for r in sel], dtype=float)
        fit = linregress(xs, ts)
        fits.append({
            "sweep": sweep, "strategy": strategy, "slope": fit.slope, "intercept": fit.intercept,
            "r_squared": fit.rvalue ** 2, "peak_spread": (peaks.max() - peaks.min()) / peaks.min() if peaks.min() > 0 else 0.0,
        })
    return rows, fits


def cmd_bench(cfg: RunConfig, sweep: str) -> int:
    rows, fits = bench(cfg, sweep)
    out = artifacts.ensure_dir(cfg.out_path)
    artifacts.write_table(out, f"bench_{sweep}.csv", rows)
    artifacts.write_table(out, f"bench_{sweep}_fit.csv", fits)
    for f in fits:
        print(f"{f['strategy']:>10}: R^2={f['r_squared']:.3f} peak spread={f['peak_spread']:.1%}")
    return 0


def cmd_presets(out: str | None) -> int:
    if out is None:
        print(json.dumps({name: cfg.model_dump(mode="json") for name, cfg in PRESETS.items()}, indent=2))
        return 0
    target = artifacts.ensure_dir(out)
    for name, cfg in PRESETS.items():
        artifacts.write_json(target / f"{name}.json", cfg.model_dump(mode="json"))
    print(f"Wrote {len(PRESETS)} presets to {target}")
    return 0


# =============================================================================
# Entry point
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adeki", description="Hybrid Bayesian experimental design with AD-EKI")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="Config JSON path or preset name (default: $ADEKI_CONFIG)")
        p.add_argument("--seed", type=int, help="Override the run seed")
        p.add_argument("--threads", type=int, help="Cap worker threads")
        p.add_argument("--out", help="Override the output directory")

    common(sub.add_parser("run", help="Run the sequential design experiment"))
    gc = sub.add_parser("gradcheck", help="Compare design gradients against finite differences")
    common(gc)
    gc.add_argument("--truncate", action="store_true", help="Drop the member chain through earlier iterations")
    bp = sub.add_parser("bench", help="Time and memory of design-gradient evaluations")
    common(bp)
    bp.add_argument("--sweep", choices=["ensemble-size", "iterations"], default="ensemble-size")
    pp = sub.add_parser("presets", help="Emit the built-in presets as JSON")
    pp.add_argument("--out", help="Directory to write one JSON file per preset")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            return cmd_presets(args.out)
        cfg = with_overrides(load_run_config(args.config), seed=args.seed, threads=args.threads, out=args.out)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, truncate=True if args.truncate else None)
        return cmd_bench(cfg, args.sweep)
    except AdekiError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
