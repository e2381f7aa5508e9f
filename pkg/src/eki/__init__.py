"""Ensemble Kalman inversion and its design-gradient engine."""

from src.eki.core import (
    EIGEstimate,
    EKIRun,
    Ensemble,
    EnsembleStats,
    GaussianPrior,
    GaussianReference,
    KalmanGain,
    MemberResponse,
    NoiseModel,
    Observation,
    draw_eig_samples,
    draw_perturbations,
    eig_estimate,
    eki_step,
    ensemble_kl,
    ensemble_stats,
    run_eki,
)

__all__ = [
    "EIGEstimate",
    "EKIRun",
    "Ensemble",
    "EnsembleStats",
    "GaussianPrior",
    "GaussianReference",
    "KalmanGain",
    "MemberResponse",
    "NoiseModel",
    "Observation",
    "draw_eig_samples",
    "draw_perturbations",
    "eig_estimate",
    "eki_step",
    "ensemble_kl",
    "ensemble_stats",
    "run_eki",
]
