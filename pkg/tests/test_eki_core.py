import numpy as np
import pytest

from src.eki.core import (
    Ensemble,
    GaussianPrior,
    GaussianReference,
    MemberResponse,
    NoiseModel,
    Observation,
    draw_eig_samples,
    draw_perturbations,
    eig_estimate,
    eki_step,
    ensemble_kl,
    ensemble_stats,
    kalman_analysis,
    run_eki,
    sample_observation,
)

A = np.array([[1.0, 0.5], [0.0, 1.0]])


class LinearMap:
    """g = design * (A theta); the design is a plain scalar here."""

    def predict(self, design, thetas):
        return design * np.atleast_2d(thetas) @ A.T

    def respond(self, design, thetas):
        thetas = np.atleast_2d(thetas)
        g = self.predict(design, thetas)
        dg_dd = np.repeat((thetas @ A.T)[:, :, None], 2, axis=2)
        return MemberResponse(g=g, dg_dd=dg_dd, dg_dtheta=np.broadcast_to(design * A, (len(thetas),) + A.shape).copy())

    def workspace_nbytes(self, n_members):
        return 0


def _gaussian_ensemble(rng, size, mean=(0.0, 0.0), var=1.0):
    return Ensemble(np.asarray(mean) + np.sqrt(var) * rng.standard_normal((size, len(mean))))


# =============================================================================
# Ensembles and statistics
# =============================================================================

def test_ensemble_needs_two_members():
    with pytest.raises(ValueError):
        Ensemble(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        Ensemble(np.array([[0.0], [np.inf]]))


def test_identical_members_have_zero_covariance():
    ens = Ensemble(np.tile([0.3, -0.2], (5, 1)))
    stats = ensemble_stats(ens, np.ones((5, 1)))
    assert np.array_equal(stats.c_tt, np.zeros((2, 2)))
    assert np.array_equal(stats.c_tg, np.zeros((2, 1)))


def test_two_point_statistics():
    stats = ensemble_stats(Ensemble(np.array([[0.0], [2.0]])), np.array([1.0, 5.0]))
    assert stats.c_tt[0, 0] == pytest.approx(2.0)
    assert stats.c_tg[0, 0] == pytest.approx(4.0)
    assert stats.c_gg[0, 0] == pytest.approx(8.0)
    assert stats.mean_g == pytest.approx([3.0])


def test_sample_covariance_of_large_ensemble(rng):
    cov = np.array([[2.0, 0.6], [0.6, 0.5]])
    members = rng.multivariate_normal([0.0, 0.0], cov, size=100_000)
    stats = ensemble_stats(Ensemble(members), members[:, :1])
    assert np.linalg.norm(stats.c_tt - cov) < 0.02 * np.linalg.norm(cov)


def test_prediction_rows_must_match_members():
    with pytest.raises(ValueError):
        ensemble_stats(Ensemble(np.zeros((3, 1)) + [[0.0], [1.0], [2.0]]), np.ones((4, 1)))


def test_noise_model_must_be_positive_definite():
    with pytest.raises(ValueError):
        NoiseModel(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert NoiseModel.isotropic(0.25, 3).dim == 3


# =============================================================================
# Updates
# =============================================================================

def test_uncorrelated_predictions_leave_members_unchanged(rng):
    ens = _gaussian_ensemble(rng, 10)
    g = np.full((10, 1), 0.7)
    updated = eki_step(ens, np.array([2.0]), g, NoiseModel.isotropic(0.1), rng)
    assert np.allclose(updated.members, ens.members, rtol=0.0, atol=1e-15)
    assert updated.iteration == 1


def test_one_step_matches_kalman_posterior_mean(rng):
    gamma = 0.1 * np.eye(2)
    y = np.array([1.0, 2.0])
    ens = _gaussian_ensemble(rng, 5000)
    updated = eki_step(ens, y, ens.members @ A.T, NoiseModel(gamma), rng)
    exact = A.T @ np.linalg.solve(A @ A.T + gamma, y)
    assert np.linalg.norm(updated.mean - exact) < 0.05 * np.linalg.norm(exact)


def test_kalman_analysis_uses_the_given_perturbations(rng):
    ens = _gaussian_ensemble(rng, 8)
    g = ens.members @ A.T
    eps = rng.standard_normal((8, 2))
    noise = NoiseModel.isotropic(0.2, 2)
    a, gain, innovations = kalman_analysis(ens, np.zeros(2), g, noise, eps)
    assert np.allclose(innovations, eps - g)
    assert np.allclose(a.members, eki_step(ens, np.zeros(2), g, noise, eps).members)
    assert gain.gain.shape == (2, 2)


def test_single_iteration_run_equals_one_step(rng):
    ens = _gaussian_ensemble(rng, 20)
    noise = NoiseModel.isotropic(0.1, 2)
    eps = draw_perturbations(noise, 1, 20, np.random.SeedSequence(4))
    run = run_eki(ens, np.array([1.0, 0.0]), noise, 1, lambda th: th @ A.T, perturbations=eps)
    step = eki_step(ens, np.array([1.0, 0.0]), ens.members @ A.T, noise, eps[0])
    assert np.array_equal(run.final.members, step.members)
    assert len(run.trajectory) == 2 and run.kl_trace.shape == (1,)


def test_run_eki_is_reproducible_and_contracts(rng):
    ens = _gaussian_ensemble(rng, 200)
    noise = NoiseModel.isotropic(0.05, 2)
    runs = [run_eki(ens, np.array([0.5, 1.0]), noise, 5, lambda th: th @ A.T, seed=np.random.SeedSequence(11)) for _ in range(2)]
    assert np.array_equal(runs[0].final.members, runs[1].final.members)
    assert np.array_equal(runs[0].kl_trace, runs[1].kl_trace)
    assert np.trace(runs[0].final.covariance()) <= np.trace(ens.covariance())


def test_kl_grows_along_iterations_on_average():
    noise = NoiseModel.isotropic(0.1, 2)
    traces = []
    for s in range(50):
        r = np.random.default_rng(s)
        ens = _gaussian_ensemble(r, 50)
        y = A @ r.standard_normal(2) + np.sqrt(0.1) * r.standard_normal(2)
        traces.append(run_eki(ens, y, noise, 5, lambda th: th @ A.T, seed=np.random.SeedSequence(s)).kl_trace)
    assert np.all(np.diff(np.mean(traces, axis=0)) >= 0.0)


def test_early_stop_on_small_kl_increment(rng):
    ens = _gaussian_ensemble(rng, 30)
    noise = NoiseModel.isotropic(1e6, 2)
    run = run_eki(ens, np.zeros(2), noise, 10, lambda th: th @ A.T, seed=np.random.SeedSequence(0), kl_tol=1e-3)
    assert len(run.kl_trace) == 2


def test_run_eki_argument_checks(rng):
    ens = _gaussian_ensemble(rng, 5)
    noise = NoiseModel.isotropic(0.1, 2)
    with pytest.raises(ValueError):
        run_eki(ens, np.zeros(2), noise, 0, lambda th: th, seed=np.random.SeedSequence(0))
    with pytest.raises(ValueError):
        run_eki(ens, np.zeros(2), noise, 2, lambda th: th)


# =============================================================================
# Ensemble KL
# =============================================================================

def test_kl_of_identical_ensembles_is_zero(rng):
    ens = _gaussian_ensemble(rng, 12)
    assert ensemble_kl(ens, ens) == 0.0


def test_kl_of_shifted_copy(rng):
    ens = _gaussian_ensemble(rng, 15)
    m = np.array([0.3, -0.4])
    shifted = Ensemble(ens.members + m)
    expected = 0.5 * m @ np.linalg.solve(ens.covariance(), m)
    assert ensemble_kl(ens, shifted) == pytest.approx(expected, abs=1e-10)


def test_kl_matches_analytic_gaussian_value(rng):
    mu = np.array([1.0, 1.0])
    a = _gaussian_ensemble(rng, 10_000)
    b = _gaussian_ensemble(rng, 10_000, mean=mu)
    assert ensemble_kl(a, b) == pytest.approx(0.5 * mu @ mu, rel=0.05)


def test_kl_is_invariant_to_member_order(rng):
    a = _gaussian_ensemble(rng, 20)
    b = _gaussian_ensemble(rng, 20, mean=(0.5, 0.0), var=0.5)
    perm = rng.permutation(20)
    assert ensemble_kl(Ensemble(a.members[perm]), Ensemble(b.members[perm])) == pytest.approx(ensemble_kl(a, b), rel=1e-12)


def test_kl_is_nonnegative(rng):
    for _ in range(10):
        a = _gaussian_ensemble(rng, 25)
        b = _gaussian_ensemble(rng, 25, mean=rng.standard_normal(2), var=rng.uniform(0.1, 2.0))
        assert ensemble_kl(a, b) >= 0.0


def test_rank_deficient_reference_is_regularized():
    members = np.column_stack([np.arange(5.0), 2 * np.arange(5.0)])
    ref = GaussianReference.from_ensemble(Ensemble(members))
    assert ref.jitter > 0.0
    assert np.isfinite(ref.kl(Ensemble(members + 0.1)).value)


# =============================================================================
# Expected information gain
# =============================================================================

PRIOR = GaussianPrior(mean=np.zeros(2), var=1.0)


def test_eig_samples_do_not_depend_on_count():
    noise = NoiseModel.isotropic(0.1, 2)
    two = draw_eig_samples(PRIOR, noise, 2, 3, 10, np.random.SeedSequence(5))
    three = draw_eig_samples(PRIOR, noise, 3, 3, 10, np.random.SeedSequence(5))
    for a, b in zip(two, three):
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.ensemble.members, b.ensemble.members)
        assert np.array_equal(a.perturbations, b.perturbations)


def test_single_sample_eig_is_one_kl():
    noise = NoiseModel.isotropic(0.1, 2)
    fm = LinearMap()
    [sample] = draw_eig_samples(PRIOR, noise, 1, 3, 20, np.random.SeedSequence(9))
    y = sample_observation(sample, 1.0, fm, None)
    run = run_eki(sample.ensemble, y, noise, 3, lambda th: fm.predict(1.0, th), perturbations=sample.perturbations)
    est = eig_estimate(1.0, PRIOR, noise, 1, 3, 20, fm, samples=[sample])
    assert est.value == run.kl


def test_eig_is_reproducible_and_parallel_safe():
    noise = NoiseModel.isotropic(0.1, 2)
    a = eig_estimate(1.0, PRIOR, noise, 6, 3, 20, LinearMap(), seed=np.random.SeedSequence(2))
    b = eig_estimate(1.0, PRIOR, noise, 6, 3, 20, LinearMap(), seed=np.random.SeedSequence(2), n_jobs=3)
    assert a.value == b.value
    assert a.kl_traces.shape == (6, 3)


def test_eig_vanishes_for_uninformative_data():
    noise = NoiseModel.isotropic(1e8, 2)
    est = eig_estimate(1.0, PRIOR, noise, 10, 3, 30, LinearMap(), seed=np.random.SeedSequence(1))
    assert abs(est.value) < 1e-4


def test_eig_prefers_informative_designs():
    noise = NoiseModel.isotropic(0.1, 2)
    strong = eig_estimate(1.0, PRIOR, noise, 20, 3, 30, LinearMap(), seed=np.random.SeedSequence(8))
    weak = eig_estimate(0.01, PRIOR, noise, 20, 3, 30, LinearMap(), seed=np.random.SeedSequence(8))
    assert strong.value > weak.value


def test_observation_provider_replaces_model_prediction():
    noise = NoiseModel.isotropic(0.1, 2)
    [sample] = draw_eig_samples(PRIOR, noise, 1, 1, 5, np.random.SeedSequence(0))
    provider = lambda d: Observation(value=np.array([1.0, 2.0]), grad=np.zeros((2, 2)))
    assert np.allclose(sample_observation(sample, 1.0, LinearMap(), provider), np.array([1.0, 2.0]) + sample.eta)
