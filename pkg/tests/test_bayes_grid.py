import numpy as np
import pytest

from src.bayes_grid import (
    GridPosterior,
    PredictionCache,
    eig_physical,
    flatten_prior,
    kl_utility,
    lattice,
    likelihood_grid,
    log_likelihood_grid,
    map_estimate,
    optimize_design_physical,
    posterior_metrics,
    posterior_update,
    posterior_update_log,
)
from src.errors import DegenerateUpdateError, SupportViolationError
from src.field_solver import Grid2D, SourceParams
from src.observe import Calibrated, Design, Measurement, ModelConfig, SourceFamily, SourceModel, forward_map_G

UNIT = Grid2D(0.0, 1.0, 0.0, 1.0, 5, 5)
T = 0.035


def _synthetic_cache(per_node, spatial=None, n=11) -> PredictionCache:
    """Cache whose prediction at d is per_node[k] * spatial(d)."""
    spatial = np.ones(UNIT.shape) if spatial is None else spatial
    values = np.asarray(per_node, dtype=float)[:, None, None, None] * spatial[None, None]
    return PredictionCache(values=values, window_grid=UNIT, stage_times=(T,), n=n, stride=1)


def _point_mass(k, n=11):
    p = np.zeros(n * n)
    p[k] = 1.0
    return GridPosterior(p, n)


# =============================================================================
# Belief representation
# =============================================================================

def test_lattice_order():
    nodes = lattice(3)
    assert nodes[1].tolist() == [0.0, 0.5]
    assert nodes[3].tolist() == [0.5, 0.0]
    assert nodes.shape == (9, 2)


def test_uniform_belief_is_normalized():
    post = GridPosterior.uniform()
    assert post.probs.size == 2601
    assert post.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert post.mean == pytest.approx([0.5, 0.5])


def test_invalid_beliefs_are_rejected():
    with pytest.raises(ValueError):
        GridPosterior(np.full(10, 0.1), n=3)
    with pytest.raises(ValueError):
        GridPosterior(np.array([1.5, -0.5, 0, 0]), n=2)
    with pytest.raises(ValueError):
        GridPosterior(np.full(4, 0.3), n=2)
    with pytest.raises(DegenerateUpdateError):
        GridPosterior.from_weights(np.zeros(4), n=2)


def test_gaussian_belief_peaks_at_its_mean():
    post = GridPosterior.gaussian((0.3, 0.7), 0.1, n=11)
    assert map_estimate(post).location == pytest.approx((0.3, 0.7))


# =============================================================================
# Updates
# =============================================================================

def test_updates_are_associative(rng):
    prior = GridPosterior.uniform(11)
    l1, l2 = rng.random(121), rng.random(121)
    sequential = posterior_update(posterior_update(prior, l1), l2)
    joint = posterior_update(prior, l1 * l2)
    assert np.allclose(sequential.probs, joint.probs, rtol=0.0, atol=1e-12)


def test_log_update_matches_direct_update(rng):
    prior = GridPosterior.gaussian((0.5, 0.5), 0.2, n=11)
    lik = rng.random(121) + 0.01
    assert np.allclose(posterior_update_log(prior, np.log(lik)).probs, posterior_update(prior, lik).probs, atol=1e-14)


def test_log_update_survives_underflowing_likelihoods():
    prior = GridPosterior.uniform(11)
    loglik = np.full(121, -2000.0)
    loglik[17] = -1990.0
    post = posterior_update_log(prior, loglik)
    assert map_estimate(post).index == 17
    with pytest.raises(DegenerateUpdateError):
        posterior_update(prior, np.exp(loglik))


def test_delta_likelihood_gives_point_mass():
    lik = np.zeros(121)
    lik[40] = 3.0
    post = posterior_update(GridPosterior.uniform(11), lik)
    assert post.probs[40] == 1.0
    assert posterior_metrics(post, tuple(post.thetas[40])).distance == 0.0


def test_update_rejects_bad_likelihoods():
    prior = GridPosterior.uniform(11)
    with pytest.raises(ValueError):
        posterior_update(prior, np.full(121, np.nan))
    with pytest.raises(DegenerateUpdateError):
        posterior_update(_point_mass(3), np.where(np.arange(121) == 3, 0.0, 1.0))


def test_likelihood_grid_from_cache():
    cache = _synthetic_cache(np.linspace(0.0, 1.0, 121))
    y = Measurement(Design(0.4, 0.6, T), 0.5, 0.01)
    lik = likelihood_grid(y, y.design, cache)
    assert int(np.argmax(lik)) == 60
    assert np.allclose(np.log(lik), log_likelihood_grid(y, y.design, cache))


# =============================================================================
# Utilities
# =============================================================================

def test_kl_of_point_mass_against_uniform():
    assert kl_utility(_point_mass(0, 51), GridPosterior.uniform()) == pytest.approx(np.log(2601))
    assert np.log(2601) == pytest.approx(7.866, abs=1e-3)


def test_kl_of_identical_beliefs_is_zero():
    p = GridPosterior.gaussian((0.2, 0.4), 0.15, n=11)
    assert kl_utility(p, p) == 0.0


def test_kl_support_violation():
    with pytest.raises(SupportViolationError):
        kl_utility(GridPosterior.uniform(11), _point_mass(5))


def test_eig_of_point_mass_prior_is_zero(rng):
    cache = _synthetic_cache(rng.random(121))
    assert eig_physical(Design(0.5, 0.5, T), _point_mass(12), 0.01, 10, cache, np.random.SeedSequence(0)) == pytest.approx(0.0, abs=1e-12)


def test_eig_of_uninformative_design_is_zero():
    cache = _synthetic_cache(np.full(121, 0.3))
    assert eig_physical(Design(0.5, 0.5, T), GridPosterior.uniform(11), 0.01, 10, cache, np.random.SeedSequence(0)) == pytest.approx(0.0, abs=1e-12)


def test_eig_is_reproducible_and_positive(rng):
    cache = _synthetic_cache(rng.random(121))
    args = (Design(0.5, 0.5, T), GridPosterior.uniform(11), 0.01, 20, cache)
    a = eig_physical(*args, np.random.SeedSequence(4))
    assert a == eig_physical(*args, np.random.SeedSequence(4))
    assert a > 0.0


# =============================================================================
# Physical design search
# =============================================================================

def test_ties_keep_the_previous_design():
    cache = _synthetic_cache(np.zeros(121))
    d_prev = Design(0.5, 0.5, 0.030)
    choice = optimize_design_physical(d_prev, GridPosterior.uniform(11), T, cache, 0.01, 8, np.random.SeedSequence(1), n_lattice=5)
    assert (choice.design.x, choice.design.y) == (0.5, 0.5)
    assert choice.design.stage_time == T
    assert choice.candidates[0][:2] == (0.5, 0.5)


def test_search_finds_the_strongest_signal():
    spatial = np.repeat(UNIT.xs[:, None], 5, axis=1)
    cache = _synthetic_cache(lattice(11)[:, 0], spatial)
    d_prev = Design(0.5, 0.5, 0.030)
    choice = optimize_design_physical(d_prev, GridPosterior.uniform(11), T, cache, 0.01, 30, np.random.SeedSequence(2), n_lattice=5)
    assert choice.design.x == pytest.approx(0.7)
    assert choice.eig == max(c[2] for c in choice.candidates)
    assert all(abs(x - 0.5) <= 0.2 + 1e-12 and abs(y - 0.5) <= 0.2 + 1e-12 for x, y, _ in choice.candidates)


# =============================================================================
# Flattening and summaries
# =============================================================================

def test_flatten_limits():
    p = GridPosterior.gaussian((0.5, 0.5), 0.1, n=11)
    assert np.allclose(flatten_prior(p, 1.0).probs, p.probs, rtol=1e-12, atol=0.0)
    assert np.allclose(flatten_prior(p, 1e-12).probs, GridPosterior.uniform(11).probs, rtol=1e-6, atol=0.0)
    with pytest.raises(ValueError):
        flatten_prior(p, 0.0)


def test_map_ties_go_to_lowest_index():
    w = np.zeros(121)
    w[[30, 7, 90]] = 1.0
    assert map_estimate(GridPosterior.from_weights(w, 11)).index == 7


def test_point_mass_metrics():
    post = _point_mass(24)
    summary = posterior_metrics(post, tuple(post.thetas[24]))
    assert summary.distance == 0.0
    assert summary.sigma_eq == 0.0


def test_metrics_of_uniform_belief():
    summary = posterior_metrics(GridPosterior.uniform(11), (0.0, 0.0))
    assert summary.map.index == 0
    var = np.var(np.linspace(0.0, 1.0, 11))
    assert summary.sigma_eq == pytest.approx(np.sqrt(var))


# =============================================================================
# Prediction cache from PDE solves
# =============================================================================

@pytest.fixture
def location_cfg(coarse_physics):
    source = SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.5, 0.5, 0.25, 2.0))
    return ModelConfig(physics=coarse_physics, source=source, calibrated=Calibrated.LOCATION)


def test_cache_matches_direct_solves(location_cfg):
    cache = PredictionCache.build(location_cfg, [0.030, 0.040], n=5)
    d = Design(0.4, 0.6, 0.040)
    preds = cache.predictions(d)
    for k in (0, 7, 24):
        direct = forward_map_G(lattice(5)[k], d, location_cfg)
        assert preds[k] == pytest.approx(direct, rel=1e-10)
    with pytest.raises(KeyError):
        cache.predictions(Design(0.4, 0.6, 0.050))


def test_strided_cache_is_exact_on_solved_nodes(location_cfg):
    full = PredictionCache.build(location_cfg, [0.030], n=5)
    strided = PredictionCache.build(location_cfg, [0.030], n=5, stride=2)
    d = Design(0.4, 0.6, 0.030)
    solved = [i * 5 + j for i in (0, 2, 4) for j in (0, 2, 4)]
    assert np.allclose(strided.predictions(d)[solved], full.predictions(d)[solved], rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        PredictionCache.build(location_cfg, [0.030], n=5, stride=3)


def test_cache_fingerprint_tracks_the_model(location_cfg):
    cache = PredictionCache.build(location_cfg, [0.030], n=3)
    assert cache.is_valid_for(location_cfg)
    changed = location_cfg.with_source(location_cfg.source.with_vector(Calibrated.STRENGTH, [2.5]))
    assert not cache.is_valid_for(changed)
    moved = location_cfg.with_source(location_cfg.source.with_location(0.1, 0.1))
    assert cache.is_valid_for(moved)
