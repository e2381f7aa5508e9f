import numpy as np
import pytest

from src.discrepancy_net import N_PARAMS
from src.errors import OutOfBoundsError
from src.field_solver import SourceParams
from src.observe import (
    Calibrated,
    Design,
    DesignBox,
    KernelForwardMap,
    ModelConfig,
    SourceFamily,
    SourceModel,
    TruthObservation,
    forward_map_G,
    interpolate_with_grad,
    measure_truth,
    nudge_off_grid,
    project_design,
    solve_truth,
)

D = Design(0.4, 0.6, 0.04)


def _config(physics, family=SourceFamily.GAUSSIAN, calibrated=Calibrated.STRENGTH, net=None) -> ModelConfig:
    source = SourceModel(family, SourceParams(0.45, 0.25, 0.25, 2.0), net=net)
    return ModelConfig(physics=physics, source=source, calibrated=calibrated)


# =============================================================================
# Designs
# =============================================================================

def test_design_outside_unit_square():
    with pytest.raises(OutOfBoundsError):
        Design(1.2, 0.5, 0.03)


def test_project_design_clips_to_step_box():
    prev = Design(0.5, 0.5, 0.03)
    d = project_design(0.9, 0.1, prev, 0.035)
    assert (d.x, d.y) == pytest.approx((0.7, 0.3))
    assert d.stage_time == 0.035


def test_step_box_is_clipped_at_the_domain_edge():
    box = DesignBox.around(Design(0.05, 0.95, 0.03))
    assert (box.x_lo, box.x_hi, box.y_lo, box.y_hi) == pytest.approx((0.0, 0.25, 0.75, 1.0))
    assert box.project(0.1, 0.8)[2] is False
    assert box.project(0.3, 0.8)[2] is True


def test_lattice_includes_box_corners():
    pts = DesignBox.around(Design(0.5, 0.5, 0.03)).lattice(3)
    assert len(pts) == 9
    assert pts[0] == pytest.approx((0.3, 0.3))
    assert pts[-1] == pytest.approx((0.7, 0.7))


def test_nudge_moves_points_off_grid_lines(coarse_grid):
    x, y = nudge_off_grid(0.25, 0.4, coarse_grid)
    assert x == pytest.approx(0.25 + 1e-9, abs=1e-15)
    assert y == 0.4
    x, _ = nudge_off_grid(1.0, 0.4, coarse_grid)
    assert x < 1.0


# =============================================================================
# Measurements
# =============================================================================

def test_interpolation_is_exact_on_bilinear_fields(coarse_grid):
    zx, zy = coarse_grid.mesh()
    snapshot = 0.5 + zx + 2.0 * zy + 3.0 * zx * zy
    value, gx, gy = interpolate_with_grad(snapshot, coarse_grid, 0.4, 0.6)
    assert value == pytest.approx(0.5 + 0.4 + 1.2 + 0.72)
    assert gx == pytest.approx(1.0 + 3.0 * 0.6)
    assert gy == pytest.approx(2.0 + 3.0 * 0.4)


def test_measure_truth_is_reproducible(coarse_physics):
    truth = solve_truth(SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.45, 0.25, 0.25, 2.0)), coarse_physics, [0.03, 0.04])
    a = measure_truth(truth, D, 0.0025, np.random.SeedSequence(7))
    b = measure_truth(truth, D, 0.0025, np.random.SeedSequence(7))
    c = measure_truth(truth, D, 0.0025, np.random.SeedSequence(8))
    assert a.value == b.value
    assert a.value != c.value
    clean = TruthObservation(truth)(D).value[0]
    assert abs(a.value - clean) < 5 * 0.05


def test_measurement_noise_has_the_configured_variance(coarse_physics):
    truth = solve_truth(SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.45, 0.25, 0.25, 2.0)), coarse_physics, [0.04])
    clean = TruthObservation(truth)(D).value[0]
    values = np.array([measure_truth(truth, D, 0.0025, s).value for s in np.random.SeedSequence(11).spawn(4000)])
    assert values.mean() == pytest.approx(clean, abs=4 * 0.05 / np.sqrt(4000))
    assert values.var(ddof=1) == pytest.approx(0.0025, rel=0.1)


def test_measurement_rejects_nonpositive_noise(coarse_physics):
    truth = solve_truth(SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.45, 0.25, 0.25, 2.0)), coarse_physics, [0.04])
    with pytest.raises(ValueError):
        measure_truth(truth, D, 0.0, 1)


# =============================================================================
# Source models
# =============================================================================

def test_network_source_starts_as_plain_cauchy(coarse_grid):
    p = SourceParams(0.45, 0.25, 0.25, 2.0)
    corrected = SourceModel(SourceFamily.CAUCHY_NN, p)
    plain = SourceModel(SourceFamily.CAUCHY, p)
    assert corrected.net.shape == (N_PARAMS,)
    assert np.array_equal(corrected.field(coarse_grid), plain.field(coarse_grid))


def test_network_parameters_only_for_network_family():
    with pytest.raises(ValueError):
        SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.5, 0.5, 0.1, 1.0), net=np.zeros(N_PARAMS))
    with pytest.raises(ValueError):
        SourceModel(SourceFamily.CAUCHY, SourceParams(0.5, 0.5, 0.1, 1.0)).vector(Calibrated.NETWORK)


def test_with_vector_round_trips_calibrated_block():
    m = SourceModel(SourceFamily.GAUSSIAN, SourceParams(0.45, 0.25, 0.25, 2.0))
    assert m.with_vector(Calibrated.STRENGTH, [3.0]).params.theta_s == 3.0
    assert m.with_location(0.1, 0.9).vector(Calibrated.LOCATION) == pytest.approx([0.1, 0.9])


# =============================================================================
# Forward maps
# =============================================================================

def test_kernel_forward_map_matches_full_solve(coarse_physics):
    cfg = _config(coarse_physics)
    thetas = np.array([[1.0], [2.5]])
    predicted = KernelForwardMap(cfg).predict(D, thetas)
    direct = [forward_map_G(t, D, cfg) for t in thetas]
    assert predicted[:, 0] == pytest.approx(direct, rel=1e-10)


def test_respond_agrees_with_predict(coarse_physics):
    fm = KernelForwardMap(_config(coarse_physics, calibrated=Calibrated.LOCATION))
    thetas = np.array([[0.45, 0.25], [0.6, 0.4], [0.3, 0.7]])
    r = fm.respond(D, thetas)
    assert np.array_equal(r.g, fm.predict(D, thetas))
    assert r.dg_dd.shape == (3, 1, 2)
    assert r.dg_dtheta.shape == (3, 1, 2)
    assert r.fields.shape == (3, 21, 21)


def test_design_gradient_matches_finite_differences(coarse_physics):
    fm = KernelForwardMap(_config(coarse_physics))
    thetas = np.array([[2.0], [3.0]])
    r = fm.respond(D, thetas)
    h = 1e-6
    fd_x = (fm.predict(D.moved(D.x + h, D.y), thetas) - fm.predict(D.moved(D.x - h, D.y), thetas)) / (2 * h)
    fd_y = (fm.predict(D.moved(D.x, D.y + h), thetas) - fm.predict(D.moved(D.x, D.y - h), thetas)) / (2 * h)
    assert np.allclose(r.dg_dd[:, 0, 0], fd_x[:, 0], rtol=1e-6, atol=1e-10)
    assert np.allclose(r.dg_dd[:, 0, 1], fd_y[:, 0], rtol=1e-6, atol=1e-10)


@pytest.mark.parametrize(
    "family, calibrated, theta",
    [
        (SourceFamily.GAUSSIAN, Calibrated.STRENGTH, [2.5]),
        (SourceFamily.GAUSSIAN, Calibrated.LOCATION, [0.5, 0.35]),
        (SourceFamily.CAUCHY, Calibrated.LOCATION, [0.5, 0.35]),
    ],
)
def test_parameter_gradient_matches_finite_differences(coarse_physics, family, calibrated, theta):
    fm = KernelForwardMap(_config(coarse_physics, family=family, calibrated=calibrated))
    theta = np.array(theta)
    r = fm.respond(D, theta[None])
    h = 1e-6
    for k in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        fd = (fm.predict(D, up[None]) - fm.predict(D, down[None]))[0, 0] / (2 * h)
        assert r.dg_dtheta[0, 0, k] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_network_gradients_match_finite_differences(coarse_physics, rng):
    net = 0.3 * rng.standard_normal(N_PARAMS)
    fm = KernelForwardMap(_config(coarse_physics, family=SourceFamily.CAUCHY_NN, calibrated=Calibrated.NETWORK, net=net))
    r = fm.respond(D, net[None])
    h = 1e-6
    for k in (0, 9, 20, 33, 36):
        up, down = net.copy(), net.copy()
        up[k] += h
        down[k] -= h
        fd = (fm.predict(D, up[None]) - fm.predict(D, down[None]))[0, 0] / (2 * h)
        assert r.dg_dtheta[0, 0, k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_network_location_jacobian_includes_correction(coarse_physics, rng):
    net = 0.3 * rng.standard_normal(N_PARAMS)
    cfg = _config(coarse_physics, family=SourceFamily.CAUCHY_NN, calibrated=Calibrated.LOCATION, net=net)
    fm = KernelForwardMap(cfg)
    theta = np.array([0.45, 0.25])
    r = fm.respond(D, theta[None])
    h = 1e-6
    fd = (fm.predict(D, (theta + [h, 0.0])[None]) - fm.predict(D, (theta - [h, 0.0])[None]))[0, 0] / (2 * h)
    assert r.dg_dtheta[0, 0, 0] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_forward_map_reads_the_model_solution_at_the_design(coarse_physics):
    cfg = _config(coarse_physics)
    truth = solve_truth(cfg.source, coarse_physics, [0.04])
    assert forward_map_G([2.0], D, cfg) == pytest.approx(TruthObservation(truth)(D).value[0], rel=1e-12)


def test_forward_map_is_linear_in_strength(coarse_physics):
    cfg = _config(coarse_physics)
    g = forward_map_G([2.0], D, cfg)
    assert g > 0.0
    assert forward_map_G([4.0], D, cfg) == pytest.approx(2.0 * g, rel=1e-12)
    assert forward_map_G([0.0], D, cfg) == 0.0


def test_forward_map_with_zero_network_is_plain_cauchy(coarse_physics):
    corrected = _config(coarse_physics, SourceFamily.CAUCHY_NN, Calibrated.NETWORK)
    plain = _config(coarse_physics, SourceFamily.CAUCHY)
    assert forward_map_G(np.zeros(N_PARAMS), D, corrected) == pytest.approx(forward_map_G([2.0], D, plain), rel=1e-12)


def test_forward_map_decays_away_from_the_source(coarse_physics):
    cfg = _config(coarse_physics, calibrated=Calibrated.LOCATION)
    near = forward_map_G([0.4, 0.6], D, cfg)
    far = forward_map_G([0.9, 0.1], D, cfg)
    assert near > far > 0.0
