import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conoscatter.errors import (CalibrationAmbiguous, ClassOverlap, GradientUndefined,
                                ReferenceMismatch)
from conoscatter.geom import NestedPair, conormal_fiber
from conoscatter.reconstruct import (OrderCalibration, PointCloud, SingularSupportCurve,
                                     calibrate_gradient_constant, classify_by_geometry,
                                     classify_points, detect_singular_support, estimate_orders,
                                     hausdorff, nonspecular_directions, recover_from_chart_data,
                                     recover_points, recover_symbol_magnitude, spectral_slope,
                                     specular_directions, sphere_truth, tangential_wedges)
from conoscatter.scatter import DataSet, DataSliceSpec
from conoscatter.sphere import SphereGrid, normalize
from conoscatter.wavefield import SourcePulse

CENTER = np.array([0.2, -0.1, 0.15])
RADIUS = 0.4
PULSE = SourcePulse(0.1)


def sphere_curve(grid, slice_=None, center=CENTER):
    """Analytic echoes of a round sphere for the given slice."""
    def s_of(om):
        if slice_ is None:
            k, kappa = om, 2.0
        else:
            k, kappa = slice_.difference_map(np.zeros(1), om[None])
            k, kappa = k[0, 0], kappa[0, 0]
        return [-kappa * (center @ k + RADIUS), -kappa * (center @ k - RADIUS)]
    return SingularSupportCurve.from_analytic(grid, s_of)


def synthetic_data(grid, s_func, amplitude=1.0):
    """Columns eps * psi'(s - s*(omega)), one echo per direction."""
    s = np.arange(-2.0, 2.0, PULSE.epsilon / 4)
    d = PULSE.derivative(1)
    vals = np.array([amplitude * PULSE.epsilon * d(s - s_func(w)) for w in grid.points])
    return DataSet(s, grid, np.arange(len(grid)), vals, DataSliceSpec.backscatter())


@pytest.mark.parametrize("level", [2, 3])
def test_backscatter_recovers_a_sphere(level):
    grid = SphereGrid(level)
    cloud = recover_points(sphere_curve(grid))
    assert len(cloud) == 2 * len(grid)
    truth = sphere_truth(CENTER, RADIUS, grid.points)
    assert hausdorff(cloud.points, truth) <= 0.05 * grid.spacing


def test_rotated_slice_recovers_a_sphere():
    grid = SphereGrid(3)
    sl = DataSliceSpec.rotated_backscatter((0, 1, 0), 10.0)
    cloud = recover_points(sphere_curve(grid, sl), slice_=sl)
    dist = np.abs(np.linalg.norm(cloud.points - CENTER, axis=1) - RADIUS)
    assert dist.max() <= 0.05 * grid.spacing


def test_chart_data_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.uniform(-0.5, 0.5, 3)
        om = normalize(rng.normal(size=3))
        tau = rng.uniform(0.5, 2.0)
        # the backscatter wavefront of y: s = -2 y . omega, Omega = tau * tangential part of y
        s = -2 * y @ om
        Omega = tau * (y - (y @ om) * om)
        np.testing.assert_allclose(recover_from_chart_data(s, om, tau, Omega), y, atol=1e-12)


def test_gradient_constant_calibrates_to_one_half():
    grid = SphereGrid(2)
    curve = sphere_curve(grid)
    best, errors = calibrate_gradient_constant(curve, sphere_truth(CENTER, RADIUS, grid.points))
    assert best == 0.5
    assert errors[1.0] >= 10 * errors[0.5]


def test_centered_sphere_cannot_calibrate():
    # without a tangential gradient every constant gives the same points
    grid = SphereGrid(1)
    curve = sphere_curve(grid, center=np.zeros(3))
    with pytest.raises(CalibrationAmbiguous):
        calibrate_gradient_constant(curve, sphere_truth(np.zeros(3), RADIUS, grid.points))


def test_strict_recovery_needs_neighbours():
    grid = SphereGrid(1)
    curve = SingularSupportCurve.from_analytic(grid, lambda w: [0.1], omega_indices=[0])
    assert recover_points(curve).gradient_rank.tolist() == [0]
    with pytest.raises(GradientUndefined):
        recover_points(curve, strict=True)


def test_tangential_wedges_surround_the_line():
    grid = SphereGrid(3)
    wedges = tangential_wedges(NestedPair.plane_line(), grid, tol=0.1)
    assert 0 < wedges.sum() < 0.05 * len(grid)
    assert np.all(np.abs(grid.points[wedges, 0]) >= np.sqrt(1 - 0.1 ** 2))


def test_sphere_is_specular_everywhere():
    grid = SphereGrid(3)
    assert not nonspecular_directions(NestedPair.sphere(0.5), grid).any()


def test_specular_directions_of_plane_and_line():
    grid = SphereGrid(3)
    spec = specular_directions(NestedPair.plane_line(), grid)
    pts = grid.points[spec["S1"]]
    assert len(pts) >= 2 and np.all(np.abs(pts[:, 2]) > np.cos(0.5 * grid.spacing))
    # the line is specular on the great circle orthogonal to it
    assert np.all(np.abs(grid.points[spec["S2"], 0]) <= np.sin(0.5 * grid.spacing))
    assert spec["S2"].sum() >= 20
    G = conormal_fiber(NestedPair.plane_line(), np.zeros(3), "S2")
    assert np.allclose(np.linalg.norm(grid.points[spec["S2"]] @ G.T, axis=1), 1.0, atol=0.02)


def test_classify_by_geometry():
    n = 6
    cloud = PointCloud(np.zeros((n, 3)), np.arange(n), np.zeros(n), np.ones(n),
                       np.full(n, np.nan), np.zeros(n, dtype=int))
    spec = {"S1": np.array([1, 0, 0, 1, 0, 0], bool), "S2": np.ones(n, bool)}
    classify_by_geometry(cloud, spec)
    assert cloud.cls.tolist() == ["S1", "S2", "S2", "S1", "S2", "S2"]
    assert cloud.meta["classes"]["S1"] == 2


def make_cloud(decay):
    decay = np.asarray(decay, dtype=float)
    n = len(decay)
    pts = np.column_stack([np.linspace(0, 1, n), np.zeros(n), np.zeros(n)])
    return PointCloud(pts, np.arange(n), np.zeros(n), np.ones(n), decay,
                      np.full(n, 2, dtype=int))


def test_decay_classes_split_at_the_largest_gap():
    cloud = classify_points(make_cloud([-1.0, -1.05, -0.95, -1.6, -1.55]), spacing=0.1)
    assert cloud.cls.tolist() == ["S1", "S1", "S1", "S2", "S2"]
    assert cloud.meta["classes"]["separable"]


def test_close_decays_form_one_class():
    cloud = classify_points(make_cloud([-1.0, -1.05, -0.95, -1.1]), spacing=0.1)
    assert set(cloud.cls) == {"S1"}
    with pytest.raises(ClassOverlap):
        classify_points(make_cloud([-1.0, -1.05, -0.95, -1.1]), spacing=0.1, expect_two=True)


def test_undefined_decay_takes_the_nearest_class():
    cloud = classify_points(make_cloud([-1.0, np.nan, -1.6, -1.65, -1.0, np.nan]), spacing=0.25)
    assert cloud.cls[1] == "S1" and cloud.cls[5] == "S1"
    # a point farther than three cells from every labelled one is a tie
    cloud = classify_points(make_cloud([-1.0, -1.0, -1.6, -1.65, np.nan]), spacing=0.01)
    assert cloud.cls[4] == "TIE"


def test_order_calibration_table():
    cal = OrderCalibration.load()
    assert cal.gain == pytest.approx(1.1358, abs=1e-3)
    assert cal.to_order(cal.offset - cal.gain) == pytest.approx(-1.0)


def test_estimate_orders_inverts_the_calibration():
    cal = OrderCalibration.load()
    s1 = cal.offset + cal.gain * -0.8
    s2 = s1 + cal.gain * -0.5
    cloud = make_cloud([s1, s1, s1, s2, s2])
    cloud.cls = np.array(["S1"] * 3 + ["S2"] * 2, dtype=object)
    est = estimate_orders(cloud, cal)
    assert est.M1_est == pytest.approx(-0.8)
    assert est.M2_rel_est == pytest.approx(-0.5)
    assert est.counts == {"S1": 3, "S2": 2}


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(-40, 40))
def test_spectral_slope_ignores_amplitude_and_shift(a, shift):
    eps = 0.1
    s = np.arange(-4.0, 4.0, eps / 4)
    col = np.exp(-np.abs(s) / 0.3) * np.sign(s)
    moved = np.roll(col, shift)
    base = spectral_slope(col, s, 0.0, eps)
    assert spectral_slope(a * moved, s, s[len(s) // 2 + shift] - s[len(s) // 2], eps) == \
        pytest.approx(base, abs=1e-9)


def test_detection_finds_each_echo():
    grid = SphereGrid(2)
    s_star = lambda w: -2 * (CENTER @ w + RADIUS)  # noqa: E731
    data = synthetic_data(grid, s_star)
    curve = detect_singular_support(data, PULSE)
    assert len(curve.echoes) == len(grid) and not curve.no_peaks
    ds = data.s_grid[1] - data.s_grid[0]
    for e in curve.echoes:
        assert e.s == pytest.approx(s_star(grid.points[e.omega_index]), abs=ds / 4)
    cloud = recover_points(curve)
    assert hausdorff(cloud.points, CENTER + RADIUS * grid.points) <= 0.1 * grid.spacing


def test_empty_columns_are_reported():
    grid = SphereGrid(1)
    data = synthetic_data(grid, lambda w: 0.0)
    data.values[:5] = 0.0
    curve = detect_singular_support(data, PULSE)
    assert sorted(curve.no_peaks) == [0, 1, 2, 3, 4]


def test_symbol_ratio_of_scaled_data():
    grid = SphereGrid(1)
    s_star = lambda w: -2 * (CENTER @ w + RADIUS)  # noqa: E731
    ref = detect_singular_support(synthetic_data(grid, s_star), PULSE)
    tgt = detect_singular_support(synthetic_data(grid, s_star, 3.0), PULSE)
    np.testing.assert_allclose(recover_symbol_magnitude(tgt, ref).ratio, 3.0, rtol=1e-9)


def test_symbol_reference_must_match():
    grid = SphereGrid(1)
    ref = detect_singular_support(synthetic_data(grid, lambda w: -0.5), PULSE)
    moved = detect_singular_support(synthetic_data(grid, lambda w: 0.7), PULSE)
    with pytest.raises(ReferenceMismatch):
        recover_symbol_magnitude(moved, ref)
    other = synthetic_data(grid, lambda w: -0.5)
    other.s_grid = other.s_grid + 0.01
    with pytest.raises(ReferenceMismatch):
        recover_symbol_magnitude(detect_singular_support(other, PULSE), ref)
