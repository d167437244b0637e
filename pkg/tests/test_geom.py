import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conoscatter.errors import NotIntersecting, RankDeficientParams, TangentialRay, ZeroSection
from conoscatter.geom import (LagrangianChart, NestedPair, chart_jacobian_rank, chart_point,
                              clean_intersection_certificate, conormal_fiber, hj_residual,
                              isotropy_defect, is_tangential_ray, multiphase_solve,
                              prop71_intersection, random_intersection_charts, sigma_of)
from conoscatter.sphere import normalize

PAIRS = {
    "plane": NestedPair.plane(),
    "plane_line": NestedPair.plane_line(),
    "sphere": NestedPair.sphere(0.5),
    "sphere_equator": NestedPair.sphere_equator(0.5),
}

unit_vectors = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 0.2).map(lambda v: normalize(np.array(v)))


@pytest.mark.parametrize("name", sorted(PAIRS))
def test_primitives_are_nested(name):
    assert PAIRS[name].check_invariants(count=20, rng=1)


@pytest.mark.parametrize("name", ["plane_line", "sphere_equator"])
def test_conormal_fiber_is_orthonormal(name):
    pair = PAIRS[name]
    for y in pair.sample("S2", 10, rng=2):
        B = conormal_fiber(pair, y, "S2")
        np.testing.assert_allclose(B @ B.T, np.eye(2), atol=1e-12)
        # conormal to S2 means orthogonal to its tangent space
        T = pair.tangent_basis(y, "S2")
        np.testing.assert_allclose(B @ T, 0.0, atol=1e-10)


def test_sigma_rejects_tangential_rays():
    with pytest.raises(TangentialRay):
        sigma_of([0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    with pytest.raises(ZeroSection):
        sigma_of([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])


def test_line_fiber_always_has_tangential_directions():
    pair = PAIRS["plane_line"]
    y = np.array([0.2, 0.0, 0.0])
    assert is_tangential_ray(pair, y, "S2", [0.0, 0.6, 0.8])
    assert not is_tangential_ray(pair, y, "S2", [0.0, 0.6, 0.8], mode="all")
    assert is_tangential_ray(pair, y, "S2", [1.0, 0.0, 0.0], mode="all")


@pytest.mark.parametrize("family", ["FLOWOUT", "REFLECTED", "BACKSCATTER"])
def test_clean_intersection_plane_line(family):
    pair = PAIRS["plane_line"]
    certs = [clean_intersection_certificate(a, c)
             for a, c in random_intersection_charts(pair, family, 15, rng=4)]
    dim = certs and random_intersection_charts(pair, family, 1, rng=0)[0][0].lagrangian_dim()
    assert all(c.clean for c in certs)
    assert {c.codim for c in certs} == {(1, 1)}
    assert min(c.rank for c in certs) >= dim + pair.d2


def test_flowout_certificate_rank_reaches_seven():
    pair = PAIRS["plane_line"]
    certs = [clean_intersection_certificate(a, c)
             for a, c in random_intersection_charts(pair, "FLOWOUT", 20, rng=9)]
    assert min(c.rank for c in certs) == 2 * pair.n + pair.d2


def test_mismatched_charts_do_not_intersect():
    pair = PAIRS["plane_line"]
    a, c = random_intersection_charts(pair, "FLOWOUT", 1, rng=3)[0]
    with pytest.raises(NotIntersecting):
        clean_intersection_certificate(a, c.with_params(r=c.r + 0.1))


@pytest.mark.parametrize("kind", ["FLOWOUT_A", "REFLECTED_A", "BACKSCATTER_A"])
def test_charts_are_isotropic(kind):
    pair = PAIRS["sphere"]
    chart = LagrangianChart(kind, pair, [0.0, 0.0, 0.5], [0.0, 0.0, 1.0],
                            normalize([0.2, 0.1, 1.0]), 0.7)
    assert isotropy_defect(chart) < 1e-6
    assert chart_jacobian_rank(chart) == chart.lagrangian_dim()


def test_focal_flowout_point_is_rank_deficient():
    chart = LagrangianChart("FLOWOUT_A", PAIRS["sphere"], [0.0, 0.0, 0.5], [0.0, 0.0, 1.0],
                            [0.0, 0.0, 1.0], 0.5)
    with pytest.raises(RankDeficientParams):
        chart_jacobian_rank(chart, projection=True)
    assert chart_jacobian_rank(chart.with_params(r=2.0), projection=True) == 5


@settings(max_examples=40, deadline=None)
@given(unit_vectors)
def test_backscatter_chart_on_sphere_matches_support_function(nu):
    # the echo of the point with outward normal nu sits at s = -2 y . nu = -2 R
    y = 0.5 * nu
    pt = chart_point(LagrangianChart("BACKSCATTER_A", PAIRS["sphere"], y, nu))
    assert pt.s == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_allclose(pt.Omega, 0.0, atol=1e-12)


def test_prop71_samples_are_transversal():
    samples = prop71_intersection(PAIRS["plane_line"], count=30, rng=5, strict=False)
    assert len(samples) >= 25
    assert all(s.transversal for s in samples)
    for s in samples:
        assert abs(s.point[2]) < 1e-10
        # offset from the incident front is r times the normal component
        nu = np.array([0.0, *s.theta])
        assert s.dist_s1plus == pytest.approx(abs(s.r * nu @ s.point[4:]), abs=1e-12)


@pytest.mark.parametrize("name", ["plane", "sphere"])
def test_multiphase_ode_matches_closed_form(name):
    pair = PAIRS[name]
    g = np.linspace(-1.0, 1.0, 5)
    X, T, S = np.meshgrid(g, g, 0.1 * g, indexing="ij")
    x = np.stack([0.7 + 0 * X, 0.2 + 0 * X, X], axis=-1)
    om = normalize([0.3, 0.2, 1.0])
    cmp = multiphase_solve(pair, "S1", x, T, om, 1.3, 0.8, S)
    assert cmp.rel_discrepancy <= 1e-8
    assert np.max(hj_residual(pair, "S1", x, T, om, 1.3, 0.8, S)) <= 1e-6


def test_multiphase_starts_from_initial_phase():
    pair = PAIRS["plane"]
    x = np.array([0.1, 0.2, 0.3])
    om = normalize([0.3, 0.2, 1.0])
    cmp = multiphase_solve(pair, "S1", x, 0.4, om, 1.3, 0.8, 0.0)
    expected = 0.3 * 1.3 + (0.4 - x @ om) * 0.8
    assert float(cmp.closed.phi) == pytest.approx(expected, abs=1e-12)
