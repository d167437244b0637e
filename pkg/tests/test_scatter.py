import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conoscatter.errors import SGridTooCoarse, SliceInvalid, T0TooSmall
from conoscatter.potential import Grid, bump_field, zero_field
from conoscatter.scatter import (DataSet, DataSliceSpec, ScatteringKernel, default_s_grid,
                                 kernel_discrepancy, lp_transform, radon, required_pairs,
                                 restrict, scattering_kernel)
from conoscatter.sphere import SphereGrid, normalize
from conoscatter.wavefield import SourcePulse

PULSE = SourcePulse(0.1)
Y0 = np.array([0.15, -0.1, 0.2])


@pytest.fixture(scope="module")
def blob():
    return bump_field(center=Y0, width=0.06, radius=0.3, grid=Grid.cube(0.75, 32))


@pytest.fixture(scope="module")
def small_kernel(blob):
    sg = SphereGrid(1)
    pairs = np.column_stack([sg.antipode_index(), np.arange(len(sg))])
    s_grid = default_s_grid(0.75, PULSE)
    return scattering_kernel(blob, PULSE, sg, sg, s_grid, pairs=pairs)


@pytest.mark.parametrize("level", [0, 1, 2, 3])
def test_icosphere_counts(level):
    g = SphereGrid(level)
    assert len(g) == 10 * 4 ** level + 2
    np.testing.assert_allclose(np.linalg.norm(g.points, axis=1), 1.0)
    np.testing.assert_allclose(g.points[g.antipode_index()], -g.points, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1))
def test_locate_gives_barycentric_weights(v):
    g = SphereGrid(2)
    d = normalize(np.array(v))
    tri, w = g.locate(d)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w >= -1e-9)
    # the weighted vertices point along d
    assert normalize(w @ g.points[tri]) @ d > 1 - 1e-3


def test_radon_of_a_gaussian_matches_closed_form():
    # trilinear interpolation costs O((h/w)^2)
    w = 0.15
    q = bump_field(width=w, radius=0.7, grid=Grid.cube(0.75, 64))
    theta = normalize([0.3, -0.5, 0.8])
    p = np.linspace(-0.2, 0.2, 9)
    expected = 2 * np.pi * w * w * np.exp(-0.5 * p ** 2 / w ** 2)
    np.testing.assert_allclose(radon(q, p, theta), expected, rtol=1e-2, atol=1e-5)


def test_radon_flags_planes_missing_the_grid():
    q = zero_field(grid=Grid.cube(0.75, 8))
    vals, missed = radon(q, [0.0, 5.0], [0.0, 0.0, 1.0], return_flag=True)
    assert missed.tolist() == [False, True]
    assert vals[1] == 0.0


def test_backscatter_echo_sits_at_minus_two_y_dot_omega(small_kernel):
    sg = small_kernel.omega_grid
    s = small_kernel.s_grid
    ds = small_kernel.ds
    for oi in (0, 7, 19, 33):
        col = small_kernel.column(sg.antipode_index()[oi], oi)
        # the kernel is an s-derivative; its antiderivative peaks at the echo
        prof = np.cumsum(col) * ds
        s_peak = s[np.argmax(np.abs(prof))]
        assert s_peak == pytest.approx(-2 * Y0 @ sg.points[oi], abs=2 * ds)


def test_kernel_routes_agree(blob):
    sg = SphereGrid(1)
    pairs = np.array([[sg.antipode_index()[3], 3], [5, 11]])
    s_grid = default_s_grid(0.75, PULSE)
    a = scattering_kernel(blob, PULSE, sg, sg, s_grid, pairs=pairs)
    b = scattering_kernel(blob, PULSE, sg, sg, s_grid, pairs=pairs, route="lax_phillips")
    assert kernel_discrepancy(a, b) <= 2e-2


def test_lp_transform_routes_agree():
    ds = 0.01
    s = ds * np.arange(400) - 2.0
    Rv0 = np.exp(-s ** 2 / 0.05) + 0.5 * (1 + np.tanh(s / 0.2))
    Rv1 = np.gradient(Rv0, ds) * 0.3
    a = lp_transform(Rv0, Rv1, ds, route="fft")
    b = lp_transform(Rv0, Rv1, ds, route="fd")
    inner = slice(50, 350)
    assert np.max(np.abs(a[inner] - b[inner])) <= 1e-3 * np.max(np.abs(b[inner]))


def test_zero_potential_gives_zero_kernel():
    q = zero_field(grid=Grid.cube(0.75, 16))
    sg = SphereGrid(0)
    k = scattering_kernel(q, PULSE, sg, sg, default_s_grid(0.75, PULSE))
    assert not np.any(k.values)


def test_coarse_s_grid_and_early_slice_are_rejected(blob):
    sg = SphereGrid(0)
    with pytest.raises(SGridTooCoarse):
        scattering_kernel(blob, PULSE, sg, sg, np.arange(-1, 1, 0.05), pairs=[[0, 0]])
    with pytest.raises(T0TooSmall):
        scattering_kernel(blob, PULSE, sg, sg, default_s_grid(0.75, PULSE), t0=1.0,
                          route="lax_phillips", pairs=[[0, 0]])


def test_identity_slice_fails_condition_one():
    with pytest.raises(SliceInvalid) as info:
        DataSliceSpec.identity().validate(SphereGrid(2))
    assert info.value.condition == 1
    assert info.value.code == "SLICE_INVALID"


@pytest.mark.parametrize("slice_", [DataSliceSpec.backscatter(),
                                    DataSliceSpec.rotated_backscatter((0, 1, 0), 10.0)])
def test_backscatter_slices_are_valid(slice_):
    report = slice_.validate(SphereGrid(2))
    assert report.passed
    assert report.conditions == {1: True, 2: True, 3: True}


def test_tangency_condition_can_fail():
    report = DataSliceSpec.backscatter().validate(SphereGrid(1), tangency_tol=1.0, strict=False)
    assert report.conditions[1] and report.conditions[2]
    assert not report.conditions[3]


def test_backscatter_restriction_reads_antipodal_columns(small_kernel):
    sg = small_kernel.omega_grid
    assert {tuple(p) for p in required_pairs(DataSliceSpec.backscatter(), sg, sg)} == \
        {(int(a), int(b)) for a, b in zip(sg.antipode_index(), range(len(sg)))}
    data = restrict(small_kernel, DataSliceSpec.backscatter())
    for j, oi in enumerate(data.omega_indices):
        np.testing.assert_allclose(data.values[j],
                                   small_kernel.column(sg.antipode_index()[oi], oi),
                                   rtol=1e-12, atol=1e-15)


def test_restriction_needs_its_stencil(small_kernel):
    with pytest.raises(KeyError):
        restrict(small_kernel, DataSliceSpec.rotated_backscatter((0, 1, 0), 10.0))


def test_kernel_and_dataset_round_trip(small_kernel, tmp_path):
    small_kernel.dump(tmp_path / "k")
    back = ScatteringKernel.load(tmp_path / "k")
    np.testing.assert_array_equal(back.values, small_kernel.values)
    np.testing.assert_allclose(back.s_grid, small_kernel.s_grid, rtol=0, atol=1e-12)
    data = restrict(small_kernel, DataSliceSpec.backscatter())
    data.dump(tmp_path / "d")
    again = DataSet.load(tmp_path / "d")
    np.testing.assert_array_equal(again.values, data.values)
    np.testing.assert_array_equal(again.omega_indices, data.omega_indices)
    assert again.slice.name == "backscatter"
