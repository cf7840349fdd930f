import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from raysplat.errors import DimensionError, DomainError, FormatError
from raysplat.hash3d import (ContractConfig, TriPlane, VoxelGrid, contract, interpolation_weights,
                             make_structure, random_structure, read_grid, sample, sample_vjp,
                             splat_accumulate, write_grid)

coords = st.floats(-1.0, 1.0, allow_nan=False, width=64)
points = arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)), elements=coords)
kinds = st.sampled_from(["voxel", "triplane"])


def vertex_world(i, n):
    return -1.0 + 2.0 * i / (n - 1)


# --- construction ----------------------------------------------------------

def test_voxel_layout_is_h_outermost_k_innermost():
    g = VoxelGrid(np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5))
    assert g.dims == (2, 3, 4) and g.channels == 5
    assert g.table.shape == (24, 5)
    assert g.table[(1 * 3 + 2) * 4 + 3, 4] == g.data[1, 2, 3, 4]


def test_triplane_planes_are_views_of_one_table():
    t = TriPlane.zeros((4, 5, 6), 2)
    assert t.plane_xy.shape == (4, 5, 2)
    assert t.plane_yz.shape == (5, 6, 2)
    assert t.plane_zx.shape == (6, 4, 2)
    t.plane_yz[1, 2, 0] = 7.0
    assert t.table[4 * 5 + 1 * 6 + 2, 0] == 7.0


def test_triplane_channel_mismatch_rejected():
    with pytest.raises(DimensionError):
        TriPlane(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))


# --- sampling examples -----------------------------------------------------

def test_vertex_sample_returns_vertex_value():
    g = random_structure("voxel", (5, 6, 7), 3, np.random.default_rng(0), np.float64)
    x = [vertex_world(2, 5), vertex_world(4, 6), vertex_world(1, 7)]
    np.testing.assert_allclose(sample(g, x), g.data[2, 4, 1], rtol=1e-12, atol=1e-14)


def test_cell_centre_is_mean_of_corners():
    g = random_structure("voxel", (5, 5, 5), 3, np.random.default_rng(1), np.float64)
    c = [(vertex_world(1, 5) + vertex_world(2, 5)) / 2] * 3
    np.testing.assert_allclose(sample(g, c), g.data[1:3, 1:3, 1:3].reshape(8, 3).mean(0), rtol=1e-12)


def test_constant_planes_sum():
    t = TriPlane.zeros((6, 6, 6), 2, np.float64)
    t.plane_xy[...] = 1.0
    t.plane_yz[...] = 10.0
    t.plane_zx[...] = 100.0
    x = np.random.default_rng(2).uniform(-1, 1, (50, 3))
    np.testing.assert_allclose(sample(t, x), 111.0, rtol=1e-12)


def test_out_of_bounds_is_zero():
    g = random_structure("voxel", (4, 4, 4), 2, np.random.default_rng(3))
    assert np.all(sample(g, [[1.5, 0, 0], [0, -1.01, 0], [0, 0, 3]]) == 0)


def test_upper_boundary_uses_last_vertex():
    g = random_structure("voxel", (4, 4, 4), 2, np.random.default_rng(4), np.float64)
    np.testing.assert_array_equal(sample(g, [1.0, 1.0, 1.0]), g.data[3, 3, 3])


def test_non_finite_points_rejected():
    g = make_structure("voxel", (4, 4, 4), 1)
    with pytest.raises(DomainError):
        sample(g, [np.nan, 0, 0])


# --- splatting examples ----------------------------------------------------

def test_vertex_splat_touches_one_cell():
    g = make_structure("voxel", (4, 4, 4), 2, np.float64)
    x = [vertex_world(1, 4), vertex_world(2, 4), vertex_world(3, 4)]
    splat_accumulate(g, [x], [[3.0, -1.0]])
    expected = np.zeros_like(g.data)
    expected[1, 2, 3] = [3.0, -1.0]
    np.testing.assert_allclose(g.data, expected, atol=1e-14)


def test_centre_splat_spreads_eighths():
    g = make_structure("voxel", (3, 3, 3), 1, np.float64)
    splat_accumulate(g, [[-0.5, -0.5, -0.5]], [[8.0]])
    np.testing.assert_allclose(g.data[:2, :2, :2], 1.0)
    assert g.table.sum() == pytest.approx(8.0)


def test_splat_channel_mismatch():
    g = make_structure("voxel", (3, 3, 3), 2)
    with pytest.raises(DimensionError):
        splat_accumulate(g, [[0, 0, 0]], [[1.0, 2.0, 3.0]])


def test_negative_splat_weight_rejected():
    g = make_structure("voxel", (3, 3, 3), 1)
    with pytest.raises(DomainError):
        splat_accumulate(g, [[0, 0, 0]], [[1.0]], -1.0)


def test_sample_vjp_unit_grad_at_vertex():
    g = make_structure("triplane", (4, 4, 4), 3, np.float64)
    x = [vertex_world(1, 4), vertex_world(2, 4), vertex_world(0, 4)]
    grad = sample_vjp(g, [x], [[0.0, 1.0, 0.0]])
    # one vertex per plane, channel 1 only
    for plane, cell in ((grad.plane_xy, (1, 2)), (grad.plane_yz, (2, 0)), (grad.plane_zx, (0, 1))):
        assert plane[cell + (1,)] == pytest.approx(1.0, abs=1e-12)
    assert grad.table.sum() == pytest.approx(3.0) and grad.table[:, [0, 2]].sum() == 0


def test_sample_vjp_matches_splat_bitwise():
    rng = np.random.default_rng(5)
    g = random_structure("voxel", (6, 6, 6), 3, rng)
    x = rng.uniform(-1, 1, (40, 3)).astype(np.float32)
    up = rng.standard_normal((40, 3)).astype(np.float32)
    acc = g.like()
    splat_accumulate(acc, x, up, 1.0)
    np.testing.assert_array_equal(sample_vjp(g, x, up).table, acc.table)


def test_sample_finite_difference_per_cell():
    rng = np.random.default_rng(6)
    g = random_structure("voxel", (5, 5, 5), 2, rng, np.float64)
    x = rng.uniform(-0.9, 0.9, (30, 3))
    up = rng.standard_normal((30, 2))
    grad = sample_vjp(g, x, up).table
    for cell in rng.choice(np.flatnonzero(grad[:, 0]), 10, replace=False):
        keep = g.table[cell, 0]
        g.table[cell, 0] = keep + 1e-3
        hi = np.sum(sample(g, x) * up)
        g.table[cell, 0] = keep - 1e-3
        lo = np.sum(sample(g, x) * up)
        g.table[cell, 0] = keep
        assert (hi - lo) / 2e-3 == pytest.approx(grad[cell, 0], rel=1e-6)


# --- properties ------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(kind=kinds, pts=points, n=st.integers(2, 9))
def test_weights_partition_unity(kind, pts, n):
    s = make_structure(kind, (n, n + 1, n + 2), 1, np.float64)
    _, w = interpolation_weights(s, pts)
    assert np.all(w >= 0)
    per_plane = 8 if kind == "voxel" else 4
    np.testing.assert_allclose(w.reshape(len(pts), -1, per_plane).sum(-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(kind=kinds, seed=st.integers(0, 2**32 - 1), n_pts=st.integers(1, 50))
def test_adjointness(kind, seed, n_pts):
    rng = np.random.default_rng(seed)
    s = random_structure(kind, (5, 6, 7), 3, rng, np.float32)
    x = rng.uniform(-1.2, 1.2, (n_pts, 3)).astype(np.float32)
    v = rng.standard_normal((n_pts, 3)).astype(np.float32)
    acc = s.like()
    splat_accumulate(acc, x, v)
    lhs = float(np.sum(acc.table.astype(np.float64) * s.table))
    rhs = float(np.sum(v.astype(np.float64) * sample(s, x)))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs), float(np.sum(np.abs(v))))


@settings(max_examples=60, deadline=None)
@given(kind=kinds, seed=st.integers(0, 2**32 - 1), axis=st.integers(0, 2))
def test_piecewise_multilinear(kind, seed, axis):
    rng = np.random.default_rng(seed)
    s = random_structure(kind, (5, 5, 5), 2, rng, np.float64)
    cell = rng.integers(0, 4)
    lo, hi = vertex_world(cell, 5), vertex_world(cell + 1, 5)
    base = rng.uniform(-1, 1, 3)
    ts = np.sort(rng.uniform(lo, hi, 3))
    pts = np.repeat(base[None], 3, 0)
    pts[:, axis] = ts
    f = sample(s, pts)
    # affine along the axis: the middle value lies on the chord
    lam = (ts[1] - ts[0]) / (ts[2] - ts[0]) if ts[2] > ts[0] else 0.0
    np.testing.assert_allclose(f[1], (1 - lam) * f[0] + lam * f[2], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(x=arrays(np.float64, (3,), elements=st.floats(-1e6, 1e6)),
       a=st.floats(0.05, 1.95), per_axis=st.booleans())
def test_contract_strictly_inside_cube(x, a, per_axis):
    y = contract(x, ContractConfig(a, per_axis=per_axis))
    assert np.all(np.abs(y) < 1)


@settings(max_examples=100, deadline=None)
@given(r1=st.floats(0, 100), r2=st.floats(0, 100), a=st.floats(0.05, 1.95))
def test_contract_monotone_in_radius(r1, r2, a):
    d = np.array([0.3, -0.5, 0.8])
    d /= np.linalg.norm(d)
    cfg = ContractConfig(a, per_axis=False)
    n1 = np.linalg.norm(contract(r1 * d, cfg))
    n2 = np.linalg.norm(contract(r2 * d, cfg))
    if r1 <= r2:
        assert n1 <= n2 + 1e-12


def test_contract_examples():
    cfg = ContractConfig(1.0, per_axis=False)
    np.testing.assert_array_equal(contract(np.zeros(3), cfg), 0)
    x = np.array([0.6, 0.0, 0.8])
    np.testing.assert_allclose(contract(x, cfg), 0.5 * x)
    np.testing.assert_allclose(contract(x * (1 + 1e-9), cfg), 0.5 * x, atol=1e-8)
    far = contract(np.array([1e12, 0, 0]), cfg)
    assert np.linalg.norm(far) == pytest.approx(1.0, abs=1e-9)


def test_contract_per_axis_treats_axes_independently():
    cfg = ContractConfig(1.0)
    y = contract(np.array([[4.0, 0.5, -2.0]]), cfg)[0]
    assert y[1] == pytest.approx(0.25)
    assert y[0] == pytest.approx(0.5 * ((1 - 0.25) + 1))
    assert y[2] == pytest.approx(-0.5 * ((1 - 0.5) + 1))


@pytest.mark.parametrize("a", [0.0, 2.0, -1.0])
def test_contract_scale_domain(a):
    with pytest.raises(DomainError):
        ContractConfig(a)


def test_sample_with_contraction_matches_manual():
    rng = np.random.default_rng(7)
    s = random_structure("voxel", (6, 6, 6), 2, rng, np.float64)
    x = rng.uniform(-5, 5, (20, 3))
    cfg = ContractConfig(0.8)
    np.testing.assert_array_equal(sample(s, x, cfg), sample(s, contract(x, cfg)))


# --- file format -----------------------------------------------------------

@pytest.mark.parametrize("kind", ["voxel", "triplane"])
def test_grid_roundtrip(tmp_path, kind):
    s = random_structure(kind, (3, 4, 5), 2, np.random.default_rng(8))
    write_grid(tmp_path / "g.lpg", s)
    back = read_grid(tmp_path / "g.lpg")
    assert back.kind == kind and back.dims == (3, 4, 5)
    np.testing.assert_array_equal(back.table, s.table)


def test_grid_header_bytes(tmp_path):
    write_grid(tmp_path / "g.lpg", make_structure("triplane", (2, 3, 4), 5))
    raw = (tmp_path / "g.lpg").read_bytes()
    assert raw[:4] == b"LPG1"
    assert np.frombuffer(raw[4:24], "<u4").tolist() == [1, 2, 3, 4, 5]
    assert len(raw) == 24 + (6 + 12 + 8) * 5 * 4


def test_truncated_grid_rejected(tmp_path):
    write_grid(tmp_path / "g.lpg", make_structure("voxel", (2, 2, 2), 1))
    (tmp_path / "bad.lpg").write_bytes((tmp_path / "g.lpg").read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_grid(tmp_path / "bad.lpg")
