import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticeflow.lattice import (
    InvalidInputError,
    ScaleSchedule,
    build_coarser_lattice,
    build_feature_map,
    build_point_lattice,
    check_lattice_points,
    elevate,
    elevation_matrix,
    enclosing_simplex,
    full_coords,
    lattice_positions,
    neighbor_offsets,
    simplex_edge_length,
)

seeds = st.integers(0, 2**32 - 1)


def random_points(seed, n=200, d=3, lo=-10.0, hi=10.0):
    return np.random.default_rng(seed).uniform(lo, hi, (n, d))


# -- elevation ----------------------------------------------------------------

@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_elevation_basis_is_orthonormal_in_the_zero_sum_plane(d):
    E = elevation_matrix(d)
    assert np.allclose(E.T @ E, np.eye(d), atol=1e-14)
    assert np.allclose(E.sum(axis=0), 0.0, atol=1e-14)


def test_elevate_zero_is_zero():
    assert np.array_equal(elevate(np.zeros(3), 2.5), np.zeros(4))


def test_elevate_scale_equals_scaled_position(rng):
    p = rng.uniform(-10, 10, (50, 3))
    assert np.allclose(elevate(p, 2.0 * 1.7), elevate(2.0 * p, 1.7), rtol=0, atol=1e-12)


def test_elevated_points_sum_to_zero(rng):
    e = elevate(rng.uniform(-10, 10, (1000, 3)), 3.3)
    assert np.max(np.abs(e.sum(axis=1))) <= 1e-9


def test_elevate_is_linear_and_injective(rng):
    p, q = rng.uniform(-10, 10, (2, 40, 3))
    a, b = rng.normal(size=2)
    assert np.allclose(elevate(a * p + b * q, 1.3), a * elevate(p, 1.3) + b * elevate(q, 1.3), atol=1e-11)
    # the basis is an isometry, so distances scale exactly by s
    dist_in = np.linalg.norm(p - q, axis=1)
    dist_out = np.linalg.norm(elevate(p, 1.3) - elevate(q, 1.3), axis=1)
    assert np.allclose(dist_out, 1.3 * dist_in, rtol=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_elevate_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        elevate(np.array([[0.0, bad, 1.0]]), 1.0)


@pytest.mark.parametrize("scale", [0.0, -1.0, np.inf])
def test_elevate_rejects_bad_scale(scale):
    with pytest.raises(InvalidInputError):
        elevate(np.zeros((1, 3)), scale)


# -- enclosing simplex ---------------------------------------------------------

def _check_footprint(e, fp, tol=1e-9):
    d = e.shape[1] - 1
    assert fp.weights.min() >= -1e-12
    assert np.allclose(fp.weights.sum(axis=1), 1.0, atol=tol)
    assert np.max(np.abs(fp.reconstruct() - e)) <= 1e-6
    assert check_lattice_points(fp.vertices.reshape(-1, d + 1)).all()
    rem = np.mod(fp.vertices[:, :, 0], d + 1)
    assert np.array_equal(rem, np.broadcast_to(np.arange(d + 1), rem.shape))


@pytest.mark.parametrize("d", [1, 2, 3, 4, 6])
def test_random_points_satisfy_footprint_invariants(d, rng):
    e = elevate(rng.uniform(-10, 10, (10_000, d)), 1.7)
    _check_footprint(e, enclosing_simplex(e))


@pytest.mark.parametrize("d", [2, 3])
def test_weights_match_least_squares_barycentric_solve(d, rng):
    e = elevate(rng.uniform(-5, 5, (30, d)), 2.0)
    fp = enclosing_simplex(e)
    for k in range(len(fp)):
        A = np.vstack([fp.vertices[k].T.astype(float), np.ones(d + 1)])
        rhs = np.append(e[k], 1.0)
        w = np.linalg.lstsq(A, rhs, rcond=None)[0]
        assert np.allclose(w, fp.weights[k], atol=1e-10)


@pytest.mark.parametrize("d", [2, 3])
def test_lattice_point_gets_unit_weight(d, rng):
    fp = enclosing_simplex(elevate(rng.uniform(-3, 3, (20, d)), 1.0))
    for v in fp.vertices.reshape(-1, d + 1)[:15]:
        f = enclosing_simplex(v.astype(float))
        assert sorted(f.weights.tolist()) == [0.0] * d + [1.0]
        assert np.array_equal(f.vertices[np.argmax(f.weights)], v)


@pytest.mark.parametrize("d", [2, 3, 5])
def test_simplex_centroid_gets_equal_weights(d, rng):
    fp = enclosing_simplex(elevate(rng.uniform(-3, 3, (10, d)), 1.0))
    for verts in fp.vertices:
        f = enclosing_simplex(verts.mean(axis=0))
        assert np.allclose(f.weights, 1.0 / (d + 1), atol=1e-12)


def test_simplex_search_is_deterministic(rng):
    e = elevate(rng.uniform(-10, 10, (500, 3)), 0.9)
    a, b = enclosing_simplex(e), enclosing_simplex(e.copy())
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.weights, b.weights)


def test_single_and_batched_agree(rng):
    e = elevate(rng.uniform(-10, 10, (5, 3)), 1.0)
    batch = enclosing_simplex(e)
    for k in range(5):
        one = enclosing_simplex(e[k])
        assert np.array_equal(one.vertices, batch.vertices[k])
        assert np.array_equal(one.weights, batch.weights[k])


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.05, 20.0))
def test_footprint_invariants_property(seed, scale):
    e = elevate(random_points(seed, 300), scale)
    _check_footprint(e, enclosing_simplex(e))


def test_non_finite_elevated_rejected():
    with pytest.raises(InvalidInputError):
        enclosing_simplex(np.array([0.0, np.nan, 0.0, 0.0]))


# -- 1-ring ---------------------------------------------------------------------

def test_two_dimensional_ring_has_seven_offsets():
    # "same neighborhood size p=q=7" at d=2
    assert neighbor_offsets(2).shape == (7, 3)


@pytest.mark.parametrize("d", [1, 2, 3, 4, 7])
def test_ring_size_and_symmetry(d):
    off = neighbor_offsets(d)
    assert off.shape == (2 * (d + 1) + 1, d + 1)
    assert np.array_equal(off[0], np.zeros(d + 1))
    assert check_lattice_points(off).all()
    rows = {tuple(o) for o in off.tolist()}
    assert all(tuple(-o) in rows for o in off)
    # at d = 1 the two axes are opposite, so the ring repeats itself
    assert len(rows) == (3 if d == 1 else off.shape[0])


def test_ring_steps_have_edge_length():
    d, s = 3, 2.0
    pos = lattice_positions(neighbor_offsets(d), s)
    lengths = np.linalg.norm(pos[1:], axis=1)
    assert np.allclose(lengths, simplex_edge_length(d, s))


def test_ring_invalid_dimension():
    with pytest.raises(ValueError):
        neighbor_offsets(0)


# -- feature maps ---------------------------------------------------------------

def test_single_point_occupies_at_most_d_plus_one_keys():
    fmap, _ = build_feature_map(np.array([[0.3, -1.2, 2.2]]), np.ones((1, 2)), 1.0)
    assert fmap.num_keys == 4
    fmap, _ = build_feature_map(np.zeros((1, 3)), np.ones((1, 2)), 1.0)
    assert fmap.num_keys == 1


def test_identical_points_share_one_footprint(rng):
    pts = np.repeat(rng.uniform(-2, 2, (1, 3)), 500, axis=0)
    fmap, _ = build_feature_map(pts, rng.normal(size=(500, 2)), 1.3)
    assert fmap.num_keys <= 4


def test_duplicating_points_keeps_key_set(rng):
    pts = rng.uniform(-5, 5, (100, 3))
    a = build_point_lattice(pts, 1.1)
    b = build_point_lattice(np.vstack([pts, pts]), 1.1)
    assert {tuple(k) for k in a.keys.tolist()} == {tuple(k) for k in b.keys.tolist()}


def test_occupied_set_is_union_of_footprints_and_incidence_complete(rng):
    pts = rng.uniform(-3, 3, (60, 3))
    fmap, fps = build_feature_map(pts, rng.normal(size=(60, 2)), 1.5)
    union = {tuple(k) for k, w in zip(fps.keys.reshape(-1, 3).tolist(), fps.weights.ravel()) if w > 0}
    assert union == {tuple(k) for k in fmap.keys.tolist()}
    assert fmap.num_keys <= 4 * 60
    # point k appears in key j's list iff j is in k's footprint, with weight b_kj
    for j in range(fmap.num_keys):
        key = tuple(fmap.keys[j])
        expected = sorted(
            (k, float(w))
            for k in range(60)
            for v, w in zip(fps.keys[k].tolist(), fps.weights[k])
            if tuple(v) == key and w > 0
        )
        assert sorted(fmap.incidence(j)) == expected


def test_index_is_bijection_onto_rows(rng):
    fmap = build_point_lattice(rng.uniform(-5, 5, (300, 3)), 2.0)
    rows = fmap.table.lookup(fmap.keys)
    assert np.array_equal(rows, np.arange(fmap.num_keys))


def test_every_occupied_key_is_a_lattice_point(rng):
    fmap = build_point_lattice(rng.uniform(-10, 10, (2000, 3)), 0.7)
    assert check_lattice_points(full_coords(fmap.keys)).all()


def test_empty_input_gives_flagged_empty_map():
    fmap, fps = build_feature_map(np.zeros((0, 3)), np.zeros((0, 2)), 1.0)
    assert fmap.empty and fmap.num_keys == 0
    assert fmap.features.shape == (0, 2)


def test_signal_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        build_feature_map(np.zeros((3, 3)), np.zeros((2, 1)), 1.0)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.2, 5.0))
def test_coarser_scale_never_adds_keys(seed, scale):
    pts = random_points(seed, 400, lo=-3, hi=3)
    fine = build_point_lattice(pts, scale)
    coarse = build_point_lattice(pts, scale / 2)
    assert coarse.num_keys <= fine.num_keys


def test_coarser_lattice_elevation_is_exact(rng):
    fine = build_point_lattice(rng.uniform(-5, 5, (500, 3)), 4.0)
    coarse = build_coarser_lattice(fine, 2.0)
    direct = elevate(lattice_positions(fine.full_keys, 4.0), 2.0)
    assert np.allclose(coarse.elevated, direct, atol=1e-10)
    assert np.array_equal(coarse.source_keys, fine.keys)
    with pytest.raises(ValueError):
        build_coarser_lattice(fine, 8.0)


def test_scale_schedule_monotone():
    sch = ScaleSchedule(8.0, 5)
    lv = np.array(sch.levels)
    assert np.all(lv > 0) and np.all(np.diff(lv) < 0)
    assert np.all(np.diff(sch.up_levels) > 0)
    for bad in [dict(base_scale=0.0, num_levels=3), dict(base_scale=1.0, num_levels=0),
                dict(base_scale=1.0, num_levels=3, ratio=1.0)]:
        with pytest.raises(ValueError):
            ScaleSchedule(**bad)


def test_schedule_from_spacing_sets_edge_length():
    sch = ScaleSchedule.from_spacing(0.05, 4, d=3, edge_factor=4.0)
    assert simplex_edge_length(3, sch.base_scale) == pytest.approx(0.2)
