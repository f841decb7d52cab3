import numpy as np
import pytest

from latticeflow.bclops import (
    Concat,
    ConvStack,
    EPELoss,
    LatticeConv,
    LeakyReLU,
    Linear,
    SignalMatrix,
    Slice,
    Splat,
    Tape,
    constant,
    lattice_conv,
    slice_features,
    splat,
    splat_matrix,
)
from latticeflow.gradcheck import check_op
from latticeflow.lattice import build_lattice, build_feature_map, build_point_lattice, elevate, enclosing_simplex
from latticeflow.reference import naive_lattice_conv, naive_slice, naive_splat

from helpers import as_dict, from_dict, lattice_of, random_stack, stack_layers

SEEDS = range(20)


# -- oracle equivalence -------------------------------------------------------

@pytest.mark.parametrize("normalize", [True, False])
@pytest.mark.parametrize("seed", SEEDS)
def test_splat_matches_naive_oracle(seed, normalize):
    rng = np.random.default_rng(seed)
    pts, fmap = lattice_of(rng)
    sig = rng.normal(size=(pts.shape[0], 4))
    ref = naive_splat(elevate(pts, fmap.scale), sig, normalize)
    assert set(ref) == {tuple(k) for k in fmap.keys.tolist()}
    got = splat(fmap, sig, normalize)
    assert np.max(np.abs(got - from_dict(fmap, ref, 4))) <= 1e-9


@pytest.mark.parametrize("seed", SEEDS)
def test_slice_matches_naive_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    pts, fmap = lattice_of(rng)
    feats = rng.normal(size=(fmap.num_keys, 3))
    targets = pts + rng.normal(0, 0.3, pts.shape)
    e = elevate(targets, fmap.scale)
    fp = enclosing_simplex(e)
    got = slice_features(fmap, feats, fmap.locate(fp), fp.weights)
    ref = np.array(naive_slice(as_dict(fmap, feats), e, 3))
    assert np.max(np.abs(got - ref)) <= 1e-9
    # default targets are the splatted points themselves
    own = slice_features(fmap, feats)
    ref_own = np.array(naive_slice(as_dict(fmap, feats), elevate(pts, fmap.scale), 3))
    assert np.max(np.abs(own - ref_own)) <= 1e-9


@pytest.mark.parametrize("seed", SEEDS)
def test_lattice_conv_matches_naive_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    _, fmap = lattice_of(rng)
    feats = rng.normal(size=(fmap.num_keys, 3))
    stack = random_stack(rng, 3, [5, 2], 9, acts=[True, bool(seed % 2)])
    got = lattice_conv(fmap, SignalMatrix(feats), stack).data
    ref = naive_lattice_conv(as_dict(fmap, feats), stack_layers(stack), 3)
    assert np.max(np.abs(got - from_dict(fmap, ref, 2))) <= 1e-9


# -- linear-algebra identities -------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_unnormalized_splat_adjointness(seed):
    rng = np.random.default_rng(300 + seed)
    pts, fmap = lattice_of(rng)
    u = rng.normal(size=(pts.shape[0], 2))
    v = rng.normal(size=(fmap.num_keys, 2))
    op = Splat(fmap, normalize=False)
    op(SignalMatrix(u))
    lhs = np.sum(op.forward(u) * v)
    rhs = np.sum(u * op.backward(v)[0])
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))
    # slice on the same footprints is the transposed map
    sl = slice_features(fmap, v)
    assert abs(np.sum(sl * u) - np.sum(v * splat(fmap, u, False))) <= 1e-9 * max(1.0, abs(lhs))


def test_constant_signal_is_preserved_exactly(rng):
    pts = rng.uniform(-5, 5, (300, 3))
    c = np.array([1.7, -3.2, 0.25])
    fmap, _ = build_feature_map(pts, np.tile(c, (300, 1)), 1.3)
    assert np.max(np.abs(fmap.features.data - c)) <= 1e-12
    back = slice_features(fmap, fmap.features.data)
    assert np.max(np.abs(back - c)) <= 1e-12


def test_single_point_unnormalized_gives_barycentric_weights():
    pt = np.array([[0.31, -0.72, 1.05]])
    v = np.array([[2.0, -1.0]])
    fmap = build_point_lattice(pt, 1.0)
    out = splat(fmap, v, normalize=False)
    w = fmap.point_weights[0]
    assert np.allclose(out[fmap.point_rows[0]], w[:, None] * v, atol=1e-15)


def test_duplicating_points_leaves_normalized_splat_unchanged(rng):
    pts = rng.uniform(-3, 3, (80, 3))
    sig = rng.normal(size=(80, 3))
    a = build_point_lattice(pts, 1.4)
    b = build_point_lattice(np.vstack([pts, pts]), 1.4)
    ua = as_dict(a, splat(a, sig))
    ub = as_dict(b, splat(b, np.vstack([sig, sig])))
    assert ua.keys() == ub.keys()
    assert max(np.max(np.abs(np.subtract(ua[k], ub[k]))) for k in ua) <= 1e-12


def test_normalized_rows_are_convex_combinations(rng):
    pts, fmap = lattice_of(rng, 40)
    S = splat_matrix(fmap, True).toarray()
    assert np.all(S >= 0)
    assert np.allclose(S.sum(axis=1), 1.0, atol=1e-12)


def test_splat_identity_slice_keeps_constants_but_not_random_signals(rng):
    pts, fmap = lattice_of(rng, 40)
    ident = ConvStack([SignalMatrix(np.eye(2))], [SignalMatrix(np.zeros((1, 2)))], [False])
    const = np.full((40, 2), 0.8)
    out = slice_features(fmap, lattice_conv(fmap, SignalMatrix(splat(fmap, const)), ident).data)
    assert np.allclose(out, const, atol=1e-12)
    sig = rng.normal(size=(40, 2))
    raw = slice_features(fmap, splat(fmap, sig, normalize=False))
    assert not np.allclose(raw, sig)


def test_identity_centre_tap_returns_input(rng):
    _, fmap = lattice_of(rng, 30)
    feats = rng.normal(size=(fmap.num_keys, 3))
    W = np.zeros((9 * 3, 3))
    W[:3] = np.eye(3)
    stack = ConvStack([SignalMatrix(W)], [SignalMatrix(np.zeros((1, 3)))], [False])
    assert np.array_equal(lattice_conv(fmap, SignalMatrix(feats), stack).data, feats)


def test_isolated_key_sees_only_itself(rng):
    fmap = build_lattice(np.array([[0.0, 0, 0, 0], [40.0, 40, 40, -120]]), 1.0)
    assert fmap.num_keys == 2
    feats = rng.normal(size=(2, 2))
    stack = random_stack(rng, 2, [3], 9, acts=[False])
    out = lattice_conv(fmap, SignalMatrix(feats), stack).data
    W, b = stack.weights[0].data, stack.biases[0].data
    assert np.allclose(out, feats @ W[:2] + b, atol=1e-14)


def test_forward_ops_are_bit_identical_on_rerun(rng):
    _, fmap = lattice_of(rng, 45)
    feats = rng.normal(size=(fmap.num_keys, 3))
    stack = random_stack(rng, 3, [4, 4], 9)
    a = lattice_conv(fmap, SignalMatrix(feats), stack).data
    b = lattice_conv(fmap, SignalMatrix(feats.copy()), stack).data
    assert np.array_equal(a, b)


# -- errors -------------------------------------------------------------------

def test_backward_before_forward_raises(rng):
    _, fmap = lattice_of(rng, 10)
    for op in [Splat(fmap), Slice(fmap), LatticeConv(fmap, [True]), Linear(), Concat(), EPELoss(np.zeros((2, 3)))]:
        with pytest.raises(RuntimeError):
            op.backward(np.zeros((1, 1)))


def test_shape_errors(rng):
    pts, fmap = lattice_of(rng, 10)
    with pytest.raises(ValueError):
        Splat(fmap)(SignalMatrix(np.zeros((11, 2))))
    with pytest.raises(ValueError):
        Slice(fmap)(SignalMatrix(np.zeros((fmap.num_keys + 1, 2))))
    stack = random_stack(rng, 4, [3], 9)
    with pytest.raises(ValueError):
        lattice_conv(fmap, SignalMatrix(np.zeros((fmap.num_keys, 3))), stack)
    with pytest.raises(ValueError):
        SignalMatrix(np.zeros(3))
    with pytest.raises(ValueError):
        EPELoss(np.zeros((3, 3)))(SignalMatrix(np.zeros((2, 3))))


def test_empty_map_gives_empty_output():
    fmap = build_point_lattice(np.zeros((0, 3)), 1.0)
    assert splat(fmap, np.zeros((0, 2))).shape == (0, 2)


def test_grad_of_zero_is_zero(rng):
    pts, fmap = lattice_of(rng, 20)
    op = Splat(fmap)
    op(SignalMatrix(rng.normal(size=(20, 2))))
    assert not np.any(op.backward(np.zeros((fmap.num_keys, 2)))[0])
    conv = LatticeConv(fmap, [True, True])
    stack = random_stack(rng, 2, [3, 2], 9)
    conv(SignalMatrix(rng.normal(size=(fmap.num_keys, 2))), *stack.params)
    assert all(not np.any(g) for g in conv.backward(np.zeros((fmap.num_keys, 2))))


def test_bias_gradient_is_masked_column_sum(rng):
    _, fmap = lattice_of(rng, 30)
    feats = rng.normal(size=(fmap.num_keys, 3))
    stack = random_stack(rng, 3, [4], 9, acts=[True])
    conv = LatticeConv(fmap, stack.activations)
    conv(SignalMatrix(feats), *stack.params)
    g = rng.normal(size=(fmap.num_keys, 4))
    gb = conv.backward(g)[2]
    z = conv._saved[0][1]
    assert np.allclose(gb, np.where(z > 0, g, 0.1 * g).sum(axis=0, keepdims=True), atol=1e-13)


# -- finite differences --------------------------------------------------------

TOL = 1e-4


@pytest.mark.parametrize("normalize", [True, False, "gaussian"])
def test_splat_gradient(rng, normalize):
    pts, fmap = lattice_of(rng, 30)
    assert check_op(lambda: Splat(fmap, normalize), [rng.normal(size=(30, 3))], rng) <= TOL


def test_slice_gradient(rng):
    pts, fmap = lattice_of(rng, 30)
    fp = enclosing_simplex(elevate(pts + 0.1, fmap.scale))
    rows = fmap.locate(fp)
    assert check_op(lambda: Slice(fmap), [rng.normal(size=(fmap.num_keys, 3))], rng) <= TOL
    assert check_op(lambda: Slice(fmap, rows, fp.weights), [rng.normal(size=(fmap.num_keys, 3))], rng) <= TOL


def test_lattice_conv_gradient_all_inputs(rng):
    _, fmap = lattice_of(rng, 25)
    stack = random_stack(rng, 3, [4, 2], 9)
    arrays = [rng.normal(size=(fmap.num_keys, 3))] + [p.data for p in stack.params]
    assert check_op(lambda: LatticeConv(fmap, stack.activations), arrays, rng, probes=80) <= TOL


def test_lattice_conv_weight_sweep_on_five_keys(rng):
    fmap = build_point_lattice(np.array([[0.1, 0.2, 0.05], [0.4, 0.1, 0.3]]), 1.0)
    assert fmap.num_keys >= 5
    stack = random_stack(rng, 2, [3], 9)
    arrays = [rng.normal(size=(fmap.num_keys, 2))] + [p.data for p in stack.params]
    assert check_op(lambda: LatticeConv(fmap, stack.activations), arrays, rng, probes=60, wrt=[1]) <= TOL


def test_small_ops_gradients(rng):
    x = rng.normal(size=(12, 4))
    assert check_op(Linear, [x, rng.normal(size=(4, 3)), rng.normal(size=(1, 3))], rng) <= TOL
    assert check_op(LeakyReLU, [x], rng) <= TOL
    assert check_op(Concat, [x, rng.normal(size=(12, 2))], rng) <= TOL
    gt = rng.normal(size=(12, 3))
    assert check_op(lambda: EPELoss(gt), [rng.normal(size=(12, 3))], rng) <= TOL


def test_tape_accumulates_shared_inputs(rng):
    x = SignalMatrix(rng.normal(size=(5, 2)))
    tape = Tape()
    y = Concat()(x, x, tape=tape)
    tape.backward(y, np.ones((5, 4)))
    assert np.array_equal(x.grad, np.full((5, 2), 2.0))
    assert constant(np.zeros((1, 1))).requires_grad is False
