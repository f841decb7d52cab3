"""Invariant and oracle suites runnable from an installed package.

Each suite returns a CheckResult with the worst observed error next to its
tolerance. ``quick=True`` shrinks instance counts for a fast smoke run; the
tolerances stay the same.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bclops import (
    Concat,
    ConvStack,
    EPELoss,
    LatticeConv,
    LeakyReLU,
    Linear,
    SignalMatrix,
    Slice,
    Splat,
    lattice_conv,
    slice_features,
    splat,
)
from .data import ScenePair, SceneSpec, dumps_pair, gen_scene, loads_pair, preprocess
from .gradcheck import check_network, check_op
from .lattice import (
    build_point_lattice,
    check_lattice_points,
    elevate,
    enclosing_simplex,
)
from .layers import CorrBCL, CorrConfig, LayerIO, corr_bcl
from .metrics import threshold_counts
from .model import NetworkConfig, SceneFlowNet, dumps_checkpoint, fit_base_scale, loads_checkpoint
from .reference import naive_corr, naive_lattice_conv, naive_slice, naive_splat


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3e} tol={self.tolerance:.1e} ({self.seconds:.2f}s)"


def _as_dict(fmap, feats):
    return {tuple(k): list(r) for k, r in zip(fmap.keys.tolist(), np.asarray(feats).tolist())}


def _from_dict(fmap, table, width):
    out = np.zeros((fmap.num_keys, width))
    for j, k in enumerate(fmap.keys.tolist()):
        out[j] = table[tuple(k)]
    return out


def _randomize(params, rng, sd=0.5):
    for p in params:
        p.data[...] = rng.normal(0, sd, p.data.shape)


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


@_timed
def lattice_invariants(num_points: int = 100_000, scales=(0.25, 0.5, 1.0, 2.0, 4.0), seed: int = 0) -> CheckResult:
    """Barycentric weights, affine reconstruction and vertex validity at several scales."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-10, 10, (num_points, 3))
    neg = sum_err = recon = 0.0
    bad = 0
    for s in scales:
        e = elevate(pts, s)
        fp = enclosing_simplex(e)
        neg = max(neg, float(-fp.weights.min()))
        sum_err = max(sum_err, float(np.abs(fp.weights.sum(axis=1) - 1).max()))
        recon = max(recon, float(np.abs(fp.reconstruct() - e).max() / s))
        bad += int((~check_lattice_points(fp.vertices)).sum())
    ok = neg <= 1e-12 and sum_err <= 1e-9 and recon <= 1e-6 and bad == 0
    return CheckResult("lattice invariants", ok, recon, 1e-6,
                       details=dict(min_weight=-neg, weight_sum_err=sum_err, recon_err=recon, bad_vertices=bad))


def _small_lattice(rng, n=None, scale=1.2):
    n = int(rng.integers(5, 51)) if n is None else n
    pts = rng.uniform(-1.5, 1.5, (n, 3))
    return pts, build_point_lattice(pts, scale)


def _random_stack(rng, cin, widths, acts):
    st = ConvStack.init(rng, cin, widths, 9)
    _randomize(st.params, rng, 0.7)
    st.activations = list(acts)
    return st


@_timed
def oracle_equivalence(instances: int = 20, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """Vectorised splat, slice, lattice conv and CorrBCL against brute-force loops."""
    worst = {"splat": 0.0, "slice": 0.0, "lattice_conv": 0.0, "corr_bcl": 0.0}
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        pts, fmap = _small_lattice(rng)
        sig = rng.normal(size=(pts.shape[0], 4))
        for norm in (True, False):
            ref = naive_splat(elevate(pts, fmap.scale), sig, norm)
            got = splat(fmap, sig, norm)
            worst["splat"] = max(worst["splat"], float(np.abs(got - _from_dict(fmap, ref, 4)).max()))

        feats = rng.normal(size=(fmap.num_keys, 3))
        targets = pts + rng.normal(0, 0.3, pts.shape)
        e = elevate(targets, fmap.scale)
        fp = enclosing_simplex(e)
        got = slice_features(fmap, feats, fmap.locate(fp), fp.weights)
        ref = np.array(naive_slice(_as_dict(fmap, feats), e, 3))
        worst["slice"] = max(worst["slice"], float(np.abs(got - ref).max()))

        stack = _random_stack(rng, 3, [5, 2], [True, bool(i % 2)])
        got = lattice_conv(fmap, SignalMatrix(feats), stack).data
        layers = [(w.data, b.data, a) for w, b, a in zip(stack.weights, stack.biases, stack.activations)]
        ref = naive_lattice_conv(_as_dict(fmap, feats), layers, 3)
        worst["lattice_conv"] = max(worst["lattice_conv"], float(np.abs(got - _from_dict(fmap, ref, 2)).max()))

        f1 = build_point_lattice(rng.uniform(-1, 1, (int(rng.integers(3, 8)), 3)), 1.0)
        f2 = build_point_lattice(rng.uniform(-1, 1, (int(rng.integers(3, 8)), 3)) + 0.2, 1.0)
        for mode, (c1, c2) in (("concat", (3, 2)), ("mult", (3, 3))):
            cfg = CorrConfig.init(rng, 3, c1, c2, 4, 5, mode)
            _randomize(cfg.params, rng)
            F1, F2 = rng.normal(size=(f1.num_keys, c1)), rng.normal(size=(f2.num_keys, c2))
            got = corr_bcl(LayerIO(f1, SignalMatrix(F1)), LayerIO(f2, SignalMatrix(F2)), cfg).data
            g = (cfg.g.weights[0].data, cfg.g.biases[0].data)
            h = (cfg.h.weights[0].data, cfg.h.biases[0].data)
            ref = naive_corr(_as_dict(f1, F1), _as_dict(f2, F2), cfg.patch_offsets, cfg.disp_offsets, g, h, 3, mode)
            worst["corr_bcl"] = max(worst["corr_bcl"], float(np.abs(got - _from_dict(f1, ref, 5)).max()))
    top = max(worst.values())
    return CheckResult("oracle equivalence", top <= tol, top, tol, details=worst)


@_timed
def adjointness(instances: int = 20, seed: int = 1, tol: float = 1e-9) -> CheckResult:
    """<S u, v> = <u, S^T v> for the unnormalised splat, with slice as S^T."""
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        pts, fmap = _small_lattice(rng)
        u = rng.normal(size=(pts.shape[0], 2))
        v = rng.normal(size=(fmap.num_keys, 2))
        op = Splat(fmap, normalize=False)
        lhs = float(np.sum(op(SignalMatrix(u)).data * v))
        rhs_op = float(np.sum(u * op.backward(v)[0]))
        rhs_slice = float(np.sum(u * slice_features(fmap, v)))
        scale = max(1.0, abs(lhs))
        worst = max(worst, abs(lhs - rhs_op) / scale, abs(lhs - rhs_slice) / scale)
    return CheckResult("adjointness", worst <= tol, worst, tol)


@_timed
def normalization_properties(seed: int = 2, tol: float = 1e-12) -> CheckResult:
    """A constant signal survives normalised splatting; duplicating points changes nothing."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-5, 5, (300, 3))
    c = np.array([1.7, -3.2, 0.25])
    fmap = build_point_lattice(pts, 1.3)
    const_err = float(np.abs(splat(fmap, np.tile(c, (300, 1))) - c).max())
    sig = rng.normal(size=(300, 3))
    twice = build_point_lattice(np.vstack([pts, pts]), 1.3)
    a, b = _as_dict(fmap, splat(fmap, sig)), _as_dict(twice, splat(twice, np.vstack([sig, sig])))
    dup_err = 0.0 if a.keys() == b.keys() else np.inf
    for k in a:
        dup_err = max(dup_err, float(np.abs(np.subtract(a[k], b.get(k, np.inf))).max()))
    worst = max(const_err, dup_err)
    return CheckResult("density normalization", worst <= tol, worst, tol,
                       details=dict(constant=const_err, duplicate=dup_err))


@_timed
def gradient_checks(seed: int = 3, tol_ops: float = 1e-4, tol_net: float = 1e-3, net_points: int = 30) -> CheckResult:
    """Central differences for every primitive and for a small end-to-end network."""
    rng = np.random.default_rng(seed)
    pts, fmap = _small_lattice(rng, 30)
    ops = {}
    for norm in (True, False, "gaussian"):
        ops[f"splat[{norm}]"] = check_op(lambda: Splat(fmap, norm), [rng.normal(size=(30, 3))], rng)
    ops["slice"] = check_op(lambda: Slice(fmap), [rng.normal(size=(fmap.num_keys, 3))], rng)
    stack = _random_stack(rng, 3, [4, 2], [True, False])
    arrays = [rng.normal(size=(fmap.num_keys, 3))] + [p.data for p in stack.params]
    ops["lattice_conv"] = check_op(lambda: LatticeConv(fmap, stack.activations), arrays, rng, probes=80)
    x = rng.normal(size=(12, 4))
    ops["linear"] = check_op(Linear, [x, rng.normal(size=(4, 3)), rng.normal(size=(1, 3))], rng)
    ops["leaky_relu"] = check_op(LeakyReLU, [x], rng)
    ops["concat"] = check_op(Concat, [x, rng.normal(size=(12, 2))], rng)
    gt = rng.normal(size=(12, 3))
    ops["epe_loss"] = check_op(lambda: EPELoss(gt), [rng.normal(size=(12, 3))], rng)
    f1 = build_point_lattice(rng.uniform(-1, 1, (8, 3)), 1.0)
    f2 = build_point_lattice(rng.uniform(-1, 1, (8, 3)) + 0.2, 1.0)
    for mode, (c1, c2) in (("concat", (3, 2)), ("mult", (2, 2))):
        cfg = CorrConfig.init(rng, 3, c1, c2, 4, 3, mode)
        _randomize(cfg.params, rng)
        arrays = [rng.normal(size=(f1.num_keys, c1)), rng.normal(size=(f2.num_keys, c2))] + [p.data for p in cfg.params]
        ops[f"corr_bcl[{mode}]"] = check_op(lambda: CorrBCL(f1, f2, cfg), arrays, rng, probes=120)

    pair = toy_pair(net_points)
    net = toy_network(pair)
    per_param = check_network(net, pair, net.geometry(pair), np.random.default_rng(seed))
    worst_ops, worst_net = max(ops.values()), max(per_param.values())
    ok = worst_ops <= tol_ops and worst_net <= tol_net
    # two tolerances, so report the worst error as a fraction of its own tolerance
    return CheckResult("gradients", ok, max(worst_ops / tol_ops, worst_net / tol_net), 1.0,
                       details=dict(ops=ops, network=worst_net, network_tol=tol_net))


def toy_pair(n: int = 30, seed: int = 3) -> ScenePair:
    return preprocess(gen_scene(SceneSpec(num_objects=2), seed), n_samples=n, seed=1)


def toy_network(pair: ScenePair, seed: int = 2, **overrides) -> SceneFlowNet:
    """Three-level network with small widths and O(1) random weights."""
    cfg = NetworkConfig(base_scale=fit_base_scale([pair]), num_levels=3, widths=(4, 5, 6),
                        corr_levels=(1, 2), seed=seed).replace(**overrides)
    net = SceneFlowNet(cfg)
    _randomize(net.params.values(), np.random.default_rng(seed))
    return net


def loop_counts(pred, gt) -> dict:
    strict = relax = outliers = 0
    for p, g in zip(np.asarray(pred).tolist(), np.asarray(gt).tolist()):
        err = sum((a - b) ** 2 for a, b in zip(p, g)) ** 0.5
        norm = sum(b * b for b in g) ** 0.5
        rel = err / norm if norm > 0 else float("inf")
        strict += err < 0.05 or rel < 0.05
        relax += err < 0.1 or rel < 0.1
        outliers += err > 0.3 or (norm > 0 and rel > 0.1)
    return {"strict": strict, "relax": relax, "outliers": outliers}


@_timed
def metrics_and_formats(instances: int = 5, n: int = 1000, seed: int = 4) -> CheckResult:
    """Metric counters vs a per-point loop; scene-pair and checkpoint files round-trip."""
    mismatches = 0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        gt = rng.normal(size=(n, 3)) * rng.uniform(0, 1, (n, 1))
        gt[:10] = 0.0
        pred = gt + rng.normal(size=gt.shape) * rng.choice([0.01, 0.05, 0.2, 1.0], (n, 1))
        got = threshold_counts(pred, gt)
        ref = loop_counts(pred, gt)
        mismatches += sum(got[k] != ref[k] for k in ref)
    pair = gen_scene(SceneSpec(num_objects=2, density=60.0), seed)
    pair.pred_flow = pair.gt_flow * 0.5
    back = loads_pair(dumps_pair(pair))
    scene_ok = all(getattr(back, k).tobytes() == getattr(pair, k).tobytes()
                   for k in ("pc1", "pc2", "gt_flow", "pred_flow")) and back.meta == pair.meta
    net = toy_network(toy_pair())
    blob = dumps_checkpoint(net)
    net2 = loads_checkpoint(blob)
    ckpt_ok = dumps_checkpoint(net2) == blob and net2.cfg == net.cfg and all(
        a.data.tobytes() == b.data.tobytes() for a, b in zip(net.params.values(), net2.params.values()))
    ok = mismatches == 0 and scene_ok and ckpt_ok
    return CheckResult("metrics and file formats", ok, float(mismatches), 0.0,
                       details=dict(counter_mismatches=mismatches, scene_round_trip=scene_ok,
                                    checkpoint_round_trip=ckpt_ok))


def run_all(quick: bool = False) -> list[CheckResult]:
    if quick:
        return [
            lattice_invariants(10_000),
            oracle_equivalence(5),
            adjointness(5),
            normalization_properties(),
            gradient_checks(),
            metrics_and_formats(2),
        ]
    return [
        lattice_invariants(),
        oracle_equivalence(),
        adjointness(),
        normalization_properties(),
        gradient_checks(),
        metrics_and_formats(),
    ]
