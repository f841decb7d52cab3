"""Brute-force reference implementations used as test oracles.

Plain Python loops over dict-keyed lattices. They share nothing with the
vectorised operators except the simplex footprints, which are checked
separately against their own invariants.
"""

from __future__ import annotations

import numpy as np

from .lattice import enclosing_simplex, neighbor_offsets


def _leaky(z, slope=0.1):
    return [v if v > 0 else slope * v for v in z]


def _dense(x, W, b, act):
    out = [sum(x[r] * W[r][c] for r in range(len(x))) + b[c] for c in range(len(b))]
    return _leaky(out) if act else out


def naive_splat(elevated, signals, normalize=True) -> dict:
    """{key tuple: lattice signal} from elevated points (N, d+1) and signals (N, C)."""
    fp = enclosing_simplex(np.asarray(elevated, dtype=np.float64))
    d = fp.dim
    num, den = {}, {}
    for k in range(len(fp)):
        for r in range(d + 1):
            w = float(fp.weights[k, r])
            if w <= 0:
                continue
            key = tuple(int(c) for c in fp.vertices[k, r, :d])
            acc = num.setdefault(key, [0.0] * len(signals[k]))
            for c, v in enumerate(signals[k]):
                acc[c] += w * float(v)
            den[key] = den.get(key, 0.0) + w
    if normalize:
        return {key: [v / max(den[key], 1e-12) for v in vals] for key, vals in num.items()}
    return num


def naive_slice(features: dict, elevated, width: int) -> list:
    """Barycentric gather at each elevated target; missing keys read as zero."""
    fp = enclosing_simplex(np.asarray(elevated, dtype=np.float64))
    d = fp.dim
    out = []
    for k in range(len(fp)):
        row = [0.0] * width
        for r in range(d + 1):
            key = tuple(int(c) for c in fp.vertices[k, r, :d])
            feat = features.get(key)
            if feat is None:
                continue
            for c in range(width):
                row[c] += float(fp.weights[k, r]) * feat[c]
        out.append(row)
    return out


def naive_lattice_conv(features: dict, layers, d: int) -> dict:
    """Apply [(W, b, act), ...] with a 1-ring gather wherever W has K*C rows."""
    offsets = [tuple(int(c) for c in o[:d]) for o in neighbor_offsets(d)]
    K = len(offsets)
    result = {}
    for key in features:
        x = list(features[key])
        first = True
        for W, b, act in layers:
            W = np.asarray(W).tolist()
            b = np.asarray(b).ravel().tolist()
            c = len(x)
            if len(W) == K * c:
                if not first:
                    raise ValueError("oracle supports gathering in the first layer only")
                flat = []
                for o in offsets:
                    nb = tuple(a + b_ for a, b_ in zip(key, o))
                    flat += list(features.get(nb, [0.0] * c))
                x = _dense(flat, W, b, act)
            else:
                x = _dense(x, W, b, act)
            first = False
        result[key] = x
    return result


def _combine(a, b, mode):
    if mode == "concat":
        return list(a) + list(b)
    return [u * v for u, v in zip(a, b)]


def naive_corr(F1: dict, F2: dict, patch_offsets, disp_offsets, g, h, d: int, mode="concat") -> dict:
    """Double loop over displacement j and patch slot i for every key of F1.

    g, h are (W, b) pairs, each followed by a leaky rectifier.
    """
    c1 = len(next(iter(F1.values())))
    c2 = len(next(iter(F2.values()))) if F2 else c1
    oc = [tuple(int(c) for c in o[:d]) for o in patch_offsets]
    of = [tuple(int(c) for c in o[:d]) for o in disp_offsets]
    (Wg, bg), (Wh, bh) = g, h
    Wg, bg = np.asarray(Wg).tolist(), np.asarray(bg).ravel().tolist()
    Wh, bh = np.asarray(Wh).tolist(), np.asarray(bh).ravel().tolist()
    out = {}
    for x in F1:
        corr = []
        for dj in of:
            patch = []
            for di in oc:
                k1 = tuple(a + b for a, b in zip(x, di))
                k2 = tuple(a + b + c for a, b, c in zip(x, dj, di))
                patch += _combine(F1.get(k1, [0.0] * c1), F2.get(k2, [0.0] * c2), mode)
            corr += _dense(patch, Wg, bg, True)
        out[x] = _dense(corr, Wh, bh, True)
    return out


def naive_joint_corr(F1: dict, F2: dict, patch_offsets, disp_offsets, phi, d: int, mode="concat") -> dict:
    """Evaluate a joint function phi on the full q x p grid of combined pairs."""
    c1 = len(next(iter(F1.values())))
    c2 = len(next(iter(F2.values()))) if F2 else c1
    out = {}
    for x in F1:
        grid = []
        for dj in disp_offsets:
            row = []
            for di in patch_offsets:
                k1 = tuple(int(a + b) for a, b in zip(x, di[:d]))
                k2 = tuple(int(a + b + c) for a, b, c in zip(x, dj[:d], di[:d]))
                row.append(_combine(F1.get(k1, [0.0] * c1), F2.get(k2, [0.0] * c2), mode))
            grid.append(row)
        out[x] = phi(grid)
    return out


def naive_epe(pred, gt) -> float:
    total = 0.0
    for a, b in zip(np.asarray(pred).tolist(), np.asarray(gt).tolist()):
        total += sum((u - v) ** 2 for u, v in zip(a, b)) ** 0.5
    return total / len(pred)
