"""Central finite-difference checks for operators and whole networks."""

from __future__ import annotations

import numpy as np

from .bclops import SignalMatrix, Tape


def relative_error(analytic, numeric, floor: float) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_op(make_op, arrays, rng, probes: int = 50, eps: float = 1e-5, wrt=None) -> float:
    """Worst relative error over ``probes`` random scalar probes.

    ``make_op()`` returns a fresh operator; its output is contracted with a
    fixed random matrix R so the scalar objective is <op(inputs), R>.
    ``wrt`` selects which inputs are probed (default: all).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    inputs = [SignalMatrix(a) for a in arrays]
    tape = Tape()
    out = make_op()(*inputs, tape=tape)
    R = rng.normal(size=out.shape)
    tape.backward(out, R)

    def objective():
        return float(np.sum(make_op()(*[SignalMatrix(a) for a in arrays]).data * R))

    pairs = []
    for _ in range(probes):
        which = wrt[rng.integers(len(wrt))]
        a = arrays[which]
        if a.size == 0:
            continue
        idx = tuple(rng.integers(0, s) for s in a.shape)
        old = a[idx]
        a[idx] = old + eps
        up = objective()
        a[idx] = old - eps
        down = objective()
        a[idx] = old
        g = inputs[which].grad
        pairs.append((0.0 if g is None else g[idx], (up - down) / (2 * eps)))
    if not pairs:
        return 0.0
    an, nu = np.array(pairs).T
    floor = 1e-7 * max(1.0, np.abs(an).max(), np.abs(nu).max())
    return float(relative_error(an, nu, floor).max())


def check_network(net, pair, geom=None, rng=None, probes_per_param: int = 3, eps: float = 1e-6) -> dict:
    """Worst relative error per parameter tensor for the EPE loss of one pair."""
    rng = rng or np.random.default_rng(0)
    if geom is None:
        geom = net.geometry(pair)
    tape = Tape()
    loss = net.loss(pair, geom, tape)
    net.zero_grad()
    tape.backward(loss)
    out = {}
    for name, p in net.params.items():
        pairs = []
        for _ in range(probes_per_param):
            idx = tuple(rng.integers(0, s) for s in p.data.shape)
            old = p.data[idx]
            p.data[idx] = old + eps
            up = net.loss(pair, geom).data[0, 0]
            p.data[idx] = old - eps
            down = net.loss(pair, geom).data[0, 0]
            p.data[idx] = old
            pairs.append((0.0 if p.grad is None else p.grad[idx], (up - down) / (2 * eps)))
        an, nu = np.array(pairs).T
        floor = 1e-6 * max(1e-3, np.abs(an).max(), np.abs(nu).max())
        out[name] = float(relative_error(an, nu, floor).max())
    return out
