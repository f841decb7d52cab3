"""DownBCL, UpBCL and CorrBCL layers built from the lattice operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .bclops import (
    LEAKY_SLOPE,
    Concat,
    ConvStack,
    Op,
    SignalMatrix,
    Slice,
    Splat,
    Tape,
    constant,
    lattice_conv,
    leaky,
    leaky_grad,
)
from .lattice import LatticeFeatureMap, SimplexFootprint, build_coarser_lattice, neighbor_offsets


class LatticeMismatchError(RuntimeError):
    """Two layers that must share a lattice do not."""


@dataclass
class LayerIO:
    """Occupied keys of one lattice and a row-aligned feature block."""

    lattice: LatticeFeatureMap
    features: SignalMatrix

    def __post_init__(self):
        if self.features.shape[0] != self.lattice.num_keys:
            raise ValueError(
                f"{self.features.shape[0]} feature rows for {self.lattice.num_keys} lattice keys"
            )

    @property
    def scale(self) -> float:
        return self.lattice.scale

    @property
    def width(self) -> int:
        return self.features.shape[1]


def rel_pos_features(elevated, footprint: SimplexFootprint) -> np.ndarray:
    """Elevated positions minus their remainder-0 simplex vertex, (N, d+1)."""
    return np.asarray(elevated, dtype=np.float64) - footprint.vertices[:, 0, :]


def splat_conv(lattice: LatticeFeatureMap, signals: SignalMatrix, stack: ConvStack, *,
               normalize=True, rel_pos=True, tape: Tape | None = None) -> LayerIO:
    """Splat the lattice's input points (with optional rel-pos channels), then convolve."""
    if rel_pos:
        signals = Concat()(signals, constant(lattice.rel_pos()), tape=tape)
    splatted = Splat(lattice, normalize)(signals, tape=tape)
    return LayerIO(lattice, lattice_conv(lattice, splatted, stack, tape))


def down_bcl(inp: LayerIO, stack: ConvStack, next_scale: float, *, coarse=None,
             normalize=True, rel_pos=True, tape: Tape | None = None) -> LayerIO:
    """Splat-Conv from the occupied points of ``inp`` onto a coarser lattice.

    ``coarse`` may be a precomputed lattice; it must have been built from
    ``inp``'s keys.
    """
    if inp.lattice.empty:
        return LayerIO(coarse or build_coarser_lattice(inp.lattice, next_scale),
                       SignalMatrix(np.zeros((0, stack.out_width))))
    if coarse is None:
        coarse = build_coarser_lattice(inp.lattice, next_scale)
    elif not _same_keys(coarse.source_keys, inp.lattice.keys):
        raise LatticeMismatchError("coarse lattice was not built from the input lattice keys")
    return splat_conv(coarse, inp.features, stack, normalize=normalize, rel_pos=rel_pos, tape=tape)


def _same_keys(a, b) -> bool:
    return a is not None and a.shape == b.shape and np.array_equal(a, b)


def up_bcl(coarse: LayerIO, skip: SignalMatrix | None, stack: ConvStack,
           fine: LatticeFeatureMap, *, rel_pos=True, tape: Tape | None = None) -> LayerIO:
    """Slice coarse features onto the fine keys, append skip features, convolve.

    The fine lattice must be the one the coarse lattice was splatted from.
    """
    if not _same_keys(coarse.lattice.source_keys, fine.keys):
        raise LatticeMismatchError("fine keys differ from the set recorded by the matching DownBCL")
    blocks = [Slice(coarse.lattice)(coarse.features, tape=tape)]
    if skip is not None:
        if skip.shape[0] != fine.num_keys:
            raise ValueError("skip features are not row-aligned with the fine keys")
        blocks.append(skip)
    if rel_pos:
        blocks.append(constant(coarse.lattice.rel_pos()))
    x = Concat()(*blocks, tape=tape) if len(blocks) > 1 else blocks[0]
    return LayerIO(fine, lattice_conv(fine, x, stack, tape))


@dataclass
class CorrConfig:
    """Offsets and the two aggregation networks of a correlation layer.

    g maps p concatenated (F1, F2) patch pairs to a correlation vector; h maps
    the q correlation vectors of the displacement window to the output.
    """

    patch_offsets: np.ndarray
    disp_offsets: np.ndarray
    g: ConvStack
    h: ConvStack
    mode: str = "concat"

    def __post_init__(self):
        for name, off in (("patch", self.patch_offsets), ("displacement", self.disp_offsets)):
            if not np.any(np.all(off == 0, axis=1)):
                raise ValueError(f"{name} offsets must contain the zero offset")
        if self.mode not in ("concat", "mult"):
            raise ValueError(f"unknown combination mode {self.mode!r}")
        if len(self.g.weights) != 1 or len(self.h.weights) != 1:
            raise ValueError("g and h are single linear layers")

    @property
    def p(self) -> int:
        return self.patch_offsets.shape[0]

    @property
    def q(self) -> int:
        return self.disp_offsets.shape[0]

    @property
    def params(self) -> list[SignalMatrix]:
        return self.g.params + self.h.params

    @classmethod
    def init(cls, rng, d: int, c1: int, c2: int, mid: int, out: int, mode="concat", name="corr"):
        offsets = neighbor_offsets(d)
        combined = c1 + c2 if mode == "concat" else c1
        if mode == "mult" and c1 != c2:
            raise ValueError(f"elementwise multiplication needs equal widths, got {c1} and {c2}")
        g = ConvStack.init(rng, combined * offsets.shape[0], [mid], 1, name=f"{name}.g")
        h = ConvStack.init(rng, mid * offsets.shape[0], [out], 1, name=f"{name}.h")
        return cls(offsets, offsets.copy(), g, h, mode)


def corr_indices(f1: LatticeFeatureMap, f2: LatticeFeatureMap, cfg: CorrConfig):
    """Row ids of F1(x + O_c[i]) (M1, p) and F2(x + O_f[j] + O_c[i]) (M1, q, p)."""
    d = f1.dim
    keys = f1.keys
    oc = cfg.patch_offsets[:, :d]
    of = cfg.disp_offsets[:, :d]
    tag = ("corr", id(f2), cfg.patch_offsets.tobytes(), cfg.disp_offsets.tobytes())
    if tag in f1._cache and f1._cache[tag][0] is f2:
        return f1._cache[tag][1]
    idx1 = f1.table.lookup((keys[:, None, :] + oc[None]).reshape(-1, d)).reshape(-1, cfg.p)
    cand = keys[:, None, None, :] + of[None, :, None, :] + oc[None, None, :, :]
    idx2 = f2.table.lookup(cand.reshape(-1, d)).reshape(-1, cfg.q, cfg.p)
    f1._cache[tag] = (f2, (idx1, idx2))
    return idx1, idx2


def _block_gather(idx: np.ndarray, n_src: int, p: int, stacked: bool) -> sp.csr_matrix:
    """Sparse selector over rows of a source block.

    idx (R, p) -> matrix (R, n_src*p) picking source row idx[r, i] of slot i
    (stacked layout ``row*p + i``), or (R*p, n_src) picking idx[r, i] plainly.
    """
    r = idx.shape[0]
    valid = idx >= 0
    slot = np.broadcast_to(np.arange(p), idx.shape)
    out = np.broadcast_to(np.arange(r)[:, None], idx.shape)
    ones = np.ones(int(valid.sum()))
    if stacked:
        return sp.csr_matrix((ones, (out[valid], idx[valid] * p + slot[valid])), shape=(r, n_src * p))
    flat = out * p + slot
    return sp.csr_matrix((ones, (flat[valid], idx[valid])), shape=(r * p, n_src))


class CorrBCL(Op):
    """Patch correlation followed by displacement filtering.

    Inputs: F1 (M1, C1), F2 (M2, C2), g weight/bias, h weight/bias. The
    concatenating variant never materialises the (M1, q, p, C1+C2) tensor:
    the g layer is linear, so each patch slot's contribution is projected
    first and then gathered.
    """

    def __init__(self, f1: LatticeFeatureMap, f2: LatticeFeatureMap, cfg: CorrConfig,
                 slope: float = LEAKY_SLOPE):
        if not np.isclose(f1.scale, f2.scale, rtol=1e-12, atol=0.0):
            raise ValueError(f"F1 and F2 live on different scales ({f1.scale} vs {f2.scale})")
        self.cfg = cfg
        self.slope = slope
        self.m1, self.m2 = f1.num_keys, f2.num_keys
        self.f2_empty = f2.empty
        idx1, idx2 = corr_indices(f1, f2, cfg)
        p = cfg.p
        if cfg.mode == "concat":
            self.s1 = _block_gather(idx1, self.m1, p, stacked=True)
            self.s2 = _block_gather(idx2.reshape(-1, p), self.m2, p, stacked=True)
        else:
            self.s1 = _block_gather(idx1, self.m1, p, stacked=False)
            self.s2 = _block_gather(idx2.reshape(-1, p), self.m2, p, stacked=False)

    def forward(self, F1, F2, Wg, bg, Wh, bh):
        p, q = self.cfg.p, self.cfg.q
        m1 = self.m1
        c1, c2 = F1.shape[1], F2.shape[1]
        if F1.shape[0] != m1 or F2.shape[0] != self.m2:
            raise ValueError("feature rows do not match the lattices")
        cm = Wg.shape[1]
        if self.cfg.mode == "concat":
            if Wg.shape[0] != p * (c1 + c2):
                raise ValueError(f"g expects {Wg.shape[0]} inputs, patches give {p * (c1 + c2)}")
            Wg3 = Wg.reshape(p, c1 + c2, cm)
            w1 = Wg3[:, :c1, :].transpose(1, 0, 2).reshape(c1, p * cm)
            w2 = Wg3[:, c1:, :].transpose(1, 0, 2).reshape(c2, p * cm)
            t1 = (F1 @ w1).reshape(m1 * p, cm)
            t2 = (F2 @ w2).reshape(self.m2 * p, cm)
            a = self.s1 @ t1
            pre = np.repeat(a, q, axis=0) + self.s2 @ t2 + bg
            self._ctx = (F1, F2, w1, w2, c1, c2)
        else:
            if c1 != c2:
                raise ValueError(f"elementwise multiplication needs equal widths, got {c1} and {c2}")
            if Wg.shape[0] != p * c1:
                raise ValueError(f"g expects {Wg.shape[0]} inputs, patches give {p * c1}")
            g1 = (self.s1 @ F1).reshape(m1, 1, p, c1)
            g2 = (self.s2 @ F2).reshape(m1, q, p, c1)
            P = (g1 * g2).reshape(m1 * q, p * c1)
            pre = P @ Wg + bg
            self._ctx = (g1, g2, P, Wg, c1)
        corr = leaky(pre, self.slope).reshape(m1, q * cm)
        out_pre = corr @ Wh + bh
        self._pre, self._corr, self._out_pre, self._Wh, self._cm = pre, corr, out_pre, Wh, cm
        return leaky(out_pre, self.slope)

    def backward(self, grad):
        self._require_forward()
        p, q, m1, cm = self.cfg.p, self.cfg.q, self.m1, self._cm
        g_out = leaky_grad(self._out_pre, grad, self.slope)
        gWh = self._corr.T @ g_out
        gbh = g_out.sum(axis=0, keepdims=True)
        g_pre = leaky_grad(self._pre, (g_out @ self._Wh.T).reshape(m1 * q, cm), self.slope)
        gbg = g_pre.sum(axis=0, keepdims=True)
        if self.cfg.mode == "concat":
            F1, F2, w1, w2, c1, c2 = self._ctx
            ga = g_pre.reshape(m1, q, cm).sum(axis=1)
            gt1 = (self.s1.T @ ga).reshape(m1, p * cm)
            gt2 = (self.s2.T @ g_pre).reshape(self.m2, p * cm)
            gF1 = gt1 @ w1.T
            gF2 = gt2 @ w2.T
            gWg3 = np.empty((p, c1 + c2, cm))
            gWg3[:, :c1, :] = (F1.T @ gt1).reshape(c1, p, cm).transpose(1, 0, 2)
            gWg3[:, c1:, :] = (F2.T @ gt2).reshape(c2, p, cm).transpose(1, 0, 2)
            gWg = gWg3.reshape(p * (c1 + c2), cm)
        else:
            g1, g2, P, Wg, c = self._ctx
            gWg = P.T @ g_pre
            gP = (g_pre @ Wg.T).reshape(m1, q, p, c)
            gF1 = self.s1.T @ (gP * g2).sum(axis=1).reshape(m1 * p, c)
            gF2 = self.s2.T @ (gP * g1).reshape(m1 * q * p, c)
        return gF1, gF2, gWg, gbg, gWh, gbh


def corr_bcl(f1: LayerIO, f2: LayerIO, cfg: CorrConfig, tape: Tape | None = None) -> SignalMatrix:
    """Correlation of two feature maps on one lattice scale, on F1's keys."""
    op = CorrBCL(f1.lattice, f2.lattice, cfg)
    return op(f1.features, f2.features, *cfg.params, tape=tape)
