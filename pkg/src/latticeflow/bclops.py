"""Differentiable lattice operators with explicit backward passes.

Every operator is a small object with ``forward`` (saving what its backward
needs) and ``backward`` (returning one gradient per input, ``None`` for inputs
that take no gradient). Calling an operator on :class:`SignalMatrix` inputs
runs the forward pass and, when a :class:`Tape` is given, records it so that
``tape.backward`` can replay the reverse schedule.

Splat, slice and the neighbour gather of the lattice convolution are all
fixed sparse linear maps of the lattice geometry, so they are stored as
scipy CSR matrices and their backward passes are the transposes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .lattice import LatticeFeatureMap, neighbor_offsets

LEAKY_SLOPE = 0.1
DENSITY_FLOOR = 1e-12


class SignalMatrix:
    """Dense (N, C) block of values with gradient storage of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"SignalMatrix needs a 2-D array, got shape {data.shape}")
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"SignalMatrix{tag}{self.data.shape}"


def constant(data) -> SignalMatrix:
    return SignalMatrix(data, requires_grad=False)


class Tape:
    """Records (op, inputs, output) triples and replays them in reverse."""

    def __init__(self):
        self.records: list[tuple[Op, tuple[SignalMatrix, ...], SignalMatrix]] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op, inputs, output) -> None:
        self.records.append((op, inputs, output))

    def backward(self, output: SignalMatrix, grad=None) -> None:
        if grad is None:
            if output.data.size != 1:
                raise ValueError("an explicit grad is required for non-scalar outputs")
            grad = np.ones_like(output.data)
        output.accumulate(np.asarray(grad, dtype=np.float64))
        for op, inputs, out in reversed(self.records):
            if out.grad is None:
                continue
            grads = op.backward(out.grad)
            for x, g in zip(inputs, grads):
                if g is not None and x.requires_grad:
                    x.accumulate(g)


class Op:
    """Base class: subclasses implement forward(*arrays) and backward(grad)."""

    _ran = False

    def __call__(self, *inputs: SignalMatrix, tape: Tape | None = None) -> SignalMatrix:
        out = SignalMatrix(self.forward(*[x.data for x in inputs]))
        self._ran = True
        if tape is not None:
            tape.record(self, inputs, out)
        return out

    def _require_forward(self) -> None:
        if not self._ran:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def gaussian_density(fmap: LatticeFeatureMap) -> np.ndarray:
    """Splatted point density blurred by [1 2 1]/4 along each lattice axis."""
    density = np.asarray(fmap.incidence_matrix().sum(axis=1)).ravel()
    offsets = neighbor_offsets(fmap.dim)
    nbr = fmap.neighbor_rows(offsets)
    for k in range(fmap.dim + 1):
        padded = np.append(density, 0.0)
        plus, minus = nbr[:, 1 + 2 * k], nbr[:, 2 + 2 * k]
        density = 0.25 * (padded[plus] + 2.0 * density + padded[minus])
    return density


def splat_matrix(fmap: LatticeFeatureMap, normalize=True) -> sp.csr_matrix:
    """(M, N) linear map from point signals to lattice signals.

    normalize: True divides by the splatted weight sum, False leaves the
    plain barycentric sum, "gaussian" divides by the blurred density.
    """
    key = ("splat", normalize)
    if key in fmap._cache:
        return fmap._cache[key]
    W = fmap.incidence_matrix()
    if normalize is False or normalize is None:
        mat = W
    else:
        if normalize == "gaussian":
            denom = gaussian_density(fmap)
        elif normalize is True:
            denom = np.asarray(W.sum(axis=1)).ravel()
        else:
            raise ValueError(f"unknown normalization {normalize!r}")
        mat = sp.diags(1.0 / np.maximum(denom, DENSITY_FLOOR)) @ W
        mat = sp.csr_matrix(mat)
    fmap._cache[key] = mat
    return mat


class Splat(Op):
    """Point signals (N, C) -> lattice signals (M, C)."""

    def __init__(self, fmap: LatticeFeatureMap, normalize=True):
        self.fmap = fmap
        self.matrix = splat_matrix(fmap, normalize)

    def forward(self, v):
        if v.shape[0] != self.fmap.num_points:
            raise ValueError(f"splat expects {self.fmap.num_points} rows, got {v.shape[0]}")
        return self.matrix @ v

    def backward(self, grad):
        self._require_forward()
        return (self.matrix.T @ grad,)


class Slice(Op):
    """Lattice signals (M, C) -> target signals via barycentric gather.

    By default the targets are the map's own input points; pass ``rows`` and
    ``weights`` (N_out, d+1) to slice at other footprints. Rows of -1 are
    unoccupied vertices and contribute zero.
    """

    def __init__(self, fmap: LatticeFeatureMap, rows=None, weights=None):
        self.fmap = fmap
        if rows is None:
            self.matrix = sp.csr_matrix(fmap.incidence_matrix().T)
        else:
            rows = np.asarray(rows)
            weights = np.asarray(weights, dtype=np.float64)
            valid = rows >= 0
            tgt = np.broadcast_to(np.arange(rows.shape[0])[:, None], rows.shape)
            self.matrix = sp.csr_matrix(
                (weights[valid], (tgt[valid], rows[valid])),
                shape=(rows.shape[0], fmap.num_keys),
            )

    def forward(self, features):
        if features.shape[0] != self.fmap.num_keys:
            raise ValueError(f"slice expects {self.fmap.num_keys} rows, got {features.shape[0]}")
        return self.matrix @ features

    def backward(self, grad):
        self._require_forward()
        return (self.matrix.T @ grad,)


def splat(fmap: LatticeFeatureMap, signals, normalize=True) -> np.ndarray:
    return Splat(fmap, normalize).forward(np.asarray(signals, dtype=np.float64))


def slice_features(fmap: LatticeFeatureMap, features, rows=None, weights=None) -> np.ndarray:
    return Slice(fmap, rows, weights).forward(np.asarray(features, dtype=np.float64))


def gather_matrix(fmap: LatticeFeatureMap) -> sp.csr_matrix:
    """(M*K, M) matrix stacking the 1-ring neighbours of every occupied key."""
    if "gather" not in fmap._cache:
        nbr = fmap.neighbor_rows()
        m, k = nbr.shape
        valid = nbr >= 0
        out_rows = np.arange(m * k).reshape(m, k)
        fmap._cache["gather"] = sp.csr_matrix(
            (np.ones(valid.sum()), (out_rows[valid], nbr[valid])), shape=(m * k, m)
        )
    return fmap._cache["gather"]


def leaky(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def leaky_grad(z: np.ndarray, g: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z > 0, g, slope * g)


@dataclass
class ConvStack:
    """Linear layers applied after an optional 1-ring gather.

    A layer whose weight has K*C_in rows (K = 1-ring size) gathers the
    neighbourhood first; a layer with C_in rows acts pointwise.
    """

    weights: list[SignalMatrix]
    biases: list[SignalMatrix]
    activations: list[bool]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (1, w.shape[1]):
                raise ValueError(f"bias shape {b.shape} does not match weight {w.shape}")
            if not np.all(np.isfinite(w.data)):
                raise ValueError("non-finite weights")

    @classmethod
    def init(cls, rng, in_width: int, widths, kernel: int, *, kernel_all=False,
             final_activation=True, name="conv", zero_last=False):
        """Uniform fan-in initialisation; the first layer (or all) gather ``kernel`` taps."""
        ws, bs, acts = [], [], []
        c = in_width
        for i, w in enumerate(widths):
            taps = kernel if (i == 0 or kernel_all) else 1
            fan_in = taps * c
            bound = 0.0 if (zero_last and i == len(widths) - 1) else np.sqrt(6.0 / fan_in)
            ws.append(SignalMatrix(rng.uniform(-bound, bound, (fan_in, w)), name=f"{name}.{i}.weight"))
            bs.append(SignalMatrix(np.zeros((1, w)), name=f"{name}.{i}.bias"))
            acts.append(final_activation or i < len(widths) - 1)
            c = w
        return cls(ws, bs, acts)

    @property
    def params(self) -> list[SignalMatrix]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    def in_width(self, kernel: int) -> int:
        rows = self.weights[0].shape[0]
        return rows // kernel if rows % kernel == 0 else rows


class LatticeConv(Op):
    """Sparse 1-ring convolution on the occupied keys of one lattice.

    Inputs: features (M, C_in), then weight and bias of each stack layer.
    Unoccupied neighbours contribute zero features.
    """

    def __init__(self, fmap: LatticeFeatureMap, activations, slope: float = LEAKY_SLOPE):
        self.fmap = fmap
        self.activations = list(activations)
        self.slope = slope
        self.kernel = 2 * (fmap.dim + 1) + 1

    def forward(self, features, *params):
        if len(params) != 2 * len(self.activations):
            raise ValueError("parameter count does not match the stack")
        m = self.fmap.num_keys
        if features.shape[0] != m:
            raise ValueError(f"features have {features.shape[0]} rows, lattice has {m}")
        x = features
        self._saved = []
        for li, act in enumerate(self.activations):
            W, b = params[2 * li], params[2 * li + 1]
            c = x.shape[1]
            if W.shape[0] == self.kernel * c:
                X = (gather_matrix(self.fmap) @ x).reshape(m, self.kernel * c)
                gathered = True
            elif W.shape[0] == c:
                X, gathered = x, False
            else:
                raise ValueError(
                    f"layer {li}: weight rows {W.shape[0]} fit neither {c} nor {self.kernel}x{c} channels"
                )
            z = X @ W + b
            self._saved.append((X, z, W, gathered, c))
            x = leaky(z, self.slope) if act else z
        return x

    def backward(self, grad):
        self._require_forward()
        m = self.fmap.num_keys
        g = grad
        grads_params = []
        for (X, z, W, gathered, c), act in zip(reversed(self._saved), reversed(self.activations)):
            if act:
                g = leaky_grad(z, g, self.slope)
            grads_params.append((X.T @ g, g.sum(axis=0, keepdims=True)))
            gX = g @ W.T
            if gathered:
                g = gather_matrix(self.fmap).T @ gX.reshape(m * self.kernel, c)
            else:
                g = gX
        out = [g]
        for gW, gb in reversed(grads_params):
            out += [gW, gb]
        return tuple(out)


def lattice_conv(fmap: LatticeFeatureMap, features: SignalMatrix, stack: ConvStack,
                 tape: Tape | None = None) -> SignalMatrix:
    return LatticeConv(fmap, stack.activations)(features, *stack.params, tape=tape)


class Linear(Op):
    """x (N, C_in) @ W (C_in, C_out) + b (1, C_out)."""

    def forward(self, x, W, b):
        self._x, self._W = x, W
        return x @ W + b

    def backward(self, grad):
        self._require_forward()
        return grad @ self._W.T, self._x.T @ grad, grad.sum(axis=0, keepdims=True)


class LeakyReLU(Op):
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def forward(self, z):
        self._z = z
        return leaky(z, self.slope)

    def backward(self, grad):
        self._require_forward()
        return (leaky_grad(self._z, grad, self.slope),)


class Concat(Op):
    """Column-wise concatenation of row-aligned blocks."""

    def forward(self, *blocks):
        rows = {b.shape[0] for b in blocks}
        if len(rows) != 1:
            raise ValueError(f"cannot concatenate blocks with row counts {sorted(rows)}")
        self._widths = [b.shape[1] for b in blocks]
        return np.concatenate(blocks, axis=1)

    def backward(self, grad):
        self._require_forward()
        cuts = np.cumsum(self._widths)[:-1]
        return tuple(np.split(grad, cuts, axis=1))


class EPELoss(Op):
    """Mean Euclidean norm of per-point flow error, as a (1, 1) output."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def forward(self, pred):
        if pred.shape != self.target.shape:
            raise ValueError(f"prediction shape {pred.shape} != target shape {self.target.shape}")
        diff = pred - self.target
        norm = np.sqrt(np.sum(diff * diff, axis=1))
        self._diff, self._norm = diff, norm
        return np.array([[norm.mean()]])

    def backward(self, grad):
        self._require_forward()
        n = self._norm.shape[0]
        safe = np.where(self._norm > 0, self._norm, 1.0)
        scale = np.where(self._norm > 0, 1.0 / (n * safe), 0.0)
        return (grad[0, 0] * self._diff * scale[:, None],)


def epe3d(pred, gt) -> float:
    """Mean end-point error between two (N, 3) flow fields."""
    return float(EPELoss(gt).forward(np.asarray(pred, dtype=np.float64))[0, 0])
