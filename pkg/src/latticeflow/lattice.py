"""Permutohedral lattice geometry.

Points in R^d are embedded ("elevated") into the hyperplane H_d of R^{d+1}
whose coordinates sum to zero. Lattice points are the integer vectors of H_d
whose coordinates are all congruent modulo d+1; a lattice point with all
coordinates congruent to r is said to have remainder class r. Each elevated
point lies in a uniform d-simplex with exactly one vertex per remainder class,
found by rounding and sorting in O(d^2) (O(d log d) here, via argsort).

Keys store the first d coordinates only; the last is minus their sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .hashtable import LatticeHashTable


class InvalidInputError(ValueError):
    """Raised for non-finite or malformed geometric input."""


def elevation_matrix(d: int) -> np.ndarray:
    """Orthonormal basis of H_d as the columns of a (d+1, d) matrix."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    E = np.zeros((d + 1, d))
    for k in range(d):
        norm = np.sqrt((k + 1) * (k + 2))
        E[: k + 1, k] = 1.0 / norm
        E[k + 1, k] = -(k + 1) / norm
    return E


def elevate(positions, scale: float) -> np.ndarray:
    """Embed positions (N, d) into H_d at lattice resolution ``scale``.

    Returns (N, d+1) coordinates in lattice units. Linear in ``scale * positions``.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 1:
        return elevate(pos[None, :], scale)[0]
    if pos.ndim != 2:
        raise InvalidInputError(f"positions must be (N, d), got shape {pos.shape}")
    if not np.isfinite(scale) or scale <= 0:
        raise InvalidInputError(f"scale must be finite and positive, got {scale}")
    if not np.all(np.isfinite(pos)):
        raise InvalidInputError("positions contain non-finite values")
    return (scale * pos) @ elevation_matrix(pos.shape[1]).T


def lattice_positions(full_keys, scale: float) -> np.ndarray:
    """Physical positions (N, d) of lattice points given in full (d+1) coordinates."""
    k = np.asarray(full_keys, dtype=np.float64)
    return (k @ elevation_matrix(k.shape[1] - 1)) / scale


def full_coords(keys) -> np.ndarray:
    """Append the implied last coordinate to d-coordinate keys."""
    keys = np.asarray(keys, dtype=np.int64)
    return np.concatenate([keys, -keys.sum(axis=-1, keepdims=True)], axis=-1)


def check_lattice_points(full) -> np.ndarray:
    """Boolean mask: zero-sum and all coordinates congruent mod d+1."""
    full = np.asarray(full, dtype=np.int64)
    dp1 = full.shape[-1]
    rem = np.mod(full, dp1)
    return (full.sum(axis=-1) == 0) & np.all(rem == rem[..., :1], axis=-1)


def simplex_edge_length(d: int, scale: float) -> float:
    """Physical length of a 1-ring lattice step, the shortest simplex edge."""
    return float(np.sqrt(d * (d + 1)) / scale)


@dataclass(frozen=True)
class SimplexFootprint:
    """Enclosing simplices of a batch of N elevated points.

    vertices: (N, d+1, d+1) int64, vertex r has remainder class r.
    weights: (N, d+1) barycentric weights, aligned with vertices.
    ranks: (N, d+1) the sort permutation of the fractional residuals.
    """

    vertices: np.ndarray
    weights: np.ndarray
    ranks: np.ndarray

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1] - 1

    @property
    def keys(self) -> np.ndarray:
        """(N, d+1, d) storage keys of the vertices."""
        return self.vertices[..., :-1]

    def reconstruct(self) -> np.ndarray:
        """Barycentric combination of the vertices, (N, d+1)."""
        return np.einsum("nr,nrc->nc", self.weights, self.vertices)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def enclosing_simplex(elevated) -> SimplexFootprint:
    """Vertices and barycentric weights of the simplex containing each point.

    Accepts a single (d+1,) point or a batch (N, d+1).
    """
    e = np.asarray(elevated, dtype=np.float64)
    single = e.ndim == 1
    if single:
        e = e[None, :]
    if not np.all(np.isfinite(e)):
        raise InvalidInputError("elevated coordinates contain non-finite values")
    n, dp1 = e.shape
    d = dp1 - 1

    rem0 = (_round_half_away(e / dp1) * dp1).astype(np.int64)
    total = rem0.sum(axis=1) // dp1
    diff = e - rem0

    # rank = position in a stable descending sort of the residuals
    order = np.argsort(-diff, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(dp1), (n, dp1)), axis=1)

    # push the zero-remainder point back onto the hyperplane
    s = total[:, None]
    over = (s > 0) & (rank >= dp1 - s)
    under = (s < 0) & (rank < -s)
    rem0 = rem0 - dp1 * over + dp1 * under
    rank = rank + s - dp1 * over + dp1 * under

    # numerators scaled by d+1 keep lattice-aligned inputs exact
    delta = e - rem0
    b = np.zeros((n, dp1 + 1))
    rows = np.arange(n)[:, None]
    b[rows, d - rank] += delta
    b[rows, d + 1 - rank] -= delta
    b[:, 0] += dp1 + b[:, dp1]
    weights = b[:, :dp1] / dp1

    # canonical[r][i] = r if i <= d - r else r - (d+1)
    r = np.arange(dp1)[:, None]
    i = np.arange(dp1)[None, :]
    canonical = np.where(i <= d - r, r, r - dp1)
    vertices = rem0[:, None, :] + canonical[:, rank].transpose(1, 0, 2)

    fp = SimplexFootprint(vertices=vertices, weights=weights, ranks=rank)
    if single:
        return SimplexFootprint(vertices[0], weights[0], rank[0])
    return fp


def neighbor_offsets(d: int) -> np.ndarray:
    """The 1-ring of a lattice point as full (K, d+1) offsets, K = 2(d+1)+1.

    Order: the zero offset, then +axis_k, -axis_k for k = 0..d, where
    axis_k = 1 - (d+1) e_k.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    dp1 = d + 1
    out = [np.zeros(dp1, dtype=np.int64)]
    for k in range(dp1):
        axis = np.ones(dp1, dtype=np.int64)
        axis[k] -= dp1
        out.append(axis)
        out.append(-axis)
    return np.stack(out)


@dataclass(frozen=True)
class ScaleSchedule:
    """Per-level lattice scaling factors s_l = base_scale * ratio**l."""

    base_scale: float
    num_levels: int
    ratio: float = 0.5

    def __post_init__(self):
        if not (self.base_scale > 0 and np.isfinite(self.base_scale)):
            raise ValueError("base_scale must be positive")
        if self.num_levels < 1:
            raise ValueError("need at least one level")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1) so that scales decrease")

    @property
    def levels(self) -> list[float]:
        return [self.base_scale * self.ratio**lvl for lvl in range(self.num_levels)]

    @property
    def up_levels(self) -> list[float]:
        return self.levels[::-1]

    @classmethod
    def from_spacing(cls, spacing: float, num_levels: int, d: int = 3, edge_factor: float = 4.0):
        """Choose base_scale so the finest simplex edge is edge_factor * spacing."""
        return cls(float(np.sqrt(d * (d + 1)) / (edge_factor * spacing)), num_levels)


@dataclass(eq=False)
class LatticeFeatureMap:
    """Occupied lattice points of one point set at one scale.

    ``table`` maps keys to rows 0..M-1. ``point_rows``/``point_weights`` (N, d+1)
    record each input point's footprint as row ids (-1 for zero-weight vertices,
    which are not inserted); they realise the incidence sets of every row.
    ``features`` optionally holds one row per occupied point.
    """

    scale: float
    table: LatticeHashTable
    point_rows: np.ndarray
    point_weights: np.ndarray
    elevated: np.ndarray
    base_vertex: np.ndarray
    source_keys: np.ndarray | None = None
    features: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.table.dim

    @property
    def num_keys(self) -> int:
        return len(self.table)

    @property
    def num_points(self) -> int:
        return self.point_rows.shape[0]

    @property
    def empty(self) -> bool:
        return self.num_keys == 0

    @property
    def keys(self) -> np.ndarray:
        return self.table.keys

    @cached_property
    def full_keys(self) -> np.ndarray:
        return full_coords(self.keys)

    def incidence(self, row: int) -> list[tuple[int, float]]:
        """The (input point, weight) pairs splatting onto ``row``."""
        pts, slots = np.nonzero(self.point_rows == row)
        return [(int(p), float(self.point_weights[p, s])) for p, s in zip(pts, slots)]

    def incidence_matrix(self) -> sp.csr_matrix:
        """Sparse (M, N) matrix of barycentric weights b_kj."""
        if "incidence" not in self._cache:
            valid = self.point_rows >= 0
            pts = np.broadcast_to(np.arange(self.num_points)[:, None], self.point_rows.shape)
            mat = sp.csr_matrix(
                (self.point_weights[valid], (self.point_rows[valid], pts[valid])),
                shape=(self.num_keys, self.num_points),
            )
            mat.sum_duplicates()
            self._cache["incidence"] = mat
        return self._cache["incidence"]

    def neighbor_rows(self, offsets: np.ndarray | None = None) -> np.ndarray:
        """(M, K) row ids of key + offset for each occupied key, -1 if unoccupied."""
        if offsets is None:
            offsets = neighbor_offsets(self.dim)
        tag = ("nbr", offsets.tobytes())
        if tag not in self._cache:
            keys = self.keys
            cand = keys[:, None, :] + offsets[None, :, : self.dim]
            rows = self.table.lookup(cand.reshape(-1, self.dim))
            self._cache[tag] = rows.reshape(keys.shape[0], offsets.shape[0])
        return self._cache[tag]

    def rel_pos(self) -> np.ndarray:
        """Elevated input positions minus their remainder-0 vertex, (N, d+1)."""
        return self.elevated - self.base_vertex

    def locate(self, footprint: SimplexFootprint) -> np.ndarray:
        """Row ids (N, d+1) of a footprint's vertices, -1 where unoccupied."""
        keys = footprint.keys.reshape(-1, self.dim)
        return self.table.lookup(keys).reshape(footprint.weights.shape)


def build_lattice(elevated, scale: float, source_keys=None) -> LatticeFeatureMap:
    """Index the occupied lattice points of already-elevated points."""
    e = np.asarray(elevated, dtype=np.float64)
    if e.ndim != 2:
        raise InvalidInputError(f"elevated points must be 2-D, got shape {e.shape}")
    dp1 = e.shape[1]
    d = dp1 - 1
    n = e.shape[0]
    table = LatticeHashTable(d, capacity=max(16, int(1.6 * n * dp1 // 4)))
    if n == 0:
        return LatticeFeatureMap(
            scale=scale,
            table=table,
            point_rows=np.empty((0, dp1), dtype=np.int64),
            point_weights=np.empty((0, dp1)),
            elevated=e,
            base_vertex=np.empty((0, dp1)),
            source_keys=source_keys,
        )
    fp = enclosing_simplex(e)
    occupied = fp.weights > 0
    rows = np.full(fp.weights.shape, -1, dtype=np.int64)
    rows[occupied] = table.insert(fp.keys[occupied])
    return LatticeFeatureMap(
        scale=scale,
        table=table,
        point_rows=rows,
        point_weights=fp.weights,
        elevated=e,
        base_vertex=fp.vertices[:, 0, :].astype(np.float64),
        source_keys=source_keys,
    )


def build_point_lattice(points, scale: float) -> LatticeFeatureMap:
    """Lattice of continuous input points (N, d)."""
    return build_lattice(elevate(points, scale), scale)


def build_coarser_lattice(fine: LatticeFeatureMap, scale: float) -> LatticeFeatureMap:
    """Lattice at ``scale`` whose inputs are the occupied points of ``fine``.

    The fine lattice points are elevated exactly by rescaling their integer
    coordinates, avoiding a round trip through physical space.
    """
    if not scale < fine.scale:
        raise ValueError(f"coarser scale {scale} must be below {fine.scale}")
    elevated = fine.full_keys.astype(np.float64) * (scale / fine.scale)
    return build_lattice(elevated, scale, source_keys=fine.keys)


def build_feature_map(points, signals, scale: float, normalize: bool = True):
    """Splat per-point signals (N, C) onto the lattice of ``points``.

    Returns the map (with ``features`` set) and the points' footprints.
    """
    from .bclops import SignalMatrix, splat

    pts = np.asarray(points, dtype=np.float64)
    sig = np.asarray(signals, dtype=np.float64)
    if sig.ndim != 2 or sig.shape[0] != pts.shape[0]:
        raise ValueError(f"signals shape {sig.shape} does not match {pts.shape[0]} points")
    fmap = build_point_lattice(pts, scale)
    footprints = enclosing_simplex(fmap.elevated) if pts.shape[0] else None
    fmap.features = SignalMatrix(splat(fmap, sig, normalize=normalize))
    return fmap, footprints
