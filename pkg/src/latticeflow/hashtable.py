"""Open-addressing hash table mapping integer lattice keys to dense row ids.

Keys are fixed-length int64 vectors. Inserts and lookups are vectorized: a
whole batch of keys probes the table in lock-step, one probe round per loop
iteration, so the Python overhead is proportional to the longest probe chain
rather than to the number of keys.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MAX_LOAD = 2.0 / 3.0


def hash_keys(keys: np.ndarray) -> np.ndarray:
    """64-bit mix of each row of an integer key matrix (splitmix64 finalizer)."""
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    h = np.zeros(keys.shape[0], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for col in keys.T:
            h = (h ^ col.view(np.uint64)) * _GOLDEN
            h ^= h >> np.uint64(29)
        h ^= h >> np.uint64(30)
        h *= _MIX1
        h ^= h >> np.uint64(27)
        h *= _MIX2
        h ^= h >> np.uint64(31)
    return h


def _dedupe(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct rows in order of first occurrence, and each row's index into them."""
    n = keys.shape[0]
    if n == 0:
        return keys, np.empty(0, dtype=np.int64)
    h = hash_keys(keys)
    order = np.argsort(h, kind="stable")
    hs, ks = h[order], keys[order]
    start = np.ones(n, dtype=bool)
    start[1:] = hs[1:] != hs[:-1]
    if not np.all(ks[1:][~start[1:]] == ks[:-1][~start[1:]]):
        # genuine 64-bit collision between different keys: exact fallback
        uniq, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        rank = np.empty(first.size, dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(first.size)
        return keys[np.sort(first)], rank[inv.ravel()]
    group = np.cumsum(start) - 1
    first = order[start]  # stable sort: lowest input index leads each group
    rank = np.empty(first.size, dtype=np.int64)
    by_first = np.argsort(first, kind="stable")
    rank[by_first] = np.arange(first.size)
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = rank[group]
    return keys[first[by_first]], inverse


class LatticeHashTable:
    """Key -> row index, with rows numbered 0..M-1 in insertion order.

    Linear probing; the slot array is doubled whenever an insert would push
    the load factor above 2/3.
    """

    def __init__(self, dim: int, capacity: int = 16):
        if dim < 1:
            raise ValueError("key dimension must be >= 1")
        self.dim = dim
        cap = 16
        while cap < capacity:
            cap *= 2
        self._slots = np.full(cap, -1, dtype=np.int64)
        self._keys = np.empty((cap, dim), dtype=np.int64)
        self._hashes = np.empty(cap, dtype=np.uint64)
        self._n = 0
        self.probe_rounds = 0

    def __len__(self) -> int:
        return self._n

    @property
    def capacity(self) -> int:
        return self._slots.shape[0]

    @property
    def load(self) -> float:
        return self._n / self.capacity

    @property
    def keys(self) -> np.ndarray:
        """Row-ordered key matrix (M, dim); a read-only view."""
        view = self._keys[: self._n]
        view.flags.writeable = False
        return view

    def _check(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"expected keys of shape (n, {self.dim}), got {keys.shape}")
        return keys

    def _grow(self, needed: int) -> None:
        cap = self.capacity
        while needed > _MAX_LOAD * cap:
            cap *= 2
        if cap == self.capacity:
            return
        n = self._n
        keys = np.empty((cap, self.dim), dtype=np.int64)
        keys[:n] = self._keys[:n]
        hashes = np.empty(cap, dtype=np.uint64)
        hashes[:n] = self._hashes[:n]
        self._keys, self._hashes = keys, hashes
        self._slots = np.full(cap, -1, dtype=np.int64)
        self._place(np.arange(n, dtype=np.int64), hashes[:n])

    def insert(self, keys) -> np.ndarray:
        """Insert keys (duplicates allowed) and return their row ids."""
        keys = self._check(keys)
        out = np.empty(keys.shape[0], dtype=np.int64)
        start = 0
        while start < keys.shape[0]:
            room = int(_MAX_LOAD * self.capacity) - self._n
            if room < max(1, self.capacity // 8):
                self._grow(self._n + max(keys.shape[0] - start, self.capacity // 4))
                continue
            stop = min(keys.shape[0], start + room)
            out[start:stop] = self._insert_chunk(keys[start:stop])
            start = stop
        return out

    def _insert_chunk(self, keys: np.ndarray) -> np.ndarray:
        uniq, inverse = _dedupe(keys)
        found = self.lookup(uniq)
        new = np.flatnonzero(found < 0)
        ids = np.arange(self._n, self._n + new.size, dtype=np.int64)
        found[new] = ids
        self._keys[ids] = uniq[new]
        hashes = hash_keys(uniq[new])
        self._hashes[ids] = hashes
        self._n += new.size
        self._place(ids, hashes)
        return found[inverse]

    def _place(self, ids: np.ndarray, hashes: np.ndarray) -> None:
        """Put distinct, absent keys into empty slots by linear probing."""
        mask = self.capacity - 1
        pos = (hashes & np.uint64(mask)).astype(np.int64)
        pending = np.arange(ids.size, dtype=np.int64)
        while pending.size:
            self.probe_rounds += 1
            s = pos[pending]
            free = np.flatnonzero(self._slots[s] < 0)
            _, first = np.unique(s[free], return_index=True)
            won = free[first]
            self._slots[s[won]] = ids[pending[won]]
            placed = np.zeros(pending.size, dtype=bool)
            placed[won] = True
            pending = pending[~placed]
            pos[pending] = (pos[pending] + 1) & mask

    def lookup(self, keys) -> np.ndarray:
        """Row id for each key, -1 where the key is absent."""
        keys = self._check(keys)
        shape = keys.shape[0]
        rows = np.full(shape, -1, dtype=np.int64)
        if shape == 0 or self._n == 0:
            return rows
        mask = self.capacity - 1
        pos = (hash_keys(keys) & np.uint64(mask)).astype(np.int64)
        pending = np.arange(shape, dtype=np.int64)
        while pending.size:
            s = pos[pending]
            occ = self._slots[s]
            full = occ >= 0
            hit = np.zeros(pending.size, dtype=bool)
            hit[full] = np.all(self._keys[occ[full]] == keys[pending[full]], axis=1)
            rows[pending[hit]] = occ[hit]
            go_on = full & ~hit
            pending = pending[go_on]
            pos[pending] = (pos[pending] + 1) & mask
        return rows

    def __contains__(self, key) -> bool:
        return bool(self.lookup(np.asarray(key, dtype=np.int64)[None, :])[0] >= 0)
