"""Synthetic scene-flow pairs, preprocessing and the scene-pair file format.

Coordinates: x lateral, y height above the ground, z depth away from the
camera (metres). Each object is a surface (plane patch, box or sphere) with
its own rigid motion; the second frame re-samples the moved surfaces
independently, so no point correspondence exists between frames.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

SURFACES = ("plane", "box", "sphere")
FORMAT_NAME = "LATTICEFLOW-SCENEPAIR"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Invalid scene data or a filter that left nothing behind."""


class SceneFormatError(DataError):
    """A scene-pair file could not be parsed."""


@dataclass(frozen=True)
class CameraModel:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 480.0
    cy: float = 270.0
    width: int = 960
    height: int = 540
    mount_height: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, points) -> np.ndarray:
        """Pixel coordinates (N, 2) of world points with positive depth."""
        p = np.asarray(points, dtype=np.float64)
        z = p[:, 2]
        u = self.cx + self.fx * p[:, 0] / z
        v = self.cy - self.fy * (p[:, 1] - self.mount_height) / z
        return np.stack([u, v], axis=1)


@dataclass
class ScenePair:
    pc1: np.ndarray
    pc2: np.ndarray
    gt_flow: np.ndarray
    meta: dict = field(default_factory=dict)
    pred_flow: np.ndarray | None = None

    def __post_init__(self):
        self.pc1 = np.asarray(self.pc1, dtype=np.float64)
        self.pc2 = np.asarray(self.pc2, dtype=np.float64)
        self.gt_flow = np.asarray(self.gt_flow, dtype=np.float64)
        for name in ("pc1", "pc2", "gt_flow"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise DataError(f"{name} must be (N, 3), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        if self.gt_flow.shape != self.pc1.shape:
            raise DataError("gt_flow must be row-aligned with pc1")
        if self.pred_flow is not None:
            self.pred_flow = np.asarray(self.pred_flow, dtype=np.float64)
            if self.pred_flow.shape != self.pc1.shape:
                raise DataError("pred_flow must be row-aligned with pc1")

    @property
    def n1(self) -> int:
        return self.pc1.shape[0]

    @property
    def n2(self) -> int:
        return self.pc2.shape[0]


@dataclass(frozen=True)
class SceneSpec:
    """Generator parameters. ``density`` is surface samples per square metre."""

    num_objects: int = 4
    surfaces: tuple = SURFACES
    max_angle: float = float(np.deg2rad(10.0))
    max_translation: float = 0.3
    density: float = 600.0
    size_range: tuple = (0.6, 1.4)
    x_range: tuple = (-2.0, 2.0)
    y_range: tuple = (0.3, 2.3)
    z_range: tuple = (3.0, 7.0)
    preset: str = "objects"

    def __post_init__(self):
        if self.num_objects < 1:
            raise DataError("a scene needs at least one object")
        if self.max_angle < 0 or self.max_translation < 0 or self.density <= 0:
            raise DataError("motion ranges and density must be non-negative / positive")
        unknown = set(self.surfaces) - set(SURFACES)
        if unknown or not self.surfaces:
            raise DataError(f"unknown surface types {sorted(unknown)}")
        if self.preset not in ("objects", "driving"):
            raise DataError(f"unknown preset {self.preset!r}")


@dataclass(frozen=True)
class SceneObject:
    kind: str
    center: np.ndarray
    orientation: np.ndarray
    half_sizes: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def area(self) -> float:
        a, b, c = self.half_sizes
        if self.kind == "plane":
            return 4 * a * b
        if self.kind == "box":
            return 8 * (a * b + b * c + a * c)
        return 4 * np.pi * a * a

    def sample(self, rng, n: int) -> np.ndarray:
        """n points on the object's surface in its initial pose."""
        a, b, c = self.half_sizes
        if self.kind == "plane":
            local = np.stack([rng.uniform(-a, a, n), rng.uniform(-b, b, n), np.zeros(n)], axis=1)
        elif self.kind == "box":
            areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
            face = rng.choice(6, size=n, p=areas / areas.sum())
            local = rng.uniform(-1, 1, (n, 3)) * self.half_sizes
            axis = face // 2
            sign = np.where(face % 2 == 0, 1.0, -1.0)
            local[np.arange(n), axis] = sign * self.half_sizes[axis]
        else:
            v = rng.normal(size=(n, 3))
            local = a * v / np.linalg.norm(v, axis=1, keepdims=True)
        return local @ self.orientation.T + self.center

    def move(self, points) -> np.ndarray:
        return (points - self.center) @ self.rotation.T + self.center + self.translation


def _random_motion(rng, spec: SceneSpec, planar: bool = False):
    if planar:
        axis = np.array([0.0, 1.0, 0.0])
    else:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
    angle = rng.uniform(-spec.max_angle, spec.max_angle)
    rot = Rotation.from_rotvec(axis * angle).as_matrix()
    direction = rng.normal(size=3)
    if planar:
        direction[1] = 0.0
    direction /= np.linalg.norm(direction)
    trans = direction * rng.uniform(0.0, spec.max_translation)
    return rot, trans


def _layout(spec: SceneSpec, rng) -> list[SceneObject]:
    objects = []
    if spec.preset == "driving":
        ground = SceneObject(
            "plane",
            center=np.array([0.0, 0.0, 0.5 * (spec.z_range[0] + spec.z_range[1])]),
            orientation=Rotation.from_euler("x", 90, degrees=True).as_matrix(),
            half_sizes=np.array([0.5 * (spec.x_range[1] - spec.x_range[0]) + 1.0,
                                 0.5 * (spec.z_range[1] - spec.z_range[0]), 0.0]),
            rotation=np.eye(3),
            translation=np.zeros(3),
        )
        objects.append(ground)
    for _ in range(spec.num_objects):
        kind = spec.surfaces[rng.integers(len(spec.surfaces))]
        size = rng.uniform(*spec.size_range)
        half = 0.5 * size * rng.uniform(0.6, 1.0, 3)
        if kind == "sphere":
            half[:] = 0.5 * size
        if kind == "plane":
            half[2] = 0.0
        center = np.array([rng.uniform(*spec.x_range), rng.uniform(*spec.y_range), rng.uniform(*spec.z_range)])
        if spec.preset == "driving":
            kind = "box"
            half = 0.5 * size * np.array([1.0, 0.7, 1.8])
            center[1] = half[1] + 0.05
            orient = Rotation.from_euler("y", rng.uniform(0, 360), degrees=True).as_matrix()
        else:
            orient = Rotation.random(random_state=rng).as_matrix()
        rot, trans = _random_motion(rng, spec, planar=spec.preset == "driving")
        objects.append(SceneObject(kind, center, orient, half, rot, trans))
    return objects


def _sample_counts(objects, spec: SceneSpec, density_mult: float) -> list[int]:
    return [max(1, int(round(spec.density * density_mult * o.area))) for o in objects]


def gen_scene(spec: SceneSpec, seed: int, density_mult: float = 1.0) -> ScenePair:
    """Deterministic scene pair for ``seed``.

    The objects and motions depend on ``seed`` alone; ``density_mult``
    re-samples the same surfaces at a different density with fresh samples.
    """
    if density_mult <= 0:
        raise DataError("density multiplier must be positive")
    layout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    objects = _layout(spec, layout_rng)
    tag = int(round(density_mult * 1000))
    rng1 = np.random.default_rng(np.random.SeedSequence([seed, 1, tag]))
    rng2 = np.random.default_rng(np.random.SeedSequence([seed, 2, tag]))
    counts = _sample_counts(objects, spec, density_mult)
    pc1, flow, pc2 = [], [], []
    for obj, n in zip(objects, counts):
        p = obj.sample(rng1, n)
        pc1.append(p)
        flow.append(obj.move(p) - p)
        pc2.append(obj.move(obj.sample(rng2, n)))
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    meta.update(seed=int(seed), density_mult=float(density_mult))
    return ScenePair(np.concatenate(pc1), np.concatenate(pc2), np.concatenate(flow), meta)


def _keep(points, depth_max, ground_height):
    keep = points[:, 2] < depth_max
    if ground_height is not None:
        keep &= points[:, 1] >= ground_height
    return keep


def _sample_rows(rng, count: int, n: int) -> np.ndarray:
    if n <= count:
        idx = rng.choice(count, size=n, replace=False)
    else:
        idx = rng.choice(count, size=n, replace=True)
    return np.sort(idx)


def preprocess(pair: ScenePair, depth_max: float = 35.0, ground_height: float | None = None,
               n_samples: int | None = None, seed: int = 0) -> ScenePair:
    """Depth clipping, optional ground removal by height, then independent sampling.

    Sampling keeps the original row order; it draws with replacement only when
    fewer than ``n_samples`` points survive the filters.
    """
    if n_samples is not None and n_samples < 1:
        raise DataError("n_samples must be >= 1")
    keep1 = _keep(pair.pc1, depth_max, ground_height)
    keep2 = _keep(pair.pc2, depth_max, ground_height)
    if not keep1.any() or not keep2.any():
        raise DataError("all points of a frame were removed by the depth/ground filters")
    pc1, flow, pc2 = pair.pc1[keep1], pair.gt_flow[keep1], pair.pc2[keep2]
    pred = pair.pred_flow[keep1] if pair.pred_flow is not None else None
    if n_samples is not None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        i1 = _sample_rows(rng, pc1.shape[0], n_samples)
        i2 = _sample_rows(rng, pc2.shape[0], n_samples)
        pc1, flow, pc2 = pc1[i1], flow[i1], pc2[i2]
        pred = pred[i1] if pred is not None else None
    meta = dict(pair.meta, depth_max=depth_max, ground_height=ground_height, n_samples=n_samples)
    return ScenePair(pc1, pc2, flow, meta, pred)


# -- file format ---------------------------------------------------------------

def _fields(pair: ScenePair):
    out = [("pc1", pair.pc1), ("pc2", pair.pc2), ("gt_flow", pair.gt_flow)]
    if pair.pred_flow is not None:
        out.append(("pred_flow", pair.pred_flow))
    return out


def dumps_pair(pair: ScenePair) -> bytes:
    """Text header (format, version, meta, field table) followed by <f8 arrays."""
    fields = _fields(pair)
    lines = [f"{FORMAT_NAME} {FORMAT_VERSION}", "meta " + json.dumps(pair.meta, sort_keys=True)]
    lines.append(f"fields {len(fields)}")
    for name, arr in fields:
        lines.append(f"field {name} <f8 {arr.shape[0]} {arr.shape[1]}")
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for _, arr in fields:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_pair(blob: bytes) -> ScenePair:
    pos = 0

    def next_line(section):
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise SceneFormatError(f"truncated header: missing {section} (byte {pos})")
        line = blob[pos:end].decode("ascii", errors="replace")
        start, pos = pos, end + 1
        return line, start

    line, at = next_line("format line")
    parts = line.split()
    if len(parts) != 2 or parts[0] != FORMAT_NAME:
        raise SceneFormatError(f"not a scene-pair file (byte {at}): {line[:40]!r}")
    if parts[1] != str(FORMAT_VERSION):
        raise SceneFormatError(f"unsupported version {parts[1]} (byte {at})")
    line, at = next_line("meta section")
    if not line.startswith("meta "):
        raise SceneFormatError(f"expected meta section at byte {at}")
    try:
        meta = json.loads(line[5:])
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed meta at byte {at + 5 + exc.pos}: {exc.msg}") from None
    line, at = next_line("field table")
    if not line.startswith("fields "):
        raise SceneFormatError(f"expected field table at byte {at}")
    try:
        count = int(line.split()[1])
    except (IndexError, ValueError):
        raise SceneFormatError(f"malformed field count at byte {at}") from None
    table = []
    for k in range(count):
        line, at = next_line(f"field entry {k}")
        parts = line.split()
        if len(parts) != 5 or parts[0] != "field" or parts[2] != "<f8":
            raise SceneFormatError(f"malformed field entry at byte {at}: {line!r}")
        try:
            table.append((parts[1], int(parts[3]), int(parts[4])))
        except ValueError:
            raise SceneFormatError(f"malformed field shape at byte {at}") from None
    line, at = next_line("end marker")
    if line != "end":
        raise SceneFormatError(f"expected end marker at byte {at}")
    arrays = {}
    for name, rows, cols in table:
        nbytes = rows * cols * 8
        if pos + nbytes > len(blob):
            raise SceneFormatError(
                f"truncated data: missing section {name!r} (needs {nbytes} bytes at byte {pos}, "
                f"{len(blob) - pos} available)"
            )
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise SceneFormatError(f"{len(blob) - pos} trailing bytes after byte {pos}")
    for name in ("pc1", "pc2", "gt_flow"):
        if name not in arrays:
            raise SceneFormatError(f"missing required section {name!r}")
    return ScenePair(arrays["pc1"], arrays["pc2"], arrays["gt_flow"], meta, arrays.get("pred_flow"))


def write_pair(path, pair: ScenePair) -> None:
    Path(path).write_bytes(dumps_pair(pair))


def read_pair(path) -> ScenePair:
    return loads_pair(Path(path).read_bytes())


def checksum(pair: ScenePair) -> str:
    return hashlib.sha256(dumps_pair(pair)).hexdigest()


def export_text(path, points, flow=None) -> None:
    """One point per line: ``x y z`` or ``x y z dx dy dz``."""
    pts = np.asarray(points, dtype=np.float64)
    rows = pts if flow is None else np.concatenate([pts, np.asarray(flow, dtype=np.float64)], axis=1)
    np.savetxt(path, rows, fmt="%.17g")


def list_pairs(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.scene"))
