"""Hourglass scene-flow network on permutohedral lattices.

Downsampling: shared-weight DownBCLs for both clouds at scales
s_l = s_0 * 2^-l. Correlation layers fuse the two clouds at selected levels;
each correlation output is carried down (PC1 only) and concatenated with
PC1's features as F1 of the next correlation layer. Upsampling: UpBCLs on
PC1's lattices with skip links from the matching DownBCL/CorrBCL outputs,
then a slice back to the PC1 points and a linear 3-channel head.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .bclops import Concat, ConvStack, EPELoss, Linear, SignalMatrix, Slice, Splat, Tape, constant, lattice_conv
from .data import ScenePair
from .lattice import (
    LatticeFeatureMap,
    ScaleSchedule,
    build_coarser_lattice,
    build_point_lattice,
    simplex_edge_length,
)
from .layers import CorrConfig, LayerIO, corr_bcl, down_bcl, up_bcl

log = logging.getLogger(__name__)

DIM = 3
KERNEL = 2 * (DIM + 1) + 1
ABLATIONS = ("no_skips", "one_corr", "ori_norm", "elementwise_mult", "no_rel_pos")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match its configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    num_levels: int = 4
    base_scale: float = 1.0
    widths: tuple = (32, 48, 64, 96)
    up_widths: tuple = ()
    corr_levels: tuple = (1, 2, 3)
    corr_widths: tuple = ()
    conv_depth: int = 2
    in_channels: int = 3
    seed: int = 0
    no_skips: bool = False
    one_corr: bool = False
    ori_norm: bool = False
    elementwise_mult: bool = False
    no_rel_pos: bool = False
    no_norm: bool = False
    center_inputs: bool = False

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if len(self.widths) != self.num_levels:
            raise ValueError(f"need {self.num_levels} widths, got {len(self.widths)}")
        if self.up_widths and len(self.up_widths) != self.num_levels - 1:
            raise ValueError(f"need {self.num_levels - 1} up widths")
        if not set(self.corr_levels) <= set(range(self.num_levels)):
            raise ValueError(f"corr levels {self.corr_levels} not within the down levels")
        if len(set(self.corr_levels)) != len(self.corr_levels):
            raise ValueError("duplicate corr levels")
        if self.corr_widths and len(self.corr_widths) != len(self.corr_levels):
            raise ValueError("one corr width per corr level")
        if self.conv_depth < 1:
            raise ValueError("conv_depth must be >= 1")
        if self.ori_norm and self.no_norm:
            raise ValueError("ori_norm and no_norm are exclusive")
        if self.base_scale <= 0:
            raise ValueError("base_scale must be positive")

    @property
    def schedule(self) -> ScaleSchedule:
        return ScaleSchedule(self.base_scale, self.num_levels)

    @property
    def scales(self) -> list[float]:
        return self.schedule.levels

    @property
    def active_corr_levels(self) -> tuple:
        levels = tuple(sorted(self.corr_levels))
        if self.one_corr and levels:
            return levels[-1:]
        return levels

    def corr_width(self, level: int) -> int:
        if self.corr_widths:
            return self.corr_widths[tuple(self.corr_levels).index(level)]
        return self.widths[level]

    def up_width(self, level: int) -> int:
        return self.up_widths[level] if self.up_widths else self.widths[level]

    @property
    def normalize(self):
        if self.ori_norm:
            return "gaussian"
        return not self.no_norm

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Canonical ``key=value`` lines, sorted by key."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(str(int(x)) for x in v)
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            lines.append(f"{f.name}={s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        return cls.from_mapping(parse_keyvalue(text))

    @classmethod
    def from_mapping(cls, values: dict) -> "NetworkConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown network option {key!r}")
            kwargs[key] = _coerce(types[key], raw)
        return cls(**kwargs)


def _coerce(typ: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if typ == "bool":
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    if typ == "tuple":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_keyvalue(text: str) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def ablation_variant(cfg: NetworkConfig, flag: str) -> NetworkConfig:
    """The configuration with exactly one ablation switched on."""
    if flag not in ABLATIONS + ("no_norm",):
        raise ValueError(f"unknown ablation {flag!r}; choose from {ABLATIONS + ('no_norm',)}")
    return cfg.replace(**{flag: True})


# -- geometry ------------------------------------------------------------------

@contextmanager
def _stage(timer: dict | None, key: str):
    if timer is None:
        yield
        return
    t0 = time.perf_counter()
    try:
        yield
    finally:
        timer[key] = timer.get(key, 0.0) + time.perf_counter() - t0


@dataclass
class CloudGeometry:
    """Lattice hierarchy of one cloud: level 0 from the points, level l from level l-1."""

    levels: list[LatticeFeatureMap]

    @property
    def occupied(self) -> list[int]:
        return [lvl.num_keys for lvl in self.levels]


def build_geometry(points, scales, timer: dict | None = None) -> CloudGeometry:
    with _stage(timer, "splat0"):
        levels = [build_point_lattice(points, scales[0])]
    for lvl, s in enumerate(scales[1:], 1):
        with _stage(timer, f"level{lvl}"):
            levels.append(build_coarser_lattice(levels[-1], s))
    return CloudGeometry(levels)


@dataclass
class PairGeometry:
    pc1: CloudGeometry
    pc2: CloudGeometry


def median_spacing(points) -> float:
    """Median nearest-neighbour distance; repeated points are counted once."""
    points = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if points.shape[0] < 2:
        raise ValueError("need at least two distinct points to measure spacing")
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=2)
    return float(np.median(dist[:, 1]))


def fit_base_scale(pairs, edge_factor: float = 4.0) -> float:
    """Scale whose finest simplex edge is edge_factor x the median NN spacing."""
    spacing = float(np.median([median_spacing(p.pc1) for p in pairs]))
    return ScaleSchedule.from_spacing(spacing, 1, DIM, edge_factor).base_scale


# -- network -------------------------------------------------------------------

class SceneFlowNet:
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        L = cfg.num_levels
        rp = 0 if cfg.no_rel_pos else DIM + 1
        mode = "mult" if cfg.elementwise_mult else "concat"

        self.down: list[ConvStack] = []
        c = cfg.in_channels
        for lvl in range(L):
            self.down.append(self._stack(rng, c + rp, cfg.widths[lvl], f"down{lvl}"))
            c = cfg.widths[lvl]

        self.corr: dict[int, CorrConfig] = {}
        self.carry: dict[int, ConvStack] = {}
        prev = None
        for lvl in cfg.active_corr_levels:
            carry_w = 0
            if prev is not None and mode == "concat":
                prev_lvl, prev_w = prev
                for mid in range(prev_lvl + 1, lvl + 1):
                    self.carry[mid] = self._stack(rng, prev_w + rp, prev_w, f"carry{mid}")
                carry_w = prev_w
            cw = cfg.corr_width(lvl)
            self.corr[lvl] = CorrConfig.init(
                rng, DIM, cfg.widths[lvl] + carry_w, cfg.widths[lvl], cw, cw, mode, name=f"corr{lvl}"
            )
            prev = (lvl, cw)

        self.up: dict[int, ConvStack] = {}
        coarse_w = self.skip_width(L - 1)
        for lvl in range(L - 2, -1, -1):
            self.up[lvl] = self._stack(rng, coarse_w + self.skip_width(lvl) + rp, cfg.up_width(lvl), f"up{lvl}")
            coarse_w = cfg.up_width(lvl)

        head_in = cfg.up_width(0) if L > 1 else self.skip_width(0)
        bound = 1e-3 / np.sqrt(head_in)
        self.head_w = SignalMatrix(rng.uniform(-bound, bound, (head_in, 3)), name="head.weight")
        self.head_b = SignalMatrix(np.zeros((1, 3)), name="head.bias")

    @staticmethod
    def _splat_points(lattice, signals, norm, rel_pos, tape) -> SignalMatrix:
        sig = constant(signals)
        if rel_pos:
            sig = Concat()(sig, constant(lattice.rel_pos()), tape=tape)
        return Splat(lattice, norm)(sig, tape=tape)

    def _stack(self, rng, cin, cout, name) -> ConvStack:
        return ConvStack.init(rng, cin, [cout] * self.cfg.conv_depth, KERNEL, name=name)

    def skip_width(self, lvl: int) -> int:
        w = self.cfg.widths[lvl]
        if lvl in self.corr:
            w += self.cfg.corr_width(lvl)
        return w

    @property
    def params(self) -> dict[str, SignalMatrix]:
        """All parameters in declaration order."""
        out = {}
        stacks = [*self.down]
        for lvl in sorted(set(self.corr) | set(self.carry)):
            if lvl in self.carry:
                stacks.append(self.carry[lvl])
            if lvl in self.corr:
                stacks += [self.corr[lvl].g, self.corr[lvl].h]
        stacks += [self.up[lvl] for lvl in sorted(self.up, reverse=True)]
        for st in stacks:
            for p in st.params:
                out[p.name] = p
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    @property
    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def geometry(self, pair: ScenePair, timer: dict | None = None) -> PairGeometry:
        scales = self.cfg.scales
        return PairGeometry(build_geometry(pair.pc1, scales, timer), build_geometry(pair.pc2, scales, timer))

    def forward(self, pair: ScenePair, geom: PairGeometry | None = None, tape: Tape | None = None,
                timer: dict | None = None) -> SignalMatrix:
        """Predicted flow (N1, 3) for the PC1 points of ``pair``."""
        if pair.n1 == 0 or pair.n2 == 0:
            raise ValueError("both point clouds must be non-empty")
        if not (np.all(np.isfinite(pair.pc1)) and np.all(np.isfinite(pair.pc2))):
            raise ValueError("point clouds contain non-finite coordinates")
        cfg = self.cfg
        if geom is None:
            geom = self.geometry(pair, timer)
        L = cfg.num_levels
        norm, rp = cfg.normalize, not cfg.no_rel_pos
        scales = cfg.scales

        v1, v2 = pair.pc1, pair.pc2
        if cfg.center_inputs:
            # one shift for both frames keeps F2 - F1 differences intact
            centre = pair.pc1.mean(axis=0)
            v1, v2 = v1 - centre, v2 - centre
        base1, base2 = [], []
        for lvl in range(L):
            lat1, lat2 = geom.pc1.levels[lvl], geom.pc2.levels[lvl]
            if lvl == 0:
                # the point splat alone is "splat0"; its conv runs on occupied keys like every level
                with _stage(timer, "splat0"):
                    s1 = self._splat_points(lat1, v1, norm, rp, tape)
                    s2 = self._splat_points(lat2, v2, norm, rp, tape)
                with _stage(timer, "level0"):
                    io1 = LayerIO(lat1, lattice_conv(lat1, s1, self.down[0], tape))
                    io2 = LayerIO(lat2, lattice_conv(lat2, s2, self.down[0], tape))
            else:
                with _stage(timer, f"level{lvl}"):
                    io1 = down_bcl(base1[-1], self.down[lvl], scales[lvl], coarse=lat1, normalize=norm, rel_pos=rp, tape=tape)
                    io2 = down_bcl(base2[-1], self.down[lvl], scales[lvl], coarse=lat2, normalize=norm, rel_pos=rp, tape=tape)
            base1.append(io1)
            base2.append(io2)

        corr_out: dict[int, SignalMatrix] = {}
        carry: LayerIO | None = None
        for lvl in range(L):
            with _stage(timer, f"level{lvl}"):
                lat1 = geom.pc1.levels[lvl]
                if carry is not None and lvl in self.carry:
                    carry = down_bcl(carry, self.carry[lvl], scales[lvl], coarse=lat1, normalize=norm, rel_pos=rp, tape=tape)
                if lvl not in self.corr:
                    continue
                f1 = base1[lvl]
                if carry is not None and not cfg.elementwise_mult:
                    f1 = LayerIO(lat1, Concat()(base1[lvl].features, carry.features, tape=tape))
                out = corr_bcl(f1, base2[lvl], self.corr[lvl], tape)
                corr_out[lvl] = out
                if not cfg.elementwise_mult:
                    carry = LayerIO(lat1, out)

        def skip(lvl):
            feats = base1[lvl].features
            if lvl in corr_out:
                feats = Concat()(feats, corr_out[lvl], tape=tape)
            return feats

        cur = LayerIO(geom.pc1.levels[L - 1], skip(L - 1))
        for lvl in range(L - 2, -1, -1):
            with _stage(timer, f"level{lvl}"):
                s = skip(lvl)
                if cfg.no_skips:
                    s = constant(np.zeros(s.shape))
                cur = up_bcl(cur, s, self.up[lvl], geom.pc1.levels[lvl], rel_pos=rp, tape=tape)

        with _stage(timer, "slice"):
            sliced = Slice(geom.pc1.levels[0])(cur.features, tape=tape)
            return Linear()(sliced, self.head_w, self.head_b, tape=tape)

    def predict(self, pair: ScenePair, geom: PairGeometry | None = None) -> np.ndarray:
        return self.forward(pair, geom).data

    def loss(self, pair: ScenePair, geom: PairGeometry | None = None, tape: Tape | None = None) -> SignalMatrix:
        return EPELoss(pair.gt_flow)(self.forward(pair, geom, tape), tape=tape)


def epe3d_loss(pred, gt) -> float:
    """Mean Euclidean norm of the per-point flow error."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


# -- training ------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, SignalMatrix], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            if self.lr:
                p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainState:
    net: SceneFlowNet
    optimizer: Adam
    step: int = 0
    seed: int = 0
    curve: list = field(default_factory=list)


def evaluate(net: SceneFlowNet, pairs, geoms=None) -> float:
    """Mean EPE3D over pairs."""
    geoms = geoms or [None] * len(pairs)
    return float(np.mean([epe3d_loss(net.predict(p, g), p.gt_flow) for p, g in zip(pairs, geoms)]))


def train_step(state: TrainState, pair: ScenePair, geom: PairGeometry) -> float:
    tape = Tape()
    loss = state.net.loss(pair, geom, tape)
    value = float(loss.data[0, 0])
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {state.step}")
    state.net.zero_grad()
    tape.backward(loss)
    state.optimizer.step()
    state.step += 1
    return value


def augment_pair(pair: ScenePair, rng, shift: float = 0.0, yaw: float = 0.0,
                 motion: float = 0.0, motion_angle: float = 0.0) -> ScenePair:
    """Random rigid re-posing of a pair, keeping the flow exact.

    Both frames get one vertical-axis rotation (up to ``yaw``) and horizontal
    shift (up to ``shift``); the flow is rotated with them. Frame 2 then gets
    an extra rigid motion (rotation up to ``motion_angle`` about the frame-1
    centroid, translation up to ``motion`` per axis), which is composed into
    the flow.
    """
    centre = pair.pc1.mean(axis=0)
    R = _yaw_matrix(rng.uniform(-yaw, yaw))
    t = rng.uniform(-shift, shift, 3) * np.array([1.0, 0.0, 1.0])
    pc1 = (pair.pc1 - centre) @ R.T + centre + t
    pc2 = (pair.pc2 - centre) @ R.T + centre + t
    moved = pc1 + pair.gt_flow @ R.T
    if motion or motion_angle:
        c = pc1.mean(axis=0)
        axis = rng.normal(size=3)
        Q = _axis_angle(axis / np.linalg.norm(axis), rng.uniform(-motion_angle, motion_angle))
        d = rng.uniform(-motion, motion, 3)
        pc2 = (pc2 - c) @ Q.T + c + d
        moved = (moved - c) @ Q.T + c + d
    return ScenePair(pc1, pc2, moved - pc1, pair.meta)


def _yaw_matrix(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _axis_angle(axis, angle: float) -> np.ndarray:
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * K @ K


def train(dataset, cfg: NetworkConfig, epochs: int = 1, lr: float = 1e-3, *, held_out=None,
          seed: int = 0, max_steps: int | None = None, eval_every: int = 1,
          state: TrainState | None = None, callback=None, augment_shift: float = 0.0,
          augment_yaw: float = 0.0, augment_motion: float = 0.0, augment_angle: float = 0.0,
          augment_steps: int | None = None,
          lr_final: float | None = None) -> tuple[TrainState, list[dict]]:
    """Adam on the EPE3D loss, one pair per step, shuffled each epoch.

    Returns the state and a curve with one entry per epoch: the mean training
    loss over the epoch's steps and, every ``eval_every`` epochs, the held-out
    EPE3D.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs at least one scene pair")
    if state is None:
        net = SceneFlowNet(cfg)
        state = TrainState(net, Adam(net.params, lr=lr), seed=seed)
    net = state.net
    geoms = [net.geometry(p) for p in dataset]
    held_out = list(held_out or [])
    held_geoms = [net.geometry(p) for p in held_out]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    total = epochs * len(dataset) if max_steps is None else min(max_steps, epochs * len(dataset))
    start = state.step
    for epoch in range(epochs):
        losses = []
        for i in rng.permutation(len(dataset)):
            if max_steps is not None and state.step >= max_steps:
                break
            if lr_final is not None:
                frac = min(1.0, (state.step - start) / max(1, total - 1))
                state.optimizer.lr = lr_final + 0.5 * (lr - lr_final) * (1.0 + np.cos(np.pi * frac))
            augmenting = augment_steps is None or state.step - start < augment_steps
            if (augment_shift or augment_yaw or augment_motion or augment_angle) and augmenting:
                pair = augment_pair(dataset[i], rng, augment_shift, augment_yaw, augment_motion, augment_angle)
                losses.append(train_step(state, pair, net.geometry(pair)))
            else:
                losses.append(train_step(state, dataset[i], geoms[i]))
        if not losses:
            break
        entry = {"epoch": epoch, "step": state.step, "train_epe": float(np.mean(losses))}
        if held_out and (epoch + 1) % eval_every == 0:
            entry["heldout_epe"] = evaluate(net, held_out, held_geoms)
        state.curve.append(entry)
        log.info("epoch %d step %d %s", epoch, state.step, entry)
        if callback is not None:
            callback(entry)
    return state, state.curve


# Default schedule: cosine-decayed Adam, augmented steps first, then plain
# steps on the original pairs.
TRAIN_RECIPE = {
    "steps": 2000,
    "lr": 1e-3,
    "lr_final": 1e-5,
    "augment_shift": 1.0,
    "augment_yaw": float(np.pi),
    "augment_motion": 0.0,
    "augment_angle": 0.0,
    "augment_steps": 1400,
}


def train_recipe(dataset, cfg: NetworkConfig, *, held_out=None, seed: int = 0, eval_every: int = 0,
                 callback=None, **overrides) -> tuple[TrainState, list[dict]]:
    """``train`` with TRAIN_RECIPE (plus overrides), counted in steps rather than epochs."""
    unknown = set(overrides) - set(TRAIN_RECIPE)
    if unknown:
        raise ValueError(f"unknown training options {sorted(unknown)}")
    r = {**TRAIN_RECIPE, **overrides}
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs at least one scene pair")
    steps = int(r["steps"])
    return train(
        dataset, cfg, epochs=-(-steps // len(dataset)), lr=r["lr"], held_out=held_out if eval_every else None,
        seed=seed, max_steps=steps, eval_every=max(eval_every, 1), callback=callback, lr_final=r["lr_final"],
        augment_shift=r["augment_shift"], augment_yaw=r["augment_yaw"], augment_motion=r["augment_motion"],
        augment_angle=r["augment_angle"], augment_steps=r["augment_steps"],
    )


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"LATFLOWC"
CKPT_VERSION = 1


def dumps_checkpoint(net: SceneFlowNet) -> bytes:
    """magic, version, config text, then (name, shape, <f8 data) per tensor."""
    text = net.cfg.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text]
    params = net.params
    parts.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_checkpoint(blob: bytes) -> SceneFlowNet:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: missing {what} at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, text_len = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = NetworkConfig.from_text(take(text_len, "config text").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed config text in checkpoint: {exc}") from None
    net = SceneFlowNet(cfg)
    params = net.params
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    if count != len(params):
        raise CheckpointError(f"checkpoint has {count} tensors, config implies {len(params)}")
    for expected in params:
        (nlen,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(nlen, "tensor name").decode("utf-8")
        if name != expected:
            raise CheckpointError(f"tensor {name!r} found where {expected!r} was expected")
        (ndim,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"shape of {name}"))
        if tuple(shape) != params[name].data.shape:
            raise CheckpointError(f"{name}: shape {shape} != {params[name].data.shape}")
        n = int(np.prod(shape))
        params[name].data[...] = np.frombuffer(take(8 * n, f"data of {name}"), dtype="<f8").reshape(shape)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
    return net


def write_checkpoint(path, net: SceneFlowNet) -> None:
    Path(path).write_bytes(dumps_checkpoint(net))


def read_checkpoint(path) -> SceneFlowNet:
    return loads_checkpoint(Path(path).read_bytes())


def param_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count of ``SceneFlowNet(cfg)``, without building it."""
    K, rp, depth = KERNEL, 0 if cfg.no_rel_pos else DIM + 1, cfg.conv_depth

    def stack(cin, cout):
        return K * cin * cout + cout + (depth - 1) * (cout * cout + cout)

    total = 0
    for lvl in range(cfg.num_levels):
        cin = cfg.in_channels if lvl == 0 else cfg.widths[lvl - 1]
        total += stack(cin + rp, cfg.widths[lvl])
    active = cfg.active_corr_levels
    prev = None
    for lvl in active:
        cw, w = cfg.corr_width(lvl), cfg.widths[lvl]
        if cfg.elementwise_mult:
            total += K * w * cw + cw
        else:
            carry_w = 0
            if prev is not None:
                carry_w = prev[1]
                total += (lvl - prev[0]) * stack(carry_w + rp, carry_w)
            total += K * (2 * w + carry_w) * cw + cw
        total += K * cw * cw + cw
        prev = (lvl, cw)

    def skip(lvl):
        return cfg.widths[lvl] + (cfg.corr_width(lvl) if lvl in active else 0)

    coarse = skip(cfg.num_levels - 1)
    for lvl in range(cfg.num_levels - 2, -1, -1):
        total += stack(coarse + skip(lvl) + rp, cfg.up_width(lvl))
        coarse = cfg.up_width(lvl)
    head_in = cfg.up_width(0) if cfg.num_levels > 1 else skip(0)
    return total + 3 * head_in + 3


def finest_edge(cfg: NetworkConfig) -> float:
    return simplex_edge_length(DIM, cfg.base_scale)
