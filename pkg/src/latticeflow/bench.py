"""Runtime and occupancy of one forward pass as the point count grows.

The scene (objects, extent, motion) is fixed; only the sampling density
changes, so occupied lattice counts at coarse levels should saturate while
the first splat keeps growing with N.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SceneSpec, gen_scene, preprocess
from .model import NetworkConfig, SceneFlowNet, fit_base_scale

DEFAULT_POINTS = (8192, 16384, 32768)


@dataclass
class BenchRow:
    n: int
    occupied: list[int]
    times_ms: dict[str, float]

    def deep_ms(self, from_level: int = 2) -> float:
        return sum(v for k, v in self.times_ms.items() if k.startswith("level") and int(k[5:]) >= from_level)

    def deep_occupied(self, from_level: int = 2) -> int:
        return int(sum(self.occupied[from_level:]))


@dataclass
class BenchReport:
    rows: list[BenchRow]
    base_scale: float
    repeats: int
    meta: dict = field(default_factory=dict)

    def growth(self) -> dict:
        """Ratios between the largest and smallest N."""
        a, b = self.rows[0], self.rows[-1]
        return {
            "points": b.n / a.n,
            "splat0_time": b.times_ms["splat0"] / a.times_ms["splat0"],
            "deep_occupied": b.deep_occupied() / max(a.deep_occupied(), 1),
            "deep_time": b.deep_ms() / a.deep_ms(),
        }

    def to_keyvalue(self) -> str:
        lines = [f"base_scale={self.base_scale!r}", f"repeats={self.repeats}"]
        for r in self.rows:
            for lvl, c in enumerate(r.occupied):
                lines.append(f"n{r.n}.occupied.level{lvl}={c}")
            for k, v in r.times_ms.items():
                lines.append(f"n{r.n}.time_ms.{k}={v:.3f}")
            lines.append(f"n{r.n}.time_ms.deep={r.deep_ms():.3f}")
        for k, v in self.growth().items():
            lines.append(f"growth.{k}={v:.4f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        stages = list(self.rows[0].times_ms)
        head = ["N"] + [f"occ{l}" for l in range(len(self.rows[0].occupied))] + [f"{s}_ms" for s in stages] + ["deep_ms"]
        out = ["  ".join(f"{h:>10}" for h in head)]
        for r in self.rows:
            cells = [r.n, *r.occupied, *(f"{r.times_ms[s]:.1f}" for s in stages), f"{r.deep_ms():.1f}"]
            out.append("  ".join(f"{c:>10}" for c in cells))
        g = self.growth()
        out.append(
            f"N x{g['points']:.1f}: splat0 time x{g['splat0_time']:.2f}, "
            f"level>=2 keys x{g['deep_occupied']:.2f}, level>=2 time x{g['deep_time']:.2f}"
        )
        return "\n".join(out) + "\n"


def bench_clouds(spec: SceneSpec, seed: int, points=DEFAULT_POINTS):
    """One scene sampled at each N; the density is raised until N raw points exist."""
    n0 = gen_scene(spec, seed).n1
    pairs = []
    for n in points:
        mult = max(1.0, 1.25 * n / n0)
        raw = gen_scene(spec, seed, density_mult=mult)
        pairs.append(preprocess(raw, n_samples=n, seed=seed))
    return pairs


def run_bench(points=DEFAULT_POINTS, repeats: int = 3, spec: SceneSpec | None = None,
              cfg: NetworkConfig | None = None, seed: int = 0) -> BenchReport:
    """Median per-stage forward timings (geometry included) and occupied counts.

    The lattice scale is fitted once on the smallest cloud and shared by all N.
    """
    points = sorted(int(n) for n in points)
    spec = spec or SceneSpec()
    pairs = bench_clouds(spec, seed, points)
    s0 = fit_base_scale(pairs[:1])
    cfg = (cfg or NetworkConfig()).replace(base_scale=s0)
    net = SceneFlowNet(cfg)
    net.forward(pairs[0])  # warm-up
    rows = []
    for n, pair in zip(points, pairs):
        runs = []
        for _ in range(repeats):
            timer: dict = {}
            net.forward(pair, timer=timer)
            runs.append(timer)
        stages = sorted(runs[0], key=lambda k: (k != "splat0", k == "slice", k))
        times = {k: 1e3 * float(np.median([t[k] for t in runs])) for k in stages}
        occupied = net.geometry(pair).pc1.occupied
        rows.append(BenchRow(n, occupied, times))
    return BenchReport(rows, s0, repeats, meta={"seed": seed})
