"""Scene-flow evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import CameraModel


@dataclass(frozen=True)
class MetricReport:
    epe3d: float
    acc3d_strict: float
    acc3d_relax: float
    outliers3d: float
    num_points: int
    epe2d: float | None = None
    acc2d: float | None = None

    def __post_init__(self):
        for name in ("acc3d_strict", "acc3d_relax", "outliers3d", "acc2d"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.acc3d_strict > self.acc3d_relax:
            raise ValueError("strict accuracy cannot exceed relaxed accuracy")

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_keyvalue(self) -> str:
        """One ``key=value`` line per metric."""
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def to_table(self) -> str:
        rows = self.as_dict()
        width = max(len(k) for k in rows)
        return "\n".join(f"{k:<{width}}  {_fmt(v)}" for k, v in rows.items()) + "\n"


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def threshold_counts(pred, gt) -> dict:
    """Integer counts behind the 3D accuracy and outlier ratios."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    has_norm = gt_norm > 0
    rel = np.divide(err, gt_norm, out=np.full_like(err, np.inf), where=has_norm)
    strict = (err < 0.05) | (has_norm & (rel < 0.05))
    relax = (err < 0.1) | (has_norm & (rel < 0.1))
    outlier = (err > 0.3) | (has_norm & (rel > 0.1))
    return {
        "strict": int(strict.sum()),
        "relax": int(relax.sum()),
        "outliers": int(outlier.sum()),
        "n": int(err.shape[0]),
        "err": err,
    }


def compute_metrics(pred, gt, pc1=None, camera: CameraModel | None = None) -> MetricReport:
    """EPE3D and the thresholded 3D ratios; 2D metrics when a camera and pc1 are given.

    Relative error is EPE3D / |gt|; points with zero ground-truth flow are
    judged by the absolute thresholds only.
    """
    c = threshold_counts(pred, gt)
    n = c["n"]
    if n == 0:
        raise ValueError("cannot evaluate an empty prediction")
    epe2d = acc2d = None
    if camera is not None:
        if pc1 is None:
            raise ValueError("2D metrics need the first-frame points")
        pc1 = np.asarray(pc1, dtype=np.float64)
        base = camera.project(pc1)
        flow_pred = camera.project(pc1 + pred) - base
        flow_gt = camera.project(pc1 + gt) - base
        err2 = np.linalg.norm(flow_pred - flow_gt, axis=1)
        norm2 = np.linalg.norm(flow_gt, axis=1)
        rel2 = np.divide(err2, norm2, out=np.full_like(err2, np.inf), where=norm2 > 0)
        epe2d = float(err2.mean())
        acc2d = float(np.mean((err2 < 3.0) | (rel2 < 0.05)))
    return MetricReport(
        epe3d=float(c["err"].mean()),
        acc3d_strict=c["strict"] / n,
        acc3d_relax=c["relax"] / n,
        outliers3d=c["outliers"] / n,
        num_points=n,
        epe2d=epe2d,
        acc2d=acc2d,
    )


def parse_keyvalue(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k.strip()] = float(v) if k.strip() != "num_points" else int(v)
    return out
