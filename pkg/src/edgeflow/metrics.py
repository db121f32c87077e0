"""End-point error, flow-magnitude obstacle masks, IoU and detection rate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

IOU_THRESHOLD = 0.5


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def epe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance between flow vectors (last axis holds (u, v))."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    _same_shape(pred, gt)
    return float(np.sqrt(((pred - gt) ** 2).sum(-1)).mean())


def epe_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    _same_shape(pred, gt)
    return np.sqrt(((pred - gt) ** 2).sum(-1))


def flow_magnitude(flow: np.ndarray) -> np.ndarray:
    return np.hypot(flow[..., 0], flow[..., 1])


def flow_magnitude_mask(flow: np.ndarray, threshold: float) -> np.ndarray:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return flow_magnitude(np.asarray(flow, np.float64)) > threshold


def default_threshold(gt_flow: np.ndarray, fg_mask: np.ndarray, fg_speed: float | None = None) -> float:
    """Half-way between the 95th-percentile background speed and the foreground speed."""
    mag = flow_magnitude(np.asarray(gt_flow, np.float64))
    bg = mag[~fg_mask]
    bg95 = float(np.percentile(bg, 95)) if bg.size else 0.0
    if fg_speed is None:
        fg_speed = float(np.median(mag[fg_mask])) if fg_mask.any() else 0.0
    return 0.5 * (bg95 + fg_speed)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    _same_shape(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def detection_rate(ious: Iterable[float], threshold: float = IOU_THRESHOLD) -> float:
    """Fraction of samples whose IoU exceeds ``threshold``."""
    ious = np.asarray(list(ious), dtype=float)
    if ious.size == 0:
        return 0.0
    return float((ious > threshold).mean())


@dataclass
class EvalReport:
    mean_epe: float
    per_sample_epe: list[float]
    detection_rate: float | None = None
    ious: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mean_epe < 0:
            raise ValueError("EPE must be non-negative")
        if self.detection_rate is not None and not 0 <= self.detection_rate <= 1:
            raise ValueError("detection rate must lie in [0, 1]")

    def records(self) -> list[dict]:
        rows = []
        for i, e in enumerate(self.per_sample_epe):
            row = {"sample": i, "epe": e}
            if i < len(self.ious):
                row["iou"] = self.ious[i]
            rows.append(row)
        return rows

    def write(self, path) -> None:
        with open(path, "w") as f:
            for row in self.records():
                f.write(json.dumps(row) + "\n")
            f.write(json.dumps({"summary": {k: v for k, v in asdict(self).items() if k not in ("per_sample_epe", "ious")}}) + "\n")

    def summary_table(self) -> str:
        lines = [f"samples        {len(self.per_sample_epe)}", f"mean EPE (px)  {self.mean_epe:.4f}"]
        if self.ious:
            lines.append(f"mean IoU       {np.mean(self.ious):.4f}")
        if self.detection_rate is not None:
            lines.append(f"DR             {self.detection_rate:.4f}")
        return "\n".join(lines)


def evaluate(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], masks: Sequence[np.ndarray] | None = None,
             threshold: float | None = None, config: dict | None = None) -> EvalReport:
    """EPE over all samples and, given ground-truth obstacle masks, IoU and DR."""
    per = [epe(p, g) for p, g in zip(preds, gts)]
    ious = []
    if masks is not None:
        for p, g, m in zip(preds, gts, masks):
            thr = default_threshold(g, m) if threshold is None else threshold
            ious.append(iou(flow_magnitude_mask(p, thr), m))
    return EvalReport(float(np.mean(per)) if per else 0.0, per,
                      detection_rate(ious) if masks is not None else None, ious, dict(config or {}))
