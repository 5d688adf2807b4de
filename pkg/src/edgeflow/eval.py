"""Click-simulation evaluation: automatic clicker, NoC@k, mean-IoU curves,
and a stability measure (how much the mask regresses between clicks).

The simulated user always clicks the point of the largest error region that
is farthest from the region's complement (image border counts as outside),
positive on false negatives and negative on false positives. Ties are
broken row-major so the protocol is fully deterministic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .clicks import Click, NEGATIVE, POSITIVE, binarize
from .data import Sample
from .model import Model, predict_step

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _as_bool2d(mask: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-d mask, got shape {np.asarray(mask).shape}")
    return m.astype(bool)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    am = _as_bool2d(a, "a")
    bm = _as_bool2d(b, "b")
    if am.shape != bm.shape:
        raise ValueError(f"mask shapes differ: {am.shape} vs {bm.shape}")
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(am, bm).sum() / union)


def next_click(gt: np.ndarray, pred: np.ndarray, index: int = 1) -> Click:
    """The simulated user's next click given the current prediction.

    Picks the largest 4-connected error component (tie: the one containing
    the smallest row-major pixel), then the in-component pixel with maximum
    exact Euclidean distance to the component's complement, counting
    everything outside the image as complement (tie: smallest row-major).
    """
    gtb = _as_bool2d(gt, "gt")
    prb = _as_bool2d(pred, "pred")
    if gtb.shape != prb.shape:
        raise ValueError(f"mask shapes differ: {gtb.shape} vs {prb.shape}")

    best = None  # (area desc, first row-major pixel asc) -> (component, polarity)
    for err, polarity in (((gtb & ~prb), POSITIVE), ((prb & ~gtb), NEGATIVE)):
        if not err.any():
            continue
        labels, n = ndimage.label(err, structure=_CROSS)
        areas = np.bincount(labels.ravel())
        values, firsts = np.unique(labels.ravel(), return_index=True)
        for value, first in zip(values, firsts):
            if value == 0:
                continue
            key = (-int(areas[value]), int(first))
            if best is None or key < best[0]:
                best = (key, labels == value, polarity)
    if best is None:
        raise ValueError("prediction equals ground truth; no error to click")

    _, component, polarity = best
    dist = ndimage.distance_transform_edt(np.pad(component, 1))[1:-1, 1:-1]
    masked = np.where(component, dist, -1.0)
    flat = int(np.argmax(masked))
    y, x = divmod(flat, component.shape[1])
    return Click(x=x, y=y, polarity=polarity, index=index)


# ---------------------------------------------------------------------------
# simulation


Segmenter = Callable[[np.ndarray, List[Click], Optional[np.ndarray]], np.ndarray]


class ModelSegmenter:
    """Adapts a model to the simulation protocol: returns the probability
    map for (image, clicks, previous binary prediction)."""

    def __init__(self, model: Model):
        self.model = model

    def __call__(self, image: np.ndarray, clicks: List[Click],
                 prev_pred: Optional[np.ndarray]) -> np.ndarray:
        prob, _ = predict_step(self.model, image, clicks, prev_pred)
        return prob


@dataclass
class SimulationResult:
    ious: List[float]
    clicks: List[Click]
    noc: Dict[float, int]
    failed: Dict[float, bool]

    def stability(self) -> float:
        """Largest IoU drop between consecutive clicks (0 when monotone)."""
        if len(self.ious) < 2:
            return 0.0
        diffs = np.diff(np.asarray(self.ious))
        return float(max(0.0, -diffs.min()))


def simulate(segmenter: Segmenter, image: np.ndarray, gt: np.ndarray,
             max_clicks: int = 20, thresholds: Sequence[float] = (0.85, 0.90)) -> SimulationResult:
    """Drive the segmenter with simulated clicks until every threshold has
    been reached (or max_clicks). Binarization is fixed at 0.5."""
    gtb = _as_bool2d(gt, "gt")
    thresholds = tuple(thresholds)
    pred = np.zeros_like(gtb)
    prev: Optional[np.ndarray] = None
    clicks: List[Click] = []
    ious: List[float] = []
    noc = {t: max_clicks for t in thresholds}
    failed = {t: True for t in thresholds}
    for k in range(1, max_clicks + 1):
        clicks.append(next_click(gtb, pred, index=k))
        try:
            prob = segmenter(image, list(clicks), prev)
        except Exception as exc:
            raise RuntimeError(f"segmenter failed at click {k}: {exc}") from exc
        pred = binarize(np.asarray(prob)).astype(bool)
        prev = pred.astype(np.float64)
        ious.append(iou(gtb, pred))
        for t in thresholds:
            if failed[t] and ious[-1] >= t:
                noc[t] = k
                failed[t] = False
        if not any(failed.values()):
            break
    return SimulationResult(ious=ious, clicks=clicks, noc=noc, failed=failed)


# ---------------------------------------------------------------------------
# dataset-level reporting


@dataclass
class EvalReport:
    config: dict
    per_image: List[dict]
    mean_noc85: float
    mean_noc90: float
    miou_curve: List[float]
    stability: float
    failure_count: int = 0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "per_image": self.per_image,
            "mean_noc85": self.mean_noc85,
            "mean_noc90": self.mean_noc90,
            "miou_curve": self.miou_curve,
            "stability": self.stability,
            "failure_count": self.failure_count,
        }


def evaluate_dataset(segmenter: Segmenter, dataset: Sequence[Sample],
                     out_path=None, config: Optional[dict] = None,
                     max_clicks: int = 20,
                     thresholds: Sequence[float] = (0.85, 0.90)) -> EvalReport:
    """Simulate every image, aggregate NoC/IoU/stability, and optionally
    write the JSON report plus a CSV of the mean-IoU-per-click curve."""
    if not dataset:
        raise ValueError("evaluate_dataset needs a non-empty dataset")
    if 0.85 not in thresholds or 0.90 not in thresholds:
        raise ValueError("report thresholds must include 0.85 and 0.90")
    per_image = []
    curves = np.zeros((len(dataset), max_clicks))
    stabilities = []
    for i, sample in enumerate(dataset):
        result = simulate(segmenter, sample.image, sample.gt_mask,
                          max_clicks=max_clicks, thresholds=thresholds)
        # images that stop early keep their final IoU for later click counts
        padded = result.ious + [result.ious[-1]] * (max_clicks - len(result.ious))
        curves[i] = padded
        stabilities.append(result.stability())
        per_image.append({
            "id": sample.instance_id,
            "ious": [float(v) for v in result.ious],
            "noc85": result.noc[0.85],
            "noc90": result.noc[0.90],
            "failed": bool(result.failed[0.90]),
        })
    report = EvalReport(
        config=config or {},
        per_image=per_image,
        mean_noc85=float(np.mean([r["noc85"] for r in per_image])),
        mean_noc90=float(np.mean([r["noc90"] for r in per_image])),
        miou_curve=[float(v) for v in curves.mean(axis=0)],
        stability=float(np.mean(stabilities)),
        failure_count=sum(r["failed"] for r in per_image),
    )
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report.to_dict(), indent=2))
        with open(out_path.with_suffix(".csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["click_index", "mean_iou"])
            for k, v in enumerate(report.miou_curve, start=1):
                writer.writerow([k, f"{v:.6f}"])
    return report
