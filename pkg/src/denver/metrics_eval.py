"""Segmentation metrics: overlap scores, clDice and normalised surface distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from denver.errors import InputError
from denver.imaging_io import skeletonize

METRIC_NAMES = ("cl_dice", "nsd", "jaccard", "dice", "acc", "sn", "sp")
METRIC_LABELS = {
    "cl_dice": "clDice", "nsd": "NSD", "jaccard": "Jaccard", "dice": "Dice",
    "acc": "Acc.", "sn": "Sn.", "sp": "Sp.",
}
CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise InputError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def _ratio(num, den):
    # an empty denominator means both masks are empty where it is measured
    return 1.0 if den == 0 else num / den


def confusion_metrics(pred, gt) -> dict:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return {
        "jaccard": _ratio(tp, tp + fp + fn),
        "dice": _ratio(2 * tp, 2 * tp + fp + fn),
        "acc": (tp + tn) / p.size,
        "sn": _ratio(tp, tp + fn),
        "sp": _ratio(tn, tn + fp),
    }


def dice(pred, gt) -> float:
    return confusion_metrics(pred, gt)["dice"]


def cl_dice(pred, gt) -> float:
    """Centreline Dice from topology precision and sensitivity."""
    p, g = _pair(pred, gt)
    sp, sg = skeletonize(p), skeletonize(g)
    tprec = _ratio(np.count_nonzero(sp & g), np.count_nonzero(sp)) if sp.any() else float(not g.any())
    tsens = _ratio(np.count_nonzero(sg & p), np.count_nonzero(sg)) if sg.any() else float(not p.any())
    if tprec + tsens == 0:
        return 0.0
    return 2 * tprec * tsens / (tprec + tsens)


def boundary(mask) -> np.ndarray:
    """Mask minus its erosion by a 3x3 cross (pixels outside the image count as background)."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, CROSS, border_value=0)


def _distance_to(b):
    return ndimage.distance_transform_edt(~b)


def nsd(pred, gt, tau: float = 2.0) -> float:
    """Share of boundary pixels of each mask within ``tau`` px of the other's boundary."""
    if tau <= 0:
        raise InputError("tau must be positive")
    p, g = _pair(pred, gt)
    bp, bg = boundary(p), boundary(g)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    close_p = np.count_nonzero(_distance_to(bg)[bp] <= tau)
    close_g = np.count_nonzero(_distance_to(bp)[bg] <= tau)
    return (close_p + close_g) / (np.count_nonzero(bp) + np.count_nonzero(bg))


def frame_metrics(pred, gt, tau: float = 2.0) -> dict:
    out = {"cl_dice": cl_dice(pred, gt), "nsd": nsd(pred, gt, tau)}
    out.update(confusion_metrics(pred, gt))
    return {k: out[k] for k in METRIC_NAMES}


@dataclass
class MetricReport:
    annotated_frames: list[int]
    per_frame: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", *METRIC_NAMES])
            for t, row in zip(self.annotated_frames, self.per_frame):
                w.writerow([t, *(f"{row[k]:.6f}" for k in METRIC_NAMES)])
            w.writerow(["mean", *(f"{self.mean[k]:.6f}" for k in METRIC_NAMES)])
            w.writerow(["std", *(f"{self.std[k]:.6f}" for k in METRIC_NAMES)])

    def table(self) -> str:
        head = " ".join(f"{METRIC_LABELS[k]:>15}" for k in METRIC_NAMES)
        vals = " ".join(f"{self.mean[k]:.3f} ± {self.std[k]:.3f}".rjust(15) for k in METRIC_NAMES)
        return f"{head}\n{vals}"


def evaluate_sequence(preds, gts, annotated_frames=None, tau: float = 2.0) -> MetricReport:
    """Metrics on the annotated frames only, with mean and (population) std."""
    preds = np.asarray(preds)
    if annotated_frames is None:
        annotated_frames = list(range(len(preds)))
    if isinstance(gts, dict):
        lookup = gts
    else:
        lookup = {t: g for t, g in enumerate(gts)}
    rows = []
    for t in annotated_frames:
        if t not in lookup or lookup[t] is None:
            raise InputError(f"no ground truth for annotated frame {t}")
        if not 0 <= t < len(preds):
            raise InputError(f"annotated frame {t} outside the prediction sequence")
        rows.append(frame_metrics(preds[t], lookup[t], tau))
    if not rows:
        raise InputError("no annotated frames to evaluate")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
    std = {k: float(np.std([r[k] for r in rows])) for k in METRIC_NAMES}
    return MetricReport(list(annotated_frames), rows, mean, std)


def read_report_csv(path) -> dict:
    """Mean row of a report CSV as a dict."""
    with open(Path(path), newline="") as f:
        for row in csv.DictReader(f):
            if row["frame"] == "mean":
                return {k: float(row[k]) for k in METRIC_NAMES}
    raise InputError(f"{path} has no mean row")
