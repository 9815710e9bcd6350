"""Segmentation evaluation: Dice, mean IoU, normalized surface distance, and
identification accuracy (fraction of present classes with IoU > 0.5), plus the
challenge-style four-metric average."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumes import SegLabel

NSD_TOLERANCE_MM = 2.0   # convention, not prescribed by any data source


def _class_masks(pred: SegLabel, gt: SegLabel, c: int):
    return pred.data == c, gt.data == c


def _check(pred: SegLabel, gt: SegLabel):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.num_classes != gt.num_classes:
        raise ValueError("class count mismatch")


def dsc(pred: SegLabel, gt: SegLabel) -> tuple[dict[int, float], float]:
    """Per-foreground-class Dice 2|A&B|/(|A|+|B|); classes absent from both
    masks are excluded from the mean, absent from exactly one score 0."""
    _check(pred, gt)
    per_class = {}
    for c in range(1, gt.num_classes):
        p, g = _class_masks(pred, gt, c)
        np_, ng = int(p.sum()), int(g.sum())
        if np_ == 0 and ng == 0:
            continue
        per_class[c] = 2.0 * int((p & g).sum()) / (np_ + ng)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def miou(pred: SegLabel, gt: SegLabel) -> tuple[dict[int, float], float]:
    """Per-foreground-class IoU |A&B|/|A|B|, same absence conventions as dsc."""
    _check(pred, gt)
    per_class = {}
    for c in range(1, gt.num_classes):
        p, g = _class_masks(pred, gt, c)
        union = int((p | g).sum())
        if union == 0:
            continue
        per_class[c] = int((p & g).sum()) / union
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with at least one face neighbor outside the mask;
    out-of-volume counts as outside."""
    if not mask.any():
        return np.zeros_like(mask)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                    border_value=0)
    return mask & ~eroded


def nsd(pred: SegLabel, gt: SegLabel, tolerance_mm: float = NSD_TOLERANCE_MM,
        spacing=(1.0, 1.0, 1.0)) -> tuple[dict[int, float], float]:
    """Symmetric fraction of boundary voxels lying within tolerance of the
    other mask's boundary (distance-transform fast path)."""
    _check(pred, gt)
    per_class = {}
    for c in range(1, gt.num_classes):
        p, g = _class_masks(pred, gt, c)
        if not p.any() and not g.any():
            continue
        if not p.any() or not g.any():
            per_class[c] = 0.0
            continue
        bp, bg = boundary_voxels(p), boundary_voxels(g)
        dist_to_g = ndimage.distance_transform_edt(~bg, sampling=spacing)
        dist_to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)
        close_p = int((dist_to_g[bp] <= tolerance_mm).sum())
        close_g = int((dist_to_p[bg] <= tolerance_mm).sum())
        per_class[c] = (close_p + close_g) / (int(bp.sum()) + int(bg.sum()))
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def ia(per_case_per_class_iou: list[dict[int, float]]) -> float:
    """Mean over cases of the fraction of ground-truth-present classes whose
    IoU strictly exceeds 0.5. Cases with no foreground classes are excluded."""
    fractions = []
    for class_ious in per_case_per_class_iou:
        present = {c: v for c, v in class_ious.items()}
        if not present:
            continue
        fractions.append(sum(1 for v in present.values() if v > 0.5) / len(present))
    return float(np.mean(fractions)) if fractions else float("nan")


@dataclass
class MetricReport:
    per_case: dict[str, dict] = field(default_factory=dict)
    mean_dsc: float = float("nan")
    mean_nsd: float = float("nan")
    mean_miou: float = float("nan")
    ia: float = float("nan")

    @property
    def average_score(self) -> float:
        return float(np.mean([self.mean_dsc, self.mean_nsd, self.mean_miou, self.ia]))

    def to_json(self) -> str:
        return json.dumps({
            "per_case": self.per_case,
            "aggregates": {"dsc": self.mean_dsc, "nsd": self.mean_nsd,
                           "miou": self.mean_miou, "ia": self.ia,
                           "average_score": self.average_score},
        }, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["case", "class", "dsc", "iou", "nsd"])
            for cid, row in self.per_case.items():
                for c in sorted(row["dsc_per_class"]):
                    writer.writerow([cid, c, row["dsc_per_class"][c],
                                     row["iou_per_class"][c],
                                     row["nsd_per_class"].get(c, "")])
            writer.writerow(["aggregate", "", self.mean_dsc, self.mean_miou, self.mean_nsd])
            writer.writerow(["ia", "", self.ia, "", ""])
            writer.writerow(["average_score", "", self.average_score, "", ""])


def average_score(report: MetricReport) -> float:
    return report.average_score


def evaluate_cases(predictions: dict[str, SegLabel], ground_truth: dict[str, SegLabel],
                   tolerance_mm: float = NSD_TOLERANCE_MM,
                   spacings: dict[str, tuple] | None = None) -> MetricReport:
    """Score matched prediction/ground-truth pairs; raises on missing ids."""
    missing = sorted(set(ground_truth) - set(predictions))
    if missing:
        raise ValueError(f"missing predictions for cases: {missing}")
    report = MetricReport()
    dscs, nsds, mious, iou_tables = [], [], [], []
    for cid in sorted(ground_truth):
        pred, gt = predictions[cid], ground_truth[cid]
        spacing = (spacings or {}).get(cid, (1.0, 1.0, 1.0))
        d_per, d_mean = dsc(pred, gt)
        i_per, i_mean = miou(pred, gt)
        n_per, n_mean = nsd(pred, gt, tolerance_mm, spacing)
        gt_present = {c: i_per[c] for c in i_per
                      if (gt.data == c).any()}
        report.per_case[cid] = {
            "dsc_per_class": d_per, "iou_per_class": i_per, "nsd_per_class": n_per,
            "dsc": d_mean, "iou": i_mean, "nsd": n_mean,
        }
        if not np.isnan(d_mean):
            dscs.append(d_mean)
            mious.append(i_mean)
            nsds.append(n_mean)
        iou_tables.append(gt_present)
    report.mean_dsc = float(np.mean(dscs)) if dscs else float("nan")
    report.mean_nsd = float(np.mean(nsds)) if nsds else float("nan")
    report.mean_miou = float(np.mean(mious)) if mious else float("nan")
    report.ia = ia(iou_tables)
    return report
