"""Segmentation metrics: IoU, trimap-IoU and instance-weighted iIoU.

Conventions: confusion[g, p] counts pixels with ground truth g predicted p,
ignore_label excluded. Per-class IoU = TP / (TP + FP + FN); classes absent
from both prediction and ground truth are excluded from the mean. The trimap
band is the set of pixels within Chebyshev distance band_px of a ground
truth label boundary (a pixel with a 4-neighbor of different label).
iIoU = iTP / (iTP + FP + iFN) with TP/FN pixel contributions weighted by
average-class-instance-size / this-instance-size; FP stays unweighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation

from .errors import ValidationError

IGNORE_LABEL = 255


def confusion_matrix(pred, gt, num_classes, ignore_label=IGNORE_LABEL):
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValidationError(f"pred/gt size mismatch: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_label
    if np.any(pred[valid] >= num_classes) or np.any(gt[valid] >= num_classes):
        raise ValidationError(f"label >= num_classes ({num_classes})")
    idx = gt[valid] * num_classes + pred[valid]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(conf):
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    union = gt_count + pred_count - tp
    present = union > 0
    per_class = np.full(conf.shape[0], np.nan)
    per_class[present] = tp[present] / union[present]
    mean = float(np.nanmean(per_class)) if present.any() else float("nan")
    return per_class, mean


def boundary_mask(gt):
    """Pixels with at least one 4-neighbor of a different label."""
    gt = np.asarray(gt)
    b = np.zeros(gt.shape, dtype=bool)
    b[:-1] |= gt[:-1] != gt[1:]
    b[1:] |= gt[1:] != gt[:-1]
    b[:, :-1] |= gt[:, :-1] != gt[:, 1:]
    b[:, 1:] |= gt[:, 1:] != gt[:, :-1]
    return b


def trimap_band(gt, band_px):
    if band_px < 1:
        raise ValidationError(f"band_px must be >= 1, got {band_px}")
    se = np.ones((2 * band_px + 1, 2 * band_px + 1), dtype=bool)
    return binary_dilation(boundary_mask(gt), structure=se)


def _as_frame_list(x):
    x = x if isinstance(x, (list, tuple)) else [x]
    return [np.asarray(f) for f in x]


def trimap_confusion(preds, gts, num_classes, band_px=2, ignore_label=IGNORE_LABEL):
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    empty = True
    for pred, gt in zip(_as_frame_list(preds), _as_frame_list(gts)):
        band = trimap_band(gt, band_px)
        if band.any():
            empty = False
            masked_gt = np.where(band, gt, ignore_label)
            conf += confusion_matrix(pred, masked_gt, num_classes, ignore_label)
    return conf, empty


def compute_class_avg_sizes(labels, instances, instance_classes):
    """Mean ground-truth instance size per class over a dataset split."""
    sizes = {c: [] for c in instance_classes}
    for lab, inst in zip(_as_frame_list(labels), _as_frame_list(instances)):
        for iid in np.unique(inst):
            if iid == 0:
                continue
            mask = inst == iid
            c = int(lab[mask][0])
            if c in sizes:
                sizes[c].append(int(mask.sum()))
    return {c: (float(np.mean(v)) if v else 0.0) for c, v in sizes.items()}


def iiou(preds, gt_labels, gt_instances, instance_classes, class_avg_sizes,
         ignore_label=IGNORE_LABEL):
    """Instance-weighted IoU per instance-able class, plus the mean."""
    preds = _as_frame_list(preds)
    gt_labels = _as_frame_list(gt_labels)
    gt_instances = _as_frame_list(gt_instances)
    itp = {c: 0.0 for c in instance_classes}
    ifn = {c: 0.0 for c in instance_classes}
    fp = {c: 0 for c in instance_classes}
    for pred, lab, inst in zip(preds, gt_labels, gt_instances):
        valid = lab != ignore_label
        for c in instance_classes:
            fp[c] += int(((pred == c) & (lab != c) & valid).sum())
        for iid in np.unique(inst):
            if iid == 0:
                continue
            mask = (inst == iid) & valid
            size = int(mask.sum())
            if size == 0:
                raise ValidationError(f"instance {iid} has size 0")
            c = int(lab[mask][0])
            if c not in instance_classes:
                continue
            avg = class_avg_sizes.get(c, 0.0)
            if avg <= 0:
                raise ValidationError(f"class {c}: average instance size not available")
            w = avg / size
            hit = int((pred[mask] == c).sum())
            itp[c] += w * hit
            ifn[c] += w * (size - hit)
    per_class = {}
    for c in instance_classes:
        denom = itp[c] + fp[c] + ifn[c]
        per_class[c] = itp[c] / denom if denom > 0 else float("nan")
    vals = [v for v in per_class.values() if not np.isnan(v)]
    mean = float(np.mean(vals)) if vals else float("nan")
    return per_class, mean


@dataclass
class MetricsReport:
    num_classes: int
    confusion: np.ndarray
    iou_per_class: np.ndarray
    mean_iou: float
    tiou_per_class: np.ndarray
    mean_tiou: float
    tiou_defined: bool
    iiou_per_class: dict
    mean_iiou: float

    def csv_rows(self):
        rows = [("class", "iou", "tiou", "iiou")]
        for c in range(self.num_classes):
            ii = self.iiou_per_class.get(c, float("nan"))
            rows.append((str(c), f"{self.iou_per_class[c]:.6f}",
                         f"{self.tiou_per_class[c]:.6f}", f"{ii:.6f}"))
        rows.append(("mean", f"{self.mean_iou:.6f}", f"{self.mean_tiou:.6f}",
                     f"{self.mean_iiou:.6f}"))
        return rows

    def to_text(self):
        lines = [f"{'class':>6} {'iou':>10} {'tiou':>10} {'iiou':>10}"]
        for row in self.csv_rows()[1:]:
            lines.append(f"{row[0]:>6} {row[1]:>10} {row[2]:>10} {row[3]:>10}")
        if not self.tiou_defined:
            lines.append("tiou: undefined (no ground-truth label boundaries)")
        return "\n".join(lines)


def evaluate_frames(preds, gt_labels, gt_instances, num_classes, instance_classes,
                    class_avg_sizes=None, band_px=2, ignore_label=IGNORE_LABEL):
    """Full per-split report from lists of prediction/ground-truth frames."""
    preds = _as_frame_list(preds)
    gt_labels = _as_frame_list(gt_labels)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gt_labels):
        conf += confusion_matrix(p, g, num_classes, ignore_label)
    iou_pc, miou = iou_from_confusion(conf)
    tconf, tempty = trimap_confusion(preds, gt_labels, num_classes, band_px, ignore_label)
    if tempty:
        tiou_pc = np.full(num_classes, np.nan)
        mtiou = float("nan")
    else:
        tiou_pc, mtiou = iou_from_confusion(tconf)
    if instance_classes and gt_instances is not None:
        if class_avg_sizes is None:
            class_avg_sizes = compute_class_avg_sizes(gt_labels, gt_instances,
                                                      instance_classes)
        iiou_pc, miiou = iiou(preds, gt_labels, gt_instances, instance_classes,
                              class_avg_sizes, ignore_label)
    else:
        iiou_pc, miiou = {}, float("nan")
    return MetricsReport(num_classes, conf, iou_pc, miou, tiou_pc, mtiou,
                         not tempty, iiou_pc, miiou)
