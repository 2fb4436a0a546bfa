"""Occlusion-stratified evaluation of amodal detections.

Metrics follow the detection-evaluation convention: greedy score-ordered
matching per sample at each IoU threshold, precision interpolated on a fixed
recall grid (monotone, max-to-the-right), AP averaged over thresholds and
classes. AR is the mean recall over thresholds and classes with a per-sample
detection budget; stratified variants count only ground truth of one
occlusion category while matching stays category-blind (detections cannot
see categories, and this keeps single-category datasets consistent with the
unstratified value).

IoU is computed on amodal masks by default; visible-only IoU is available
for diagnostics via ``mask_mode="visible"``.

Ties: detections sort by (score desc, instance_id asc) within a sample and
by (score desc, sample index, within-sample rank) across the pooled dataset,
so results are independent of input ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .scenegen import occlusion_category

CATEGORIES = ("none", "partial", "heavy")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    max_detections: int = 100
    recall_points: int = 101
    t_partial_max: float = 0.25
    mask_mode: str = "amodal"  # or "visible" for diagnostics

    def __post_init__(self):
        t = self.iou_thresholds
        if not t or any(b <= a for a, b in zip(t, t[1:])) or t[0] <= 0 or t[-1] > 1:
            raise ValueError("iou_thresholds must be strictly increasing in (0, 1]")
        if self.mask_mode not in ("amodal", "visible"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")


@dataclass(frozen=True)
class GtInstance:
    class_id: int
    amodal_mask: np.ndarray
    occlusion_fraction: float
    visible_mask: Optional[np.ndarray] = None


@dataclass
class EvalReport:
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ar100: Optional[float]
    ar_none: Optional[float]
    ar_partial: Optional[float]
    ar_heavy: Optional[float]
    per_class: dict = field(default_factory=dict)
    gt_category_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
            "AR100": self.ar100, "AR_None": self.ar_none,
            "AR_Partial": self.ar_partial, "AR_Heavy": self.ar_heavy,
            "per_class": self.per_class,
            "gt_category_counts": self.gt_category_counts,
        }


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dimension mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def match_detections(detections: Sequence, gts: Sequence, iou_threshold: float,
                     iou_matrix: Optional[np.ndarray] = None):
    """Greedy class-aware matching of score-sorted detections to ground truth.

    Each detection, in order, takes the highest-IoU unmatched same-class GT
    with IoU >= threshold (ties to the lowest GT index). Returns
    (det_to_gt: (nd,) int with -1 for false positives, gt_matched: (ng,) bool).
    """
    nd, ng = len(detections), len(gts)
    if iou_matrix is None:
        iou_matrix = np.zeros((nd, ng))
        for i, det in enumerate(detections):
            for j, gt in enumerate(gts):
                if det.class_id == gt.class_id:
                    iou_matrix[i, j] = mask_iou(det.amodal_mask, gt.amodal_mask)
    same_class = np.array(
        [[det.class_id == gt.class_id for gt in gts] for det in detections]
    ).reshape(nd, ng) if nd and ng else np.zeros((nd, ng), dtype=bool)

    det_to_gt = np.full(nd, -1, dtype=np.int64)
    gt_matched = np.zeros(ng, dtype=bool)
    for i in range(nd):
        candidates = same_class[i] & ~gt_matched & (iou_matrix[i] >= iou_threshold)
        if not candidates.any():
            continue
        row = np.where(candidates, iou_matrix[i], -1.0)
        j = int(row.argmax())  # argmax takes the first (lowest) index on ties
        det_to_gt[i] = j
        gt_matched[j] = True
    return det_to_gt, gt_matched


def _det_masks(det, mode: str):
    if mode == "visible":
        mask = getattr(det, "fg_mask", None)
        if mask is None:
            raise ValueError("visible-mask evaluation needs detections with fg_mask")
        return mask
    return det.amodal_mask


def _gt_masks(gt: GtInstance, mode: str):
    if mode == "visible":
        if gt.visible_mask is None:
            raise ValueError("visible-mask evaluation needs GT visible masks")
        return gt.visible_mask
    return gt.amodal_mask


def _interp_precision(tp_sorted: np.ndarray, n_gt: int, recall_points: int) -> np.ndarray:
    """Monotone interpolated precision sampled on the fixed recall grid."""
    grid = np.linspace(0.0, 1.0, recall_points)
    if len(tp_sorted) == 0 or n_gt == 0:
        return np.zeros(recall_points)
    cum_tp = np.cumsum(tp_sorted)
    ranks = np.arange(1, len(tp_sorted) + 1)
    recall = cum_tp / n_gt
    precision = cum_tp / ranks
    p_monotone = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, grid, side="left")
    out = np.zeros(recall_points)
    valid = idx < len(p_monotone)
    out[valid] = p_monotone[idx[valid]]
    return out


class _ClassAccumulator:
    """Pooled per-class matching state across the dataset."""

    def __init__(self, n_thresholds: int):
        self.det_keys = []    # (neg score, sample_idx, rank) for global ordering
        self.det_tp = [[] for _ in range(n_thresholds)]
        self.gt_cats = []
        self.gt_matched = [[] for _ in range(n_thresholds)]

    def n_gt(self) -> int:
        return len(self.gt_cats)


def evaluate(predictions: Sequence[Sequence], ground_truths: Sequence[Sequence[GtInstance]],
             config: EvalConfig = EvalConfig()) -> EvalReport:
    """Full dataset evaluation; deterministic and order-independent.

    ``predictions[i]`` are the detections for sample i (objects with
    class_id, score, amodal_mask and optionally instance_id / fg_mask);
    ``ground_truths[i]`` the GtInstance list for the same sample.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError(
            f"sample count mismatch: {len(predictions)} predictions vs "
            f"{len(ground_truths)} ground-truth samples"
        )
    thresholds = config.iou_thresholds
    classes = sorted({gt.class_id for gts in ground_truths for gt in gts})
    acc = {k: _ClassAccumulator(len(thresholds)) for k in classes}

    for sample_idx, (dets, gts) in enumerate(zip(predictions, ground_truths)):
        for k in classes:
            dets_k = [d for d in dets if d.class_id == k]
            dets_k.sort(key=lambda d: (-d.score, getattr(d, "instance_id", 0)))
            dets_k = dets_k[:config.max_detections]
            gts_k = [g for g in gts if g.class_id == k]
            a = acc[k]
            a.gt_cats.extend(
                occlusion_category(g.occlusion_fraction, config.t_partial_max)
                for g in gts_k
            )
            nd, ng = len(dets_k), len(gts_k)
            iou = np.zeros((nd, ng))
            for i, det in enumerate(dets_k):
                dmask = _det_masks(det, config.mask_mode)
                for j, gt in enumerate(gts_k):
                    iou[i, j] = mask_iou(dmask, _gt_masks(gt, config.mask_mode))
            for t_idx, tau in enumerate(thresholds):
                det_to_gt, gt_matched = match_detections(dets_k, gts_k, tau, iou)
                a.det_tp[t_idx].extend((det_to_gt >= 0).tolist())
                a.gt_matched[t_idx].extend(gt_matched.tolist())
            a.det_keys.extend(
                (-d.score, sample_idx, rank) for rank, d in enumerate(dets_k)
            )

    # reduce
    per_class = {}
    cat_counts = {c: 0 for c in CATEGORIES}
    ap_all, ap50_all, ap75_all, ar_all = [], [], [], []
    ar_cat_all = {c: [] for c in CATEGORIES}
    t50 = thresholds.index(0.5) if 0.5 in thresholds else None
    t75 = thresholds.index(0.75) if 0.75 in thresholds else None

    for k in classes:
        a = acc[k]
        n_gt = a.n_gt()
        if n_gt == 0:
            continue
        cats = np.array(a.gt_cats)
        for c in CATEGORIES:
            cat_counts[c] += int((cats == c).sum())
        order = sorted(range(len(a.det_keys)), key=lambda i: a.det_keys[i])
        ap_t = np.zeros(len(thresholds))
        recall_t = np.zeros(len(thresholds))
        recall_cat_t = {c: np.zeros(len(thresholds)) for c in CATEGORIES}
        for t_idx in range(len(thresholds)):
            tp_sorted = np.array(a.det_tp[t_idx], dtype=np.float64)[order] \
                if order else np.zeros(0)
            ap_t[t_idx] = _interp_precision(tp_sorted, n_gt, config.recall_points).mean()
            matched = np.array(a.gt_matched[t_idx], dtype=bool)
            recall_t[t_idx] = matched.sum() / n_gt
            for c in CATEGORIES:
                sel = cats == c
                if sel.any():
                    recall_cat_t[c][t_idx] = matched[sel].sum() / sel.sum()
        entry = {
            "AP": float(ap_t.mean()),
            "AP50": float(ap_t[t50]) if t50 is not None else None,
            "AP75": float(ap_t[t75]) if t75 is not None else None,
            "AR100": float(recall_t.mean()),
            "num_gt": n_gt,
        }
        ap_all.append(entry["AP"])
        if t50 is not None:
            ap50_all.append(entry["AP50"])
        if t75 is not None:
            ap75_all.append(entry["AP75"])
        ar_all.append(entry["AR100"])
        for c in CATEGORIES:
            if (cats == c).any():
                value = float(recall_cat_t[c].mean())
                ar_cat_all[c].append(value)
                entry[f"AR_{c}"] = value
        per_class[int(k)] = entry

    def _mean(values):
        return float(np.mean(values)) if values else None

    return EvalReport(
        ap=_mean(ap_all), ap50=_mean(ap50_all), ap75=_mean(ap75_all),
        ar100=_mean(ar_all),
        ar_none=_mean(ar_cat_all["none"]),
        ar_partial=_mean(ar_cat_all["partial"]),
        ar_heavy=_mean(ar_cat_all["heavy"]),
        per_class=per_class,
        gt_category_counts=cat_counts,
    )


def gt_instances_from_sample(sample) -> list[GtInstance]:
    """Ground-truth records for one DatasetSample (amodal masks are indexed
    in scene instance order)."""
    rendered = sample.rendered
    gts = []
    for inst in sample.scene.instances:
        i = inst.instance_id
        gts.append(GtInstance(
            class_id=inst.class_id,
            amodal_mask=rendered.amodal_masks[i],
            occlusion_fraction=float(rendered.occlusion_fraction[i]),
            visible_mask=rendered.fg_instance == i + 1,
        ))
    return gts
