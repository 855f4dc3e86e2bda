"""Detection decoding, greedy NMS, and average-precision evaluation.

AP is computed per class and IoU threshold with all-point interpolation:
detections are pooled over the whole dataset, sorted by score, matched
greedily to ground truth within their image, and the area under the
monotone precision envelope is summed over recall increments.  AP50-95 is
the mean over thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import detector as det

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

__all__ = [
    "Detection",
    "EvalResult",
    "box_iou",
    "decode_level",
    "decode_output",
    "greedy_nms",
    "average_precision",
    "evaluate_outputs",
    "run_model",
    "evaluate_model",
]


@dataclass(frozen=True)
class Detection:
    """One decoded box: center-format pixels plus class and confidence."""

    box: tuple  # (cx, cy, w, h)
    class_id: int
    score: float


@dataclass
class EvalResult:
    per_class_ap50: dict
    mean_ap50: float
    mean_ap75: float
    mean_ap50_95: float


def box_iou(a, b) -> float:
    """IoU of two center-format boxes."""
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def decode_level(class_logits, box_offsets, stride, score_threshold):
    """Decode one level's (C, H, W) logits and (4, H, W) offsets."""
    scores = 1.0 / (1.0 + np.exp(-class_logits))
    class_ids, rows, cols = np.nonzero(scores >= score_threshold)
    out = []
    for c, r, col in zip(class_ids, rows, cols):
        tx, ty, tw, th = box_offsets[:, r, col]
        box = ((col + tx) * stride, (r + ty) * stride, tw * stride, th * stride)
        out.append(Detection(box, int(c), float(scores[c, r, col])))
    return out


def decode_output(class_logits_levels, box_offsets_levels, strides,
                  score_threshold=0.001, top_k=100):
    """Decode one image's multi-level output; keep the top_k by score."""
    dets = []
    for logits, offsets, stride in zip(class_logits_levels, box_offsets_levels,
                                       strides):
        dets.extend(decode_level(logits, offsets, stride, score_threshold))
    dets.sort(key=lambda d: -d.score)
    return dets[:top_k]


def greedy_nms(detections, iou_threshold=0.5):
    """Per-class greedy suppression, highest score first."""
    kept = []
    by_class = {}
    for d in detections:
        by_class.setdefault(d.class_id, []).append(d)
    for class_id in sorted(by_class):
        pool = sorted(by_class[class_id], key=lambda d: -d.score)
        while pool:
            best = pool.pop(0)
            kept.append(best)
            pool = [d for d in pool if box_iou(best.box, d.box) <= iou_threshold]
    kept.sort(key=lambda d: -d.score)
    return kept


def average_precision(dets_by_image, gts_by_image, iou_threshold):
    """AP for one class.

    ``dets_by_image``: per image, a list of (score, box); ``gts_by_image``:
    per image, a list of boxes.  Returns None when the class has no ground
    truth anywhere (undefined rather than zero).
    """
    total_gt = sum(len(g) for g in gts_by_image)
    if total_gt == 0:
        return None
    order = []
    for img, dets in enumerate(dets_by_image):
        for idx, (score, box) in enumerate(dets):
            order.append((-score, img, idx, box))
    order.sort()
    matched = [set() for _ in gts_by_image]
    tp = np.zeros(len(order))
    for k, (neg_score, img, idx, box) in enumerate(order):
        best_iou, best_gt = iou_threshold, None
        for gi, gt_box in enumerate(gts_by_image[img]):
            if gi in matched[img]:
                continue
            iou = box_iou(box, gt_box)
            if iou >= best_iou:
                best_iou, best_gt = iou, gi
        if best_gt is not None:
            matched[img].add(best_gt)
            tp[k] = 1.0
    if not len(order):
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / total_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # monotone envelope from the right, then sum over recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


def evaluate_outputs(decoded_by_image, samples, class_count) -> EvalResult:
    """Score already-decoded detections against sample annotations."""
    per_threshold_means = []
    ap50_by_class = {}
    ap75_mean = 0.0
    for threshold in IOU_THRESHOLDS:
        per_class = []
        for class_id in range(class_count):
            dets = [
                [(d.score, d.box) for d in dets if d.class_id == class_id]
                for dets in decoded_by_image
            ]
            gts = [
                [b for b, c in zip(s.boxes, s.classes) if c == class_id]
                for s in samples
            ]
            ap = average_precision(dets, gts, threshold)
            if ap is not None:
                per_class.append((class_id, ap))
        mean = float(np.mean([ap for _, ap in per_class])) if per_class else 0.0
        per_threshold_means.append(mean)
        if threshold == 0.5:
            ap50_by_class = {cid: ap for cid, ap in per_class}
        if threshold == 0.75:
            ap75_mean = mean
    return EvalResult(
        per_class_ap50=ap50_by_class,
        mean_ap50=per_threshold_means[0],
        mean_ap75=ap75_mean,
        mean_ap50_95=float(np.mean(per_threshold_means)),
    )


def _forward_numpy(model, batch_m1, batch_m2):
    """Fusion-head (or unimodal-head) outputs as numpy, no tape."""
    with ad.no_grad():
        if isinstance(model, det.DualBranchDetector):
            out = model.forward(ad.Tensor(batch_m1), ad.Tensor(batch_m2))[0]
        else:
            out = model.forward(ad.Tensor(batch_m1))
    return ([t.data for t in out.class_logits], [t.data for t in out.box_offsets])


def run_model(model, samples, modality="m1", batch_size=16,
              score_threshold=0.001, nms_iou=0.5, top_k=100):
    """Decode + NMS the model's detections for every sample."""
    strides = model.config.strides
    decoded = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        m1 = np.stack([s.image_m1 for s in chunk])[:, None, :, :]
        m2 = np.stack([s.image_m2 for s in chunk])[:, None, :, :]
        if isinstance(model, det.UnimodalDetector):
            primary = m1 if modality == "m1" else m2
            logits, offsets = _forward_numpy(model, primary, None)
        else:
            logits, offsets = _forward_numpy(model, m1, m2)
        for i in range(len(chunk)):
            dets = decode_output(
                [lv[i] for lv in logits], [lv[i] for lv in offsets],
                strides, score_threshold, top_k=10 * top_k)
            decoded.append(greedy_nms(dets, nms_iou)[:top_k])
    return decoded


def evaluate_model(model, samples, modality="m1", batch_size=16) -> EvalResult:
    """Forward + decode + AP in one call."""
    if model.config.class_count < 1:
        raise ValueError("model has no classes to evaluate")
    decoded = run_model(model, samples, modality=modality, batch_size=batch_size)
    return evaluate_outputs(decoded, samples, model.config.class_count)
