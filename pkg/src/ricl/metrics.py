"""mAP@0.5 with all-point interpolation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detector import Detection, box_iou


@dataclass
class GroundTruth:
    box: tuple[float, float, float, float]
    class_id: int


@dataclass
class EvalRecord:
    """Per class, the ranked (score, is_tp) list and the number of ground-truth boxes."""

    scored: dict[int, list[tuple[float, bool]]] = field(default_factory=dict)
    n_gt: dict[int, int] = field(default_factory=dict)

    def ap(self, class_id: int) -> float:
        return average_precision(self.scored.get(class_id, []), self.n_gt.get(class_id, 0))


def average_precision(scored: Sequence[tuple[float, bool]], n_gt: int) -> float:
    """Area under the precision envelope of a ranked list (already in rank order)."""
    if n_gt == 0:
        return float("nan")
    if not scored:
        return 0.0
    tp = np.array([t for _, t in scored], dtype=np.float64)
    ctp, cfp = np.cumsum(tp), np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def match_detections(detections: Mapping[int, Sequence[Detection]], ground_truth: Mapping[int, Sequence[GroundTruth]],
                     iou_thresh: float = 0.5) -> EvalRecord:
    """Greedy per-class matching in global score order.

    Ties in score are broken by frame id, then by the detection's index in its frame.
    """
    rec = EvalRecord()
    for gts in ground_truth.values():
        for g in gts:
            rec.n_gt[g.class_id] = rec.n_gt.get(g.class_id, 0) + 1
    ranked = sorted(
        ((d.score, fid, i, d) for fid, dets in detections.items() for i, d in enumerate(dets)),
        key=lambda r: (-r[0], r[1], r[2]),
    )
    used: dict[int, np.ndarray] = {fid: np.zeros(len(g), bool) for fid, g in ground_truth.items()}
    for score, fid, _, d in ranked:
        gts = ground_truth.get(fid, [])
        cand = [j for j, g in enumerate(gts) if g.class_id == d.class_id]
        hit = False
        if cand:
            ious = box_iou(d.box, [gts[j].box for j in cand])[0]
            for k in np.argsort(-ious, kind="stable"):
                if ious[k] < iou_thresh:
                    break
                if not used[fid][cand[k]]:
                    used[fid][cand[k]] = True
                    hit = True
                    break
        rec.scored.setdefault(d.class_id, []).append((score, hit))
    for fid, u in used.items():
        assert u.sum() <= len(ground_truth[fid])
    return rec


def map50(detections: Mapping[int, Sequence[Detection]],
          ground_truth: Mapping[int, Sequence[GroundTruth]]) -> tuple[dict[int, float], float]:
    """Per-class AP and their mean over classes with at least one ground truth box.

    Returns 0.0 as mAP when no class has ground truth.
    """
    rec = match_detections(detections, ground_truth, 0.5)
    per_class = {c: rec.ap(c) for c in sorted(rec.n_gt) if rec.n_gt[c] > 0}
    if not per_class:
        return {}, 0.0
    return per_class, float(np.mean(list(per_class.values())))
