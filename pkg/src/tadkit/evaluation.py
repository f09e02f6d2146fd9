"""Mean average precision over temporal IoU thresholds."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import ConfigError, DataError, Detection, VideoAnnotation, tiou_matrix

THUMOS_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
ANET_THRESHOLDS = (0.5, 0.75, 0.95)


@dataclass
class EvalConfig:
    tiou_thresholds: tuple = THUMOS_THRESHOLDS
    interpolation: str = "all-point"

    def validate(self):
        t = list(self.tiou_thresholds)
        if not t or any(not 0 < x <= 1 for x in t) or any(a >= b for a, b in zip(t, t[1:])):
            raise ConfigError("tIoU thresholds must be strictly increasing within (0, 1]")
        if self.interpolation != "all-point":
            raise ConfigError(f"unsupported interpolation {self.interpolation!r}")


@dataclass
class EvalResult:
    thresholds: list[float]
    ap: dict[int, list[float]]  # class -> AP per threshold (classes without gts omitted)
    map: list[float] = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean(self.map)) if self.map else 0.0

    def map_at(self, thr: float) -> float:
        for t, m in zip(self.thresholds, self.map):
            if abs(t - thr) < 1e-12:
                return m
        raise KeyError(thr)

    def table(self) -> str:
        lines = ["tIoU   mAP"]
        lines += [f"{t:<6.2f} {m:.4f}" for t, m in zip(self.thresholds, self.map)]
        lines.append(f"{'Avg':<6} {self.average:.4f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "mAP": [round(float(m), 12) for m in self.map],
            "Avg": round(self.average, 12),
            "per_class_AP": {str(c): [round(float(a), 12) for a in v] for c, v in sorted(self.ap.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision-recall curve after making precision
    non-increasing from the right."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    prec = np.concatenate([[0.0], precision, [0.0]])
    rec = np.concatenate([[0.0], recall, [recall[-1]]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.flatnonzero(rec[1:] != rec[:-1]) + 1
    return float(np.sum((rec[steps] - rec[steps - 1]) * prec[steps]))


def match_and_ap(dets: Sequence[tuple[str, float, float, float]],
                 gts: Mapping[str, np.ndarray], thr: float) -> float:
    """AP of one class at one tIoU threshold.

    ``dets`` are ``(video_id, start, end, score)``; ``gts`` maps video id to an
    ``(n, 2)`` array of that class's gt bounds. Detections are ranked by
    descending score, then earlier start, then input order; each takes the
    highest-tIoU gt still unmatched in its video (lowest index on ties).
    """
    n_gt = sum(len(g) for g in gts.values())
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if not dets:
        return 0.0
    scores = np.array([d[3] for d in dets], dtype=np.float64)
    starts = np.array([d[1] for d in dets], dtype=np.float64)
    order = np.lexsort((np.arange(len(dets)), starts, -scores))
    used = {vid: np.zeros(len(g), dtype=bool) for vid, g in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        vid, s, e, _ = dets[i]
        g = gts.get(vid)
        if g is None or len(g) == 0:
            continue
        row = tiou_matrix(np.array([[s, e]]), g)[0]
        row = np.where(used[vid], -1.0, row)
        j = int(np.argmax(row))
        if row[j] >= thr:
            used[vid][j] = True
            tp[rank] = 1.0
    return interpolated_ap(tp, n_gt)


def evaluate(dets: Mapping[str, Sequence[Detection]], annotations: Sequence[VideoAnnotation],
             cfg: EvalConfig | None = None) -> EvalResult:
    cfg = cfg or EvalConfig()
    cfg.validate()
    known = {a.video_id for a in annotations}
    for vid in dets:
        if vid not in known:
            raise DataError(f"detections reference unknown video {vid!r}")
    gt_by_class: dict[int, dict[str, np.ndarray]] = {}
    for a in annotations:
        for inst in a.instances:
            gt_by_class.setdefault(inst.class_id, {}).setdefault(a.video_id, []).append(
                (inst.interval.start, inst.interval.end))
    gt_by_class = {c: {v: np.array(b, dtype=np.float64) for v, b in d.items()}
                   for c, d in gt_by_class.items()}
    det_by_class: dict[int, list] = {}
    for vid in sorted(dets):
        for d in dets[vid]:
            det_by_class.setdefault(d.class_id, []).append((vid, d.interval.start, d.interval.end, d.score))
    thresholds = [float(t) for t in cfg.tiou_thresholds]
    ap = {}
    for c in sorted(gt_by_class):
        ap[c] = [match_and_ap(det_by_class.get(c, []), gt_by_class[c], t) for t in thresholds]
    if ap:
        maps = [float(np.mean([ap[c][k] for c in ap])) for k in range(len(thresholds))]
    else:
        maps = [0.0 for _ in thresholds]
    return EvalResult(thresholds, ap, maps)
