"""Candidate generation, label assignment and interval encode/decode.

Candidates are flattened level by level, location-major within a level and
anchor-minor within a location. Geometry is in seconds relative to the clip
start unless ``fps`` is 1, in which case it is in frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ActionInstance, Interval, as_bounds, tiou_matrix

ANCHOR_SCALES = 2.0 ** (np.arange(5) / 5.0)

NEGATIVE = -1
IGNORED = -2


@dataclass
class AnchorSet:
    strides: list[int]
    anchors: list[np.ndarray]  # per level, (T_l * A, 2)
    scales: np.ndarray
    base_factor: float
    fps: float = 1.0

    @property
    def num_per_location(self) -> int:
        return len(self.scales)

    def all(self) -> np.ndarray:
        return np.concatenate(self.anchors, axis=0)

    def __len__(self):
        return sum(len(a) for a in self.anchors)


@dataclass
class PointSet:
    strides: list[int]
    locations: list[np.ndarray]  # per level, (T_l,)
    borders: tuple  # range borders in range units, len == levels + 1
    unit: float  # seconds (or frames) per range unit
    fps: float = 1.0

    def all(self) -> np.ndarray:
        return np.concatenate(self.locations)

    def level_units(self) -> np.ndarray:
        """Per-candidate decode unit: the level stride in geometry units."""
        return np.concatenate([np.full(len(x), s / self.fps) for x, s in zip(self.locations, self.strides)])

    def level_index(self) -> np.ndarray:
        return np.concatenate([np.full(len(x), i) for i, x in enumerate(self.locations)])

    def __len__(self):
        return sum(len(x) for x in self.locations)


@dataclass
class AssignmentResult:
    """``labels[i]`` is the class id for positives, NEGATIVE or IGNORED otherwise."""

    labels: np.ndarray
    gt_index: np.ndarray
    targets: np.ndarray  # (N, 2); rows of non-positives are zero

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORED

    @property
    def num_positives(self) -> int:
        return int(self.positive.sum())


def level_lengths(clip_len: int, strides) -> list[int]:
    return [-(-clip_len // s) for s in strides]


def generate_anchors(level_strides, clip_len: int, base_factor: float = 2.0,
                     fps: float = 1.0, scales=ANCHOR_SCALES) -> AnchorSet:
    """Anchors of length ``base_factor * s_l * scale`` centred at ``(i + 0.5) * s_l``."""
    scales = np.asarray(scales, dtype=np.float64)
    anchors = []
    for s, t in zip(level_strides, level_lengths(clip_len, level_strides)):
        centers = (np.arange(t) + 0.5) * s
        lengths = base_factor * s * scales
        c = np.repeat(centers, len(scales))
        ln = np.tile(lengths, t)
        anchors.append(np.stack([c - ln / 2, c + ln / 2], axis=1) / fps)
    return AnchorSet(list(level_strides), anchors, scales, base_factor, fps)


def generate_points(level_strides, clip_len: int, borders, fps: float = 1.0) -> PointSet:
    if len(borders) != len(level_strides) + 1:
        raise ValueError(f"{len(level_strides)} levels need {len(level_strides) + 1} range borders")
    locs = [(np.arange(t) + 0.5) * s / fps
            for s, t in zip(level_strides, level_lengths(clip_len, level_strides))]
    return PointSet(list(level_strides), locs, tuple(borders), level_strides[0] / fps, fps)


def _gt_arrays(gts):
    if isinstance(gts, tuple) and len(gts) == 2 and isinstance(gts[0], np.ndarray):
        return as_bounds(gts[0]), np.asarray(gts[1], dtype=np.int64)
    gts = list(gts)
    if not gts:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    if isinstance(gts[0], ActionInstance):
        return (as_bounds([g.interval for g in gts]),
                np.array([g.class_id for g in gts], dtype=np.int64))
    raise TypeError("gts must be ActionInstances or a (bounds, classes) pair")


def assign_anchor_based(anchors, gts, hi: float = 0.6, lo: float = 0.4,
                        force_best: bool = True) -> AssignmentResult:
    """tIoU >= hi positive, < lo negative, otherwise ignored.

    With ``force_best`` every gt also claims its highest-tIoU anchor (lowest
    index on ties, later gts override earlier ones) provided that tIoU is > 0.
    """
    a = anchors.all() if isinstance(anchors, AnchorSet) else as_bounds(anchors)
    g, cls = _gt_arrays(gts)
    n = len(a)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 2))
    if len(g) == 0 or n == 0:
        return AssignmentResult(labels, gt_index, targets)
    iou = tiou_matrix(a, g)
    best_gt = iou.argmax(axis=1)
    best = iou[np.arange(n), best_gt]
    labels[best >= lo] = IGNORED
    pos = best >= hi
    gt_index[pos] = best_gt[pos]
    if force_best:
        col_best = iou.argmax(axis=0)
        for j, i in enumerate(col_best):
            if iou[i, j] > 0:
                gt_index[i] = j
                pos[i] = True
    labels[pos] = cls[gt_index[pos]]
    targets[pos] = g[gt_index[pos]]
    return AssignmentResult(labels, gt_index, targets)


def assign_anchor_free(points: PointSet, gts) -> AssignmentResult:
    """A location is positive for the shortest gt that strictly contains it and
    whose larger boundary offset (in range units) falls in the level's range."""
    g, cls = _gt_arrays(gts)
    x = points.all()
    lvl = points.level_index()
    n = len(x)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 2))
    if len(g) == 0 or n == 0:
        return AssignmentResult(labels, gt_index, targets)
    borders = np.asarray(points.borders, dtype=np.float64)
    left = x[:, None] - g[None, :, 0]
    right = g[None, :, 1] - x[:, None]
    inside = (left > 0) & (right > 0)
    reach = np.maximum(left, right) / points.unit
    lo_b = borders[lvl][:, None]
    hi_b = borders[lvl + 1][:, None]
    ok = inside & (reach > lo_b) & (reach <= hi_b)
    length = np.where(ok, (g[:, 1] - g[:, 0])[None, :], np.inf)
    choice = length.argmin(axis=1)
    pos = ok.any(axis=1)
    gt_index[pos] = choice[pos]
    labels[pos] = cls[choice[pos]]
    targets[pos] = g[choice[pos]]
    return AssignmentResult(labels, gt_index, targets)


# encode / decode -------------------------------------------------------------------

def encode_anchors(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    a_c = anchors.mean(axis=1)
    a_l = anchors[:, 1] - anchors[:, 0]
    g_c = gt.mean(axis=1)
    g_l = gt[:, 1] - gt[:, 0]
    return np.stack([(g_c - a_c) / a_l, np.log(g_l / a_l)], axis=1)


def decode_anchors(anchors: np.ndarray, deltas: np.ndarray, clip_duration: float | None = None) -> np.ndarray:
    """Centre/log-length offsets to ``(N, 2)`` bounds, optionally clamped to the clip."""
    a_c = anchors.mean(axis=1)
    a_l = anchors[:, 1] - anchors[:, 0]
    c = a_c + deltas[:, 0] * a_l
    ln = a_l * np.exp(deltas[:, 1])
    out = np.stack([c - ln / 2, c + ln / 2], axis=1)
    if clip_duration is not None:
        out = np.clip(out, 0.0, clip_duration)
    return out


def decode_anchor(anchor: Interval, t_c: float, t_l: float, clip_duration: float | None = None) -> Interval:
    out = decode_anchors(as_bounds([anchor]), np.array([[t_c, t_l]]), clip_duration)[0]
    return Interval(float(out[0]), float(out[1]))


def encode_points(gt: np.ndarray, x: np.ndarray, unit) -> np.ndarray:
    unit = np.broadcast_to(np.asarray(unit, dtype=np.float64), np.shape(x))
    return np.stack([np.log((x - gt[:, 0]) / unit), np.log((gt[:, 1] - x) / unit)], axis=1)


def decode_points(x: np.ndarray, raw: np.ndarray, unit, clip_duration: float | None = None) -> np.ndarray:
    """``[x - exp(raw_l) * unit, x + exp(raw_r) * unit]`` for each location."""
    unit = np.asarray(unit, dtype=np.float64)
    out = np.stack([x - np.exp(raw[:, 0]) * unit, x + np.exp(raw[:, 1]) * unit], axis=1)
    if clip_duration is not None:
        out = np.clip(out, 0.0, clip_duration)
    return out


def decode_point(x: float, raw_l: float, raw_r: float, unit: float = 1.0,
                 clip_duration: float | None = None) -> Interval:
    out = decode_points(np.array([x]), np.array([[raw_l, raw_r]]), unit, clip_duration)[0]
    return Interval(float(out[0]), float(out[1]))


def clip_gts(bounds: np.ndarray, classes: np.ndarray, start: float, end: float,
             min_coverage: float = 0.75) -> tuple[np.ndarray, np.ndarray]:
    """Clip gts to a window and shift to window time; drop gts with less than
    ``min_coverage`` of their length inside the window."""
    if len(bounds) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    s = np.maximum(bounds[:, 0], start)
    e = np.minimum(bounds[:, 1], end)
    keep = (e - s) >= min_coverage * (bounds[:, 1] - bounds[:, 0]) - 1e-12
    keep &= e > s
    return np.stack([s[keep] - start, e[keep] - start], axis=1), classes[keep]



class CandidateGrid:
    """Candidate geometry for one clip layout plus the reshaping between head
    outputs and flat per-candidate arrays."""

    def __init__(self, head_cfg, strides, clip_len: int, fps: float):
        from .network import HeadKind

        self.anchor_based = head_cfg.kind is HeadKind.ANCHOR_BASED
        self.num_classes = head_cfg.num_classes
        self.clip_len = clip_len
        self.fps = fps
        self.clip_duration = clip_len / fps
        self.strides = list(strides)
        self.head_cfg = head_cfg
        if self.anchor_based:
            a = head_cfg.num_anchors
            self.anchors = generate_anchors(strides, clip_len, head_cfg.anchor_base, fps,
                                            2.0 ** (np.arange(a) / a))
            self.geometry = self.anchors.all()
            self.per_location = head_cfg.num_anchors
        else:
            self.points = generate_points(strides, clip_len, head_cfg.range_borders, fps)
            self.geometry = self.points.all()
            self.units = self.points.level_units()
            self.per_location = 1
        self.lengths = level_lengths(clip_len, strides)

    def __len__(self):
        return len(self.geometry)

    def assign(self, bounds: np.ndarray, classes: np.ndarray) -> AssignmentResult:
        hc = self.head_cfg
        if self.anchor_based:
            return assign_anchor_based(self.geometry, (bounds, classes), hc.pos_tiou, hc.neg_tiou,
                                       hc.force_best_anchor)
        return assign_anchor_free(self.points, (bounds, classes))

    def decode(self, reg: np.ndarray, clip: bool = False, mask=None) -> np.ndarray:
        """Bounds for raw regressions of all candidates, or of ``mask``-selected ones."""
        dur = self.clip_duration if clip else None
        geo = self.geometry if mask is None else self.geometry[mask]
        if self.anchor_based:
            return decode_anchors(geo, reg, dur)
        units = self.units if mask is None else self.units[mask]
        return decode_points(geo, reg, units, dur)

    def decode_backward(self, reg: np.ndarray, g_bounds: np.ndarray, mask=None) -> np.ndarray:
        """Gradient w.r.t. raw regression given the gradient w.r.t. unclamped bounds."""
        gs, ge = g_bounds[:, 0], g_bounds[:, 1]
        geo = self.geometry if mask is None else self.geometry[mask]
        if self.anchor_based:
            a_l = geo[:, 1] - geo[:, 0]
            length = a_l * np.exp(reg[:, 1])
            return np.stack([(gs + ge) * a_l, 0.5 * (ge - gs) * length], axis=1)
        u = self.units if mask is None else self.units[mask]
        return np.stack([-gs * np.exp(reg[:, 0]) * u, ge * np.exp(reg[:, 1]) * u], axis=1)

    def flatten(self, tensors, width: int) -> np.ndarray:
        """Per-level ``(B, A * width, T_l)`` arrays to ``(B, N, width)``."""
        parts = []
        a = self.per_location
        for t in tensors:
            d = t if isinstance(t, np.ndarray) else t.data
            b, _, n_t = d.shape
            parts.append(d.reshape(b, a, width, n_t).transpose(0, 3, 1, 2).reshape(b, n_t * a, width))
        return np.concatenate(parts, axis=1)

    def unflatten(self, flat: np.ndarray, width: int) -> list[np.ndarray]:
        out, pos = [], 0
        a = self.per_location
        b = flat.shape[0]
        for n_t in self.lengths:
            chunk = flat[:, pos:pos + n_t * a]
            pos += n_t * a
            out.append(np.ascontiguousarray(
                chunk.reshape(b, n_t, a, width).transpose(0, 2, 3, 1).reshape(b, a * width, n_t)))
        return out
