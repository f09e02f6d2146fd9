"""Sliding-window detection, test-time view fusion and duplicate suppression."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffkernels as dk
from .core import ConfigError, DataError, Detection, Interval, as_bounds, tiou_matrix
from .network import HeadKind, PyramidOutput, TADNet
from .targets import CandidateGrid
from .trainer import crop_frames


class FusionStage(str, Enum):
    BACKBONE = "BACKBONE"
    NECK = "NECK"
    HEAD = "HEAD"
    POST = "POST"


class Suppressor(str, Enum):
    NMS = "NMS"
    NMW = "NMW"


@dataclass
class PostConfig:
    score_floor: float = 0.005
    nms_tiou: float = 0.5
    suppressor: Suppressor | None = None  # None: NMW for anchor-based, NMS for anchor-free
    max_detections: int = 200

    def __post_init__(self):
        if self.suppressor is not None:
            self.suppressor = Suppressor(self.suppressor.upper())

    def resolved(self, head_kind: HeadKind) -> Suppressor:
        if self.suppressor is not None:
            return self.suppressor
        return Suppressor.NMW if head_kind is HeadKind.ANCHOR_BASED else Suppressor.NMS

    def validate(self):
        if not 0 <= self.score_floor < 1:
            raise ConfigError("score_floor must lie in [0, 1)")
        if not 0 < self.nms_tiou <= 1:
            raise ConfigError("nms_tiou must lie in (0, 1]")
        if self.max_detections < 1:
            raise ConfigError("max_detections must be positive")


@dataclass
class WindowPlan:
    clip_len: int
    stride: int
    starts: list[int]
    direction: str = "forward"
    video_frames: int = 0


def _forward_starts(frames: int, T: int, s: int) -> list[int]:
    last = max(0, frames - T)
    starts = list(range(0, last + 1, s))
    if starts[-1] != last:
        starts.append(last)
    return starts


def plan_windows(video_frames: int, T: int, direction: str = "forward",
                 stride: int | None = None) -> WindowPlan:
    """Window start frames at a stride of 25% of the clip length.

    ``backward`` mirrors the forward plan from the video end; ``bidirectional``
    is the union of both. Videos shorter than ``T`` get a single window at 0.
    """
    if T < 1:
        raise ConfigError("clip length must be positive")
    s = max(1, int(round(0.25 * T))) if stride is None else stride
    if s < 1:
        raise ConfigError("window stride must be positive")
    last = max(0, video_frames - T)
    fwd = _forward_starts(video_frames, T, s)
    bwd = [last - x for x in fwd]
    if direction == "forward":
        starts = fwd
    elif direction == "backward":
        starts = bwd
    elif direction == "bidirectional":
        starts = sorted(set(fwd) | set(bwd))
    else:
        raise ConfigError(f"unknown window direction {direction!r}")
    return WindowPlan(T, s, starts, direction, video_frames)


# suppression ----------------------------------------------------------------------------

def _order(bounds: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Descending score, then earlier start, then input position."""
    return np.lexsort((np.arange(len(scores)), bounds[:, 0], -scores))


def _clusters(bounds: np.ndarray, scores: np.ndarray, thr: float):
    """Greedy seeds with the members each one absorbs (seed included)."""
    order = _order(bounds, scores)
    alive = np.ones(len(scores), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        cand = np.flatnonzero(alive)
        ious = tiou_matrix(bounds[i:i + 1], bounds[cand])[0]
        members = cand[ious >= thr]
        members = np.union1d(members, [i])
        alive[members] = False
        yield i, members, tiou_matrix(bounds[i:i + 1], bounds[members])[0]


def nms_indices(bounds, scores, thr: float) -> np.ndarray:
    bounds = as_bounds(bounds)
    scores = np.asarray(scores, dtype=np.float64)
    return np.array([seed for seed, _, _ in _clusters(bounds, scores, thr)], dtype=np.int64)


def nmw_arrays(bounds, scores, thr: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Merged bounds, seed scores and seed indices. Members are weighted by
    ``score * tIoU(member, seed)``."""
    bounds = as_bounds(bounds)
    scores = np.asarray(scores, dtype=np.float64)
    out_b, out_s, seeds = [], [], []
    for seed, members, ious in _clusters(bounds, scores, thr):
        w = scores[members] * ious
        w[members == seed] = scores[seed]
        merged = (w[:, None] * bounds[members]).sum(axis=0) / w.sum()
        lo, hi = bounds[members].min(axis=0), bounds[members].max(axis=0)
        out_b.append(np.clip(merged, lo, hi))
        out_s.append(scores[seed])
        seeds.append(seed)
    if not seeds:
        return np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.array(out_b), np.array(out_s), np.array(seeds, dtype=np.int64)


def nms(dets: Sequence[Detection], tiou_thr: float = 0.5) -> list[Detection]:
    """Greedy non-maximum suppression over detections of one class."""
    dets = list(dets)
    if not dets:
        return []
    keep = nms_indices([d.interval for d in dets], [d.score for d in dets], tiou_thr)
    return [dets[i] for i in keep]


def nmw(dets: Sequence[Detection], tiou_thr: float = 0.5) -> list[Detection]:
    """Non-maximum weighting: each greedy cluster collapses to its score-and-overlap
    weighted mean interval, keeping the seed's score."""
    dets = list(dets)
    if not dets:
        return []
    b, s, seeds = nmw_arrays([d.interval for d in dets], [d.score for d in dets], tiou_thr)
    return [Detection(Interval(float(lo), float(hi)), dets[i].class_id, float(sc))
            for (lo, hi), sc, i in zip(b, s, seeds)]


def suppress_arrays(bounds, scores, classes, method: Suppressor, thr: float):
    """Per-class suppression over flat arrays; returns (bounds, scores, classes)."""
    out_b, out_s, out_c = [], [], []
    for c in np.unique(classes):
        m = classes == c
        b, s = bounds[m], scores[m]
        if method is Suppressor.NMS:
            keep = nms_indices(b, s, thr)
            b, s = b[keep], s[keep]
        else:
            b, s, _ = nmw_arrays(b, s, thr)
        out_b.append(b)
        out_s.append(s)
        out_c.append(np.full(len(s), c, dtype=np.int64))
    if not out_b:
        return np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(out_b), np.concatenate(out_s), np.concatenate(out_c)


# view fusion -------------------------------------------------------------------------------

def _mean_tensors(ts):
    if len(ts) == 1:
        return ts[0]
    # accumulate in float64 so k identical views average back to the exact input
    acc = sum(t.data.astype(np.float64) for t in ts) / len(ts)
    return dk.Tensor(acc.astype(ts[0].data.dtype))


def fuse_views(model: TADNet, views: Sequence[np.ndarray], stage: FusionStage | str):
    """Run the network on every view and average at ``stage``.

    Returns one ``PyramidOutput`` for BACKBONE/NECK/HEAD fusion and one per view
    for POST fusion, whose detections are pooled before suppression.
    """
    stage = FusionStage(stage)
    if not views:
        raise ValueError("need at least one view")
    shape = views[0].shape
    if any(v.shape != shape for v in views):
        raise ConfigError("all views must share one shape")
    stages = [model.backbone_forward(v) for v in views]
    if stage is FusionStage.BACKBONE:
        fused = [_mean_tensors([s[i] for s in stages]) for i in range(len(stages[0]))]
        return model.head_forward(model.neck_forward(fused))
    necks = [model.neck_forward(s) for s in stages]
    if stage is FusionStage.NECK:
        fused = [_mean_tensors([n[i] for n in necks]) for i in range(len(necks[0]))]
        return model.head_forward(fused)
    heads = [model.head_forward(n) for n in necks]
    if stage is FusionStage.HEAD:
        return PyramidOutput(
            [_mean_tensors([h.cls_logits[i] for h in heads]) for i in range(len(heads[0].cls_logits))],
            [_mean_tensors([h.reg_raw[i] for h in heads]) for i in range(len(heads[0].reg_raw))],
            heads[0].strides,
        )
    return heads


# per-video detection ----------------------------------------------------------------------

@dataclass
class RawCandidates:
    bounds: np.ndarray
    scores: np.ndarray
    classes: np.ndarray

    def __len__(self):
        return len(self.scores)


def _candidates(out: PyramidOutput, grid: CandidateGrid, offsets_sec, score_floor: float) -> RawCandidates:
    cls = grid.flatten(out.cls_logits, grid.num_classes).astype(np.float64)
    reg = grid.flatten(out.reg_raw, 2).astype(np.float64)
    bs, ss, cs = [], [], []
    for b, off in enumerate(offsets_sec):
        scores = dk._sigmoid(cls[b])
        idx, c = np.nonzero(scores >= score_floor)
        if len(idx) == 0:
            continue
        bounds = grid.decode(np.clip(reg[b][idx], -12.0, 12.0), clip=True, mask=idx) + off
        bs.append(bounds)
        ss.append(scores[idx, c])
        cs.append(c)
    if not bs:
        return RawCandidates(np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64))
    return RawCandidates(np.concatenate(bs), np.concatenate(ss), np.concatenate(cs))


@dataclass
class Detector:
    """Sliding-window inference around a trained network."""

    model: TADNet
    fps: float
    clip_len: int = 96
    post: PostConfig = field(default_factory=PostConfig)
    fusion_stage: FusionStage = FusionStage.NECK
    direction: str = "forward"

    def __post_init__(self):
        self.fusion_stage = FusionStage(self.fusion_stage)
        self.post.validate()
        self.grid = CandidateGrid(self.model.cfg.head, self.model.cfg.level_strides(), self.clip_len, self.fps)

    def raw_candidates(self, views: Sequence[np.ndarray], plan: WindowPlan | None = None) -> RawCandidates:
        """Score-filtered candidates from every window, in video time, before suppression."""
        n_frames = views[0].shape[1]
        plan = plan or plan_windows(n_frames, self.clip_len, self.direction)
        dtype = self.model.cfg.dtype
        batches = [np.stack([crop_frames(v, s, self.clip_len) for s in plan.starts]).astype(dtype)
                   for v in views]
        offsets = [s / self.fps for s in plan.starts]
        outs = fuse_views(self.model, batches, self.fusion_stage)
        if not isinstance(outs, list):
            outs = [outs]
        parts = [_candidates(o, self.grid, offsets, self.post.score_floor) for o in outs]
        return RawCandidates(np.concatenate([p.bounds for p in parts]),
                             np.concatenate([p.scores for p in parts]),
                             np.concatenate([p.classes for p in parts]))

    def detect(self, views, duration: float, plan: WindowPlan | None = None) -> list[Detection]:
        if isinstance(views, np.ndarray):
            views = [views]
        raw = self.raw_candidates(views, plan)
        bounds = np.clip(raw.bounds, 0.0, duration)
        keep = bounds[:, 1] - bounds[:, 0] > 1e-9
        method = self.post.resolved(self.model.cfg.head.kind)
        b, s, c = suppress_arrays(bounds[keep], raw.scores[keep], raw.classes[keep], method,
                                  self.post.nms_tiou)
        order = _order(b, s)[: self.post.max_detections]
        return [Detection(Interval(float(b[i, 0]), float(b[i, 1])), int(c[i]), float(s[i]))
                for i in order]


def detect_video(features, model: TADNet, post_cfg: PostConfig, fps: float, duration: float,
                 clip_len: int = 96, **kwargs) -> list[Detection]:
    return Detector(model, fps, clip_len, post_cfg, **kwargs).detect(features, duration)


# result files -----------------------------------------------------------------------------

def detections_to_json(results: dict[str, list[Detection]]) -> dict:
    return {
        vid: [{"start": round(d.interval.start, 9), "end": round(d.interval.end, 9),
               "class": d.class_id, "score": round(d.score, 9)} for d in dets]
        for vid, dets in sorted(results.items())
    }


def write_detections(path, results: dict[str, list[Detection]]) -> None:
    Path(path).write_text(json.dumps(detections_to_json(results), indent=1, sort_keys=True) + "\n")


def detections_from_json(doc) -> dict[str, list[Detection]]:
    """Parse a results document; errors carry the JSON pointer of the bad field."""
    if not isinstance(doc, dict):
        raise DataError(": expected an object mapping video id to detections")
    out = {}
    for vid, dets in doc.items():
        ptr = "/" + vid.replace("~", "~0").replace("/", "~1")
        if not isinstance(dets, list):
            raise DataError(f"{ptr}: expected an array")
        parsed = []
        for i, d in enumerate(dets):
            p = f"{ptr}/{i}"
            if not isinstance(d, dict):
                raise DataError(f"{p}: expected an object")
            for key in ("start", "end", "score"):
                v = d.get(key)
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise DataError(f"{p}/{key}: expected a number")
            c = d.get("class")
            if not isinstance(c, int) or isinstance(c, bool) or c < 0:
                raise DataError(f"{p}/class: expected a non-negative integer")
            if not d["end"] > d["start"]:
                raise DataError(f"{p}/end: must exceed start")
            if not 0 <= d["score"] <= 1:
                raise DataError(f"{p}/score: must lie in [0, 1]")
            parsed.append(Detection(Interval(float(d["start"]), float(d["end"])), c, float(d["score"])))
        out[vid] = parsed
    return out


def read_detections(path) -> dict[str, list[Detection]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    except FileNotFoundError as e:
        raise DataError(f"{path}: no such file") from e
    try:
        return detections_from_json(doc)
    except DataError as e:
        raise DataError(f"{path}: {e}") from e
