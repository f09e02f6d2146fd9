"""Domain types and 1D interval geometry shared by every stage of the pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class TadError(Exception):
    """Base class for errors raised by tadkit."""

    exit_code = 1


class ConfigError(TadError, ValueError):
    exit_code = 2


class DataError(TadError, ValueError):
    exit_code = 3


class NumericError(TadError, ArithmeticError):
    exit_code = 4


@dataclass(frozen=True, order=True)
class Interval:
    """Half-open temporal segment ``[start, end)`` in seconds."""

    start: float
    end: float

    def __post_init__(self):
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise DataError(f"non-finite interval [{self.start}, {self.end})")
        if self.end <= self.start:
            raise DataError(f"interval end {self.end} must exceed start {self.start}")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def shift(self, offset: float) -> "Interval":
        return Interval(self.start + offset, self.end + offset)


@dataclass(frozen=True)
class ActionInstance:
    interval: Interval
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise DataError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class Detection:
    interval: Interval
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"detection score {self.score} outside [0, 1]")


@dataclass
class VideoAnnotation:
    video_id: str
    duration: float
    fps: float
    instances: list[ActionInstance] = field(default_factory=list)

    def validate(self, num_classes: int | None = None) -> None:
        if self.duration <= 0 or self.fps <= 0:
            raise DataError(f"video {self.video_id!r}: duration and fps must be positive")
        for inst in self.instances:
            iv = inst.interval
            if iv.start < 0 or iv.end > self.duration + 1e-9:
                raise DataError(
                    f"video {self.video_id!r}: instance [{iv.start}, {iv.end}) "
                    f"outside [0, {self.duration}]"
                )
            if num_classes is not None and inst.class_id >= num_classes:
                raise DataError(
                    f"video {self.video_id!r}: class {inst.class_id} >= catalog size {num_classes}"
                )

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.fps))


def tiou(a: Interval, b: Interval) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def enclosing(a: Interval, b: Interval) -> Interval:
    return Interval(min(a.start, b.start), max(a.end, b.end))


def as_bounds(intervals) -> np.ndarray:
    """Coerce a sequence of Intervals or an (n, 2) array into a float64 (n, 2) array."""
    if isinstance(intervals, np.ndarray):
        arr = np.asarray(intervals, dtype=np.float64)
        if arr.size == 0:
            return arr.reshape(0, 2)
        return arr.reshape(-1, 2)
    intervals = list(intervals)
    if not intervals:
        return np.zeros((0, 2))
    if isinstance(intervals[0], Interval):
        return np.array([[iv.start, iv.end] for iv in intervals], dtype=np.float64)
    return np.asarray(intervals, dtype=np.float64).reshape(-1, 2)


def tiou_matrix(a: Sequence[Interval] | np.ndarray, b: Sequence[Interval] | np.ndarray) -> np.ndarray:
    """Pairwise tIoU; entry ``(i, j)`` equals ``tiou(a[i], b[j])``."""
    a = as_bounds(a)
    b = as_bounds(b)
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.clip(inter, 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def tiou_one_to_many(ref, others: np.ndarray) -> np.ndarray:
    ref = as_bounds([ref] if isinstance(ref, Interval) else ref)[0]
    return tiou_matrix(ref[None, :], others)[0]
