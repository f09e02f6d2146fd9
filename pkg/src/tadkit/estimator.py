"""Estimator-style wrapper: ``fit`` on (features, annotations), ``predict`` detections."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .config import model_config_from_dict
from .core import ConfigError, DataError, VideoAnnotation
from .evaluation import EvalConfig, evaluate
from .inference import Detector, FusionStage, PostConfig
from .losses import LossConfig
from .trainer import OptimConfig, TrainSample, train


def check_features(X, channels: int | None = None) -> list[np.ndarray]:
    """Validate a sequence of per-video feature arrays shaped (C, frames[, H, W])."""
    if isinstance(X, np.ndarray) and X.ndim in (2, 4):
        X = [X]
    if not isinstance(X, Sequence) or isinstance(X, (str, bytes)) or len(X) == 0:
        raise DataError("X must be a non-empty sequence of feature arrays")
    out = []
    for i, x in enumerate(X):
        x = np.asarray(x)
        if x.ndim not in (2, 4):
            raise DataError(f"X[{i}]: expected (C, frames) or (C, frames, H, W), got shape {x.shape}")
        if not np.issubdtype(x.dtype, np.floating):
            raise DataError(f"X[{i}]: features must be floating point, got {x.dtype}")
        if not np.all(np.isfinite(x)):
            raise DataError(f"X[{i}]: features contain non-finite values")
        if channels is not None and x.shape[0] != channels:
            raise DataError(f"X[{i}]: expected {channels} channels, got {x.shape[0]}")
        out.append(x)
    if len({x.shape[0] for x in out}) > 1:
        raise DataError("all videos must share one channel count")
    return out


def check_annotations(y, X: list[np.ndarray], num_classes: int) -> list[VideoAnnotation]:
    """Validate annotations against their features (same count, matching frame counts)."""
    if not isinstance(y, Sequence) or len(y) != len(X):
        raise DataError(f"y must hold one VideoAnnotation per video ({len(X)})")
    for i, (a, x) in enumerate(zip(y, X)):
        if not isinstance(a, VideoAnnotation):
            raise DataError(f"y[{i}] is not a VideoAnnotation")
        a.validate(num_classes)
        if abs(a.num_frames - x.shape[1]) > 1:
            raise DataError(f"y[{i}]: {a.num_frames} annotated frames but features have {x.shape[1]}")
    if len({a.fps for a in y}) > 1:
        raise DataError("all videos must share one feature fps")
    return list(y)


class TemporalActionDetector(BaseEstimator):
    """One-stage temporal action detector trained from scratch on clip features.

    ``X`` is a list of per-video arrays (C, frames); ``y`` a list of
    ``VideoAnnotation``. ``predict`` returns one list of ``Detection`` per video.
    """

    def __init__(self, head="af", num_classes=5, model=None, iterations=2000, batch_size=16,
                 clip_len=96, lr_peak=0.01, fusion_stage="NECK", windows="forward",
                 tiou_thresholds=(0.3, 0.4, 0.5, 0.6, 0.7), seed=0):
        self.head = head
        self.num_classes = num_classes
        self.model = model
        self.iterations = iterations
        self.batch_size = batch_size
        self.clip_len = clip_len
        self.lr_peak = lr_peak
        self.fusion_stage = fusion_stage
        self.windows = windows
        self.tiou_thresholds = tiou_thresholds
        self.seed = seed

    def _model_config(self, channels: int):
        d = dict(self.model or {})
        bb = dict(d.get("backbone", {}))
        bb.setdefault("in_channels", channels)
        d["backbone"] = bb
        hd = dict(d.get("head", {}))
        hd.setdefault("num_classes", self.num_classes)
        d["head"] = hd
        return model_config_from_dict(d, self.head)

    def fit(self, X, y, views=None):
        """``views`` optionally gives, per video, extra augmented copies of its
        features; each training clip is cut from one of them at random."""
        X = check_features(X)
        y = check_annotations(y, X, self.num_classes)
        if views is None:
            views = [()] * len(X)
        if len(views) != len(X):
            raise DataError(f"views must hold one entry per video ({len(X)})")
        extra = []
        for i, (x, vs) in enumerate(zip(X, views)):
            vs = tuple(np.asarray(v, dtype=np.float64) for v in vs)
            if any(v.shape != x.shape for v in vs):
                raise DataError(f"views[{i}]: every view must have the shape of X[{i}]")
            extra.append(vs)
        cfg = self._model_config(X[0].shape[0])
        optim = OptimConfig(iterations=self.iterations, batch_size=self.batch_size,
                            clip_len=self.clip_len, lr_peak=self.lr_peak, train_views=())
        samples = [TrainSample(x, a, vs) for x, a, vs in zip(X, y, extra)]
        res = train(samples, cfg, optim, self.seed, LossConfig())
        self.model_ = res.model
        self.history_ = res.history
        self.fps_ = y[0].fps
        self.n_features_in_ = X[0].shape[0]
        return self

    def _detector(self) -> Detector:
        if not hasattr(self, "model_"):
            raise ConfigError("estimator is not fitted")
        return Detector(self.model_, self.fps_, self.clip_len, PostConfig(),
                        FusionStage(self.fusion_stage.upper()), self.windows)

    def predict(self, X, durations: Sequence[float] | None = None):
        det = self._detector()
        X = check_features(X, self.n_features_in_)
        if durations is None:
            durations = [x.shape[1] / self.fps_ for x in X]
        if len(durations) != len(X):
            raise DataError("durations must match the number of videos")
        return [det.detect(x, float(d)) for x, d in zip(X, durations)]

    def score(self, X, y) -> float:
        """Average mAP over ``tiou_thresholds``."""
        X = check_features(X, getattr(self, "n_features_in_", None))
        y = check_annotations(y, X, self.num_classes)
        preds = self.predict(X, [a.duration for a in y])
        res = evaluate({a.video_id: p for a, p in zip(y, preds)}, y,
                       EvalConfig(tuple(self.tiou_thresholds)))
        return res.average
