"""SGD with momentum, linear warmup + cosine learning-rate schedule, and the clip training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import ConfigError, NumericError, VideoAnnotation
from .diffkernels import Param
from .losses import LossConfig, detection_loss
from .network import ModelConfig, TADNet, save_checkpoint
from .targets import CandidateGrid, clip_gts

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4


@dataclass
class OptimConfig:
    lr_peak: float = 0.01
    lr_floor: float = 0.0001
    warmup_iters: int = 500
    warmup_start: float = 0.001
    cosine_period: int = 1200
    cosine_restarts: bool = False
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 16
    iterations: int = 2000
    clip_len: int = 96
    min_gt_coverage: float = 0.75
    checkpoint_every: int = 500
    # views each training clip is drawn from; see synthdata.make_views
    train_views: tuple = ("threecrop", "flip")

    def validate(self):
        if not self.warmup_start < self.lr_peak:
            raise ConfigError("warmup_start must be below lr_peak")
        if not self.lr_floor < self.lr_peak:
            raise ConfigError("lr_floor must be below lr_peak")
        if self.cosine_period < 1 or self.warmup_iters < 0:
            raise ConfigError("cosine_period must be >= 1 and warmup_iters >= 0")
        if self.batch_size < 1 or self.iterations < 0 or self.clip_len < 1:
            raise ConfigError("batch_size and clip_len must be positive, iterations non-negative")
        bad = set(self.train_views) - {"identity", "threecrop", "flip"}
        if bad:
            raise ConfigError(f"unknown train_views {sorted(bad)}")


def lr_at(it: int, cfg: OptimConfig) -> float:
    if it < 0:
        raise ValueError("iteration must be non-negative")
    if it < cfg.warmup_iters:
        return cfg.warmup_start + (cfg.lr_peak - cfg.warmup_start) * it / cfg.warmup_iters
    k = it - cfg.warmup_iters
    if cfg.cosine_restarts:
        k %= cfg.cosine_period
    elif k >= cfg.cosine_period:
        return cfg.lr_floor
    return cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1 + math.cos(math.pi * k / cfg.cosine_period))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Param], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        for p, v in zip(self.params, self.velocity):
            g = p.grad_or_zeros()
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype)


def sgd_step(params: Sequence[Param], lr: float, cfg: OptimConfig, state: SGD | None = None) -> SGD:
    """One update of ``params`` from their accumulated ``grad``; returns the optimizer
    state to pass to the next call."""
    state = state or SGD(params, cfg.momentum, cfg.weight_decay)
    state.step(lr)
    return state


@dataclass
class TrainSample:
    features: np.ndarray  # (C, frames[, H, W])
    annotation: VideoAnnotation
    views: tuple = ()  # extra augmented copies of ``features``, same shape


class ClipSampler:
    """Yields batches of random clips; each epoch visits every video once in a
    shuffled order at a uniformly random frame offset. Videos with extra views
    contribute one uniformly chosen view per clip."""

    def __init__(self, samples: Sequence[TrainSample], clip_len: int, batch_size: int,
                 rng: np.random.Generator, min_coverage: float = 0.75):
        if not samples:
            raise ConfigError("training set is empty")
        self.samples = list(samples)
        self.clip_len = clip_len
        self.batch_size = batch_size
        self.rng = rng
        self.min_coverage = min_coverage
        self._order: list[int] = []

    def _next_index(self) -> int:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.samples)))
        return int(self._order.pop(0))

    def clip(self, sample: TrainSample, start: int):
        feats = crop_frames(sample.features, start, self.clip_len)
        ann = sample.annotation
        bounds = np.array([[i.interval.start, i.interval.end] for i in ann.instances]).reshape(-1, 2)
        classes = np.array([i.class_id for i in ann.instances], dtype=np.int64)
        t0 = start / ann.fps
        gts = clip_gts(bounds, classes, t0, t0 + self.clip_len / ann.fps, self.min_coverage)
        return feats, gts

    def next_batch(self):
        feats, gts = [], []
        for _ in range(self.batch_size):
            s = self.samples[self._next_index()]
            if s.views:
                k = int(self.rng.integers(0, len(s.views) + 1))
                if k:
                    s = TrainSample(s.views[k - 1], s.annotation)
            n = s.features.shape[1]
            start = int(self.rng.integers(0, max(0, n - self.clip_len) + 1))
            f, g = self.clip(s, start)
            feats.append(f)
            gts.append(g)
        return np.stack(feats), gts


def crop_frames(features: np.ndarray, start: int, length: int) -> np.ndarray:
    """Frames ``[start, start + length)`` along axis 1, zero-padded past the end."""
    out = features[:, start:start + length]
    if out.shape[1] < length:
        pad = [(0, 0)] * out.ndim
        pad[1] = (0, length - out.shape[1])
        out = np.pad(out, pad)
    return out


@dataclass
class TrainResult:
    model: TADNet
    history: list[dict]


def train(samples: Sequence[TrainSample], model_cfg: ModelConfig, optim_cfg: OptimConfig,
          seed: int = 0, loss_cfg: LossConfig | None = None, log_path=None, checkpoint_path=None,
          config_snapshot: dict | None = None,
          on_iteration: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a detector from scratch on clip batches. Deterministic given ``seed``."""
    optim_cfg.validate()
    loss_cfg = loss_cfg or LossConfig()
    loss_cfg.validate()
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    model = TADNet(model_cfg, np.random.default_rng(init_ss))
    fps = samples[0].annotation.fps if samples else 1.0
    if any(s.annotation.fps != fps for s in samples):
        raise ConfigError("all training videos must share one feature fps")
    grid = CandidateGrid(model_cfg.head, model_cfg.level_strides(), optim_cfg.clip_len, fps)
    sampler = ClipSampler(samples, optim_cfg.clip_len, optim_cfg.batch_size,
                          np.random.default_rng(data_ss), optim_cfg.min_gt_coverage)
    opt = SGD(list(model.params.values()), optim_cfg.momentum, optim_cfg.weight_decay)
    snapshot = config_snapshot or {"model": model_cfg.to_dict()}
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for it in range(optim_cfg.iterations):
            t0 = time.perf_counter()
            x, gts = sampler.next_batch()
            model.zero_grad()
            out = model(x.astype(model_cfg.dtype))
            lb = detection_loss(out, grid, gts, loss_cfg)
            total = float(lb.total.data)
            if not math.isfinite(total) or total > DIVERGENCE_LIMIT:
                raise NumericError(f"loss diverged at iteration {it}: {total}")
            lb.total.backward()
            lr = lr_at(it, optim_cfg)
            opt.step(lr)
            rec = {"iter": it, "lr": lr, "loss_cls": lb.cls, "loss_reg": lb.reg,
                   "loss_total": total, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if on_iteration:
                on_iteration(rec)
            if it % 100 == 0:
                log.info("iter %d lr %.5f cls %.4f reg %.4f", it, lr, lb.cls, lb.reg)
            if checkpoint_path and optim_cfg.checkpoint_every and (it + 1) % optim_cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model.params, snapshot, {"iter": it + 1})
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model.params, snapshot, {"iter": optim_cfg.iterations})
    return TrainResult(model, history)


def model_grad_check(model_cfg: ModelConfig, seed: int = 0, clip_len: int | None = None,
                     batch: int = 2, fps: float = 3.0, n_coords: int = 200, eps: float = 1e-3,
                     loss_cfg: LossConfig | None = None, corrupt: float = 0.0) -> tuple[float, int]:
    """Finite-difference check of the full detection loss w.r.t. every parameter,
    run in float64 on random inputs with random gts. Returns (max rel. error, coords checked)."""
    from dataclasses import replace

    from .diffkernels import grad_check

    cfg = replace(model_cfg, precision="float64")
    rng = np.random.default_rng(seed)
    model = TADNet(cfg, rng)
    total_stride = cfg.level_strides()[-1]
    clip_len = clip_len or 4 * total_stride
    if clip_len % total_stride:
        raise ConfigError(f"clip_len {clip_len} must be divisible by {total_stride}")
    shape = (batch, cfg.backbone.in_channels, clip_len) + tuple(cfg.backbone.spatial_dims or ())
    x = rng.standard_normal(shape)
    dur = clip_len / fps
    gts = []
    for _ in range(batch):
        n = int(rng.integers(1, 4))
        length = rng.uniform(0.05, 0.5, n) * dur
        start = rng.uniform(0, 1, n) * (dur - length)
        gts.append((np.stack([start, start + length], 1), rng.integers(0, cfg.head.num_classes, n)))
    grid = CandidateGrid(cfg.head, cfg.level_strides(), clip_len, fps)
    lc = loss_cfg or LossConfig()

    def f():
        return detection_loss(model(x), grid, gts, lc).total

    err = grad_check(f, list(model.params.values()), n_coords=n_coords, eps=eps, rng=rng,
                     corrupt=corrupt)
    return float(err), int(grad_check.last_checked)
