"""Sigmoid focal loss, DIoU interval loss and their weighted sum, with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernels as dk
from .core import ConfigError, Interval
from .targets import CandidateGrid

# keep exp() of raw regressions finite early in training
RAW_LIMIT = 12.0


@dataclass
class LossConfig:
    alpha_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    normalizer: str = "num_positives"

    def validate(self):
        if self.alpha_weight < 0:
            raise ConfigError("alpha_weight must be non-negative")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha < 1:
            raise ConfigError("focal_alpha must lie in (0, 1)")
        if self.normalizer not in ("num_positives", "batch_mean"):
            raise ConfigError(f"unknown normalizer {self.normalizer!r}")


def _softplus(z):
    return np.logaddexp(0.0, z)


def focal_loss(logits: np.ndarray, targets: np.ndarray, gamma: float = 2.0, alpha: float = 0.25,
               weight: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Summed one-vs-all sigmoid focal loss and its gradient w.r.t. ``logits``.

    ``targets`` holds 0/1 per (candidate, class); ``weight`` (0/1, broadcastable)
    masks out ignored candidates. Not normalized.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    sign = 2.0 * t - 1.0
    zt = sign * z
    log_pt = -_softplus(-zt)
    pt = np.exp(log_pt)
    alpha_t = np.where(t > 0, alpha, 1.0 - alpha)
    mod = (1.0 - pt) ** gamma
    loss = -alpha_t * mod * log_pt
    grad = sign * alpha_t * mod * (gamma * pt * log_pt - (1.0 - pt))
    if weight is not None:
        loss = loss * weight
        grad = grad * weight
    return float(loss.sum()), grad


def diou_terms(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row DIoU loss ``1 - tIoU + d^2 / c^2`` and its gradient w.r.t. ``pred`` bounds."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    s1, e1 = pred[:, 0], pred[:, 1]
    s2, e2 = gt[:, 0], gt[:, 1]
    s_in_pred = s1 >= s2
    e_in_pred = e1 <= e2
    raw_inter = np.where(e_in_pred, e1, e2) - np.where(s_in_pred, s1, s2)
    overlap = raw_inter > 0
    dk.note_branch(np.stack([s_in_pred, e_in_pred, overlap, s1 <= s2, e1 >= e2]))
    inter = np.where(overlap, raw_inter, 0.0)
    union = (e1 - s1) + (e2 - s2) - inter
    iou = inter / union
    c = np.maximum(e1, e2) - np.minimum(s1, s2)
    d = 0.5 * (s1 + e1) - 0.5 * (s2 + e2)
    loss = 1.0 - iou + d ** 2 / c ** 2

    di_ds = np.where(overlap & s_in_pred, -1.0, 0.0)
    di_de = np.where(overlap & e_in_pred, 1.0, 0.0)
    du_ds = -1.0 - di_ds
    du_de = 1.0 - di_de
    diou_ds = (di_ds * union - inter * du_ds) / union ** 2
    diou_de = (di_de * union - inter * du_de) / union ** 2
    dc_ds = np.where(s1 <= s2, -1.0, 0.0)
    dc_de = np.where(e1 >= e2, 1.0, 0.0)
    pen_ds = 2 * d / c ** 2 * 0.5 - 2 * d ** 2 / c ** 3 * dc_ds
    pen_de = 2 * d / c ** 2 * 0.5 - 2 * d ** 2 / c ** 3 * dc_de
    grad = np.stack([-diou_ds + pen_ds, -diou_de + pen_de], axis=1)
    return loss, grad


def diou_loss(pred: Interval, gt: Interval) -> float:
    return float(diou_terms([[pred.start, pred.end]], [[gt.start, gt.end]])[0][0])


def total_loss(loss_cls: float, loss_reg: float, cfg: LossConfig) -> float:
    return loss_cls + cfg.alpha_weight * loss_reg


@dataclass
class LossBreakdown:
    total: dk.Tensor
    cls: float
    reg: float
    num_positives: int


def detection_loss(out, grid: CandidateGrid, gts, cfg: LossConfig) -> LossBreakdown:
    """Loss of a batch of head outputs against per-sample ``(bounds, classes)`` gts
    given in clip-relative seconds. Returns a graph node whose backward feeds the
    head outputs."""
    nc = grid.num_classes
    cls = grid.flatten(out.cls_logits, nc).astype(np.float64)
    reg = grid.flatten(out.reg_raw, 2).astype(np.float64)
    b = cls.shape[0]
    if len(gts) != b:
        raise ValueError(f"{len(gts)} gt lists for a batch of {b}")
    assigns = [grid.assign(np.asarray(g[0], dtype=np.float64).reshape(-1, 2), np.asarray(g[1]))
               for g in gts]
    num_pos = sum(a.num_positives for a in assigns)
    norm = max(1.0, float(num_pos)) if cfg.normalizer == "num_positives" else float(b)

    g_cls = np.zeros_like(cls)
    g_reg = np.zeros_like(reg)
    cls_sum = 0.0
    reg_sum = 0.0
    for i, a in enumerate(assigns):
        onehot = np.zeros((len(a.labels), nc))
        pos = a.positive
        onehot[pos, a.labels[pos]] = 1.0
        valid = (~a.ignored)[:, None].astype(np.float64)
        val, g = focal_loss(cls[i], onehot, cfg.focal_gamma, cfg.focal_alpha, valid)
        cls_sum += val
        g_cls[i] = g
        if pos.any():
            raw = reg[i][pos]
            limited = np.clip(raw, -RAW_LIMIT, RAW_LIMIT)
            lv, lg = diou_terms(grid.decode(limited, mask=pos), a.targets[pos])
            reg_sum += float(lv.sum())
            g_raw = grid.decode_backward(limited, lg, mask=pos)
            g_raw = np.where(np.abs(raw) < RAW_LIMIT, g_raw, 0.0)
            g_reg[i][pos] = g_raw
    loss_cls = cls_sum / norm
    loss_reg = reg_sum / norm
    w = cfg.alpha_weight
    value = total_loss(loss_cls, loss_reg, cfg)
    g_cls_levels = grid.unflatten(g_cls / norm, nc)
    g_reg_levels = grid.unflatten(g_reg * (w / norm), 2)
    inputs = list(out.cls_logits) + list(out.reg_raw)
    grads = g_cls_levels + g_reg_levels
    node = dk.scalar_from(inputs, value, grads)
    return LossBreakdown(node, loss_cls, loss_reg, num_pos)

