"""Backbone stub, the three neck topologies and the shared-weight detection heads."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import diffkernels as dk
from .core import ConfigError, DataError
from .diffkernels import Param, Tensor


class NeckVariant(str, Enum):
    TFPN_FROM_BACKBONE = "TFPN_FROM_BACKBONE"
    TDM_AFTER_BACKBONE = "TDM_AFTER_BACKBONE"
    TDM_TFPN_AFTER_BACKBONE = "TDM_TFPN_AFTER_BACKBONE"


class NeckOperator(str, Enum):
    CONV = "CONV"
    MAXPOOL = "MAXPOOL"


class HeadKind(str, Enum):
    ANCHOR_BASED = "ANCHOR_BASED"
    ANCHOR_FREE = "ANCHOR_FREE"


AF_RANGE_BORDERS = (-1.0, 5.0, 10.0, 20.0, 40.0, math.inf)


@dataclass
class BackboneConfig:
    in_channels: int = 64
    stage_channels: tuple = (64, 64, 64, 64)
    temporal_preservation: bool = True
    # 1-based stage indices preceded by a x2 temporal downsampling (used when TP is off)
    downsample_before_stage: tuple = (1, 2, 4)
    spatial_dims: tuple | None = None
    spatial_kernel: int = 1

    def validate(self):
        if not self.stage_channels:
            raise ConfigError("backbone needs at least one stage")
        if not self.temporal_preservation:
            stages = set(self.downsample_before_stage)
            if len(stages) != 3 or not stages <= set(range(1, len(self.stage_channels) + 1)):
                raise ConfigError(
                    "without temporal preservation the backbone must downsample x8: "
                    "give three distinct stage indices in 1..n_stages"
                )
        if self.spatial_kernel % 2 != 1:
            raise ConfigError("spatial_kernel must be odd")

    @property
    def downsample_stages(self) -> frozenset:
        return frozenset() if self.temporal_preservation else frozenset(self.downsample_before_stage)

    @property
    def temporal_factor(self) -> int:
        return 2 ** len(self.downsample_stages)

    def stage_factors(self) -> list[int]:
        """Cumulative temporal downsampling after each stage."""
        out, f = [], 1
        for i in range(1, len(self.stage_channels) + 1):
            if i in self.downsample_stages:
                f *= 2
            out.append(f)
        return out


@dataclass
class NeckConfig:
    variant: NeckVariant = NeckVariant.TDM_AFTER_BACKBONE
    operator: NeckOperator = NeckOperator.MAXPOOL
    levels: int = 5
    channels: int = 64
    # width of the strided TDM convs ahead of the TFPN laterals; None means ``channels``
    tdm_channels: int | None = None
    spatial_preservation: bool = False
    upsample: str = "linear_half_pixel"

    def __post_init__(self):
        self.variant = NeckVariant(self.variant)
        self.operator = NeckOperator(self.operator)

    def validate(self):
        if self.levels < 1:
            raise ConfigError("neck needs at least one level")
        if self.upsample != "linear_half_pixel":
            raise ConfigError(f"unsupported upsampling convention {self.upsample!r}")


@dataclass
class HeadConfig:
    kind: HeadKind = HeadKind.ANCHOR_FREE
    tower_depth: int = 4
    tower_kernel: int = 3
    channels: int = 64
    num_classes: int = 5
    num_anchors: int = 5
    anchor_base: float = 2.0
    pos_tiou: float = 0.6
    neg_tiou: float = 0.4
    force_best_anchor: bool = True
    range_borders: tuple = AF_RANGE_BORDERS
    prior_prob: float = 0.01

    def __post_init__(self):
        self.kind = HeadKind(self.kind)
        self.range_borders = tuple(float(b) for b in self.range_borders)

    def validate(self):
        if self.tower_kernel % 2 != 1:
            raise ConfigError("tower_kernel must be odd")
        if not 0 < self.neg_tiou <= self.pos_tiou <= 1:
            raise ConfigError("need 0 < neg_tiou <= pos_tiou <= 1")
        if any(b >= c for b, c in zip(self.range_borders, self.range_borders[1:])):
            raise ConfigError("range borders must be strictly increasing")

    @property
    def anchors_per_location(self) -> int:
        return self.num_anchors if self.kind is HeadKind.ANCHOR_BASED else 1


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    neck: NeckConfig = field(default_factory=NeckConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    precision: str = "float32"
    init: str = "he_uniform"

    @classmethod
    def defaults(cls, head: str | HeadKind = "af", **overrides) -> "ModelConfig":
        """Per-head defaults: AB uses conv TDM + TFPN at width 32, AF a maxpool TDM at
        the backbone width."""
        kind = _parse_head(head)
        bb = BackboneConfig()
        if kind is HeadKind.ANCHOR_BASED:
            neck = NeckConfig(NeckVariant.TDM_TFPN_AFTER_BACKBONE, NeckOperator.CONV, channels=32)
        else:
            neck = NeckConfig(NeckVariant.TDM_AFTER_BACKBONE, NeckOperator.MAXPOOL,
                              channels=bb.stage_channels[-1])
        cfg = cls(bb, neck, HeadConfig(kind=kind, channels=neck.channels), **overrides)
        return cfg

    @property
    def dtype(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        return np.dtype(self.precision)

    def validate(self):
        self.backbone.validate()
        self.neck.validate()
        self.head.validate()
        _ = self.dtype
        if self.init not in ("he_uniform", "fan_in_uniform"):
            raise ConfigError(f"init must be he_uniform or fan_in_uniform, got {self.init!r}")
        if self.neck_out_channels() != self.head.channels:
            raise ConfigError(
                f"head width {self.head.channels} != neck output width {self.neck_out_channels()}"
            )

    def neck_out_channels(self) -> int:
        n = self.neck
        if n.variant is NeckVariant.TDM_AFTER_BACKBONE and n.operator is NeckOperator.MAXPOOL:
            return self.backbone.stage_channels[-1]
        return n.channels

    def level_strides(self) -> list[int]:
        """Temporal stride of each pyramid level in input frames."""
        base = self.backbone.temporal_factor
        if self.neck.variant is NeckVariant.TFPN_FROM_BACKBONE:
            base = self.backbone.stage_factors()[0]
        return [base * 2 ** i for i in range(self.neck.levels)]

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _parse_head(head) -> HeadKind:
    if isinstance(head, HeadKind):
        return head
    key = str(head).lower()
    if key in ("ab", "anchor_based"):
        return HeadKind.ANCHOR_BASED
    if key in ("af", "anchor_free"):
        return HeadKind.ANCHOR_FREE
    raise ConfigError(f"unknown head kind {head!r}")


def _jsonable(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


@dataclass
class PyramidOutput:
    cls_logits: list[Tensor]  # per level (B, N_C * A, T_l)
    reg_raw: list[Tensor]  # per level (B, 2 * A, T_l)
    strides: list[int]

    @property
    def lengths(self) -> list[int]:
        return [t.shape[-1] for t in self.cls_logits]


class TADNet:
    """One-stage temporal action detector: backbone -> neck -> shared head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int | None = 0):
        cfg.validate()
        self.cfg = cfg
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.params: dict[str, Param] = {}
        self._build()
        del self.rng

    # construction ----------------------------------------------------------------

    def _conv(self, name, c_out, c_in, k, spatial=False, bias_value=0.0, out_layer=False):
        shape = (c_out, c_in, k)
        sk = self.cfg.backbone.spatial_kernel
        if spatial and sk > 1:
            shape += (sk, sk)
        fan_in = c_in * int(np.prod(shape[2:]))
        dt = self.cfg.dtype
        if self.cfg.init == "fan_in_uniform":
            bound = 1.0 / math.sqrt(fan_in)
            w = self.rng.uniform(-bound, bound, shape)
        elif out_layer:
            w = 0.01 * self.rng.standard_normal(shape)
        else:
            # He-uniform keeps the activation scale through ReLU stacks without normalization
            bound = math.sqrt(6.0 / fan_in)
            w = self.rng.uniform(-bound, bound, shape)
        self.params[name + ".w"] = Param(w.astype(dt), name + ".w")
        self.params[name + ".b"] = Param(np.full(c_out, bias_value, dtype=dt), name + ".b")

    def _build(self):
        bb, neck, head = self.cfg.backbone, self.cfg.neck, self.cfg.head
        spatial_bb = bb.spatial_dims is not None
        c = bb.in_channels
        for i, c_out in enumerate(bb.stage_channels, start=1):
            self._conv(f"backbone.stage{i}", c_out, c, 3, spatial=spatial_bb)
            c = c_out
        spatial_neck = spatial_bb and neck.spatial_preservation
        c_top = bb.stage_channels[-1]
        L = neck.levels
        if neck.variant is NeckVariant.TDM_AFTER_BACKBONE:
            if neck.operator is NeckOperator.CONV:
                c_in = c_top
                for i in range(1, L):
                    self._conv(f"neck.tdm{i}", neck.channels, c_in, 3, spatial_neck)
                    c_in = neck.channels
                if c_top != neck.channels:
                    self._conv("neck.proj0", neck.channels, c_top, 1, spatial_neck)
        elif neck.variant is NeckVariant.TDM_TFPN_AFTER_BACKBONE:
            tdm_c = neck.tdm_channels or neck.channels
            level_c = [c_top]
            c_in = c_top
            for i in range(1, L):
                if neck.operator is NeckOperator.CONV:
                    self._conv(f"neck.tdm{i}", tdm_c, c_in, 3, spatial_neck)
                    c_in = tdm_c
                level_c.append(c_in)
            self._build_tfpn(level_c, spatial_neck)
        else:
            level_c = []
            for lvl, (stage, n_pool) in enumerate(self._tfpn_sources()):
                c_in = bb.stage_channels[stage]
                if neck.operator is NeckOperator.CONV:
                    for j in range(n_pool):
                        self._conv(f"neck.pool{lvl}_{j}", c_in, c_in, 3, spatial_neck)
                level_c.append(c_in)
            self._build_tfpn(level_c, spatial_neck)

        a = head.anchors_per_location
        prior = -math.log((1 - head.prior_prob) / head.prior_prob)
        for branch in ("cls", "reg"):
            for i in range(1, head.tower_depth + 1):
                self._conv(f"head.{branch}{i}", head.channels, head.channels, head.tower_kernel)
        self._conv("head.cls_out", head.num_classes * a, head.channels, head.tower_kernel,
                   bias_value=prior, out_layer=True)
        self._conv("head.reg_out", 2 * a, head.channels, head.tower_kernel, out_layer=True)

    def _build_tfpn(self, level_channels, spatial):
        ch = self.cfg.neck.channels
        for i, c_in in enumerate(level_channels, start=1):
            self._conv(f"neck.lateral{i}", ch, c_in, 1, spatial)
        for i in range(1, len(level_channels) + 1):
            # padding 1 keeps the level length, matching the listed input/output shapes
            self._conv(f"neck.fpn{i}", ch, ch, 3, spatial)

    def _tfpn_sources(self) -> list[tuple[int, int]]:
        """(backbone stage index, number of x2 poolings) feeding each pyramid level.

        Level l reads stage min(l, n-1) (0-based) so deeper stages feed coarser
        levels; levels past the last stage pool the last stage further.
        """
        factors = self.cfg.backbone.stage_factors()
        n = len(factors)
        out = []
        for lvl in range(self.cfg.neck.levels):
            stage = min(lvl, n - 1)
            target = factors[0] * 2 ** lvl
            ratio = target // factors[stage]
            if ratio < 1 or target % factors[stage] or ratio & (ratio - 1):
                raise ConfigError(
                    f"pyramid level {lvl} (stride {target}) cannot be read from backbone stage "
                    f"{stage + 1} (stride {factors[stage]})"
                )
            out.append((stage, int(math.log2(ratio))))
        return out

    # forward ----------------------------------------------------------------------

    def p(self, name) -> Param:
        return self.params[name]

    def _apply(self, name, x, stride=1, padding=None, act=True):
        w = self.params[name + ".w"]
        k = w.shape[2]
        y = dk.conv_temporal(x, w, self.params[name + ".b"], stride=stride,
                             padding=k // 2 if padding is None else padding)
        return dk.relu(y) if act else y

    def check_input(self, x: np.ndarray) -> None:
        bb = self.cfg.backbone
        if x.ndim not in (3, 5):
            raise ConfigError(f"expected (B, C, T) or (B, C, T, H, W) features, got {x.shape}")
        if x.shape[1] != bb.in_channels:
            raise ConfigError(f"expected {bb.in_channels} input channels, got {x.shape[1]}")
        t = x.shape[2]
        step = bb.temporal_factor * 2 ** (self.cfg.neck.levels - 1)
        if self.cfg.neck.variant is NeckVariant.TFPN_FROM_BACKBONE:
            step = max(step, bb.stage_factors()[0] * 2 ** (self.cfg.neck.levels - 1))
        if t % step:
            raise ConfigError(f"clip length {t} not divisible by the total temporal stride {step}")

    def backbone_forward(self, x) -> list[Tensor]:
        """All stage outputs, shallow first."""
        x = dk.constant(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.cfg.dtype))
        self.check_input(x.data)
        outs = []
        for i in range(1, len(self.cfg.backbone.stage_channels) + 1):
            stride = 2 if i in self.cfg.backbone.downsample_stages else 1
            x = self._apply(f"backbone.stage{i}", x, stride=stride, padding=1)
            outs.append(x)
        return outs

    def _downsample(self, name, x):
        if self.cfg.neck.operator is NeckOperator.MAXPOOL:
            return dk.maxpool_temporal(x, 3, 2, 1)
        return self._apply(name, x, stride=2, padding=1)

    def tdm_forward(self, top: Tensor) -> list[Tensor]:
        """The last backbone stage followed by its successive x2 downsamplings."""
        levels = [top]
        for i in range(1, self.cfg.neck.levels):
            levels.append(self._downsample(f"neck.tdm{i}", levels[-1]))
        return levels

    def neck_forward(self, stages: list[Tensor]) -> list[Tensor]:
        neck = self.cfg.neck
        sp = neck.spatial_preservation
        spatial = stages[-1].data.ndim == 5

        def squeeze(t):
            return dk.spatial_avg_pool(t) if t.data.ndim == 5 else t

        if spatial and not sp:
            stages = [squeeze(s) for s in stages]
        if neck.variant is NeckVariant.TDM_AFTER_BACKBONE:
            levels = self.tdm_forward(stages[-1])
            if "neck.proj0.w" in self.params:
                levels[0] = self._apply("neck.proj0", stages[-1])
        elif neck.variant is NeckVariant.TDM_TFPN_AFTER_BACKBONE:
            levels = self._tfpn(self.tdm_forward(stages[-1]))
        else:
            levels = []
            for lvl, (stage, n_pool) in enumerate(self._tfpn_sources()):
                y = stages[stage]
                for j in range(n_pool):
                    y = self._downsample(f"neck.pool{lvl}_{j}", y)
                levels.append(y)
            levels = self._tfpn(levels)
        return [squeeze(t) for t in levels]

    def _tfpn(self, levels: list[Tensor]) -> list[Tensor]:
        lat = [self._apply(f"neck.lateral{i}", x, act=False) for i, x in enumerate(levels, start=1)]
        merged = [None] * len(lat)
        merged[-1] = lat[-1]
        for i in range(len(lat) - 2, -1, -1):
            merged[i] = dk.add(lat[i], dk.upsample_temporal_x2(merged[i + 1]))
        return [self._apply(f"neck.fpn{i}", m) for i, m in enumerate(merged, start=1)]

    def head_forward(self, levels: list[Tensor]) -> PyramidOutput:
        head = self.cfg.head
        cls_out, reg_out = [], []
        for x in levels:
            if x.shape[1] != head.channels:
                raise ConfigError(f"pyramid level has {x.shape[1]} channels, head expects {head.channels}")
            c = r = x
            for i in range(1, head.tower_depth + 1):
                c = self._apply(f"head.cls{i}", c)
                r = self._apply(f"head.reg{i}", r)
            cls_out.append(self._apply("head.cls_out", c, act=False))
            reg_out.append(self._apply("head.reg_out", r, act=False))
        return PyramidOutput(cls_out, reg_out, self.cfg.level_strides())

    def forward(self, x) -> PyramidOutput:
        return self.head_forward(self.neck_forward(self.backbone_forward(x)))

    __call__ = forward

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


# checkpoints --------------------------------------------------------------------

CKPT_MAGIC = b"TADKIT-CKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict[str, Param], config: dict, extra: dict | None = None) -> None:
    """Text header line (JSON) then little-endian raw arrays in header order."""
    entries = []
    for name, p in params.items():
        entries.append({"name": name, "shape": list(p.data.shape), "dtype": p.data.dtype.name})
    header = {"version": CKPT_VERSION, "params": entries, "config": config, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + b" %d\n" % CKPT_VERSION)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob + b"\n")
        for name, p in params.items():
            fh.write(np.ascontiguousarray(p.data).astype(p.data.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    first = raw.index(b"\n")
    magic, _, version = raw[:first].partition(b" ")
    if magic != CKPT_MAGIC:
        raise DataError(f"{path}: not a tadkit checkpoint")
    if int(version) != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {int(version)}")
    pos = first + 1
    (n,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + n])
    pos += n + 1
    arrays = {}
    for e in header["params"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        nbytes = count * dt.itemsize
        arrays[e["name"]] = np.frombuffer(raw[pos:pos + nbytes], dtype=dt).astype(
            np.dtype(e["dtype"])).reshape(e["shape"])
        pos += nbytes
    if pos != len(raw):
        raise DataError(f"{path}: trailing or missing bytes in checkpoint")
    return arrays, header


def load_params_into(model: TADNet, arrays: dict[str, np.ndarray]) -> None:
    if set(arrays) != set(model.params):
        missing = set(model.params) - set(arrays)
        extra = set(arrays) - set(model.params)
        raise DataError(f"checkpoint/model parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, arr in arrays.items():
        p = model.params[name]
        if p.data.shape != arr.shape:
            raise DataError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
        p.data[...] = arr
