"""Run configuration: one JSON document snapshotting every stage's settings.

Missing keys take defaults, unknown keys are rejected. Model defaults depend on
the head kind (anchor-based or anchor-free), so the head is resolved first.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .core import ConfigError
from .evaluation import EvalConfig
from .inference import FusionStage, PostConfig
from .losses import LossConfig
from .network import BackboneConfig, HeadConfig, HeadKind, ModelConfig, NeckConfig, _jsonable, _parse_head
from .synthdata import SynthSpec, spec_from_dict
from .trainer import OptimConfig


@dataclass
class InferenceConfig:
    fusion_stage: FusionStage = FusionStage.NECK
    windows: str = "forward"
    views: tuple = ("identity",)

    def __post_init__(self):
        self.fusion_stage = FusionStage(self.fusion_stage.upper())
        self.views = tuple(self.views)

    def validate(self):
        if self.windows not in ("forward", "backward", "bidirectional"):
            raise ConfigError(f"unknown window direction {self.windows!r}")
        bad = set(self.views) - {"identity", "threecrop", "flip"}
        if bad:
            raise ConfigError(f"unknown views {sorted(bad)}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.defaults)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    post: PostConfig = field(default_factory=PostConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    seed: int = 0

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.optim.validate()
        self.post.validate()
        self.eval.validate()
        self.synth.validate()
        self.inference.validate()

    def to_dict(self) -> dict:
        d = {
            "model": self.model.to_dict(),
            "loss": dataclasses.asdict(self.loss),
            "optim": dataclasses.asdict(self.optim),
            "post": _jsonable(dataclasses.asdict(self.post)),
            "eval": _jsonable(dataclasses.asdict(self.eval)),
            "synth": self.synth.to_dict(),
            "inference": _jsonable(dataclasses.asdict(self.inference)),
            "seed": self.seed,
        }
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _check_keys(d, cls, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _merge(base, overrides: dict, where: str):
    """New dataclass instance of ``type(base)`` with ``overrides`` applied."""
    cls = type(base)
    _check_keys(overrides, cls, where)
    kwargs = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    for k, v in overrides.items():
        default = kwargs[k]
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, Enum) and isinstance(v, str):
            v = type(default)(v.upper())
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def model_config_from_dict(d: dict | None, head=None) -> ModelConfig:
    d = dict(d or {})
    _check_keys(d, ModelConfig, "model")
    head_d = dict(d.get("head", {}))
    kind = _parse_head(head_d.get("kind", head or "af"))
    cfg = ModelConfig.defaults(kind)
    backbone = _merge(cfg.backbone, d.get("backbone", {}), "model.backbone")
    if "spatial_dims" in d.get("backbone", {}) and backbone.spatial_dims is not None:
        backbone.spatial_dims = tuple(backbone.spatial_dims)
    neck_over = dict(d.get("neck", {}))
    neck = _merge(cfg.neck, neck_over, "model.neck")
    if (neck.variant.value == "TDM_AFTER_BACKBONE" and neck.operator.value == "MAXPOOL"
            and "channels" not in neck_over):
        neck.channels = backbone.stage_channels[-1]
    head_d["kind"] = kind
    hc = _merge(cfg.head, head_d, "model.head")
    out = ModelConfig(backbone, neck, hc, d.get("precision", cfg.precision), d.get("init", cfg.init))
    if "channels" not in head_d:
        hc.channels = out.neck_out_channels()
    out.validate()
    return out


def run_config_from_dict(d: dict | None, head=None) -> RunConfig:
    d = dict(d or {})
    _check_keys(d, RunConfig, "config")
    base = RunConfig()
    synth = d.get("synth", {})
    _check_keys(synth, SynthSpec, "synth")
    merged_synth = spec_from_dict({**base.synth.to_dict(), **synth})
    cfg = RunConfig(
        model=model_config_from_dict(d.get("model"), head),
        loss=_merge(base.loss, d.get("loss", {}), "loss"),
        optim=_merge(base.optim, d.get("optim", {}), "optim"),
        post=_merge(base.post, d.get("post", {}), "post"),
        eval=_merge(base.eval, d.get("eval", {}), "eval"),
        synth=merged_synth,
        inference=_merge(base.inference, d.get("inference", {}), "inference"),
        seed=d.get("seed", 0),
    )
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    cfg.validate()
    return cfg


def load_run_config(path, head=None) -> RunConfig:
    if path is None:
        return run_config_from_dict({}, head)
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return run_config_from_dict(doc, head)


__all__ = [
    "RunConfig", "InferenceConfig", "run_config_from_dict", "model_config_from_dict",
    "load_run_config", "BackboneConfig", "NeckConfig", "HeadConfig", "HeadKind",
]
