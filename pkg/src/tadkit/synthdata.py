"""Synthetic feature-space videos with planted actions, plus annotation and feature file I/O.

Randomness comes from numpy's Philox counter-based generator keyed through
``SeedSequence(seed, spawn_key=...)`` so every video, signature set and view
is an independent, reproducible stream.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ActionInstance, ConfigError, DataError, Interval, VideoAnnotation

PRNG_NAME = "numpy.random.Philox(SeedSequence(seed, spawn_key=key))"
FEAT_MAGIC = b"TADKIT-FEAT"
ANNOTATION_VERSION = 1

_SIGNATURE_KEY = 0x5157
_VIDEO_KEY = 0x7669
_VIEW_KEY = 0x7677


@dataclass
class SynthSpec:
    seed: int = 7
    n_train: int = 200
    n_test: int = 50
    n_classes: int = 5
    fps: float = 3.0
    duration_range: tuple = (48.0, 120.0)
    instances_range: tuple = (1, 4)
    length_range: tuple = (2.5, 20.0)
    channels: int = 64
    noise_sigma: float = 1.0
    strength: float = 2.0
    ramp: float = 0.5
    spatial_dims: tuple | None = None
    crop_correlation: float = 0.5
    max_tries: int = 1000

    @property
    def n_videos(self) -> int:
        return self.n_train + self.n_test

    def validate(self):
        if self.n_train < 0 or self.n_test < 0 or self.n_videos < 1:
            raise ConfigError("need at least one video")
        if self.n_classes < 1 or self.channels < 2 or self.channels % 2:
            raise ConfigError("need n_classes >= 1 and an even channel count >= 2")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ConfigError("invalid duration_range")
        lo, hi = self.length_range
        if not 0 < lo <= hi:
            raise ConfigError("invalid length_range")
        if self.length_range[1] > self.duration_range[0]:
            raise ConfigError("longest action exceeds the shortest video")
        a, b = self.instances_range
        if not 0 <= a <= b:
            raise ConfigError("invalid instances_range")
        if self.fps <= 0 or self.noise_sigma < 0 or self.strength < 0 or self.ramp < 0:
            raise ConfigError("fps must be positive; sigma, strength and ramp non-negative")
        if not 0 <= self.crop_correlation <= 1:
            raise ConfigError("crop_correlation must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["duration_range"] = list(self.duration_range)
        d["instances_range"] = list(self.instances_range)
        d["length_range"] = list(self.length_range)
        d["spatial_dims"] = list(self.spatial_dims) if self.spatial_dims else None
        return d


@dataclass
class DatasetManifest:
    spec: dict
    videos: list[VideoAnnotation]
    splits: dict[str, str]  # video_id -> "train" | "test"
    num_classes: int
    prng: str = PRNG_NAME

    def subset(self, split: str) -> list[VideoAnnotation]:
        return [v for v in self.videos if self.splits.get(v.video_id) == split]

    def validate(self):
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate video ids in manifest")
        for v in self.videos:
            v.validate(self.num_classes)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    features: dict[str, np.ndarray] = field(repr=False)
    signatures: np.ndarray = field(repr=False)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def channel_involution(c: int) -> np.ndarray:
    """Channel permutation swapping neighbours (0<->1, 2<->3, ...); its own inverse."""
    perm = np.arange(c)
    perm[0::2] += 1
    perm[1::2] -= 1
    return perm


def class_signatures(spec: SynthSpec, max_abs_cos: float = 0.5, tries: int = 100) -> np.ndarray:
    """Unit vectors, one per class, invariant under ``channel_involution`` and with
    pairwise |cos| below ``max_abs_cos``."""
    rng = _rng(spec.seed, _SIGNATURE_KEY)
    half = spec.channels // 2
    for _ in range(tries):
        v = rng.standard_normal((spec.n_classes, half))
        sig = np.repeat(v, 2, axis=1)
        sig /= np.linalg.norm(sig, axis=1, keepdims=True)
        cos = sig @ sig.T
        off = np.abs(cos[~np.eye(spec.n_classes, dtype=bool)])
        if off.size == 0 or off.max() < max_abs_cos:
            return sig
    raise ConfigError(f"could not draw near-orthogonal signatures for {spec.n_classes} classes "
                      f"in {spec.channels} channels")


def envelope(times: np.ndarray, start: float, end: float, ramp: float) -> np.ndarray:
    """1 inside the action, 0 outside, linear ramps of width ``ramp`` centred on
    each boundary."""
    inner = np.minimum(times - start, end - times)
    if ramp <= 0:
        return (inner > 0).astype(np.float64)
    return np.clip(0.5 + inner / ramp, 0.0, 1.0)


def clean_signal(ann: VideoAnnotation, signatures: np.ndarray, strength: float, ramp: float,
                 n_frames: int | None = None) -> np.ndarray:
    n = ann.num_frames if n_frames is None else n_frames
    times = (np.arange(n) + 0.5) / ann.fps
    sig = np.zeros((signatures.shape[1], n))
    for inst in ann.instances:
        env = envelope(times, inst.interval.start, inst.interval.end, ramp)
        sig += strength * np.outer(signatures[inst.class_id], env)
    return sig


def _sample_instances(rng, spec: SynthSpec, duration: float) -> list[ActionInstance]:
    n_inst = int(rng.integers(spec.instances_range[0], spec.instances_range[1] + 1))
    placed: list[ActionInstance] = []
    lo, hi = np.log(spec.length_range[0]), np.log(spec.length_range[1])
    for _ in range(n_inst):
        for _attempt in range(spec.max_tries):
            length = float(np.exp(rng.uniform(lo, hi)))
            start = float(rng.uniform(0.0, duration - length))
            cls = int(rng.integers(0, spec.n_classes))
            end = start + length
            if all(end <= p.interval.start or start >= p.interval.end for p in placed):
                placed.append(ActionInstance(Interval(start, end), cls))
                break
        else:
            raise ConfigError(
                f"could not place {n_inst} non-overlapping actions in a {duration:.1f}s video "
                f"after {spec.max_tries} tries; SynthSpec too dense"
            )
    placed.sort(key=lambda p: p.interval.start)
    return placed


def generate(spec: SynthSpec | None = None) -> SyntheticDataset:
    spec = spec or SynthSpec()
    spec.validate()
    sigs = class_signatures(spec)
    videos, feats, splits = [], {}, {}
    for v in range(spec.n_videos):
        rng = _rng(spec.seed, _VIDEO_KEY, v)
        n_frames = max(1, int(round(rng.uniform(*spec.duration_range) * spec.fps)))
        duration = n_frames / spec.fps
        instances = _sample_instances(rng, spec, duration)
        vid = f"video_{v:05d}"
        ann = VideoAnnotation(vid, duration, spec.fps, instances)
        sig = clean_signal(ann, sigs, spec.strength, spec.ramp, n_frames)
        shape = (spec.channels, n_frames) + tuple(spec.spatial_dims or ())
        noise = spec.noise_sigma * rng.standard_normal(shape)
        if spec.spatial_dims:
            sig = sig[:, :, None, None]
        feats[vid] = (sig + noise).astype(np.float32)
        videos.append(ann)
        splits[vid] = "train" if v < spec.n_train else "test"
    manifest = DatasetManifest(spec.to_dict(), videos, splits, spec.n_classes)
    manifest.validate()
    return SyntheticDataset(manifest, feats, sigs)


def spec_from_dict(d: dict) -> SynthSpec:
    known = set(SynthSpec.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown SynthSpec keys: {sorted(unknown)}")
    d = dict(d)
    for k in ("duration_range", "instances_range", "length_range", "spatial_dims"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return SynthSpec(**d)


# test-time views -------------------------------------------------------------------

def make_views(features: np.ndarray, ann: VideoAnnotation, spec: SynthSpec,
               kinds=("identity",), signatures: np.ndarray | None = None) -> list[np.ndarray]:
    """Deterministic stand-ins for spatial test-time augmentation.

    ``threecrop`` gives the input plus two re-drawn noise realisations
    (correlated with the original by ``crop_correlation``); ``flip`` adds the
    channel-involution of every view produced so far.
    """
    kinds = set(kinds)
    unknown = kinds - {"identity", "threecrop", "flip"}
    if unknown:
        raise ConfigError(f"unknown view kinds {sorted(unknown)}")
    views = [features]
    if "threecrop" in kinds:
        sigs = class_signatures(spec) if signatures is None else signatures
        clean = clean_signal(ann, sigs, spec.strength, spec.ramp, features.shape[1])
        if features.ndim == 4:
            clean = clean[:, :, None, None]
        noise = features - clean
        rho = spec.crop_correlation
        key = zlib.crc32(ann.video_id.encode())
        for k in (1, 2):
            fresh = spec.noise_sigma * _rng(spec.seed, _VIEW_KEY, key, k).standard_normal(features.shape)
            views.append((clean + rho * noise + math.sqrt(1 - rho ** 2) * fresh).astype(features.dtype))
    if "flip" in kinds:
        perm = channel_involution(features.shape[0])
        views = views + [v[perm] for v in views]
    return views


# files ----------------------------------------------------------------------------------

def _pointer(*parts) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def annotations_to_json(videos: list[VideoAnnotation], fps: float) -> dict:
    return {
        "version": ANNOTATION_VERSION,
        "fps": fps,
        "videos": [
            {
                "id": v.video_id,
                "duration": v.duration,
                "instances": [
                    {"start": i.interval.start, "end": i.interval.end, "class": i.class_id}
                    for i in v.instances
                ],
            }
            for v in videos
        ],
    }


def annotations_from_json(doc, num_classes: int | None = None) -> tuple[list[VideoAnnotation], float]:
    """Parse and validate an annotation document; errors name the offending JSON pointer."""

    def need(cond, ptr, msg):
        if not cond:
            raise DataError(f"{ptr}: {msg}")

    def number(val, ptr):
        need(isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val),
             ptr, "expected a finite number")
        return float(val)

    need(isinstance(doc, dict), "", "expected an object")
    need(doc.get("version") == ANNOTATION_VERSION, _pointer("version"),
         f"expected version {ANNOTATION_VERSION}")
    fps = number(doc.get("fps"), _pointer("fps"))
    need(fps > 0, _pointer("fps"), "must be positive")
    vids = doc.get("videos")
    need(isinstance(vids, list), _pointer("videos"), "expected an array")
    out, seen = [], set()
    for vi, v in enumerate(vids):
        need(isinstance(v, dict), _pointer("videos", vi), "expected an object")
        vid = v.get("id")
        need(isinstance(vid, str) and vid, _pointer("videos", vi, "id"), "expected a non-empty string")
        need(vid not in seen, _pointer("videos", vi, "id"), f"duplicate video id {vid!r}")
        seen.add(vid)
        dur = number(v.get("duration"), _pointer("videos", vi, "duration"))
        need(dur > 0, _pointer("videos", vi, "duration"), "must be positive")
        insts = v.get("instances", [])
        need(isinstance(insts, list), _pointer("videos", vi, "instances"), "expected an array")
        parsed = []
        for ii, inst in enumerate(insts):
            base = ("videos", vi, "instances", ii)
            need(isinstance(inst, dict), _pointer(*base), "expected an object")
            s = number(inst.get("start"), _pointer(*base, "start"))
            e = number(inst.get("end"), _pointer(*base, "end"))
            c = inst.get("class")
            need(isinstance(c, int) and not isinstance(c, bool) and c >= 0, _pointer(*base, "class"),
                 "expected a non-negative integer")
            if num_classes is not None:
                need(c < num_classes, _pointer(*base, "class"), f"class {c} >= catalog size {num_classes}")
            need(e > s, _pointer(*base, "end"), f"end {e} must exceed start {s}")
            need(s >= 0, _pointer(*base, "start"), "must be non-negative")
            need(e <= dur + 1e-9, _pointer(*base, "end"), f"instance ends after the video duration {dur}")
            parsed.append(ActionInstance(Interval(s, e), c))
        out.append(VideoAnnotation(vid, dur, fps, parsed))
    return out, fps


def write_annotations(path, videos: list[VideoAnnotation], fps: float) -> None:
    Path(path).write_text(json.dumps(annotations_to_json(videos, fps), indent=1, sort_keys=True) + "\n")


def read_annotations(path, num_classes: int | None = None) -> tuple[list[VideoAnnotation], float]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    except FileNotFoundError as e:
        raise DataError(f"{path}: no such file") from e
    try:
        return annotations_from_json(doc, num_classes)
    except DataError as e:
        raise DataError(f"{path}: {e}") from e


def write_features(path, video_id: str, arr: np.ndarray) -> None:
    header = {"video_id": video_id, "shape": list(arr.shape), "precision": arr.dtype.name}
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC + b" 1\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def read_features(path) -> tuple[str, np.ndarray]:
    raw = Path(path).read_bytes()
    first = raw.index(b"\n")
    if raw[:first].split(b" ")[0] != FEAT_MAGIC:
        raise DataError(f"{path}: not a tadkit feature file")
    second = raw.index(b"\n", first + 1)
    header = json.loads(raw[first + 1:second])
    dt = np.dtype(header["precision"])
    arr = np.frombuffer(raw[second + 1:], dtype=dt.newbyteorder("<")).astype(dt)
    shape = tuple(header["shape"])
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{path}: payload size does not match header shape {shape}")
    return header["video_id"], arr.reshape(shape)


def write_dataset(ds: SyntheticDataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    m = ds.manifest
    fps = float(m.spec["fps"])
    for split in ("train", "test"):
        write_annotations(out / f"{split}.json", m.subset(split), fps)
    manifest = {
        "version": 1,
        "prng": m.prng,
        "num_classes": m.num_classes,
        "spec": m.spec,
        "splits": {k: m.splits[k] for k in sorted(m.splits)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    for vid, arr in ds.features.items():
        write_features(out / "features" / f"{vid}.feat", vid, arr)


@dataclass
class LoadedSplit:
    videos: list[VideoAnnotation]
    features: dict[str, np.ndarray]
    spec: SynthSpec | None
    num_classes: int
    fps: float


def load_split(data_dir, split: str) -> LoadedSplit:
    d = Path(data_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{d}: missing manifest.json") from e
    num_classes = int(manifest["num_classes"])
    videos, fps = read_annotations(d / f"{split}.json", num_classes)
    feats = {}
    for v in videos:
        vid, arr = read_features(d / "features" / f"{v.video_id}.feat")
        if vid != v.video_id:
            raise DataError(f"feature file for {v.video_id} carries id {vid}")
        feats[vid] = arr
    spec = spec_from_dict(manifest["spec"]) if manifest.get("spec") else None
    return LoadedSplit(videos, feats, spec, num_classes, fps)
