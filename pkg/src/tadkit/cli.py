"""``tadkit`` command line: gen, train, detect, eval, bench, gradcheck.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, load_run_config, run_config_from_dict
from .core import ConfigError, DataError, NumericError, TadError
from .evaluation import EvalConfig, evaluate
from .inference import Detector, plan_windows, write_detections, read_detections
from .network import TADNet, load_checkpoint, load_params_into
from .synthdata import (SynthSpec, generate, load_split, make_views, read_annotations, spec_from_dict,
                        write_dataset)
from .trainer import TrainSample, model_grad_check, train

log = logging.getLogger("tadkit")

GRADCHECK_TOL = 1e-4


def _read_json(path, err=ConfigError):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise err(f"{path}: no such file") from e
    except json.JSONDecodeError as e:
        raise err(f"{path}: invalid JSON ({e})") from e


def _load_model(ckpt) -> tuple[TADNet, RunConfig, dict]:
    try:
        arrays, header = load_checkpoint(ckpt)
    except FileNotFoundError as e:
        raise DataError(f"{ckpt}: no such file") from e
    cfg_doc = header.get("config", {})
    head = cfg_doc.get("model", {}).get("head", {}).get("kind")
    cfg = run_config_from_dict(cfg_doc, head)
    model = TADNet(cfg.model, 0)
    load_params_into(model, arrays)
    return model, cfg, header


def _check_channels(cfg: RunConfig, features: dict):
    c = cfg.model.backbone.in_channels
    for vid, arr in features.items():
        if arr.shape[0] != c:
            raise DataError(f"{vid}: features have {arr.shape[0]} channels, model expects {c}")
        break


def cmd_gen(args) -> int:
    spec = spec_from_dict(_read_json(args.spec)) if args.spec else SynthSpec()
    ds = generate(spec)
    write_dataset(ds, args.out)
    m = ds.manifest
    print(f"wrote {len(m.subset('train'))} train / {len(m.subset('test'))} test videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    if args.head:
        model = dict(doc.get("model", {}))
        head = dict(model.get("head", {}))
        head["kind"] = args.head
        model["head"] = head
        doc = {**doc, "model": model}
    cfg = run_config_from_dict(doc, args.head)
    if args.iterations is not None:
        cfg.optim.iterations = args.iterations
    split = load_split(args.data, "train")
    _check_channels(cfg, split.features)
    if split.num_classes != cfg.model.head.num_classes:
        raise ConfigError(f"data has {split.num_classes} classes, head is configured for "
                          f"{cfg.model.head.num_classes}")
    spec = split.spec or cfg.synth
    samples = []
    for v in split.videos:
        feats = split.features[v.video_id]
        extra = make_views(feats, v, spec, cfg.optim.train_views)[1:]
        samples.append(TrainSample(feats, v, tuple(extra)))
    log_path = args.log or str(args.out) + ".log.jsonl"
    res = train(samples, cfg.model, cfg.optim, cfg.seed, cfg.loss, log_path=log_path,
                checkpoint_path=args.out, config_snapshot=cfg.to_dict())
    last = res.history[-1] if res.history else {}
    print(json.dumps({"checkpoint": str(args.out), "log": log_path, "iterations": len(res.history),
                      "final_loss": last.get("loss_total")}, sort_keys=True))
    return 0


def _detector(model: TADNet, cfg: RunConfig, fps: float, fuse=None, windows=None) -> Detector:
    return Detector(model, fps, cfg.optim.clip_len, cfg.post,
                    (fuse or cfg.inference.fusion_stage.value).upper(),
                    windows or cfg.inference.windows)


def cmd_detect(args) -> int:
    model, cfg, _ = _load_model(args.ckpt)
    split = load_split(args.data, args.split)
    _check_channels(cfg, split.features)
    kinds = tuple(args.tta.split(",")) if args.tta else cfg.inference.views
    spec = split.spec or cfg.synth
    det = _detector(model, cfg, split.fps, args.fuse, args.windows)
    results = {}
    for v in split.videos:
        feats = split.features[v.video_id]
        views = make_views(feats, v, spec, kinds)
        results[v.video_id] = det.detect(views, v.duration)
    write_detections(args.out, results)
    n = sum(len(d) for d in results.values())
    print(f"wrote {n} detections for {len(results)} videos to {args.out}")
    return 0


def _thresholds(text: str | None):
    if not text:
        return None
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --thresholds {text!r}") from e


def cmd_eval(args) -> int:
    dets = read_detections(args.dets)
    videos, _ = read_annotations(args.ann)
    cfg = EvalConfig(_thresholds(args.thresholds)) if args.thresholds else EvalConfig()
    res = evaluate(dets, videos, cfg)
    sys.stdout.write(res.table())
    if args.json:
        Path(args.json).write_text(res.dumps())
    else:
        sys.stdout.write(res.dumps())
    return 0


def cmd_bench(args) -> int:
    model, cfg, _ = _load_model(args.ckpt)
    split = load_split(args.data, args.split)
    _check_channels(cfg, split.features)
    det = _detector(model, cfg, split.fps)
    videos = split.videos[: args.videos] if args.videos else split.videos
    rates = []
    for _ in range(args.repeats):
        frames = 0
        t0 = time.perf_counter()
        for v in videos:
            feats = split.features[v.video_id]
            plan = plan_windows(feats.shape[1], det.clip_len, det.direction)
            det.detect(feats, v.duration, plan)
            frames += feats.shape[1]
        rates.append(frames / (time.perf_counter() - t0))
    print(json.dumps({"fps": float(np.median(rates)), "runs": [round(r, 3) for r in rates],
                      "videos": len(videos)}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config, args.head)
    err, checked = model_grad_check(cfg.model, seed=cfg.seed, n_coords=args.coords,
                                    loss_cfg=cfg.loss, corrupt=args.corrupt)
    ok = err < GRADCHECK_TOL
    print(json.dumps({"max_rel_error": err, "coords": checked, "pass": ok}, sort_keys=True))
    if not ok:
        raise NumericError(f"gradient check failed: max relative error {err:.3e} >= {GRADCHECK_TOL}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tadkit", description="Temporal action detection toolkit")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS/OpenMP threads (default: $TADKIT_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", help="SynthSpec JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="run config JSON (defaults if omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--head", choices=["ab", "af"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--log", help="per-iteration JSONL metrics (default: <out>.log.jsonl)")
    t.set_defaults(fn=cmd_train)

    d = sub.add_parser("detect", help="run inference on a data split")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--tta", help="comma list of views: identity,threecrop,flip")
    d.add_argument("--fuse", choices=["backbone", "neck", "head", "post"])
    d.add_argument("--windows", choices=["forward", "backward", "bidirectional"])
    d.set_defaults(fn=cmd_detect)

    e = sub.add_parser("eval", help="score detections")
    e.add_argument("--dets", required=True)
    e.add_argument("--ann", required=True)
    e.add_argument("--thresholds", help="comma list, e.g. 0.5,0.75,0.95")
    e.add_argument("--json", help="write the metrics JSON here instead of stdout")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="measure inference frames per second")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--split", default="test")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--videos", type=int, default=None)
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference check of the configured model")
    c.add_argument("--config")
    c.add_argument("--head", choices=["ab", "af"])
    c.add_argument("--coords", type=int, default=200)
    c.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def _threads(arg) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("TADKIT_THREADS")
    if not env:
        return None
    try:
        n = int(env)
    except ValueError as e:
        raise ConfigError(f"TADKIT_THREADS must be an integer, got {env!r}") from e
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args.threads)
        if threads is not None and threads < 1:
            raise ConfigError("thread count must be >= 1")
        with threadpool_limits(limits=threads):
            return args.fn(args)
    except TadError as e:
        print(f"tadkit {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
