"""Command-line entry point: ``maskprop {gen,train,infer,eval,sweep}``.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
The environment variable ``MASKPROP_THREADS`` sets the torch thread count
(default 1, which keeps runs bit-reproducible).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .datamodel import (
    ModelConfig,
    ValidationError,
    atomic_write_bytes,
    atomic_write_json,
    encode_pnm,
    load_config,
    read_pnm,
)
from .experiments import load_models, load_split, predict_clips, save_models, sweep
from .flow import FlowModule
from .metrics import evaluate, metrics_csv
from .segmentor import Segmentor
from .synth import CorpusParams, generate_corpus, load_manifest
from .train import TrainConfig, pretrain_segmentor, train_flow

log = logging.getLogger("maskprop")

TRAIN_MODES = ("segmentor",) + ModelConfig.VARIANTS
INFER_MODES = ("mpvss", "copy", "pixelflow", "perframe")
SEG_LR = 1e-3
FLOW_LR = 2e-3


class UsageError(Exception):
    pass


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def cmd_gen(args):
    if args.size % 32:
        raise UsageError(f"--size {args.size} must be divisible by 32")
    if args.clips < 0 or args.frames < 1:
        raise UsageError("--clips must be >= 0 and --frames >= 1")
    params = CorpusParams(size=args.size, frames=args.frames, val_clips=args.val_clips)
    manifest = generate_corpus(args.out, args.clips, params, seed=args.seed)
    print(f"wrote {manifest['n_clips']} clips to {args.out}")


def _overrides(args) -> dict:
    out = {"seed": args.seed}
    if args.mode != "segmentor":
        out["flow_variant"] = args.mode
    return out


def cmd_train(args):
    clips = load_split(args.corpus, "train")
    if not clips:
        raise UsageError("corpus has no training clips")
    if args.init:
        # the pretrained segmentor fixes the architecture
        seg, _, _ = load_models(args.init)
        cfg = seg.cfg.replace(**_overrides(args))
    else:
        cfg = (load_config(args.config) if args.config else ModelConfig()).replace(**_overrides(args))
        _seed_everything(args.seed)
        seg = Segmentor(cfg)
    seg.cfg = cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _seed_everything(args.seed)
    meta = {"seed": args.seed, "steps": args.steps}
    if args.mode == "segmentor":
        tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr or SEG_LR, seed=args.seed)
        with open(out / "train_log.jsonl.tmp", "w") as fh:
            pretrain_segmentor(seg, clips, tcfg, fh)
        os.replace(out / "train_log.jsonl.tmp", out / "train_log.jsonl")
        save_models(out / "checkpoint.bin", seg, None, meta)
        return
    if not args.init:
        seg_cfg = TrainConfig(steps=args.seg_steps, batch_size=args.batch_size, lr=SEG_LR, seed=args.seed)
        with open(out / "segmentor_log.jsonl.tmp", "w") as fh:
            pretrain_segmentor(seg, clips, seg_cfg, fh)
        os.replace(out / "segmentor_log.jsonl.tmp", out / "segmentor_log.jsonl")
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr or FLOW_LR,
                       max_offset=args.max_offset or cfg.key_interval, seed=args.seed)
    torch.manual_seed(args.seed)
    flow = FlowModule(cfg)
    with open(out / "train_log.jsonl.tmp", "w") as fh:
        train_flow(seg, flow, clips, tcfg, fh)
    os.replace(out / "train_log.jsonl.tmp", out / "train_log.jsonl")
    save_models(out / "checkpoint.bin", seg, flow, meta)


def _write_predictions(out: Path, clips, preds):
    index = {}
    for clip, (maps, cost) in zip(clips, preds):
        for t, lab in enumerate(maps):
            atomic_write_bytes(out / clip.clip_id / f"{t:05d}.pgm", encode_pnm(lab))
        atomic_write_json(out / clip.clip_id / "cost.json", cost.to_dict())
        index[clip.clip_id] = {"num_frames": len(maps), "mean_flops_per_frame": cost.mean_per_frame}
    return index


def cmd_infer(args):
    seg, flow, meta = load_models(args.checkpoint)
    if args.mode in ("mpvss", "pixelflow") and flow is None:
        raise UsageError(f"checkpoint {args.checkpoint} has no flow module for mode {args.mode}")
    clips = load_split(args.corpus, args.split)
    out = Path(args.out)
    preds = predict_clips(clips, seg, flow, args.mode, args.interval)
    index = _write_predictions(out, clips, preds)
    total = sum(c.total for _, c in preds)
    frames = sum(len(c.per_frame) for _, c in preds)
    atomic_write_json(out / "index.json", {
        "mode": args.mode, "interval": args.interval, "num_classes": seg.cfg.num_classes,
        "clips": index, "total_flops": total, "mean_flops_per_frame": total / max(frames, 1),
    })


def cmd_eval(args):
    pred_root = Path(args.pred)
    index = json.loads((pred_root / "index.json").read_text())
    manifest = load_manifest(args.gt)
    names = list(index["clips"])
    known = set(manifest["split"]["train"]) | set(manifest["split"]["val"])
    pairs = []
    for name in names:
        if name not in known:
            raise ValidationError(f"prediction clip {name} not in ground-truth corpus")
        gt_clip = load_split_clip(args.gt, name)
        preds = []
        for t in range(gt_clip.num_frames):
            p = pred_root / name / f"{t:05d}.pgm"
            if not p.exists():
                raise ValidationError(f"missing prediction {name}/{t:05d}.pgm")
            preds.append(read_pnm(p))
        pairs.append((preds, list(gt_clip.labels)))
    report = evaluate(pairs, index["num_classes"])
    data = report.to_dict()
    atomic_write_json(args.report, data)
    print(json.dumps({k: data[k] for k in ("miou", "wiou", "mvc8", "mvc16")}))


def load_split_clip(corpus, name):
    from .datamodel import read_clip

    return read_clip(Path(corpus) / name)


def _parse_intervals(text: str):
    vals = []
    for part in text.split(","):
        if ".." in part:
            a, b = part.split("..")
            vals.extend(range(int(a), int(b) + 1))
        else:
            vals.append(int(part))
    if not vals or min(vals) < 1:
        raise UsageError(f"bad --intervals {text!r}")
    return vals


def cmd_sweep(args):
    intervals = _parse_intervals(args.intervals)
    ckpts = {}
    for item in args.checkpoint:
        mode, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--checkpoint expects MODE=PATH, got {item!r}")
        ckpts[mode] = path
    modes = args.modes.split(",")
    models = {}
    for mode in modes:
        if mode not in INFER_MODES:
            raise UsageError(f"unknown mode {mode!r}")
        path = ckpts.get(mode) or ckpts.get("default")
        if path is None:
            raise UsageError(f"no checkpoint for mode {mode}; pass --checkpoint {mode}=PATH")
        seg, flow, _ = load_models(path)
        models[mode] = (seg, flow)
    rows = sweep(load_split(args.corpus, args.split), models, intervals, modes)
    atomic_write_bytes(args.out, metrics_csv(rows).encode())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskprop", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=60)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--frames", type=int, default=15)
    g.add_argument("--val-clips", type=int, default=10)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the segmentor or a flow variant")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help="flat JSON of ModelConfig fields")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--mode", choices=TRAIN_MODES, default="mpvss")
    t.add_argument("--init", help="checkpoint supplying a pretrained segmentor")
    t.add_argument("--seg-steps", type=int, default=1500, help="segmentor steps when --init is absent")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=None,
                   help=f"learning rate (default {SEG_LR} for the segmentor, {FLOW_LR} for flow)")
    t.add_argument("--max-offset", type=int, default=0, help="largest key/non-key offset (0: key interval)")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment clips and write semantic maps + costs")
    i.add_argument("--corpus", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--interval", type=int, default=5)
    i.add_argument("--mode", choices=INFER_MODES, default="mpvss")
    i.add_argument("--split", default="val")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against a corpus")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="metrics and GFLOPs per (interval, mode)")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", action="append", default=[], help="MODE=PATH (or default=PATH)")
    s.add_argument("--intervals", default="1..10")
    s.add_argument("--modes", default="mpvss,copy")
    s.add_argument("--split", default="val")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("MASKPROP_THREADS", "1")))
    if getattr(args, "interval", 1) < 1:
        print("error: --interval must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (UsageError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
