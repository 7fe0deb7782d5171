"""Checkpoint I/O for model pairs, corpus loading, evaluation of a
propagation mode over clips, and the key-frame interval sweep."""
from __future__ import annotations

from pathlib import Path

import torch

from .datamodel import KeyFrameSchedule, ModelConfig, ValidationError, read_checkpoint, read_clip, write_checkpoint
from .flow import FlowModule
from .metrics import evaluate
from .propagate import run_pipeline
from .segmentor import Segmentor
from .synth import load_manifest


def save_models(path, segmentor: Segmentor, flow: FlowModule | None = None, meta: dict | None = None):
    tensors = {f"segmentor.{k}": v.detach().numpy() for k, v in segmentor.state_dict().items()}
    if flow is not None:
        tensors.update({f"flow.{k}": v.detach().numpy() for k, v in flow.state_dict().items()})
    info = {"config": segmentor.cfg.to_dict(), "mode": flow.variant if flow is not None else "segmentor"}
    info.update(meta or {})
    write_checkpoint(path, tensors, info)


def load_models(path) -> tuple[Segmentor, FlowModule | None, dict]:
    tensors, meta = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    seg = Segmentor(cfg)
    seg.load_state_dict({k[len("segmentor."):]: torch.from_numpy(v) for k, v in tensors.items()
                         if k.startswith("segmentor.")})
    seg.eval()
    flow = None
    flow_state = {k[len("flow."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("flow.")}
    if flow_state:
        flow = FlowModule(cfg.replace(flow_variant=meta["mode"]))
        flow.load_state_dict(flow_state)
        flow.eval()
    return seg, flow, meta


def load_split(corpus, split: str):
    manifest = load_manifest(corpus)
    if split == "all":
        names = manifest["split"]["train"] + manifest["split"]["val"]
    elif split in manifest["split"]:
        names = manifest["split"][split]
    else:
        raise ValidationError(f"unknown split {split!r}")
    return [read_clip(Path(corpus) / n) for n in names]


def predict_clips(clips, segmentor, flow, mode: str, interval: int):
    """Returns list of (pred label arrays, CostReport) per clip."""
    out = []
    for clip in clips:
        maps, cost = run_pipeline(clip, KeyFrameSchedule(interval, clip.num_frames), segmentor, flow, mode)
        out.append(([m.labels for m in maps], cost))
    return out


def evaluate_mode(clips, segmentor, flow, mode: str, interval: int) -> dict:
    preds = predict_clips(clips, segmentor, flow, mode, interval)
    report = evaluate([(p, list(c.labels)) for (p, _), c in zip(preds, clips)], segmentor.cfg.num_classes)
    total = sum(cost.total for _, cost in preds)
    frames = sum(len(cost.per_frame) for _, cost in preds)
    return {
        "mode": mode,
        "interval": interval,
        "miou": report.miou,
        "wiou": report.wiou,
        "mvc8": report.mvc8,
        "mvc16": report.mvc16,
        "gflops": total / frames / 1e9,
    }


def sweep(clips, models: dict, intervals, modes) -> list[dict]:
    """``models`` maps mode -> (segmentor, flow or None)."""
    rows = []
    for mode in modes:
        seg, flow = models[mode]
        for interval in intervals:
            rows.append(evaluate_mode(clips, seg, flow, mode, interval))
    return rows
