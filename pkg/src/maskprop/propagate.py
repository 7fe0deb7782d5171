"""Mask warping, semantic composition, propagation baselines and the
per-clip key-frame pipeline."""
from __future__ import annotations

import numpy as np
import torch

from . import kernels
from .datamodel import (
    FlowMapSet,
    KeyFrameSchedule,
    MaskPredictionSet,
    SemanticMap,
    ValidationError,
    VideoClip,
)
from .flow import USES_KEY_QUERIES, FlowModule, estimate_flow
from .segmentor import Segmentor, segment_key_frame

MODES = ("mpvss", "copy", "pixelflow", "perframe")


def bilinear_warp(masks: MaskPredictionSet, flows: FlowMapSet) -> MaskPredictionSet:
    """Backward-warp every key-frame mask by its own flow map.

    Output pixel (y, x) of mask n samples mask n at (x + dx, y + dy), with
    sample coordinates clamped to the border.  Class logits are carried over.
    """
    if masks.n != flows.n:
        raise ValidationError(f"{masks.n} masks but {flows.n} flow maps")
    if masks.mask_logits.shape[1:] != flows.flow.shape[2:]:
        raise ValidationError(
            f"mask size {masks.mask_logits.shape[1:]} != flow size {flows.flow.shape[2:]}"
        )
    warped = kernels.warp_bilinear(masks.mask_logits, flows.flow)
    return MaskPredictionSet(mask_logits=warped, class_logits=masks.class_logits)


def warp_torch(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of :func:`bilinear_warp`.

    ``src`` is B x N x H x W, ``flow`` B x N x 2 x H x W.
    """
    b, n, h, w = src.shape
    ys = torch.arange(h, dtype=flow.dtype).view(1, 1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype).view(1, 1, 1, w)
    sx = (xs + flow[:, :, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, :, 1]).clamp(0, h - 1)
    x0f = sx.detach().floor()
    y0f = sy.detach().floor()
    wx = sx - x0f
    wy = sy - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = src.reshape(b, n, h * w)

    def tap(yy, xx):
        return torch.gather(flat, 2, (yy * w + xx).reshape(b, n, h * w)).reshape(b, n, h, w)

    top = (1 - wx) * tap(y0, x0) + wx * tap(y0, x1)
    bot = (1 - wx) * tap(y1, x0) + wx * tap(y1, x1)
    return (1 - wy) * top + wy * bot


def semantic_scores(mask_logits, class_logits):
    """Per-class scores K x H x W: sum over queries of class prob x mask prob."""
    cl = np.asarray(class_logits, dtype=np.float64)
    probs = np.exp(cl - cl.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    masks = 1.0 / (1.0 + np.exp(-np.asarray(mask_logits, dtype=np.float64)))
    return np.einsum("nk,nhw->khw", probs[:, :-1], masks)


def compose_semantic(masks: MaskPredictionSet) -> SemanticMap:
    """Argmax over real classes; exact ties go to the lower class id."""
    scores = semantic_scores(masks.mask_logits, masks.class_logits)
    return SemanticMap(scores.argmax(axis=0), num_classes=masks.num_classes)


def propagate_copy(key_masks: MaskPredictionSet) -> MaskPredictionSet:
    return key_masks


def propagate_pixelflow(key_masks: MaskPredictionSet, frame_k, frame_j, model: FlowModule) -> MaskPredictionSet:
    """Warp every mask by one shared pixel-wise flow field."""
    if model.variant != "pixelflow":
        raise ValueError(f"pixelflow propagation needs a pixelflow model, got {model.variant}")
    flows = estimate_flow(frame_k, frame_j, None, model)
    shared = np.broadcast_to(flows.flow[:1], (key_masks.n,) + flows.flow.shape[1:])
    return bilinear_warp(key_masks, FlowMapSet(shared))


def propagate_query_flow(key_masks: MaskPredictionSet, key_queries, frame_k, frame_j, model: FlowModule):
    q = key_queries if model.variant in USES_KEY_QUERIES else None
    return bilinear_warp(key_masks, estimate_flow(frame_k, frame_j, q, model))


def run_pipeline(
    clip: VideoClip,
    schedule: KeyFrameSchedule,
    segmentor: Segmentor,
    flow_model: FlowModule | None = None,
    mode: str = "mpvss",
):
    """Segment a clip: key frames by the segmentor, the rest by propagation.

    Returns (list of SemanticMap, CostReport).
    """
    from .metrics import CostReport, estimate_flops

    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if clip.num_frames < 1:
        raise ValidationError("empty clip")
    if schedule.num_frames != clip.num_frames:
        raise ValidationError("schedule length does not match clip")
    if mode in ("mpvss", "pixelflow"):
        if flow_model is None:
            raise ValueError(f"mode {mode} needs a flow model")
        if (mode == "pixelflow") != (flow_model.variant == "pixelflow"):
            raise ValueError(f"mode {mode} incompatible with flow variant {flow_model.variant}")
    if mode == "perframe":
        schedule = KeyFrameSchedule(interval=1, num_frames=clip.num_frames)

    cfg = segmentor.cfg
    h, w = clip.height, clip.width
    key_cost = estimate_flops(cfg, h, w, "key")
    nonkey_cost = estimate_flops(cfg, h, w, "nonkey", mode=mode if mode != "mpvss" else flow_model.variant)

    maps, roles = [], []
    cache: dict[int, tuple] = {}
    for t in range(clip.num_frames):
        k = schedule.governor[t]
        if k == t:
            cache = {k: segment_key_frame(clip.frames[k], segmentor)}
            maps.append(compose_semantic(cache[k][1]))
            roles.append("key")
            continue
        queries, key_masks = cache[k]
        if mode == "copy":
            pred = propagate_copy(key_masks)
        elif mode == "pixelflow":
            pred = propagate_pixelflow(key_masks, clip.frames[k], clip.frames[t], flow_model)
        else:
            pred = propagate_query_flow(key_masks, queries, clip.frames[k], clip.frames[t], flow_model)
        maps.append(compose_semantic(pred))
        roles.append("nonkey")
    return maps, CostReport.from_roles(roles, key_cost, nonkey_cost)
