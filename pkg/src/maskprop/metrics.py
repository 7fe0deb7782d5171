"""Segmentation metrics (mIoU, WIoU, video consistency) and an analytic
FLOPs model of the key-frame and non-key-frame paths."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .datamodel import IGNORE_LABEL, ModelConfig
from .segmentor import NUM_DECODER_BLOCKS


def confusion_accumulate(pred, gt, num_classes: int, counts: np.ndarray | None = None) -> np.ndarray:
    """Add ``counts[g][p]`` per non-ignore pixel; returns the (new) K x K matrix."""
    pred = getattr(pred, "labels", pred)
    add = kernels.confusion_matrix(np.asarray(pred), np.asarray(gt), num_classes, IGNORE_LABEL)
    return add if counts is None else counts + add


def per_class_iou(confusion: np.ndarray) -> list[float | None]:
    conf = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - tp
    return [float(tp[c] / union[c]) if union[c] > 0 else None for c in range(conf.shape[0])]


def _gt_present(confusion):
    conf = np.asarray(confusion, dtype=np.int64)
    if conf.sum() == 0:
        raise ValueError("confusion matrix is empty")
    return conf.sum(1)


def miou(confusion) -> float:
    """Mean IoU over classes that occur in the ground truth."""
    gt_px = _gt_present(confusion)
    ious = per_class_iou(confusion)
    present = [ious[c] for c in range(len(ious)) if gt_px[c] > 0]
    return float(np.mean(present))


def wiou(confusion) -> float:
    """IoU weighted by ground-truth pixel frequency."""
    gt_px = _gt_present(confusion)
    ious = per_class_iou(confusion)
    total = gt_px.sum()
    # divide once so a perfect prediction gives exactly 1.0
    return float(sum(gt_px[c] * ious[c] for c in range(len(ious)) if gt_px[c] > 0) / total)


def video_consistency(pred_maps, gt_maps, f: int) -> float | None:
    """VC_f of one clip, or ``None`` when undefined.

    A pixel counts toward a window when its GT label is constant (and not
    ignore) over the f frames; it agrees when the prediction equals that
    label on all f frames.  Windows with no GT-stable pixel are skipped.
    """
    gt = np.stack([np.asarray(getattr(g, "labels", g)) for g in gt_maps])
    pred = np.stack([np.asarray(getattr(p, "labels", p)) for p in pred_maps])
    if gt.shape[0] < f:
        warnings.warn(f"clip has {gt.shape[0]} frames < f={f}; skipped")
        return None
    counts = kernels.window_consistency(gt, pred, f, IGNORE_LABEL)
    valid = counts[:, 0] > 0
    if not valid.any():
        return None
    return float(np.mean(counts[valid, 1] / counts[valid, 0]))


def mvc(clips, f: int) -> float | None:
    """Mean VC_f over ``(pred_maps, gt_maps)`` pairs with a defined value."""
    vals = []
    for pred, gt in clips:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            v = video_consistency(pred, gt, f)
        if v is not None:
            vals.append(v)
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    miou: float
    wiou: float
    per_class_iou: list
    mvc8: float | None
    mvc16: float | None
    confusion: list

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "wiou": self.wiou,
            "per_class_iou": ["absent" if v is None else v for v in self.per_class_iou],
            "mvc8": "absent" if self.mvc8 is None else self.mvc8,
            "mvc16": "absent" if self.mvc16 is None else self.mvc16,
            "confusion": self.confusion,
        }


def evaluate(clips, num_classes: int) -> MetricsReport:
    """``clips`` is a list of ``(pred_maps, gt_maps)``, each a list of H x W arrays."""
    conf = np.zeros((num_classes, num_classes), np.int64)
    for pred, gt in clips:
        for p, g in zip(pred, gt):
            conf = confusion_accumulate(p, g, num_classes, conf)
    return MetricsReport(
        miou=miou(conf),
        wiou=wiou(conf),
        per_class_iou=per_class_iou(conf),
        mvc8=mvc(clips, 8),
        mvc16=mvc(clips, 16),
        confusion=conf.tolist(),
    )


def metrics_csv(rows: list[dict]) -> str:
    cols = ["mode", "interval", "miou", "wiou", "mvc8", "mvc16", "gflops"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[c for c in cols if any(c in r for r in rows)],
                            lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# FLOPs model: a multiply-add is 2 FLOPs; norms, activations and softmax are free.


def conv_flops(k: int, cin: int, cout: int, hout: int, wout: int) -> int:
    return 2 * k * k * cin * cout * hout * wout


def linear_flops(din: int, dout: int, tokens: int) -> int:
    return 2 * din * dout * tokens


def attention_flops(tq: int, tk: int, c: int) -> int:
    """Scores/aggregation plus projections; 2*T^2*C + 2*T*C^2 when tq == tk == T."""
    return 2 * tq * tk * c + 2 * tq * c * c


def interp_flops(elements: int) -> int:
    """Bilinear interpolation of one value: 8 FLOPs."""
    return 8 * elements


def _conv_stack(cin, stem, widths, h, w):
    h, w = h // 2, w // 2
    total = conv_flops(3, cin, stem, h, w)
    prev = stem
    for wd in widths:
        h, w = h // 2, w // 2
        total += conv_flops(3, prev, wd, h, w) + conv_flops(3, wd, wd, h, w)
        prev = wd
    return total


def _mlp(din, dhid, dout, tokens, hidden=2):
    dims = [din] + [dhid] * hidden + [dout]
    return sum(linear_flops(a, b, tokens) for a, b in zip(dims[:-1], dims[1:]))


def _encoder_layer(tokens, c, ffn):
    return attention_flops(tokens, tokens, c) + linear_flops(c, ffn, tokens) + linear_flops(ffn, c, tokens)


def segmentor_flops(cfg: ModelConfig, h: int, w: int) -> dict:
    c, n, k = cfg.embed_dim, cfg.num_queries, cfg.num_classes
    sizes = [(h // d, w // d) for d in (4, 8, 16, 32)]
    pix = 0
    for wd, (hh, ww) in zip(cfg.backbone_widths, sizes):
        pix += conv_flops(1, wd, c, hh, ww)
    for hh, ww in sizes[:3]:  # top-down: upsample + add into 1/16, 1/8, 1/4
        pix += interp_flops(c * hh * ww) + c * hh * ww
    pix += conv_flops(3, c, c, *sizes[0])
    dec = 0
    for i in range(NUM_DECODER_BLOCKS):
        hh, ww = sizes[3 - i % 3]
        mem = hh * ww
        dec += attention_flops(n, mem, c) + 2 * linear_flops(c, c, mem)  # + key/value projections
        dec += attention_flops(n, n, c) + linear_flops(c, cfg.ffn_dim, n) + linear_flops(cfg.ffn_dim, c, n)
    h4, w4 = sizes[0]
    heads = linear_flops(c, k + 1, n) + _mlp(c, c, c, n)
    heads += 2 * n * c * h4 * w4 + interp_flops(n * h * w)
    return {
        "backbone": _conv_stack(3, cfg.backbone_stem, cfg.backbone_widths, h, w),
        "pixel_decoder": pix,
        "transformer_decoder": dec,
        "heads": heads,
    }


def flow_flops(cfg: ModelConfig, h: int, w: int, variant: str | None = None) -> dict:
    variant = variant or cfg.flow_variant
    c, n = cfg.embed_dim, cfg.num_queries
    ew = cfg.encoder_widths
    sizes = [(h // d, w // d) for d in (32, 16, 8)]
    h4, w4 = h // 4, w // 4
    out = {"motion_encoder": _conv_stack(6, cfg.encoder_stem, ew, h, w)}
    out["projection"] = sum(conv_flops(1, ew[i], c, hh, ww) for i, (hh, ww) in zip((3, 2, 1), sizes))
    nq = 0 if variant == "pixelflow" else n
    dec = 0
    for _ in range(cfg.stages):
        for l in range(cfg.blocks_per_stage):
            hh, ww = sizes[l % 3]
            dec += _encoder_layer(hh * ww + nq, c, cfg.ffn_dim)
    out["motion_decoder"] = dec
    pf_used = variant in ("mpvss", "pixelflow", "query-for-pf")
    qf_used = variant in ("mpvss", "query-learned", "query-random")
    head = 0
    if pf_used:
        head += conv_flops(3, c, 2, *sizes[0])
        for hh, ww in sizes[1:]:
            head += interp_flops(2 * hh * ww) + conv_flops(3, c + 2, 2, hh, ww) + 2 * 2 * hh * ww
        head += interp_flops(2 * h4 * w4)
    if qf_used:
        head += _mlp(c, c, c, n) + _mlp(ew[0], c, 2 * c, h4 * w4) + 2 * 2 * n * c * h4 * w4
    if variant == "mpvss":
        head += n * conv_flops(3, 4, 2, h4, w4) + interp_flops(n * 2 * h * w)
    elif qf_used:
        head += interp_flops(n * 2 * h * w)
    else:
        head += interp_flops(2 * h * w)
    out["flow_head"] = head
    return out


def warp_flops(cfg: ModelConfig, h: int, w: int) -> int:
    return 8 * h * w * cfg.num_queries


def composition_flops(cfg: ModelConfig, h: int, w: int) -> int:
    return 2 * cfg.num_queries * cfg.num_classes * h * w


@dataclass(frozen=True)
class FlopCount:
    role: str
    total: int
    breakdown: dict


def estimate_flops(cfg: ModelConfig, h: int, w: int, role: str, mode: str | None = None) -> FlopCount:
    """Analytic FLOPs for one frame.

    ``role`` is ``key`` (segmentor + composition) or ``nonkey``.  For
    ``nonkey`` the ``mode`` picks the propagation path: ``copy`` (composition
    only), ``perframe`` (same as key), or a flow variant name (default: the
    config's variant).
    """
    if role == "key" or mode == "perframe":
        bd = segmentor_flops(cfg, h, w)
        bd["composition"] = composition_flops(cfg, h, w)
        return FlopCount("key" if role == "key" else "nonkey", sum(bd.values()), bd)
    if role != "nonkey":
        raise ValueError(f"unknown role {role!r}")
    if mode == "copy":
        bd = {"composition": composition_flops(cfg, h, w)}
    else:
        bd = flow_flops(cfg, h, w, mode)
        bd["warp"] = warp_flops(cfg, h, w)
        bd["composition"] = composition_flops(cfg, h, w)
    return FlopCount("nonkey", sum(bd.values()), bd)


@dataclass
class CostReport:
    per_frame: list
    roles: list
    key_cost: int
    nonkey_cost: int
    total: int
    breakdown: dict = field(default_factory=dict)

    @classmethod
    def from_roles(cls, roles, key: FlopCount, nonkey: FlopCount) -> "CostReport":
        per_frame = [key.total if r == "key" else nonkey.total for r in roles]
        return cls(
            per_frame=per_frame,
            roles=list(roles),
            key_cost=key.total,
            nonkey_cost=nonkey.total,
            total=sum(per_frame),
            breakdown={"key": key.breakdown, "nonkey": nonkey.breakdown},
        )

    @property
    def mean_per_frame(self) -> float:
        return self.total / len(self.per_frame)

    def to_dict(self) -> dict:
        return {
            "per_frame": self.per_frame,
            "roles": self.roles,
            "key_cost": self.key_cost,
            "nonkey_cost": self.nonkey_cost,
            "total": self.total,
            "mean_per_frame": self.mean_per_frame,
            "breakdown": self.breakdown,
        }
