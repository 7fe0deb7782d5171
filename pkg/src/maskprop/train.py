"""Bipartite matching, set-prediction losses, training loops and the
finite-difference gradient harness."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .datamodel import IGNORE_LABEL, MaskPredictionSet, VideoClip
from .flow import USES_KEY_QUERIES, FlowModule
from .propagate import warp_torch
from .segmentor import Segmentor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    max_offset: int = 5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass(frozen=True)
class MatchResult:
    assignment: np.ndarray  # length N; GT index per query, -1 when unmatched
    total_cost: float

    def pairs(self):
        q = np.flatnonzero(self.assignment >= 0)
        return q, self.assignment[q]


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    bce: torch.Tensor
    dice: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("cls", "bce", "dice", "total")}


# ---------------------------------------------------------------------------
# ground truth and matching


def gt_segments(labels: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """One (class id, boolean mask) per class present; ignore pixels excluded."""
    labels = np.asarray(labels)
    return [(int(c), labels == c) for c in np.unique(labels) if c != IGNORE_LABEL]


def solve_assignment(cost: np.ndarray) -> MatchResult:
    """Minimum-cost injection of the G columns (segments) into the N rows (queries)."""
    cost = np.asarray(cost, dtype=np.float64)
    n, g = cost.shape
    if g > n:
        raise ValueError(f"{g} ground-truth segments exceed {n} queries")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.full(n, -1, dtype=np.int64)
    assignment[rows] = cols
    return MatchResult(assignment, float(cost[rows, cols].sum()))


def _dice_cost(prob, target):
    # prob N x P, target G x P
    num = 2 * prob @ target.T
    den = prob.sum(1)[:, None] + target.sum(1)[None, :]
    return 1 - (num + 1) / (den + 1)


def _bce_cost(logits, target):
    # mean BCE over pixels for every (query, segment) pair
    pos = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits), reduction="none")
    neg = F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits), reduction="none")
    return (pos @ target.T + neg @ (1 - target).T) / logits.shape[1]


def matching_cost(mask_logits, class_logits, gts, valid=None, weights: LossWeights = LossWeights()):
    """N x G cost matrix (numpy) for one frame."""
    with torch.no_grad():
        mask_logits = torch.as_tensor(mask_logits)
        class_logits = torch.as_tensor(class_logits)
        n = mask_logits.shape[0]
        logits = mask_logits.reshape(n, -1)
        target = torch.stack([torch.as_tensor(m).reshape(-1) for _, m in gts]).to(logits.dtype)
        if valid is not None:
            keep = torch.as_tensor(valid).reshape(-1)
            logits, target = logits[:, keep], target[:, keep]
        cls_ids = torch.tensor([c for c, _ in gts])
        prob = class_logits.softmax(-1)[:, cls_ids]
        cost = (
            -weights.cls * prob
            + weights.bce * _bce_cost(logits, target)
            + weights.dice * _dice_cost(logits.sigmoid(), target)
        )
    return cost.numpy()


def hungarian_match(pred, gts, valid=None, weights: LossWeights = LossWeights()) -> MatchResult:
    """Match queries of ``pred`` (MaskPredictionSet or (masks, classes)) to GT segments."""
    if isinstance(pred, MaskPredictionSet):
        masks, classes = pred.mask_logits, pred.class_logits
    else:
        masks, classes = pred
    if len(gts) > np.shape(masks)[0]:
        raise ValueError(f"{len(gts)} ground-truth segments exceed {np.shape(masks)[0]} queries")
    if not gts:
        return MatchResult(np.full(np.shape(masks)[0], -1, dtype=np.int64), 0.0)
    return solve_assignment(matching_cost(masks, classes, gts, valid, weights))


# ---------------------------------------------------------------------------
# losses


def segmentation_loss(mask_logits, class_logits, gts, match: MatchResult, valid=None,
                      weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Classification loss over all queries plus BCE and dice on matched masks.

    ``mask_logits`` N x H x W and ``class_logits`` N x (K+1) are tensors.
    Unmatched queries target "no object", down-weighted by ``weights.no_object``.
    """
    n, k1 = class_logits.shape
    target = torch.full((n,), k1 - 1, dtype=torch.long)
    q_idx, g_idx = match.pairs()
    for q, g in zip(q_idx, g_idx):
        target[q] = gts[g][0]
    cls_w = torch.ones(k1, dtype=class_logits.dtype)
    cls_w[-1] = weights.no_object
    cls = F.cross_entropy(class_logits, target, weight=cls_w)
    if len(q_idx) == 0:
        zero = mask_logits.sum() * 0
        bce = dice = zero
    else:
        logits = mask_logits[torch.as_tensor(q_idx)].reshape(len(q_idx), -1)
        tgt = torch.stack([torch.as_tensor(gts[g][1]).reshape(-1) for g in g_idx]).to(logits.dtype)
        if valid is not None:
            keep = torch.as_tensor(valid).reshape(-1)
            logits, tgt = logits[:, keep], tgt[:, keep]
        bce = F.binary_cross_entropy_with_logits(logits, tgt)
        prob = logits.sigmoid()
        dice = (1 - (2 * (prob * tgt).sum(1) + 1) / (prob.sum(1) + tgt.sum(1) + 1)).mean()
    total = weights.cls * cls + weights.bce * bce + weights.dice * dice
    return LossBreakdown(cls, bce, dice, total)


def batch_loss(mask_logits, class_logits, label_batch, weights: LossWeights) -> LossBreakdown:
    """Mean per-frame matched loss over a batch (B x N x H x W, B x N x (K+1))."""
    if not (torch.isfinite(mask_logits).all() and torch.isfinite(class_logits).all()):
        raise TrainingError("non-finite predictions before matching")
    terms = []
    for b, labels in enumerate(label_batch):
        gts = gt_segments(labels)
        if not gts:
            continue
        valid = labels != IGNORE_LABEL
        match = hungarian_match((mask_logits[b].detach(), class_logits[b].detach()), gts, valid, weights)
        terms.append(segmentation_loss(mask_logits[b], class_logits[b], gts, match, valid, weights))
    if not terms:
        raise TrainingError("batch has no labelled pixels")
    parts = {k: torch.stack([getattr(t, k) for t in terms]).mean() for k in ("cls", "bce", "dice", "total")}
    return LossBreakdown(**parts)


# ---------------------------------------------------------------------------
# sampling


def _frames_tensor(clip: VideoClip, idx) -> torch.Tensor:
    return torch.as_tensor(clip.frames[idx]).permute(0, 3, 1, 2).float() / 255.0


def sample_frames(clips, batch_size, rng: np.random.Generator):
    frames, labels = [], []
    for _ in range(batch_size):
        clip = clips[rng.integers(len(clips))]
        t = int(rng.integers(clip.num_frames))
        frames.append(clip.frames[t])
        labels.append(clip.labels[t])
    x = torch.as_tensor(np.stack(frames)).permute(0, 3, 1, 2).float() / 255.0
    return x.contiguous(), labels


def sample_pairs(clips, batch_size, max_offset, rng: np.random.Generator):
    """(key frames, non-key frames, non-key labels, (clip, key index) refs);
    offsets are uniform in [1, max_offset]."""
    ks, js, labels, refs = [], [], [], []
    for _ in range(batch_size):
        ci = int(rng.integers(len(clips)))
        clip = clips[ci]
        off = int(rng.integers(1, max_offset + 1))
        off = min(off, clip.num_frames - 1)
        k = int(rng.integers(0, clip.num_frames - off))
        ks.append(clip.frames[k])
        js.append(clip.frames[k + off])
        labels.append(clip.labels[k + off])
        refs.append((ci, k))
    to_t = lambda a: (torch.as_tensor(np.stack(a)).permute(0, 3, 1, 2).float() / 255.0).contiguous()
    return to_t(ks), to_t(js), labels, refs


# ---------------------------------------------------------------------------
# optimisation


def make_optimizer(params, tcfg: TrainConfig):
    opt = torch.optim.AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: max(0.0, 1 - step / max(1, tcfg.steps)) ** tcfg.poly_power
    )
    return opt, sched


def trainable_flow_params(segmentor: Segmentor, flow: FlowModule):
    """Flow-module parameters plus the segmentor's class and mask heads; freezes the rest."""
    params = []
    for name, p in segmentor.named_parameters():
        frozen = name.startswith(Segmentor.FROZEN_PREFIXES)
        p.requires_grad_(not frozen)
        if not frozen:
            params.append(p)
    params.extend(flow.parameters())
    return params


def _check_finite(loss: LossBreakdown, step: int):
    if not torch.isfinite(loss.total):
        raise TrainingError(f"non-finite loss at step {step}: {loss.to_dict()}")


def _log_line(step, loss, lr, seed):
    entry = {"step": step, **loss.to_dict(), "lr": lr, "seed": seed}
    return json.dumps(entry, sort_keys=True)


def pretrain_segmentor(segmentor: Segmentor, clips, tcfg: TrainConfig, log_fh=None):
    """Per-frame training of the whole segmentor; returns loss history."""
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    for p in segmentor.parameters():
        p.requires_grad_(True)
    opt, sched = make_optimizer(segmentor.parameters(), tcfg)
    history = []
    segmentor.train()
    for step in range(tcfg.steps):
        x, labels = sample_frames(clips, tcfg.batch_size, rng)
        _, masks, classes = segmentor(x)
        loss = batch_loss(masks, classes, labels, tcfg.weights)
        _check_finite(loss, step)
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        lr = sched.get_last_lr()[0]
        sched.step()
        history.append(loss.to_dict())
        if log_fh is not None:
            log_fh.write(_log_line(step, loss, lr, tcfg.seed) + "\n")
    segmentor.eval()
    return history


class FrozenFeatureCache:
    """Outputs of the frozen segmentor stages (queries, pixel embedding) per frame.

    Only the class and mask heads train alongside the flow module, so these
    are fixed functions of the frame and can be computed once.
    """

    def __init__(self, segmentor: Segmentor):
        self.segmentor = segmentor
        self._store: dict = {}

    def get(self, clip_idx: int, t: int, frame: torch.Tensor):
        key = (clip_idx, t)
        if key not in self._store:
            with torch.no_grad():
                feats = self.segmentor.extract_features(frame.unsqueeze(0))
                embed, maps = self.segmentor.pixel_decode(feats)
                q = self.segmentor.transformer_decode(maps)
            self._store[key] = (q[0], embed[0])
        return self._store[key]

    def batch(self, refs, frames: torch.Tensor):
        items = [self.get(ci, t, f) for (ci, t), f in zip(refs, frames)]
        return torch.stack([q for q, _ in items]), torch.stack([e for _, e in items])


def flow_forward(segmentor: Segmentor, flow: FlowModule, key, nonkey, frozen=None):
    """Segment the key frames, estimate flow, warp: (warped masks, class logits).

    ``frozen`` optionally supplies precomputed (queries, pixel embedding).
    """
    if frozen is None:
        q, masks, classes = segmentor(key)
    else:
        q, embed = frozen
        masks, classes = segmentor.predict_heads(q, embed)
    key_q = q if flow.variant in USES_KEY_QUERIES else None
    flows = flow(key, nonkey, key_q, num_masks=masks.shape[1])
    return warp_torch(masks, flows), classes


def train_step(batch, segmentor: Segmentor, flow: FlowModule, opt, sched=None,
               weights: LossWeights = LossWeights(), step: int = 0, frozen=None) -> LossBreakdown:
    """One update of the flow module and the segmentor heads on (key, non-key, labels)."""
    key, nonkey, labels = batch[:3]
    warped, classes = flow_forward(segmentor, flow, key, nonkey, frozen)
    loss = batch_loss(warped, classes, labels, weights)
    _check_finite(loss, step)
    opt.zero_grad()
    loss.total.backward()
    opt.step()
    if sched is not None:
        sched.step()
    return loss


def train_flow(segmentor: Segmentor, flow: FlowModule, clips, tcfg: TrainConfig, log_fh=None,
               callback=None):
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    opt, sched = make_optimizer(trainable_flow_params(segmentor, flow), tcfg)
    history = []
    segmentor.eval()
    cache = FrozenFeatureCache(segmentor)
    flow.train()
    for step in range(tcfg.steps):
        batch = sample_pairs(clips, tcfg.batch_size, tcfg.max_offset, rng)
        lr = sched.get_last_lr()[0]
        frozen = cache.batch(batch[3], batch[0])
        loss = train_step(batch, segmentor, flow, opt, sched, tcfg.weights, step, frozen)
        history.append(loss.to_dict())
        if log_fh is not None:
            log_fh.write(_log_line(step, loss, lr, tcfg.seed) + "\n")
        if callback is not None:
            callback(step, loss)
    flow.eval()
    for p in segmentor.parameters():
        p.requires_grad_(True)
    return history


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict  # name -> max relative error over sampled entries
    worst: str

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_fn, params: dict, h: float = 1e-4, subsample: int = 4, seed: int = 0,
               grad_fn=None, floor: float = 1e-6) -> GradCheckResult:
    """Compare analytic gradients with central differences on sampled entries.

    ``params`` maps names to leaf tensors that ``loss_fn()`` reads.  The
    analytic side defaults to autograd; ``grad_fn(params)`` may override it
    (returns a name -> gradient dict).  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    names = list(params)
    if grad_fn is None:
        loss = loss_fn()
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        analytic = {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}
    else:
        analytic = grad_fn(params)
    gen = np.random.default_rng(seed)
    per_param = {}
    with torch.no_grad():
        for name in names:
            flat = params[name].view(-1)
            idx = gen.choice(flat.numel(), size=min(subsample, flat.numel()), replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(loss_fn())
                flat[i] = orig - h
                fm = float(loss_fn())
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(analytic[name].reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
            per_param[name] = worst
    worst_name = max(per_param, key=per_param.get)
    return GradCheckResult(per_param[worst_name], per_param, worst_name)
