"""Segment-aware flow estimation between a key frame and a non-key frame.

The module predicts one displacement field per key-frame query.  Flow
queries start from the key frame's refined segment queries, exchange
information with projected motion features through joint self-attention,
and are then read out against a per-pixel motion embedding.  A coarse-to-
fine pixel-wise flow, predicted from the same updated motion maps, is fused
with every per-query flow by a shared convolution.

Flow-unit convention: a flow at 1/s resolution is in 1/s-resolution pixel
units, so every 2x spatial upsample doubles the values.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import FlowMapSet, ModelConfig, MotionFeaturePyramid
from .layers import PixelMLP, MLP, SelfAttentionLayer, conv3x3, sine_position_embedding, upsample
from .segmentor import check_frame_size, frame_to_tensor

# variants whose flow queries are seeded from the key frame's segment queries
USES_KEY_QUERIES = ("mpvss", "query-learned", "query-for-pf")

# frames in [0, 1] are centred and scaled before the motion encoder
INPUT_MEAN = 0.5
INPUT_SCALE = 4.0


class FlowModule(nn.Module):
    """All learnable state of the flow estimator for one ``flow_variant``.

    ``mpvss``         fused query flow + pixel flow, queries from the key frame
    ``query-learned`` query flow only, queries from the key frame
    ``query-random``  query flow only, queries are a free learned parameter
    ``query-for-pf``  pixel flow only (broadcast), decoder still sees key queries
    ``pixelflow``     pixel flow only (broadcast), decoder sees no queries
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg.flow_variant
        c = cfg.embed_dim
        widths = cfg.encoder_widths
        self.stem = conv3x3(6, cfg.encoder_stem, stride=2)
        cins = (cfg.encoder_stem,) + widths[:-1]
        self.stages = nn.ModuleList(
            nn.ModuleList([conv3x3(a, b, stride=2), conv3x3(b, b)]) for a, b in zip(cins, widths)
        )
        # b1, b2, b3 come from the 1/32, 1/16, 1/8 taps
        self.input_proj = nn.ModuleList(nn.Conv2d(widths[i], c, 1) for i in (3, 2, 1))
        self.level_embed = nn.Parameter(torch.zeros(3, c))
        self.layers = nn.ModuleList(
            SelfAttentionLayer(c, cfg.heads, cfg.ffn_dim)
            for _ in range(cfg.stages * cfg.blocks_per_stage)
        )
        if self.variant == "query-random":
            self.free_queries = nn.Parameter(torch.randn(cfg.num_queries, c))
        if self.variant != "pixelflow":
            self.flow_embed = MLP(c, c, c, hidden=2)
            self.motion_embed = PixelMLP(widths[0], c, 2 * c, hidden=2)
        self.pf_coarse = conv3x3(c, 2)
        self.pf_refine = nn.ModuleList(conv3x3(c + 2, 2) for _ in range(2))
        if self.variant == "mpvss":
            self.fuse = conv3x3(4, 2, padding_mode="replicate")
        # zero only the layer emitting the final flow: training starts from the copy baseline
        if self.variant == "mpvss":
            last = [self.fuse]
        elif self.variant in ("pixelflow", "query-for-pf"):
            last = [self.pf_coarse, *self.pf_refine]
        else:
            last = [self.flow_embed.layers[-1]]
        for layer in last:
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    # ------------------------------------------------------------------
    def encode_motion(self, frame_k: torch.Tensor, frame_j: torch.Tensor):
        """Returns [b1, b2, b3, b4] at 1/32, 1/16, 1/8, 1/4."""
        if frame_k.shape != frame_j.shape:
            raise ValueError(f"frame shapes differ: {tuple(frame_k.shape)} vs {tuple(frame_j.shape)}")
        check_frame_size(*frame_k.shape[-2:])
        x = (torch.cat([frame_k, frame_j], dim=1) - INPUT_MEAN) * INPUT_SCALE
        x = F.gelu(self.stem(x))
        taps = []
        for down, conv in self.stages:
            x = F.gelu(down(x))
            x = F.gelu(conv(x))
            taps.append(x)
        return taps[::-1]

    def project_pyramid(self, b1, b2, b3):
        out = []
        for level, (b, proj) in enumerate(zip((b1, b2, b3), self.input_proj)):
            x = proj(b)
            _, c, h, w = x.shape
            pos = sine_position_embedding(h, w, c).to(x.dtype)
            out.append(x + pos + self.level_embed[level][:, None, None])
        return out

    def motion_decode(self, maps, queries: torch.Tensor | None):
        """Joint self-attention over [flow queries; one level's tokens] per block.

        ``queries`` is B x N x C or ``None`` (no query tokens).  Levels are
        visited round-robin within each stage.  Returns (refined queries or
        None, updated maps in spatial form).
        """
        shapes = [m.shape for m in maps]
        tokens = [m.flatten(2).transpose(1, 2) for m in maps]
        n = 0 if queries is None else queries.shape[1]
        longest = max(t.shape[1] for t in tokens) + n
        if longest > self.cfg.max_tokens:
            raise ValueError(f"{longest} tokens exceed max_tokens={self.cfg.max_tokens}")
        q = queries
        nlev = len(tokens)
        for s in range(self.cfg.stages):
            for l in range(self.cfg.blocks_per_stage):
                layer = self.layers[s * self.cfg.blocks_per_stage + l]
                lvl = l % nlev
                z = tokens[lvl] if q is None else torch.cat([q, tokens[lvl]], dim=1)
                z = layer(z)
                if q is not None:
                    q, tokens[lvl] = z[:, :n], z[:, n:]
                else:
                    tokens[lvl] = z
        updated = [t.transpose(1, 2).reshape(shp) for t, shp in zip(tokens, shapes)]
        return q, updated

    def query_flow_head(self, queries: torch.Tensor, b4: torch.Tensor) -> torch.Tensor:
        """B x N x 2 x H/4 x W/4 query-based flow."""
        c = self.cfg.embed_dim
        ef = self.flow_embed(queries)
        eb = self.motion_embed(b4)
        fx = torch.einsum("bnc,bchw->bnhw", ef, eb[:, :c])
        fy = torch.einsum("bnc,bchw->bnhw", ef, eb[:, c:])
        return torch.stack([fx, fy], dim=2)

    def pixel_flow_head(self, m1, m2, m3) -> torch.Tensor:
        """Coarse-to-fine B x 2 x H/4 x W/4 pixel-wise flow."""
        flow = self.pf_coarse(m1)
        for m, conv in zip((m2, m3), self.pf_refine):
            flow = 2.0 * upsample(flow, 2)
            flow = flow + conv(torch.cat([m, flow], dim=1))
        return 2.0 * upsample(flow, 2)

    def fuse_and_upsample(self, qf: torch.Tensor, pf: torch.Tensor) -> torch.Tensor:
        b, n, _, h, w = qf.shape
        x = torch.cat([qf, pf.unsqueeze(1).expand(b, n, 2, h, w)], dim=2).reshape(b * n, 4, h, w)
        fused = self.fuse(x)
        return (4.0 * upsample(fused, 4)).reshape(b, n, 2, 4 * h, 4 * w)

    # ------------------------------------------------------------------
    def init_queries(self, key_queries: torch.Tensor | None, batch: int):
        if self.variant == "pixelflow":
            return None
        if self.variant == "query-random":
            return self.free_queries.unsqueeze(0).expand(batch, -1, -1)
        if key_queries is None:
            raise ValueError(f"variant {self.variant} needs key-frame queries")
        return key_queries

    def forward(self, frame_k, frame_j, key_queries=None, num_masks: int | None = None):
        """Returns flow maps B x N x 2 x H x W (full-resolution pixel units)."""
        b = frame_k.shape[0]
        b1, b2, b3, b4 = self.encode_motion(frame_k, frame_j)
        maps = self.project_pyramid(b1, b2, b3)
        q, upd = self.motion_decode(maps, self.init_queries(key_queries, b))
        if num_masks is None:
            num_masks = self.cfg.num_queries if key_queries is None else key_queries.shape[1]
        if self.variant in ("pixelflow", "query-for-pf"):
            pf = self.pixel_flow_head(*upd)
            full = 4.0 * upsample(pf, 4)
            return full.unsqueeze(1).expand(b, num_masks, *full.shape[1:])
        qf = self.query_flow_head(q, b4)
        if self.variant == "mpvss":
            return self.fuse_and_upsample(qf, self.pixel_flow_head(*upd))
        _, n, _, h, w = qf.shape
        return (4.0 * upsample(qf.reshape(b, n * 2, h, w), 4)).reshape(b, n, 2, 4 * h, 4 * w)


def motion_pyramid(model: FlowModule, frame_k, frame_j) -> MotionFeaturePyramid:
    dtype = next(model.parameters()).dtype
    fk, fj = frame_to_tensor(frame_k, dtype), frame_to_tensor(frame_j, dtype)
    with torch.no_grad():
        b = model.encode_motion(fk, fj)
    h, w = fk.shape[-2:]
    return MotionFeaturePyramid(*(t[0].numpy() for t in b), height=h, width=w)


def estimate_flow(frame_k, frame_j, key_queries, model: FlowModule) -> FlowMapSet:
    """Flow maps from ``frame_j`` back to ``frame_k`` for each key-frame query.

    ``key_queries`` is a :class:`SegmentQuerySet`, an N x C array, or ``None``
    for variants that do not consume key queries.
    """
    dtype = next(model.parameters()).dtype
    fk, fj = frame_to_tensor(frame_k, dtype), frame_to_tensor(frame_j, dtype)
    q = None
    if key_queries is not None:
        arr = getattr(key_queries, "queries", key_queries)
        q = torch.tensor(np.asarray(arr), dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        flow = model(fk, fj, q)
    h, w = fk.shape[-2:]
    bound = float(max(h, w))
    # beyond this bound every sample lands on the border anyway
    return FlowMapSet(flow[0].clamp(-bound, bound).numpy())
