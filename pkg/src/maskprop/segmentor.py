"""Miniature query-based image segmentor used on key frames.

Backbone (strided convs) -> FPN-style pixel decoder -> query transformer
decoder -> class head and mask head.  Mask logits are the dot product of
per-query mask embeddings with the per-pixel embedding at 1/4 resolution,
upsampled to full resolution.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import MaskPredictionSet, ModelConfig, SegmentQuerySet
from .layers import MLP, QueryDecoderBlock, conv3x3, sine_position_embedding, upsample

NUM_DECODER_BLOCKS = 3


def check_frame_size(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise ValueError(f"frame size {h}x{w} is not divisible by 32")


def frame_to_tensor(frame, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 uint8 (or [0,1] float) array -> 1 x 3 x H x W tensor in [0, 1]."""
    arr = np.asarray(frame)
    t = torch.from_numpy(np.array(arr))
    t = t.to(dtype) / 255.0 if arr.dtype == np.uint8 else t.to(dtype)
    return t.permute(2, 0, 1).unsqueeze(0).contiguous()


class Segmentor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        widths = cfg.backbone_widths
        self.stem = conv3x3(3, cfg.backbone_stem, stride=2)
        cins = (cfg.backbone_stem,) + widths[:-1]
        self.stages = nn.ModuleList(
            nn.ModuleList([conv3x3(a, b, stride=2), conv3x3(b, b)]) for a, b in zip(cins, widths)
        )
        self.lateral = nn.ModuleList(nn.Conv2d(wd, c, 1) for wd in widths)
        self.embed_conv = conv3x3(c, c)
        self.level_embed = nn.Parameter(torch.zeros(3, c))
        self.query_init = nn.Parameter(torch.randn(cfg.num_queries, c))
        self.blocks = nn.ModuleList(
            QueryDecoderBlock(c, cfg.heads, cfg.ffn_dim) for _ in range(NUM_DECODER_BLOCKS)
        )
        self.class_head = nn.Linear(c, cfg.num_classes + 1)
        self.mask_head = MLP(c, c, c, hidden=2)

    # groups that stay frozen while the flow module trains
    FROZEN_PREFIXES = ("stem", "stages", "lateral", "embed_conv", "level_embed", "query_init", "blocks")

    def extract_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """B x 3 x H x W in [0,1] -> feature maps at 1/4, 1/8, 1/16, 1/32."""
        check_frame_size(*x.shape[-2:])
        x = F.gelu(self.stem(x))
        feats = []
        for down, conv in self.stages:
            x = F.gelu(down(x))
            x = F.gelu(conv(x))
            feats.append(x)
        return feats

    def pixel_decode(self, feats):
        """Returns (per-pixel embedding at 1/4, [maps at 1/32, 1/16, 1/8])."""
        for f, lat in zip(feats, self.lateral):
            if f.shape[1] != lat.in_channels:
                raise ValueError(f"feature has {f.shape[1]} channels, expected {lat.in_channels}")
        lat = [layer(f) for layer, f in zip(self.lateral, feats)]
        p = lat[3]
        pyramid = [p]
        for level in (2, 1, 0):
            p = lat[level] + upsample(p, 2)
            pyramid.append(p)
        embed = self.embed_conv(pyramid[3])
        return embed, pyramid[:3]

    def transformer_decode(self, maps, queries: torch.Tensor | None = None) -> torch.Tensor:
        """Refine B x N x C queries by cycling over the three scales."""
        b = maps[0].shape[0]
        if queries is None:
            queries = self.query_init.unsqueeze(0).expand(b, -1, -1)
        memories = []
        for level, m in enumerate(maps):
            _, c, h, w = m.shape
            pos = sine_position_embedding(h, w, c).to(m.dtype) + self.level_embed[level][:, None, None]
            memories.append((m.flatten(2).transpose(1, 2), pos.flatten(1).T.unsqueeze(0)))
        q = queries
        for i, block in enumerate(self.blocks):
            mem, pos = memories[i % 3]
            q = block(q, mem, pos)
        return q

    def predict_heads(self, queries: torch.Tensor, embed: torch.Tensor):
        """(B x N x C queries, B x C x h x w embedding) -> (mask logits B x N x 4h x 4w,
        class logits B x N x (K+1))."""
        class_logits = self.class_head(queries)
        mask_embed = self.mask_head(queries)
        low = torch.einsum("bnc,bchw->bnhw", mask_embed, embed)
        return upsample(low, 4), class_logits

    def forward(self, x: torch.Tensor):
        """B x 3 x H x W -> (queries, mask logits, class logits)."""
        feats = self.extract_features(x)
        embed, maps = self.pixel_decode(feats)
        q = self.transformer_decode(maps)
        masks, classes = self.predict_heads(q, embed)
        return q, masks, classes


def segment_key_frame(frame, model: Segmentor) -> tuple[SegmentQuerySet, MaskPredictionSet]:
    """Run the segmentor on one H x W x 3 frame."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        q, masks, classes = model(frame_to_tensor(frame, dtype))
    return (
        SegmentQuerySet(q[0].numpy()),
        MaskPredictionSet(mask_logits=masks[0].numpy(), class_logits=classes[0].numpy()),
    )
