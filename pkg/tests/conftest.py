import math

import numpy as np
import pytest
import torch

from maskprop.datamodel import ModelConfig


def reference_warp(src, flow):
    """Per-pixel backward bilinear sampler with border clamping."""
    n, h, w = src.shape
    out = np.zeros((n, h, w))
    for q in range(n):
        for y in range(h):
            for x in range(w):
                sx = min(max(x + float(flow[q, 0, y, x]), 0.0), w - 1.0)
                sy = min(max(y + float(flow[q, 1, y, x]), 0.0), h - 1.0)
                x0, y0 = int(math.floor(sx)), int(math.floor(sy))
                x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
                ax, ay = sx - x0, sy - y0
                top = (1 - ax) * src[q, y0, x0] + ax * src[q, y0, x1]
                bot = (1 - ax) * src[q, y1, x0] + ax * src[q, y1, x1]
                out[q, y, x] = (1 - ay) * top + ay * bot
    return out


def tiny_config(**kw):
    base = dict(num_queries=4, embed_dim=8, heads=2, ffn_dim=16, num_classes=3,
                backbone_widths=(8, 8, 8, 8), backbone_stem=4,
                encoder_widths=(8, 8, 8, 8), encoder_stem=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
