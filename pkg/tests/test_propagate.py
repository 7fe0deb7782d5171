import numpy as np
import pytest
import torch

from maskprop.datamodel import FlowMapSet, KeyFrameSchedule, MaskPredictionSet, ValidationError, VideoClip
from maskprop.flow import FlowModule
from maskprop.metrics import estimate_flops
from maskprop.propagate import (
    bilinear_warp,
    compose_semantic,
    propagate_pixelflow,
    run_pipeline,
    semantic_scores,
    warp_torch,
)
from maskprop.segmentor import Segmentor
from conftest import reference_warp, tiny_config


def mask_set(logits, k=3):
    n = logits.shape[0]
    return MaskPredictionSet(mask_logits=logits, class_logits=np.zeros((n, k + 1)))


def random_clip(t=6, size=32, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return VideoClip(frames=rng.integers(0, 256, size=(t, size, size, 3), dtype=np.uint8),
                     labels=rng.integers(0, k, size=(t, size, size), dtype=np.uint8), num_classes=k)


def models(variant="mpvss", std=0.2):
    torch.manual_seed(0)
    cfg = tiny_config(flow_variant=variant)
    seg, flow = Segmentor(cfg), FlowModule(cfg)
    with torch.no_grad():
        for p in flow.parameters():
            p.normal_(0, std)
    return seg.eval(), flow.eval()


class TestWarp:
    def test_zero_flow_identity(self):
        logits = np.random.default_rng(0).normal(size=(3, 8, 8)).astype(np.float32)
        out = bilinear_warp(mask_set(logits), FlowMapSet(np.zeros((3, 2, 8, 8), np.float32)))
        assert out.mask_logits.tobytes() == logits.tobytes()

    def test_integer_shift(self):
        src = np.zeros((1, 12, 12))
        src[0, 4:8, 6:10] = 5.0
        flow = np.zeros((1, 2, 12, 12))
        flow[0, 0] = 2.0
        out = bilinear_warp(mask_set(src), FlowMapSet(flow)).mask_logits
        expected = reference_warp(src, flow)
        np.testing.assert_array_equal(out, expected)
        np.testing.assert_array_equal(out[0, 4:8, 4:8], 5.0)
        assert out[0, 4:8, 8].max() == 0.0

    def test_half_pixel(self):
        src = np.array([[[0.0, 10.0]]])
        flow = np.zeros((1, 2, 1, 2))
        flow[0, 0] = 0.5
        assert bilinear_warp(mask_set(src), FlowMapSet(flow)).mask_logits[0, 0, 0] == 5.0

    def test_linearity(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 2, 6, 6))
        flow = FlowMapSet(rng.uniform(-3, 3, size=(2, 2, 6, 6)))
        wa = bilinear_warp(mask_set(a), flow).mask_logits
        wb = bilinear_warp(mask_set(b), flow).mask_logits
        wab = bilinear_warp(mask_set(2 * a - b), flow).mask_logits
        np.testing.assert_allclose(wab, 2 * wa - wb, atol=1e-12)

    def test_class_logits_copied(self):
        m = MaskPredictionSet(mask_logits=np.zeros((2, 4, 4)), class_logits=np.arange(8.0).reshape(2, 4))
        out = bilinear_warp(m, FlowMapSet(np.ones((2, 2, 4, 4))))
        np.testing.assert_array_equal(out.class_logits, m.class_logits)

    def test_count_mismatch(self):
        with pytest.raises(ValidationError):
            bilinear_warp(mask_set(np.zeros((2, 4, 4))), FlowMapSet(np.zeros((3, 2, 4, 4))))

    def test_torch_twin(self):
        rng = np.random.default_rng(2)
        src = rng.normal(size=(2, 3, 8, 8))
        flow = rng.uniform(-5, 5, size=(2, 3, 2, 8, 8))
        out = warp_torch(torch.tensor(src), torch.tensor(flow)).numpy()
        for b in range(2):
            np.testing.assert_allclose(out[b], reference_warp(src[b], flow[b]), atol=1e-12)


class TestCompose:
    def test_scores(self):
        # one query, certain about class 1, mask prob 0.5
        cls = np.array([[-50.0, 50.0, -50.0, -50.0]])
        scores = semantic_scores(np.zeros((1, 2, 2)), cls)
        np.testing.assert_allclose(scores[1], 0.5, atol=1e-12)
        sem = compose_semantic(MaskPredictionSet(mask_logits=np.zeros((1, 2, 2)), class_logits=cls))
        assert (sem.labels == 1).all()

    def test_no_object_ignored(self):
        m = MaskPredictionSet(mask_logits=np.full((1, 2, 2), 10.0), class_logits=np.array([[0.0, 1.0, 9.0]]))
        assert (compose_semantic(m).labels == 1).all()

    def test_tie_goes_low(self):
        m = MaskPredictionSet(mask_logits=np.zeros((2, 1, 1)), class_logits=np.array([[5.0, -50.0, -50.0], [-50.0, 5.0, -50.0]]))
        assert compose_semantic(m).labels[0, 0] == 0


class TestPipeline:
    def test_schedule_roles_and_costs(self):
        seg, flow = models()
        clip = random_clip(t=7)
        maps, cost = run_pipeline(clip, KeyFrameSchedule(3, 7), seg, flow, "mpvss")
        assert len(maps) == 7
        assert cost.roles == ["key", "nonkey", "nonkey", "key", "nonkey", "nonkey", "key"]
        key = estimate_flops(seg.cfg, 32, 32, "key").total
        nonkey = estimate_flops(seg.cfg, 32, 32, "nonkey").total
        assert cost.total == 3 * key + 4 * nonkey

    def test_interval_one_equals_perframe(self):
        seg, flow = models()
        clip = random_clip()
        a, _ = run_pipeline(clip, KeyFrameSchedule(1, clip.num_frames), seg, flow, "mpvss")
        b, _ = run_pipeline(clip, KeyFrameSchedule(4, clip.num_frames), seg, None, "perframe")
        assert all(x.labels.tobytes() == y.labels.tobytes() for x, y in zip(a, b))

    def test_copy_repeats_key(self):
        seg, _ = models()
        clip = random_clip()
        maps, cost = run_pipeline(clip, KeyFrameSchedule(3, clip.num_frames), seg, None, "copy")
        assert np.array_equal(maps[0].labels, maps[2].labels)
        assert cost.nonkey_cost == estimate_flops(seg.cfg, 32, 32, "nonkey", mode="copy").total

    def test_pixelflow_mode(self):
        seg, flow = models("pixelflow")
        maps, _ = run_pipeline(random_clip(), KeyFrameSchedule(3, 6), seg, flow, "pixelflow")
        assert len(maps) == 6
        with pytest.raises(ValueError):
            run_pipeline(random_clip(), KeyFrameSchedule(3, 6), seg, flow, "mpvss")

    def test_pixelflow_needs_variant(self):
        seg, flow = models("mpvss")
        key = mask_set(np.zeros((4, 32, 32)))
        with pytest.raises(ValueError):
            propagate_pixelflow(key, np.zeros((32, 32, 3), np.uint8), np.zeros((32, 32, 3), np.uint8), flow)

    def test_errors(self):
        seg, flow = models()
        clip = random_clip()
        with pytest.raises(ValueError):
            run_pipeline(clip, KeyFrameSchedule(2, 6), seg, flow, "teleport")
        with pytest.raises(ValidationError):
            run_pipeline(clip, KeyFrameSchedule(2, 5), seg, flow, "mpvss")
        with pytest.raises(ValueError):
            run_pipeline(clip, KeyFrameSchedule(2, 6), seg, None, "mpvss")
