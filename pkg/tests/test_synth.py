import json

import numpy as np
import pytest

from maskprop import kernels
from maskprop.datamodel import ValidationError, read_clip
from maskprop.synth import (
    CorpusParams,
    SceneSpec,
    Shape,
    clip_seeds,
    generate_corpus,
    load_manifest,
    render_clip,
    sample_scene,
)


def topmost(spec, t):
    """Index of the visible shape per pixel (-1 for background)."""
    idx = np.full((spec.height, spec.width), -1)
    for i, s in enumerate(spec.shapes):
        idx[s.mask(t, spec.height, spec.width)] = i
    return idx


class TestRender:
    def test_static_scene(self):
        spec = SceneSpec(shapes=(Shape("rect", 1, (20.0, 20.0), (5.0, 5.0)),), noise=0.0, num_frames=4)
        clip, tracks = render_clip(spec)
        assert all(np.array_equal(clip.frames[0], f) for f in clip.frames)
        np.testing.assert_array_equal(tracks.displacement(0, 3), [[0.0, 0.0]])

    def test_label_warp_oracle(self):
        spec = SceneSpec(shapes=(Shape("rect", 2, (20.0, 30.0), (6.0, 4.0), (2.0, 0.0)),), num_frames=3)
        clip, tracks = render_clip(spec)
        np.testing.assert_array_equal(tracks.displacement(0, 2), [[4.0, 0.0]])
        # warp the frame-0 labels with the backward flow of frame 2
        flow = np.zeros((1, 2, 64, 64))
        flow[0, 0] = -4.0
        warped = kernels.warp_bilinear(clip.labels[0][None].astype(np.float64), flow)[0]
        shape_px = clip.labels[2] == 2
        np.testing.assert_array_equal(warped[shape_px], clip.labels[2][shape_px])

    def test_occlusion_areas(self):
        a = Shape("rect", 1, (20.0, 20.0), (6.0, 6.0))
        b = Shape("rect", 2, (26.0, 20.0), (4.0, 3.0))
        clip, _ = render_clip(SceneSpec(shapes=(a, b), num_frames=1))
        area_b = 9 * 7
        overlap = 5 * 7  # columns 22..26, rows 17..23
        assert np.count_nonzero(clip.labels[0] == 2) == area_b
        assert np.count_nonzero(clip.labels[0] == 1) == 13 * 13 - overlap

    def test_deterministic(self):
        spec = SceneSpec(shapes=(Shape("ellipse", 3, (30.0, 30.0), (8.0, 5.0), (1.0, -1.0)),), seed=5)
        a, _ = render_clip(spec)
        b, _ = render_clip(spec)
        assert a.frames.tobytes() == b.frames.tobytes()

    def test_rejects_escape(self):
        with pytest.raises(ValidationError):
            SceneSpec(shapes=(Shape("rect", 1, (10.0, 30.0), (5.0, 5.0), (-2.0, 0.0)),), num_frames=15)
        with pytest.raises(ValidationError):
            SceneSpec(shapes=(Shape("blob", 1, (30.0, 30.0), (5.0, 5.0)),))


class TestSampling:
    def test_scenes_valid(self):
        params = CorpusParams()
        for rng in clip_seeds(11, 40):
            spec = sample_scene(params, rng)
            assert params.min_shapes <= len(spec.shapes) <= params.max_shapes

    def test_gt_flow_soundness(self):
        """Integer-motion shapes: shifting labels by the track reproduces visible pixels."""
        params = CorpusParams()
        checked = 0
        for rng in clip_seeds(3, 30):
            spec = sample_scene(params, rng)
            clip, tracks = render_clip(spec)
            for s, shape in enumerate(spec.shapes):
                if any(v != int(v) for v in shape.velocity):
                    continue
                for k, j in ((0, 4), (3, 14)):
                    dx, dy = tracks.displacement(k, j)[s].astype(int)
                    vis_k, vis_j = topmost(spec, k), topmost(spec, j)
                    ys, xs = np.nonzero(vis_j == s)
                    src_ok = vis_k[ys - dy, xs - dx] == s
                    np.testing.assert_array_equal(clip.labels[k][ys - dy, xs - dx][src_ok],
                                                  clip.labels[j][ys, xs][src_ok])
                    checked += 1
        assert checked > 10


class TestCorpus:
    def test_byte_identical(self, tmp_path):
        generate_corpus(tmp_path / "a", 3, seed=7)
        generate_corpus(tmp_path / "b", 3, seed=7)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_empty(self, tmp_path):
        m = generate_corpus(tmp_path / "c", 0, seed=1)
        assert m["split"] == {"train": [], "val": []}
        assert load_manifest(tmp_path / "c")["n_clips"] == 0

    def test_clips_readable(self, tmp_path):
        m = generate_corpus(tmp_path / "c", 4, CorpusParams(val_clips=1), seed=2)
        assert len(m["split"]["train"]) == 3 and len(m["split"]["val"]) == 1
        for name in m["split"]["train"] + m["split"]["val"]:
            clip = read_clip(tmp_path / "c" / name)
            assert clip.frames.shape == (15, 64, 64, 3)
            tracks = json.loads((tmp_path / "c" / name / "tracks.json").read_text())
            assert len(tracks["centers"]) == 15

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError):
            load_manifest(tmp_path)
