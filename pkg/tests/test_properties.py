import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskprop import kernels
from maskprop.metrics import confusion_accumulate, miou, video_consistency, wiou
from conftest import reference_warp

dims = st.integers(2, 7)


@st.composite
def warp_case(draw):
    n, h, w = draw(st.integers(1, 3)), draw(dims), draw(dims)
    src = draw(arrays(np.float64, (n, h, w), elements=st.floats(-10, 10)))
    flow = draw(arrays(np.float64, (n, 2, h, w), elements=st.floats(-min(h, w), min(h, w))))
    return src, flow


@st.composite
def label_pair(draw, k=4):
    h, w = draw(dims), draw(dims)
    elems = st.sampled_from(list(range(k)) + [255])
    return (draw(arrays(np.uint8, (h, w), elements=st.integers(0, k - 1))),
            draw(arrays(np.uint8, (h, w), elements=elems)))


class TestWarpProperties:
    @settings(max_examples=60, deadline=None)
    @given(warp_case())
    def test_matches_reference(self, case):
        src, flow = case
        np.testing.assert_allclose(kernels.warp_bilinear(src, flow), reference_warp(src, flow), atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(warp_case())
    def test_within_source_range(self, case):
        src, flow = case
        out = kernels.warp_bilinear(src, flow)
        lo, hi = src.min(axis=(1, 2)), src.max(axis=(1, 2))
        assert (out.min(axis=(1, 2)) >= lo - 1e-9).all() and (out.max(axis=(1, 2)) <= hi + 1e-9).all()


class TestMetricProperties:
    @settings(max_examples=80, deadline=None)
    @given(label_pair())
    def test_bounds_and_identity(self, pair):
        pred, gt = pair
        conf = confusion_accumulate(pred, gt, 4)
        assert conf.sum() == int((gt != 255).sum())
        if conf.sum():
            assert 0.0 <= miou(conf) <= 1.0 and 0.0 <= wiou(conf) <= 1.0
            perfect = confusion_accumulate(np.where(gt == 255, 0, gt), gt, 4)
            assert miou(perfect) == 1.0 and wiou(perfect) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(3, 8).flatmap(lambda t: st.tuples(
        arrays(np.uint8, (t, 3, 3), elements=st.integers(0, 1)),
        arrays(np.uint8, (t, 3, 3), elements=st.integers(0, 1)),
        st.integers(1, t))))
    def test_vc_backends_agree(self, case):
        gt, pred, f = case
        from maskprop import _kernels_py

        np.testing.assert_array_equal(kernels.window_consistency(gt, pred, f), _kernels_py.window_consistency(gt, pred, f))
        vc = video_consistency(list(pred), list(gt), f)
        assert vc is None or 0.0 <= vc <= 1.0
