import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from f0track.dsp import Spectrogram
from f0track.errors import EmptyBatchError
from f0track.features import (STD_FLOOR, ContextConfig, NormStats, Quantizer, augment_context,
                              build_dnn_batch, build_rnn_batch, dequantize, fit_norm_stats,
                              quantize_f0)
from f0track.signal_io import F0Contour


def make_spec(n_frames=30, n_bins=513, seed=0):
    frames = np.random.default_rng(seed).normal(size=(n_frames, n_bins))
    return Spectrogram(frames, "log_psd", 15.625, 0.005, 0.0125)


def make_contour(n_frames=30, unvoiced=()):
    f0 = np.linspace(100, 200, n_frames)
    f0[list(unvoiced)] = 0.0
    return F0Contour(f0, hop_s=0.005, offset_s=0.0125)


class TestAugment:
    def test_p0_identity(self):
        s = make_spec()
        for i in (0, 7, 29):
            assert np.array_equal(augment_context(s, i, ContextConfig(0)), s.frames[i])

    def test_left_edge_clamp(self):
        s = make_spec(n_bins=4)
        v = augment_context(s, 0, ContextConfig(2)).reshape(5, 4)
        expected = s.frames[[0, 0, 0, 1, 2]]
        assert np.array_equal(v, expected)

    def test_right_edge_clamp(self):
        s = make_spec(n_bins=3)
        v = augment_context(s, 29, ContextConfig(2)).reshape(5, 3)
        assert np.array_equal(v, s.frames[[27, 28, 29, 29, 29]])

    def test_width(self):
        assert augment_context(make_spec(), 10, ContextConfig(7)).shape == (7695,)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            augment_context(make_spec(), 30, ContextConfig(1))


class TestBatches:
    def test_dnn_shape(self):
        s = make_spec(n_frames=300)
        c = make_contour(300)
        ids = np.arange(50, 250)
        b = build_dnn_batch(s, c, ids, ContextConfig(7), None, NormStats.identity(513))
        assert b.inputs.shape == (200, 7695)
        assert np.allclose(b.targets, c.f0_hz[ids])

    def test_regression_drops_unvoiced(self):
        s, c = make_spec(), make_contour(unvoiced=[3, 4])
        b = build_dnn_batch(s, c, [2, 3, 4, 5], ContextConfig(1), None, NormStats.identity(513))
        assert b.frame_ids.tolist() == [2, 5]

    def test_all_unvoiced_regression(self):
        s, c = make_spec(), make_contour(unvoiced=range(30))
        with pytest.raises(EmptyBatchError):
            build_dnn_batch(s, c, [1, 2], ContextConfig(1), None, NormStats.identity(513))

    def test_classification_unvoiced_state_zero(self):
        s, c = make_spec(), make_contour(unvoiced=[0, 1])
        b = build_dnn_batch(s, c, [0, 1, 2], ContextConfig(1), Quantizer(), NormStats.identity(513))
        assert b.targets[:2].tolist() == [0, 0] and b.targets[2] > 0

    def test_rnn_shape_and_centre(self):
        s = make_spec(n_frames=300)
        stats = fit_norm_stats([s])
        ids = np.arange(40, 240)
        b = build_rnn_batch(s, make_contour(300), ids, ContextConfig(7), stats)
        assert b.steps.shape == (15, 200, 513)
        assert np.allclose(b.steps[7], stats.apply(s.frames[ids]))

    def test_rnn_edge(self):
        s = make_spec()
        stats = fit_norm_stats([s])
        b = build_rnn_batch(s, make_contour(), [0], ContextConfig(7), stats)
        for n in range(8):
            assert np.array_equal(b.steps[n, 0], stats.apply(s.frames[0]))

    def test_dnn_rnn_layout_equivalence(self):
        s = make_spec(n_frames=40, n_bins=6)
        stats = fit_norm_stats([s])
        ids = np.arange(0, 40, 3)
        cfg = ContextConfig(3)
        d = build_dnn_batch(s, make_contour(40), ids, cfg, None, stats)
        r = build_rnn_batch(s, make_contour(40), ids, cfg, stats)
        for j in range(len(ids)):
            assert np.array_equal(d.inputs[j], r.steps[:, j, :].reshape(-1))


class TestNorm:
    def test_constant_input(self):
        stats = fit_norm_stats([np.ones((10, 4))])
        assert np.all(stats.std == STD_FLOOR)

    def test_single_frame(self):
        frame = np.arange(5.0)[None, :]
        assert np.array_equal(fit_norm_stats([frame]).mean, frame[0])

    def test_standardizes_fitting_set(self):
        rng = np.random.default_rng(4)
        mats = [rng.normal(3, 7, size=(n, 8)) for n in (20, 35, 11)]
        stats = fit_norm_stats(mats)
        z = np.concatenate([stats.apply(m) for m in mats])
        # recompute moments directly on the normalized data
        assert np.max(np.abs(z.mean(axis=0))) < 1e-6
        assert np.max(np.abs(z.std(axis=0) - 1)) < 1e-3


class TestQuantizer:
    q = Quantizer()

    def test_layout(self):
        assert self.q.n_states == 68 and len(self.q.centers) == 67
        assert self.q.centers[0] == pytest.approx(60) and self.q.centers[-1] == pytest.approx(400)

    def test_unvoiced(self):
        assert quantize_f0(0.0, self.q) == 0 and dequantize(0, self.q) == 0.0

    def test_boundaries(self):
        assert quantize_f0(60.0, self.q) == 1
        assert quantize_f0(400.0, self.q) == 67
        assert quantize_f0(30.0, self.q) == 1
        assert quantize_f0(900.0, self.q) == 67

    def test_half_bin_sweep(self):
        f = np.random.default_rng(5).uniform(60, 400, 1000)
        err = np.abs(dequantize(quantize_f0(f, self.q), self.q) - f)
        # oracle: nearest centres by brute force over the table
        c = self.q.centers
        brute = np.min(np.abs(f[:, None] - c[None, :]), axis=1)
        assert np.allclose(err, brute)
        assert np.all(err <= self.q.half_bin_width(f) + 1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(60, 400), st.floats(60, 400))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert quantize_f0(lo, self.q) <= quantize_f0(hi, self.q)

    def test_linear_scale(self):
        q = Quantizer(n_states=5, f_min_hz=100, f_max_hz=400, scale="linear")
        assert q.centers.tolist() == [100, 200, 300, 400]
        assert quantize_f0(250.0, q) == 2        # tie goes to the lower state
        assert dequantize([0, 4], q).tolist() == [0, 400]

    def test_dequantize_range(self):
        with pytest.raises(IndexError):
            dequantize(68, self.q)
