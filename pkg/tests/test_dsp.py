import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from f0track.dsp import (LOG_FLOOR, FramingConfig, dft_direct, fft, fft_magnitude, frame_signal,
                         load_spectrogram_frames, make_window, save_spectrogram, spectrogram)
from f0track.errors import FormatError, ParameterError
from f0track.signal_io import Waveform

NO_TRIM = FramingConfig(head_trim_frames=0, tail_trim_frames=0)


def tone(freq, seconds=1.0, fs=16000):
    return Waveform(0.5 * np.cos(2 * np.pi * freq * np.arange(int(seconds * fs)) / fs), fs)


class TestFraming:
    def test_sizes_at_16k(self):
        assert NO_TRIM.frame_len(16000) == 400
        assert NO_TRIM.hop(16000) == 80

    def test_frame_count_one_second(self):
        # counting oracle: starts 0, 80, ... while start + 400 <= 16000
        expected = len(range(0, 16000 - 400 + 1, 80))
        assert expected == 196
        assert frame_signal(tone(100), NO_TRIM).shape == (196, 400)

    def test_frame_contents(self):
        w = Waveform(np.arange(1000, dtype=float), 16000)
        frames = frame_signal(w, NO_TRIM)
        assert frames[3, 0] == 240 and frames[3, -1] == 639

    def test_trims_exceeding_count_warn(self):
        with pytest.warns(RuntimeWarning):
            out = frame_signal(tone(100), FramingConfig())
        assert out.shape[0] == 0

    def test_trims_applied(self):
        cfg = FramingConfig(head_trim_frames=10, tail_trim_frames=6)
        w = Waveform(np.arange(16000, dtype=float), 16000)
        frames = frame_signal(w, cfg)
        assert len(frames) == 196 - 16 and frames[0, 0] == 800

    def test_too_short(self):
        with pytest.raises(ParameterError):
            frame_signal(Waveform(np.zeros(100), 16000), NO_TRIM)

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            FramingConfig(fft_size=1000)
        with pytest.raises(ParameterError):
            FramingConfig(window="blackman")


class TestFFT:
    def test_matches_direct_dft(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=64) + 1j * rng.normal(size=64)
            assert np.max(np.abs(fft(x) - dft_direct(x))) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 64, elements=st.floats(-1e3, 1e3)))
    def test_matches_direct_dft_property(self, x):
        assert np.max(np.abs(fft(x) - dft_direct(x))) < 1e-9 * max(1.0, np.abs(x).sum())

    def test_batched(self):
        x = np.random.default_rng(1).normal(size=(3, 5, 32))
        assert np.allclose(fft(x), np.fft.fft(x))

    def test_non_power_of_two(self):
        with pytest.raises(ParameterError):
            fft(np.zeros(48))
        with pytest.raises(ParameterError):
            fft_magnitude(np.zeros(10), 100)

    def test_zero_frame(self):
        assert not np.any(fft_magnitude(np.zeros(400), 1024))
        assert fft_magnitude(np.zeros(400), 1024).shape == (513,)

    def test_bin_centred_cosine(self):
        n, k0 = 256, 19
        x = np.cos(2 * np.pi * k0 * np.arange(n) / n)
        mag = fft_magnitude(x * make_window("rect", n), n)
        assert int(np.argmax(mag)) == k0
        # analytic DFT of a bin-centred cosine: N/2 at k0, zero elsewhere
        assert mag[k0] == pytest.approx(n / 2)
        assert np.max(np.delete(mag, k0)) < 1e-9

    def test_parseval(self):
        x = np.random.default_rng(2).normal(size=1024)
        full = np.abs(fft(x)) ** 2
        assert full.sum() == pytest.approx(1024 * np.sum(x ** 2), rel=1e-6)


class TestSpectrogram:
    def test_shape(self):
        s = spectrogram(tone(220), NO_TRIM)
        assert s.frames.shape == (196, 513)
        assert s.bin_hz == pytest.approx(16000 / 1024)
        assert s.hop_s == pytest.approx(0.005)
        assert s.offset_s == pytest.approx(0.0125)

    @pytest.mark.parametrize("kind", ["magnitude", "psd", "log_psd"])
    def test_tone_peak_every_frame(self, kind):
        s = spectrogram(tone(220), NO_TRIM, kind)
        assert np.all(np.argmax(s.frames, axis=1) == 14)

    def test_silence_log_floor(self):
        s = spectrogram(Waveform(np.zeros(8000), 16000), NO_TRIM, "log_psd")
        assert np.allclose(s.frames, 10 * np.log10(LOG_FLOOR))

    def test_frame_count_invariant_to_kind(self):
        w = tone(150, 0.7)
        counts = {spectrogram(w, NO_TRIM, k).n_frames for k in ("magnitude", "psd", "log_psd")}
        assert len(counts) == 1

    def test_psd_scaling(self):
        w = tone(300, 0.2)
        mag = spectrogram(w, NO_TRIM, "magnitude").frames
        psd = spectrogram(w, NO_TRIM, "psd").frames
        win = make_window("hann", 400)
        assert np.allclose(psd, mag ** 2 / (16000 * np.sum(win ** 2)))

    def test_windowed_parseval_every_frame(self):
        w = Waveform(np.random.default_rng(3).normal(size=4000), 16000)
        frames = frame_signal(w, NO_TRIM) * make_window("hann", 400)
        padded = np.pad(frames, ((0, 0), (0, 624)))
        energy = np.sum(np.abs(fft(padded)) ** 2, axis=1)
        assert np.allclose(energy, 1024 * np.sum(frames ** 2, axis=1), rtol=1e-6)

    def test_offset_with_trim(self):
        cfg = FramingConfig(head_trim_frames=4, tail_trim_frames=2)
        s = spectrogram(tone(100), cfg)
        assert s.n_frames == 190
        assert s.offset_s == pytest.approx(4 * 0.005 + 0.0125)


class TestDump:
    def test_round_trip(self, tmp_path):
        s = spectrogram(tone(200, 0.1), NO_TRIM)
        path = tmp_path / "s.bin"
        save_spectrogram(path, s)
        raw = path.read_bytes()
        assert raw[:4] == b"F0SP"
        assert struct.unpack("<III", raw[4:16]) == (s.n_frames, 513, 2)
        frames, kind = load_spectrogram_frames(path)
        assert kind == "log_psd"
        assert np.allclose(frames, s.frames.astype(np.float32))

    def test_truncated(self, tmp_path):
        path = tmp_path / "s.bin"
        save_spectrogram(path, spectrogram(tone(200, 0.1), NO_TRIM))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_spectrogram_frames(path)
