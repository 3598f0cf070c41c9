"""YIN-style autocorrelation-family baseline tracker.

Analysis windows are centred on the same frame grid as :func:`dsp.spectrogram`
(frame ``i`` centred at ``i*hop + frame_len/2``), so contours from this tracker
line up frame-for-frame with the learned trackers and the ground truth.  The
analysis window itself is longer than the grid frame, because the difference
function needs at least two periods of the lowest F0; near the signal edges
it slides inward so it never reads past the ends.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import FramingConfig
from .errors import ParameterError
from .signal_io import F0Contour, Waveform

UNVOICED_LEVEL = 0.5


@dataclass(frozen=True)
class YinConfig:
    f_min_hz: float = 60.0
    f_max_hz: float = 400.0
    threshold: float = 0.1
    analysis_len_s: float = 0.04
    framing: FramingConfig = field(default_factory=FramingConfig)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError("threshold must lie in (0, 1)")
        if not 0.0 < self.f_min_hz < self.f_max_hz:
            raise ParameterError("require 0 < f_min_hz < f_max_hz")

    def lag_range(self, sample_rate_hz: int):
        return int(np.floor(sample_rate_hz / self.f_max_hz)), int(np.ceil(sample_rate_hz / self.f_min_hz))


def difference_function(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """d(tau) = sum_j (x_j - x_{j+tau})^2 over a fixed window of N - max_lag samples.

    ``frames`` is (I, N); returns (I, max_lag + 1).
    """
    n = frames.shape[1]
    w = n - max_lag
    head = frames[:, :w]
    energy_head = np.sum(head * head, axis=1)
    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames * frames, axis=1)], axis=1)
    d = np.empty((frames.shape[0], max_lag + 1))
    for tau in range(max_lag + 1):
        shifted = frames[:, tau:tau + w]
        energy_shift = csum[:, tau + w] - csum[:, tau]
        d[:, tau] = energy_head + energy_shift - 2.0 * np.sum(head * shifted, axis=1)
    return np.maximum(d, 0.0)


def cumulative_mean_normalized(d: np.ndarray) -> np.ndarray:
    """d'(0) = 1, d'(tau) = d(tau) * tau / sum_{j=1..tau} d(j)."""
    out = np.ones_like(d)
    csum = np.cumsum(d[:, 1:], axis=1)
    tau = np.arange(1, d.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = d[:, 1:] * tau / csum
    out[:, 1:] = np.where(csum > 0, ratio, 1.0)
    return out


def parabolic_offset(y_prev: float, y0: float, y_next: float) -> float:
    """Vertex offset of the parabola through three equally spaced points, in [-1, 1]."""
    denom = y_prev - 2.0 * y0 + y_next
    if denom <= 0:
        return 0.0
    return float(np.clip(0.5 * (y_prev - y_next) / denom, -1.0, 1.0))


def pick_lag(cmnd: np.ndarray, lag_min: int, lag_max: int, threshold: float):
    """Choose a lag from one cumulative-mean-normalized difference curve.

    Takes the first lag whose value dips below ``threshold`` and follows it
    down to the local minimum; otherwise the global minimum in range.
    Returns (discrete lag, interpolated lag, value at the discrete lag).
    """
    seg = cmnd[lag_min:lag_max + 1]
    below = np.flatnonzero(seg < threshold)
    if len(below):
        k = int(below[0])
        while k + 1 < len(seg) and seg[k + 1] < seg[k]:
            k += 1
    else:
        k = int(np.argmin(seg))
    lag = lag_min + k
    frac = 0.0
    if 0 < lag < len(cmnd) - 1:
        frac = parabolic_offset(cmnd[lag - 1], cmnd[lag], cmnd[lag + 1])
    return lag, lag + frac, float(cmnd[lag])


def yin_track(w: Waveform, cfg: YinConfig = YinConfig()) -> F0Contour:
    """Per-frame F0 by the YIN difference-function method; 0 marks unvoiced frames."""
    fs = w.sample_rate_hz
    if cfg.f_max_hz >= fs / 2:
        raise ParameterError("f_max_hz must lie below Nyquist")
    lag_min, lag_max = cfg.lag_range(fs)
    n_win = int(round(cfg.analysis_len_s * fs))
    if n_win < 2 * lag_max:
        raise ParameterError(
            f"analysis window of {n_win} samples cannot hold two periods of {cfg.f_min_hz} Hz")
    framing = cfg.framing
    flen, hop = framing.frame_len(fs), framing.hop(fs)
    if len(w) < flen:
        raise ParameterError("waveform is shorter than one frame")
    n_frames = (len(w) - flen) // hop + 1
    first, stop = framing.head_trim_frames, n_frames - framing.tail_trim_frames
    offset_s = framing.offset_s(fs)
    if first >= stop:
        return F0Contour(np.zeros(0), hop_s=hop / fs, offset_s=offset_s)

    centres = np.arange(first, stop) * hop + flen // 2
    # edge windows slide inward rather than reading zero padding
    if len(w) >= n_win:
        starts = np.clip(centres - n_win // 2, 0, len(w) - n_win)
        frames = w.samples[starts[:, None] + np.arange(n_win)[None, :]]
    else:
        frames = np.tile(np.pad(w.samples, (0, n_win - len(w))), (len(centres), 1))
    cmnd = cumulative_mean_normalized(difference_function(frames, lag_max))

    f0 = np.zeros(len(frames))
    for i, curve in enumerate(cmnd):
        _, lag, value = pick_lag(curve, lag_min, lag_max, cfg.threshold)
        if value > UNVOICED_LEVEL or lag <= 0:
            continue
        f0[i] = np.clip(fs / lag, cfg.f_min_hz, cfg.f_max_hz)
    return F0Contour(f0, hop_s=hop / fs, offset_s=offset_s)
