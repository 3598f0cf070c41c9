"""Network inputs: context windows, mini-batches, normalization and F0 quantization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dsp import Spectrogram
from .errors import EmptyBatchError, ParameterError
from .signal_io import F0Contour

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class ContextConfig:
    p: int = 7

    def __post_init__(self):
        if self.p < 0:
            raise ParameterError("context half-width must be >= 0")

    @property
    def width(self) -> int:
        return 2 * self.p + 1


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean) / self.std

    @classmethod
    def identity(cls, n_bins: int) -> "NormStats":
        return cls(np.zeros(n_bins), np.ones(n_bins))


@dataclass(frozen=True)
class Quantizer:
    """Maps F0 to discrete states; state 0 is unvoiced, 1..n_states-1 are bins.

    Bin centres run from ``f_min_hz`` (state 1) to ``f_max_hz`` (last state),
    log- or linearly spaced.  A frequency maps to the nearest centre in Hz,
    ties going to the lower state; out-of-range values clamp to the end bins.
    """

    n_states: int = 68
    f_min_hz: float = 60.0
    f_max_hz: float = 400.0
    scale: str = "log"

    def __post_init__(self):
        if self.n_states < 3:
            raise ParameterError("need at least two voiced states")
        if not 0 < self.f_min_hz < self.f_max_hz:
            raise ParameterError("require 0 < f_min_hz < f_max_hz")
        if self.scale not in ("log", "linear"):
            raise ParameterError(f"unknown quantizer scale {self.scale!r}")

    @property
    def centers(self) -> np.ndarray:
        n = self.n_states - 1
        if self.scale == "log":
            return np.geomspace(self.f_min_hz, self.f_max_hz, n)
        return np.linspace(self.f_min_hz, self.f_max_hz, n)

    def half_bin_width(self, f_hz) -> np.ndarray:
        """Half the gap between the two centres bracketing ``f_hz``.

        This bounds the quantization error of nearest-centre rounding.
        """
        c = self.centers
        f = np.clip(np.asarray(f_hz, dtype=np.float64), c[0], c[-1])
        hi = np.clip(np.searchsorted(c, f, side="right"), 1, len(c) - 1)
        return (c[hi] - c[hi - 1]) / 2.0


def quantize_f0(f_hz, q: Quantizer) -> np.ndarray:
    f = np.asarray(f_hz, dtype=np.float64)
    c = q.centers
    hi = np.clip(np.searchsorted(c, f, side="left"), 1, len(c) - 1)
    lo = hi - 1
    # '<=' sends exact midpoints to the lower bin
    nearest = np.where(np.abs(f - c[lo]) <= np.abs(c[hi] - f), lo, hi)
    states = nearest + 1
    states = np.where(f < c[0], 1, np.where(f > c[-1], len(c), states))
    return np.where(f > 0, states, 0).astype(np.int64)


def dequantize(states, q: Quantizer) -> np.ndarray:
    s = np.asarray(states, dtype=np.int64)
    if np.any((s < 0) | (s >= q.n_states)):
        raise IndexError("state id out of range")
    table = np.concatenate([[0.0], q.centers])
    return table[s]


# ------------------------------------------------------------------ context


def context_indices(frame_ids, cfg: ContextConfig, lo, hi) -> np.ndarray:
    """(M, 2p+1) source-frame indices, clamped to ``[lo, hi]`` per row.

    ``lo``/``hi`` may be scalars or per-row arrays (utterance boundaries when
    several utterances share one frame pool).
    """
    ids = np.asarray(frame_ids, dtype=np.int64)
    offsets = np.arange(-cfg.p, cfg.p + 1)
    idx = ids[:, None] + offsets[None, :]
    lo = np.asarray(lo)[..., None] if np.ndim(lo) else lo
    hi = np.asarray(hi)[..., None] if np.ndim(hi) else hi
    return np.clip(idx, lo, hi)


def augment_context(spec: Spectrogram, i: int, cfg: ContextConfig) -> np.ndarray:
    """Concatenate frames i-p..i+p of ``spec`` (edge-clamped) into one vector."""
    n = spec.n_frames
    if not 0 <= i < n:
        raise IndexError(f"frame {i} outside [0, {n})")
    idx = context_indices([i], cfg, 0, n - 1)[0]
    return spec.frames[idx].reshape(-1)


# ------------------------------------------------------------------- batches


@dataclass
class DnnBatch:
    inputs: np.ndarray        # (M, (2p+1)*K)
    targets: np.ndarray       # (M,) f0 in Hz or int state ids
    frame_ids: np.ndarray


@dataclass
class RnnBatch:
    steps: np.ndarray         # (2p+1, M, K)
    targets: np.ndarray
    frame_ids: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0]


def contour_targets(contour: F0Contour, n_frames: int) -> np.ndarray:
    """Dense f0 array over frames 0..n_frames-1; missing frames count as unvoiced."""
    f0 = np.zeros(n_frames)
    keep = (contour.frame_index >= 0) & (contour.frame_index < n_frames)
    f0[contour.frame_index[keep]] = contour.f0_hz[keep]
    return f0


def _select(spec, contour, frame_ids, quantizer):
    ids = np.asarray(frame_ids, dtype=np.int64)
    if np.any((ids < 0) | (ids >= spec.n_frames)):
        raise IndexError("frame id outside spectrogram")
    if len(contour) < spec.n_frames and np.any(ids > contour.frame_index.max(initial=-1)):
        raise ParameterError("contour does not cover the requested frames")
    f0 = contour_targets(contour, spec.n_frames)[ids]
    if quantizer is not None:
        return ids, quantize_f0(f0, quantizer)
    keep = f0 > 0
    if not np.any(keep):
        raise EmptyBatchError("no voiced frames left for a regression batch")
    return ids[keep], f0[keep]


def build_dnn_batch(spec: Spectrogram, contour: F0Contour, frame_ids: Sequence[int],
                    cfg: ContextConfig, quantizer: Optional[Quantizer],
                    stats: NormStats) -> DnnBatch:
    """Context-augmented, normalized rows for the selected frames.

    Without a quantizer this is a regression batch and unvoiced frames are
    dropped; with one, targets are state ids and unvoiced frames map to 0.
    """
    ids, targets = _select(spec, contour, frame_ids, quantizer)
    normed = stats.apply(spec.frames)
    idx = context_indices(ids, cfg, 0, spec.n_frames - 1)
    return DnnBatch(normed[idx].reshape(len(ids), -1), targets, ids)


def build_rnn_batch(spec: Spectrogram, contour: F0Contour, frame_ids: Sequence[int],
                    cfg: ContextConfig, stats: NormStats) -> RnnBatch:
    """Regression batch laid out as 2p+1 time steps of (M, K) matrices."""
    ids, targets = _select(spec, contour, frame_ids, None)
    normed = stats.apply(spec.frames)
    idx = context_indices(ids, cfg, 0, spec.n_frames - 1)
    return RnnBatch(np.ascontiguousarray(normed[idx].transpose(1, 0, 2)), targets, ids)


def fit_norm_stats(spectrograms) -> NormStats:
    """Per-bin mean and (floored) standard deviation over all frames given.

    Accepts Spectrogram objects or raw (I, K) arrays.
    """
    mats = [s.frames if isinstance(s, Spectrogram) else np.asarray(s) for s in spectrograms]
    mats = [m for m in mats if len(m)]
    if not mats:
        raise ParameterError("no frames to fit normalization statistics")
    # streaming sums keep memory flat for large corpora
    n = sum(len(m) for m in mats)
    mean = sum(m.sum(axis=0) for m in mats) / n
    var = sum(np.square(m - mean).sum(axis=0) for m in mats) / n
    return NormStats(mean, np.sqrt(var))
