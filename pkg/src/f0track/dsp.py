"""Framing, windowing and FFT-based spectrograms."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .errors import FormatError, ParameterError
from .signal_io import Waveform

LOG_FLOOR = 1e-12
FEATURE_KINDS = ("magnitude", "psd", "log_psd")
WINDOWS = ("hann", "hamming", "rect")
SPEC_MAGIC = b"F0SP"


@dataclass(frozen=True)
class FramingConfig:
    frame_len_s: float = 0.025
    hop_s: float = 0.005
    window: str = "hann"
    fft_size: int = 1024
    head_trim_frames: int = 400
    tail_trim_frames: int = 200

    def __post_init__(self):
        if self.window not in WINDOWS:
            raise ParameterError(f"unknown window {self.window!r}")
        if self.hop_s <= 0 or self.frame_len_s <= 0:
            raise ParameterError("frame length and hop must be positive")
        if self.head_trim_frames < 0 or self.tail_trim_frames < 0:
            raise ParameterError("trims must be non-negative")
        _check_pow2(self.fft_size)

    def frame_len(self, sample_rate_hz: int) -> int:
        return int(round(self.frame_len_s * sample_rate_hz))

    def hop(self, sample_rate_hz: int) -> int:
        return int(round(self.hop_s * sample_rate_hz))

    def offset_s(self, sample_rate_hz: int) -> float:
        """Centre time of the first frame kept after trimming."""
        return (self.head_trim_frames * self.hop(sample_rate_hz)
                + self.frame_len(sample_rate_hz) / 2.0) / sample_rate_hz

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Spectrogram:
    frames: np.ndarray          # (I, K)
    feature_kind: str
    bin_hz: float
    hop_s: float
    offset_s: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


def _check_pow2(n: int) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise ParameterError(f"fft_size must be a power of two, got {n}")


def make_window(kind: str, length: int) -> np.ndarray:
    # periodic (DFT-even) windows, as usual for STFT analysis
    n = np.arange(length)
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / length)
    if kind == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * n / length)
    if kind == "rect":
        return np.ones(length)
    raise ParameterError(f"unknown window {kind!r}")


def frame_signal(w: Waveform, cfg: FramingConfig) -> np.ndarray:
    """Split a waveform into overlapping frames, then apply the head/tail trims.

    Frame ``i`` starts at sample ``i * hop``; a trailing partial frame is dropped.
    Returns an ``(I, frame_len)`` array, empty (with a warning) when the trims
    consume every frame.
    """
    fs = w.sample_rate_hz
    flen, hop = cfg.frame_len(fs), cfg.hop(fs)
    if hop <= 0:
        raise ParameterError("hop is shorter than one sample")
    if len(w) < flen:
        raise ParameterError(f"waveform ({len(w)} samples) is shorter than one frame ({flen})")
    n_frames = (len(w) - flen) // hop + 1
    start, stop = cfg.head_trim_frames, n_frames - cfg.tail_trim_frames
    if start >= stop:
        warnings.warn(
            f"trims ({cfg.head_trim_frames}+{cfg.tail_trim_frames}) exceed frame count {n_frames}",
            RuntimeWarning, stacklevel=2)
        return np.zeros((0, flen))
    idx = (np.arange(start, stop) * hop)[:, None] + np.arange(flen)[None, :]
    return w.samples[idx]


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    Works on any leading batch shape.  The length must be a power of two.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    _check_pow2(n)
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    a = x[..., rev].copy()
    batch = a.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(*batch, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        blocks = np.concatenate([even + odd, even - odd], axis=-1)
        a = blocks.reshape(*batch, n)
        size *= 2
    return a


def dft_direct(x: np.ndarray) -> np.ndarray:
    """O(N^2) DFT, used as an independent check on :func:`fft`."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ basis.T


def fft_magnitude(frame: np.ndarray, fft_size: int) -> np.ndarray:
    """|X(k)| for k = 0..fft_size/2 of a (zero-padded) frame or batch of frames."""
    _check_pow2(fft_size)
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] > fft_size:
        raise ParameterError(f"frame length {frame.shape[-1]} exceeds fft_size {fft_size}")
    pad = [(0, 0)] * (frame.ndim - 1) + [(0, fft_size - frame.shape[-1])]
    spec = fft(np.pad(frame, pad))
    return np.abs(spec[..., : fft_size // 2 + 1])


def spectrogram(w: Waveform, cfg: FramingConfig = FramingConfig(),
                kind: str = "log_psd") -> Spectrogram:
    """Windowed short-time spectrum of ``w``.

    ``psd`` is |X|^2 / (fs * sum(window^2)); ``log_psd`` is 10*log10(psd + 1e-12).
    """
    if kind not in FEATURE_KINDS:
        raise ParameterError(f"unknown feature kind {kind!r}")
    fs = w.sample_rate_hz
    flen = cfg.frame_len(fs)
    if flen > cfg.fft_size:
        raise ParameterError(f"frame length {flen} exceeds fft_size {cfg.fft_size}")
    frames = frame_signal(w, cfg)
    win = make_window(cfg.window, flen)
    mag = fft_magnitude(frames * win, cfg.fft_size)
    if kind == "magnitude":
        out = mag
    else:
        out = mag ** 2 / (fs * np.sum(win ** 2))
        if kind == "log_psd":
            out = 10.0 * np.log10(out + LOG_FLOOR)
    return Spectrogram(frames=out, feature_kind=kind, bin_hz=fs / cfg.fft_size,
                       hop_s=cfg.hop(fs) / fs, offset_s=cfg.offset_s(fs))


# ---------------------------------------------------------------- binary dump


def save_spectrogram(path, spec: Spectrogram) -> None:
    """Dump frames as little-endian float32 after a 16-byte header.

    Header: magic ``F0SP``, then uint32 frame count, bin count and kind code.
    """
    header = SPEC_MAGIC + struct.pack("<III", spec.n_frames, spec.n_bins,
                                      FEATURE_KINDS.index(spec.feature_kind))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(spec.frames, dtype="<f4").tobytes())


def load_spectrogram_frames(path):
    """Read a dump written by :func:`save_spectrogram`; returns (frames, kind)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != SPEC_MAGIC:
        raise FormatError(f"{path}: not a spectrogram dump")
    n_frames, n_bins, code = struct.unpack("<III", data[4:16])
    if code >= len(FEATURE_KINDS):
        raise FormatError(f"{path}: unknown feature kind code {code}")
    body = data[16:]
    if len(body) != 4 * n_frames * n_bins:
        raise FormatError(f"{path}: truncated or oversized payload")
    frames = np.frombuffer(body, dtype="<f4").reshape(n_frames, n_bins).astype(np.float64)
    return frames, FEATURE_KINDS[code]
