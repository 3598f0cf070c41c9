"""Waveform and F0-contour I/O, harmonic synthesis and SNR-controlled noise mixing."""
from __future__ import annotations

import csv
import logging
import re
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, FormatError, ParameterError, ParseError

log = logging.getLogger(__name__)

PCM_SCALE = 32768.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ParameterError("waveform samples must be one-dimensional")
        if int(self.sample_rate_hz) <= 0:
            raise ParameterError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class F0Contour:
    """Per-frame F0 values on a regular time grid.

    Frame ``frame_index[j]`` is centred at ``offset_s + frame_index[j] * hop_s``.
    A frame is voiced exactly when its ``f0_hz`` is positive.
    """

    f0_hz: np.ndarray
    hop_s: float
    offset_s: float = 0.0
    frame_index: Optional[np.ndarray] = None
    voiced: np.ndarray = field(init=False)

    def __post_init__(self):
        f0 = np.asarray(self.f0_hz, dtype=np.float64).reshape(-1)
        if np.any(~np.isfinite(f0)):
            raise ParameterError("f0 values must be finite")
        self.f0_hz = np.where(f0 > 0, f0, 0.0)
        self.voiced = self.f0_hz > 0
        if self.frame_index is None:
            self.frame_index = np.arange(len(f0), dtype=np.int64)
        else:
            self.frame_index = np.asarray(self.frame_index, dtype=np.int64).reshape(-1)
            if len(self.frame_index) != len(f0):
                raise ParameterError("frame_index and f0_hz lengths differ")
            if np.any(np.diff(self.frame_index) <= 0):
                raise ParameterError("frame_index must be strictly increasing")
        if self.hop_s <= 0:
            raise ParameterError("hop_s must be positive")

    def __len__(self):
        return len(self.f0_hz)

    @property
    def times_s(self) -> np.ndarray:
        return self.offset_s + self.frame_index * self.hop_s


@dataclass
class NoiseSpec:
    noise: Waveform
    snr_db: float


@dataclass(frozen=True)
class ColumnSpec:
    """Describes how to read a delimited ground-truth file.

    ``voicing_col`` is optional; when absent, voicing is derived from f0 > 0.
    ``delimiter`` of None splits on any run of whitespace and/or commas.
    """

    f0_col: int = 0
    voicing_col: Optional[int] = None
    delimiter: Optional[str] = None
    skip_rows: int = 0
    hop_s: float = 0.005
    offset_s: float = 0.0125

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# --------------------------------------------------------------------------- WAV


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono RIFF file, scaling samples to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if n_channels != 1:
        raise FormatError(f"{path}: expected mono audio, found {n_channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    """Write a waveform as 16-bit PCM mono; values outside [-1, 1) are clipped."""
    ints = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(ints.tobytes())


# ------------------------------------------------------------------ ground truth

_SPLIT_ANY = re.compile(r"[,\s]+")


def load_f0_ground_truth(path, adapter: ColumnSpec = ColumnSpec()) -> F0Contour:
    """Load a reference contour from a delimited text file, one row per frame.

    Rows with f0 <= 0, or with a zero voicing flag, become unvoiced frames.
    """
    f0 = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= adapter.skip_rows:
                continue
            line = line.strip()
            if not line:
                continue
            if adapter.delimiter is None:
                cells = [c for c in _SPLIT_ANY.split(line) if c]
            else:
                cells = [c.strip() for c in line.split(adapter.delimiter)]
            try:
                value = float(cells[adapter.f0_col])
                flag = 1.0 if adapter.voicing_col is None else float(cells[adapter.voicing_col])
            except IndexError:
                raise ParseError(f"missing column in {path}", line=lineno) from None
            except ValueError as exc:
                raise ParseError(f"non-numeric cell in {path}: {exc}", line=lineno) from None
            if not np.isfinite(value) or not np.isfinite(flag):
                raise ParseError(f"non-finite cell in {path}", line=lineno)
            f0.append(value if (value > 0 and flag != 0) else 0.0)
    return F0Contour(np.array(f0, dtype=np.float64), hop_s=adapter.hop_s, offset_s=adapter.offset_s)


def write_f0_ground_truth(path, contour: F0Contour) -> None:
    """Write ``f0 voiced`` rows, the layout read by the default ColumnSpec(0, 1)."""
    with open(path, "w", encoding="utf-8") as fh:
        for f, v in zip(contour.f0_hz, contour.voiced):
            fh.write(f"{float(f)!r} {int(v)}\n")


def write_contour_csv(path, contour: F0Contour) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "f0_hz", "voiced"])
        for t, f, v in zip(contour.times_s, contour.f0_hz, contour.voiced):
            writer.writerow([repr(float(t)), repr(float(f)), int(v)])


def read_contour_csv(path, hop_s: Optional[float] = None) -> F0Contour:
    """Read a ``time_s,f0_hz,voiced`` file back into a contour.

    The grid is recovered from the timestamps: the first row is frame 0 and the
    hop is the median time step.  ``hop_s`` is required for files with one row.
    """
    times, f0 = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return F0Contour(np.zeros(0), hop_s=hop_s or 0.005)
        if [h.strip() for h in header] != ["time_s", "f0_hz", "voiced"]:
            raise FormatError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                t, f, v = float(row[0]), float(row[1]), int(float(row[2]))
            except (IndexError, ValueError):
                raise ParseError(f"bad contour row in {path}", line=lineno) from None
            times.append(t)
            f0.append(f if v else 0.0)
    times = np.asarray(times)
    if len(times) >= 2:
        hop_s = float(np.median(np.diff(times)))
    elif hop_s is None:
        raise ParameterError(f"{path}: cannot infer hop from fewer than two rows")
    if len(times) == 0:
        return F0Contour(np.zeros(0), hop_s=hop_s)
    idx = np.round((times - times[0]) / hop_s).astype(np.int64)
    return F0Contour(np.asarray(f0), hop_s=hop_s, offset_s=float(times[0]), frame_index=idx)


def trim_contour(contour: F0Contour, head: int, tail: int) -> F0Contour:
    """Drop ``head`` leading and ``tail`` trailing frames, re-basing frame indices."""
    n = len(contour)
    stop = max(n - tail, 0)
    if head >= stop:
        return F0Contour(np.zeros(0), hop_s=contour.hop_s,
                         offset_s=contour.offset_s + head * contour.hop_s)
    return F0Contour(contour.f0_hz[head:stop].copy(), hop_s=contour.hop_s,
                     offset_s=contour.offset_s + head * contour.hop_s)


# --------------------------------------------------------------------- synthesis


def contour_span_samples(contour: F0Contour, sample_rate_hz: int) -> int:
    """Number of samples covered by a contour's frames.

    Frames are centred at ``offset_s + i*hop_s`` and extend ``offset_s`` either
    side, so framing the result with ``frame_len = 2*offset_s`` returns exactly
    ``len(contour)`` frames.
    """
    if len(contour) == 0:
        return 0
    last = int(contour.frame_index[-1])
    return int(round((2 * contour.offset_s + last * contour.hop_s) * sample_rate_hz))


def synth_harmonic(f0_track: F0Contour, n_harmonics: int, sample_rate_hz: int,
                   amp: float = 0.5) -> Waveform:
    """Render a harmonic complex following ``f0_track``.

    Each sample takes the F0 of its nearest frame centre, linearly interpolated
    inside voiced runs, and phase is accumulated so it stays continuous across
    frame boundaries.  Samples nearest an unvoiced frame are exactly zero.  The
    harmonics have equal amplitude ``amp / n_harmonics``.
    """
    if n_harmonics < 1:
        raise ParameterError("n_harmonics must be >= 1")
    nyquist = sample_rate_hz / 2.0
    if np.any(f0_track.f0_hz * n_harmonics >= nyquist):
        raise ParameterError(
            f"highest harmonic {f0_track.f0_hz.max() * n_harmonics:.1f} Hz "
            f"aliases at {sample_rate_hz} Hz")
    n = contour_span_samples(f0_track, sample_rate_hz)
    if n == 0:
        return Waveform(np.zeros(0), sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    frame_t = f0_track.times_s
    nearest = np.clip(np.round((t - f0_track.offset_s) / f0_track.hop_s), 0, None).astype(np.int64)
    pos = np.clip(np.searchsorted(f0_track.frame_index, nearest), 0, len(f0_track) - 1)
    voiced = f0_track.voiced[pos]

    inst_f0 = np.zeros(n)
    if np.any(voiced):
        # interpolate within voiced runs only: unvoiced frames must not pull values to 0
        vt, vf = frame_t[f0_track.voiced], f0_track.f0_hz[f0_track.voiced]
        inst_f0[voiced] = np.interp(t[voiced], vt, vf)
    phase = 2.0 * np.pi * np.cumsum(inst_f0) / sample_rate_hz
    phase -= phase[0]
    k = np.arange(1, n_harmonics + 1)[:, None]
    out = np.cos(k * phase[None, :]).sum(axis=0) * (amp / n_harmonics)
    out[~voiced] = 0.0
    return Waveform(out, sample_rate_hz)


# ------------------------------------------------------------------------- noise


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x))) if len(x) else 0.0


def measure_snr(speech: Waveform, noise_component: Waveform) -> float:
    """SNR in dB of ``speech`` against an additive noise component.

    Returns ``inf`` (with a logged warning) when the noise component is silent.
    """
    if len(speech) != len(noise_component):
        raise ParameterError("speech and noise lengths differ")
    p_s, p_n = _power(speech.samples), _power(noise_component.samples)
    if p_n == 0.0:
        log.warning("noise component has zero power; SNR is +inf")
        return float("inf")
    return 10.0 * np.log10(p_s / p_n)


def noise_scale(p_speech: float, p_noise: float, snr_db: float) -> float:
    return float(np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_noise_at_snr(speech: Waveform, spec: NoiseSpec, seed: int,
                     return_noise: bool = False):
    """Add a seeded segment of ``spec.noise`` to ``speech`` at ``spec.snr_db``.

    The segment starts at a uniform random offset into the noise, which is
    tiled when shorter than the speech.  Powers are mean squares over the whole
    utterance.  With ``return_noise`` the scaled noise component is returned
    alongside the mixture.
    """
    if spec.noise.sample_rate_hz != speech.sample_rate_hz:
        raise ParameterError(
            f"noise rate {spec.noise.sample_rate_hz} Hz != speech rate {speech.sample_rate_hz} Hz")
    if not np.isfinite(spec.snr_db):
        raise ParameterError("snr_db must be finite")
    noise = spec.noise.samples
    if len(noise) == 0:
        raise DegenerateInputError("noise waveform is empty")
    n = len(speech)
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, len(noise)))
    segment = np.take(noise, np.arange(start, start + n), mode="wrap")

    p_s, p_n = _power(speech.samples), _power(segment)
    if p_s == 0.0:
        raise DegenerateInputError("speech is silent; SNR is undefined")
    if p_n == 0.0:
        raise DegenerateInputError("selected noise segment is silent")
    scaled = noise_scale(p_s, p_n, spec.snr_db) * segment
    mixed = Waveform(speech.samples + scaled, speech.sample_rate_hz)
    if return_noise:
        return mixed, Waveform(scaled, speech.sample_rate_hz)
    return mixed
