"""Synthetic corpora, experiment manifests and the noisy-copy index."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from .dsp import FramingConfig
from .errors import ParameterError
from .features import ContextConfig, Quantizer
from .nn import TrainConfig
from .signal_io import (ColumnSpec, F0Contour, NoiseSpec, Waveform, load_f0_ground_truth,
                        mix_noise_at_snr, read_wav, synth_harmonic, write_f0_ground_truth,
                        write_wav)

CONTOUR_KINDS = ("constant", "glide", "vibrato", "mixed")
SPLITS = ("train", "cv", "test")
INDEX_COLUMNS = ["utt_id", "split", "noise", "snr_db", "wav", "gt"]
CLEAN = "clean"


# ------------------------------------------------------------------ contours


def make_contour(kind: str, n_frames: int, f_start: float, f_end: Optional[float] = None,
                 hop_s: float = 0.005, offset_s: float = 0.0125,
                 vibrato_rate_hz: float = 5.0, vibrato_depth: float = 0.03) -> F0Contour:
    """A fully voiced contour.

    ``constant`` holds ``f_start``; ``glide`` moves linearly from ``f_start``
    to ``f_end`` (first to last frame); ``vibrato`` modulates ``f_start`` by a
    sinusoid of relative depth ``vibrato_depth``.
    """
    t = np.arange(n_frames) * hop_s
    if kind == "constant":
        f0 = np.full(n_frames, float(f_start))
    elif kind == "glide":
        f0 = np.linspace(f_start, f_start if f_end is None else f_end, n_frames)
    elif kind == "vibrato":
        f0 = f_start * (1.0 + vibrato_depth * np.sin(2 * np.pi * vibrato_rate_hz * t))
    else:
        raise ParameterError(f"unknown contour kind {kind!r}")
    return F0Contour(f0, hop_s=hop_s, offset_s=offset_s)


def random_voicing_mask(n_frames: int, rng: np.random.Generator,
                        voiced_frames=(40, 120), gap_frames=(10, 30)) -> np.ndarray:
    """Alternating unvoiced gaps and voiced runs, starting and ending unvoiced."""
    mask = np.zeros(n_frames, dtype=bool)
    pos = int(rng.integers(*gap_frames))
    while pos < n_frames:
        run = int(rng.integers(*voiced_frames))
        mask[pos:min(pos + run, n_frames - gap_frames[0])] = True
        pos += run + int(rng.integers(*gap_frames))
    return mask


def synth_utterance(rng: np.random.Generator, duration_s: float, f0_range, kind: str,
                    framing: FramingConfig, sample_rate_hz: int, n_harmonics: int = 8):
    """One synthetic utterance: (Waveform, reference contour).

    F0 is drawn per voiced run from ``f0_range``; unvoiced gaps are silent.
    """
    lo, hi = f0_range
    hop_s = framing.hop(sample_rate_hz) / sample_rate_hz
    offset_s = framing.frame_len(sample_rate_hz) / 2.0 / sample_rate_hz
    n_frames = int((duration_s - 2 * offset_s) / hop_s) + 1
    mask = random_voicing_mask(n_frames, rng)
    f0 = np.zeros(n_frames)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
    for start, stop in zip(edges[::2], edges[1::2]):
        k = kind if kind != "mixed" else CONTOUR_KINDS[int(rng.integers(0, 3))]
        a, b = rng.uniform(lo, hi, size=2)
        seg = make_contour(k, stop - start, a, b, hop_s=hop_s)
        f0[start:stop] = seg.f0_hz
    contour = F0Contour(np.clip(f0, 0, hi * 1.05), hop_s=hop_s, offset_s=offset_s)
    amp = float(rng.uniform(0.3, 0.7))
    return synth_harmonic(contour, n_harmonics, sample_rate_hz, amp), contour


def white_noise(n_samples: int, sample_rate_hz: int, seed: int, rms: float = 0.1) -> Waveform:
    rng = np.random.default_rng(seed)
    return Waveform(np.clip(rng.normal(0.0, rms, n_samples), -0.99, 0.99), sample_rate_hz)


# ------------------------------------------------------------------ manifest


@dataclass
class NoiseEntry:
    name: str
    path: str
    train: bool = True
    test: bool = True


@dataclass
class Manifest:
    root: Path
    seed: int = 0
    sample_rate_hz: int = 16000
    output_dir: str = "out"
    wav_dir: str = "corpus/wav"
    gt_dir: str = "corpus/gt"
    gt_suffix: str = ".f0"
    adapter: ColumnSpec = field(default_factory=lambda: ColumnSpec(0, 1))
    splits: Dict[str, List[str]] = field(default_factory=dict)
    noises: List[NoiseEntry] = field(default_factory=list)
    snr_db: List[float] = field(default_factory=lambda: [-10.0, -5.0, 0.0, 5.0, 10.0])
    framing: FramingConfig = field(default_factory=FramingConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    quantizer: Quantizer = field(default_factory=Quantizer)
    feature_kind: str = "log_psd"
    training: Dict[str, dict] = field(default_factory=dict)
    trackers: List[str] = field(default_factory=lambda: ["rnn_reg", "dnn_reg", "dnn_hmm", "yin"])

    def __post_init__(self):
        seen = {}
        for split, ids in self.splits.items():
            if split not in SPLITS:
                raise ParameterError(f"unknown split {split!r}")
            for utt in ids:
                if utt in seen:
                    raise ParameterError(f"utterance {utt} is in both {seen[utt]} and {split}")
                seen[utt] = split
        if not all(np.isfinite(s) for s in self.snr_db):
            raise ParameterError("SNR grid must be finite")
        names = [n.name for n in self.noises]
        if len(set(names)) != len(names) or CLEAN in names:
            raise ParameterError("noise names must be unique and not 'clean'")

    # paths
    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def out(self) -> Path:
        return self.path(self.output_dir)

    @property
    def index_path(self) -> Path:
        return self.out / "mixed" / "index.csv"

    def wav_path(self, utt: str) -> Path:
        return self.path(self.wav_dir) / f"{utt}.wav"

    def gt_path(self, utt: str) -> Path:
        return self.path(self.gt_dir) / f"{utt}{self.gt_suffix}"

    def train_config(self, kind: str) -> TrainConfig:
        opts = dict(self.training.get("default", {}))
        opts.update(self.training.get(kind, {}))
        return TrainConfig.from_dict(opts)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ParameterError(f"{path}: manifest must be a mapping")
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, root) -> "Manifest":
        raw = dict(raw)
        try:
            kwargs = {"root": Path(root)}
            for key in ("seed", "sample_rate_hz", "output_dir", "wav_dir", "gt_dir", "gt_suffix",
                        "feature_kind", "trackers", "training"):
                if key in raw:
                    kwargs[key] = raw.pop(key)
            if "adapter" in raw:
                kwargs["adapter"] = ColumnSpec.from_dict(raw.pop("adapter"))
            if "splits" in raw:
                kwargs["splits"] = {k: [str(u) for u in v] for k, v in raw.pop("splits").items()}
            if "noises" in raw:
                kwargs["noises"] = [NoiseEntry(**n) for n in raw.pop("noises")]
            if "snr_db" in raw:
                kwargs["snr_db"] = [float(s) for s in raw.pop("snr_db")]
            if "framing" in raw:
                kwargs["framing"] = FramingConfig(**raw.pop("framing"))
            if "context" in raw:
                kwargs["context"] = ContextConfig(**raw.pop("context"))
            if "quantizer" in raw:
                kwargs["quantizer"] = Quantizer(**raw.pop("quantizer"))
        except TypeError as exc:
            raise ParameterError(f"bad manifest entry: {exc}") from None
        if raw:
            raise ParameterError(f"unknown manifest keys: {sorted(raw)}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "sample_rate_hz": self.sample_rate_hz,
            "output_dir": self.output_dir,
            "wav_dir": self.wav_dir,
            "gt_dir": self.gt_dir,
            "gt_suffix": self.gt_suffix,
            "adapter": {k: getattr(self.adapter, k) for k in ColumnSpec.__dataclass_fields__},
            "splits": self.splits,
            "noises": [vars(n) for n in self.noises],
            "snr_db": self.snr_db,
            "framing": self.framing.to_dict(),
            "context": {"p": self.context.p},
            "quantizer": vars(self.quantizer).copy(),
            "feature_kind": self.feature_kind,
            "training": self.training,
            "trackers": self.trackers,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------- mix index


@dataclass
class IndexEntry:
    utt_id: str
    split: str
    noise: str
    snr_db: Optional[float]
    wav: str
    gt: str

    @property
    def stem(self) -> str:
        return Path(self.wav).stem


def mix_plan(manifest: Manifest) -> List[IndexEntry]:
    """Every (utterance, noise, SNR) copy to produce.

    Train and CV splits get a clean copy plus the noises flagged ``train``;
    the test split gets only the noises flagged ``test``.
    """
    mixed = manifest.out / "mixed"
    plan = []
    for split in SPLITS:
        for utt in manifest.splits.get(split, []):
            gt = str(manifest.gt_path(utt))
            if split != "test":
                plan.append(IndexEntry(utt, split, CLEAN, None,
                                       str(mixed / split / f"{utt}__clean.wav"), gt))
            for noise in manifest.noises:
                if not (noise.test if split == "test" else noise.train):
                    continue
                for snr in manifest.snr_db:
                    name = f"{utt}__{noise.name}__{snr:+g}dB.wav"
                    plan.append(IndexEntry(utt, split, noise.name, snr, str(mixed / split / name), gt))
    return plan


def entry_seed(base_seed: int, entry: IndexEntry) -> int:
    """Stable per-copy seed, independent of processing order."""
    return (base_seed * 1_000_003 + zlib.crc32(Path(entry.wav).name.encode())) % (2 ** 32)


def render_entry(manifest: Manifest, entry: IndexEntry, noise_cache: Dict[str, Waveform]) -> None:
    speech = read_wav(manifest.wav_path(entry.utt_id))
    if entry.noise == CLEAN:
        out = speech
    else:
        spec = NoiseSpec(noise_cache[entry.noise], entry.snr_db)
        out = mix_noise_at_snr(speech, spec, entry_seed(manifest.seed, entry))
    Path(entry.wav).parent.mkdir(parents=True, exist_ok=True)
    write_wav(entry.wav, out)


def write_index(path, entries: List[IndexEntry]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_COLUMNS)
        for e in entries:
            writer.writerow([e.utt_id, e.split, e.noise, "" if e.snr_db is None else repr(e.snr_db),
                             e.wav, e.gt])


def read_index(path) -> List[IndexEntry]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [IndexEntry(r["utt_id"], r["split"], r["noise"],
                           float(r["snr_db"]) if r["snr_db"] else None, r["wav"], r["gt"])
                for r in reader]


def load_pairs(manifest: Manifest, entries: List[IndexEntry]):
    """(Waveform, reference contour) for each index entry."""
    return [(read_wav(e.wav), load_f0_ground_truth(e.gt, manifest.adapter)) for e in entries]
