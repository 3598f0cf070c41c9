"""Gross and fine pitch error scoring and per-condition aggregation."""
from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import AlignmentError, ParameterError
from .signal_io import F0Contour

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["tracker", "noise", "snr_db", "n_voiced", "n_gpe", "gpe_rate",
                  "fpe_mean_hz", "fpe_std_hz"]


@dataclass(frozen=True)
class EvalConfig:
    # 10 samples at 16 kHz
    gpe_period_threshold_s: float = 0.000625

    def __post_init__(self):
        if self.gpe_period_threshold_s <= 0:
            raise ParameterError("GPE threshold must be positive")


@dataclass
class UtteranceScore:
    n_voiced: int
    n_gpe: int
    fpe_errors: np.ndarray      # |f_est - f_ref| on FPE frames, Hz
    keys: Dict[str, object] = field(default_factory=dict)
    utt_id: str = ""

    @property
    def n_fpe(self) -> int:
        return len(self.fpe_errors)

    @property
    def gpe_rate(self) -> float:
        return self.n_gpe / self.n_voiced if self.n_voiced else float("nan")

    @property
    def fpe_mean_hz(self) -> float:
        return fpe_moments(self.fpe_errors)[0]

    @property
    def fpe_std_hz(self) -> float:
        return fpe_moments(self.fpe_errors)[1]


def fpe_moments(errors: np.ndarray) -> Tuple[float, float]:
    """Mean and population standard deviation, two-pass."""
    errors = np.asarray(errors, dtype=np.float64)
    if len(errors) == 0:
        return float("nan"), float("nan")
    mu = float(errors.sum() / len(errors))
    return mu, float(np.sqrt(np.sum((errors - mu) ** 2) / len(errors)))


def is_gross_error(f_est, f_ref, threshold_s: float) -> np.ndarray:
    """Period-domain test |1/f_est - 1/f_ref| > threshold; unvoiced estimates always fail."""
    f_est = np.asarray(f_est, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        period_err = np.abs(1.0 / np.where(f_est > 0, f_est, np.inf) - 1.0 / f_ref)
    return (f_est <= 0) | ~(period_err <= threshold_s)


def _check_grid(est: F0Contour, ref: F0Contour) -> None:
    if not np.isclose(est.hop_s, ref.hop_s, rtol=1e-6, atol=1e-9):
        raise AlignmentError(f"hop differs: estimate {est.hop_s} s, reference {ref.hop_s} s")
    if not np.isclose(est.offset_s, ref.offset_s, rtol=0, atol=1e-6):
        raise AlignmentError(f"offset differs: estimate {est.offset_s} s, reference {ref.offset_s} s")


def score_utterance(est: F0Contour, ref: F0Contour, cfg: EvalConfig = EvalConfig(),
                    **keys) -> UtteranceScore:
    """Score one estimate against its reference over the reference's voiced frames.

    Frames are matched on frame index.  Reference-voiced frames with no
    estimate frame count as gross errors, the same as estimated-unvoiced ones.
    """
    _check_grid(est, ref)
    ref_ids = ref.frame_index[ref.voiced]
    f_ref = ref.f0_hz[ref.voiced]
    f_est = np.zeros(len(ref_ids))
    if len(est):
        pos = np.clip(np.searchsorted(est.frame_index, ref_ids), 0, len(est) - 1)
        present = est.frame_index[pos] == ref_ids
        f_est[present] = est.f0_hz[pos[present]]
    gross = is_gross_error(f_est, f_ref, cfg.gpe_period_threshold_s)
    errors = np.abs(f_est[~gross] - f_ref[~gross])
    return UtteranceScore(int(len(f_ref)), int(gross.sum()), errors, dict(keys))


@dataclass
class AggregateRow:
    keys: Tuple
    n_voiced: int
    n_gpe: int
    n_fpe: int
    gpe_rate: float
    fpe_mean_hz: float
    fpe_std_hz: float
    gpe_rate_utt_mean: float
    n_utts: int


def aggregate(rows: Iterable[UtteranceScore], group_keys: Sequence[str]) -> List[AggregateRow]:
    """Pool utterance scores per group.

    The GPE rate is total GPE frames over total voiced frames; FPE moments are
    computed over every FPE frame in the group.  The unweighted mean of
    per-utterance GPE rates is also kept.  Groups with no voiced frames are
    dropped with a warning.
    """
    groups: Dict[Tuple, List[UtteranceScore]] = OrderedDict()
    for row in rows:
        key = tuple(row.keys.get(k) for k in group_keys)
        groups.setdefault(key, []).append(row)
    out = []
    for key, members in groups.items():
        n_voiced = sum(r.n_voiced for r in members)
        if n_voiced == 0:
            log.warning("group %s has no voiced frames; omitted", dict(zip(group_keys, key)))
            continue
        n_gpe = sum(r.n_gpe for r in members)
        errors = np.concatenate([r.fpe_errors for r in members])
        mu, sd = fpe_moments(errors)
        per_utt = [r.gpe_rate for r in members if r.n_voiced]
        out.append(AggregateRow(key, n_voiced, n_gpe, len(errors), n_gpe / n_voiced, mu, sd,
                                float(np.mean(per_utt)), len(members)))
    return out


def write_report(path, rows: List[AggregateRow]) -> None:
    """Headline report: one pooled row per (tracker, noise, snr_db)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow(list(r.keys) + [r.n_voiced, r.n_gpe, f"{r.gpe_rate:.6f}",
                                            f"{r.fpe_mean_hz:.6f}", f"{r.fpe_std_hz:.6f}"])


def write_utterance_report(path, rows: Iterable[UtteranceScore]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utt_id"] + REPORT_COLUMNS[:3] + ["n_voiced", "n_gpe", "gpe_rate",
                                                          "fpe_mean_hz", "fpe_std_hz"])
        for r in rows:
            writer.writerow([r.utt_id] + [r.keys.get(k) for k in REPORT_COLUMNS[:3]]
                            + [r.n_voiced, r.n_gpe, f"{r.gpe_rate:.6f}",
                               f"{r.fpe_mean_hz:.6f}", f"{r.fpe_std_hz:.6f}"])
