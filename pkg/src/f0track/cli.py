"""Command-line front end: ``f0track synth|mix|train|track|eval``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import dataclasses
import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import corpus
from .corpus import CLEAN, Manifest, NoiseEntry
from .dsp import FramingConfig
from .errors import (AlignmentError, DegenerateInputError, DivergenceError, FormatError,
                     ModelMismatchError, ParameterError, ParseError)
from .evaluate import EvalConfig, aggregate, score_utterance, write_report, write_utterance_report
from .models import load_model, save_model, track, train_tracker
from .signal_io import (load_f0_ground_truth, read_contour_csv, read_wav, trim_contour,
                        write_contour_csv, write_f0_ground_truth, write_wav)
from .yin import YinConfig, yin_track

log = logging.getLogger("f0track")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# ---------------------------------------------------------------------- synth


def cmd_synth(out: Path, n_utts: int, duration_s: float, f0_range, contour_kind: str,
              seed: int, n_cv: int = 0, n_test: int = 0, sample_rate_hz: int = 16000,
              noise_seconds: float = 30.0, n_harmonics: int = 8) -> Path:
    """Write a synthetic corpus and a starter manifest under ``out``.

    Produces ``corpus/wav/*.wav``, ``corpus/gt/*.f0`` (``f0 voiced`` rows on a
    5 ms grid), ``noise/white.wav`` and ``manifest.yaml``.  The last ``n_test``
    utterances form the test split and the ``n_cv`` before them the CV split.
    """
    lo, hi = f0_range
    if not 60.0 <= lo < hi <= 400.0:
        raise ParameterError("f0 range must lie within [60, 400] Hz")
    if contour_kind not in corpus.CONTOUR_KINDS:
        raise ParameterError(f"unknown contour kind {contour_kind!r}")
    if n_cv + n_test >= n_utts:
        raise ParameterError("CV and test splits leave no training utterances")
    out = Path(out)
    framing = FramingConfig(head_trim_frames=0, tail_trim_frames=0)
    (out / "corpus" / "wav").mkdir(parents=True, exist_ok=True)
    (out / "corpus" / "gt").mkdir(parents=True, exist_ok=True)
    (out / "noise").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = [f"utt{i:04d}" for i in range(n_utts)]
    for utt in ids:
        w, contour = corpus.synth_utterance(rng, duration_s, (lo, hi), contour_kind, framing,
                                            sample_rate_hz, n_harmonics)
        write_wav(out / "corpus" / "wav" / f"{utt}.wav", w)
        write_f0_ground_truth(out / "corpus" / "gt" / f"{utt}.f0", contour)
    noise = corpus.white_noise(int(noise_seconds * sample_rate_hz), sample_rate_hz, seed + 1)
    write_wav(out / "noise" / "white.wav", noise)

    n_train = n_utts - n_cv - n_test
    manifest = Manifest(
        root=out, seed=seed, sample_rate_hz=sample_rate_hz,
        splits={"train": ids[:n_train], "cv": ids[n_train:n_train + n_cv],
                "test": ids[n_train + n_cv:]},
        noises=[NoiseEntry("white", "noise/white.wav", train=True, test=True)],
        framing=framing,
        training={"default": {"epochs": 10, "hidden_units": 128, "learning_rate": 0.01,
                              "momentum": 0.9, "seed": seed}},
    )
    path = out / "manifest.yaml"
    manifest.save(path)
    return path


# ------------------------------------------------------------------------ mix


def _render(args):
    manifest, entry = args
    noises = {n.name: read_wav(manifest.path(n.path)) for n in manifest.noises if n.name == entry.noise}
    corpus.render_entry(manifest, entry, noises)
    return entry


def cmd_mix(manifest: Manifest, jobs: int = 1) -> List[corpus.IndexEntry]:
    """Render every noisy (and clean training) copy and write the mix index."""
    for n in manifest.noises:
        if not manifest.path(n.path).exists():
            raise FileNotFoundError(f"noise file {manifest.path(n.path)} not found")
    plan = corpus.mix_plan(manifest)
    if jobs <= 1:
        noises = {n.name: read_wav(manifest.path(n.path)) for n in manifest.noises}
        for entry in plan:
            corpus.render_entry(manifest, entry, noises)
    else:
        _map(_render, [(manifest, e) for e in plan], jobs)
    corpus.write_index(manifest.index_path, plan)
    return plan


# ---------------------------------------------------------------------- train


def _index(manifest: Manifest) -> List[corpus.IndexEntry]:
    if not manifest.index_path.exists():
        raise FileNotFoundError(f"{manifest.index_path} missing; run 'mix' first")
    return corpus.read_index(manifest.index_path)


def cmd_train(manifest: Manifest, kind: str, seed: Optional[int] = None):
    index = _index(manifest)
    cfg = manifest.train_config(kind)
    if seed is not None:
        cfg.seed = seed
    train = corpus.load_pairs(manifest, [e for e in index if e.split == "train"])
    cv = corpus.load_pairs(manifest, [e for e in index if e.split == "cv"])
    models_dir = manifest.out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    model, rows = train_tracker(kind, train, cv, cfg, manifest.framing, manifest.context,
                                manifest.quantizer if kind == "dnn_hmm" else None,
                                manifest.feature_kind, log_path=models_dir / f"{kind}_log.csv")
    path = models_dir / f"{kind}.f0tk"
    save_model(model, path)
    return path, rows


# ---------------------------------------------------------------------- track


def _track_one(args):
    tracker, wav, out_dir, framing = args
    w = read_wav(wav)
    if tracker == "yin":
        contour = yin_track(w, YinConfig(framing=framing))
    else:
        contour = track(tracker, w)
    path = Path(out_dir) / f"{Path(wav).stem}.csv"
    write_contour_csv(path, contour)
    return path


def cmd_track(tracker: str, wavs: List[str], out_dir, jobs: int = 1,
              framing: FramingConfig = FramingConfig()) -> List[Path]:
    """Write one contour CSV per input; ``tracker`` is a model path or ``yin``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    engine = "yin" if tracker == "yin" else load_model(tracker)
    return _map(_track_one, [(engine, w, out_dir, framing) for w in wavs], jobs)


# ----------------------------------------------------------------------- eval


def _score_dir(args):
    manifest, tracker, cdir, entry, cfg = args
    path = Path(cdir) / f"{entry.stem}.csv"
    if not path.exists():
        return None
    ref = load_f0_ground_truth(entry.gt, manifest.adapter)
    ref = trim_contour(ref, manifest.framing.head_trim_frames, manifest.framing.tail_trim_frames)
    est = read_contour_csv(path, hop_s=ref.hop_s)
    score = score_utterance(est, ref, cfg, tracker=tracker, noise=entry.noise,
                            snr_db="" if entry.snr_db is None else entry.snr_db)
    score.utt_id = entry.utt_id
    return score


def cmd_eval(manifest: Manifest, contour_dirs: List[str], jobs: int = 1,
             cfg: EvalConfig = EvalConfig()):
    """Score contour CSVs against the test split and write the report files.

    Each directory holds one tracker's CSVs, named after the noisy WAV stems;
    the directory name is used as the tracker label.
    """
    tests = [e for e in _index(manifest) if e.split == "test"]
    jobs_list = [(manifest, Path(d).name, d, e, cfg) for d in contour_dirs for e in tests]
    scores = [s for s in _map(_score_dir, jobs_list, jobs) if s is not None]
    missing = len(jobs_list) - len(scores)
    if missing:
        log.warning("%d contour files missing; those utterances were skipped", missing)
    if not scores:
        raise FileNotFoundError("no contour files matched the test split")
    rows = aggregate(scores, ["tracker", "noise", "snr_db"])
    manifest.out.mkdir(parents=True, exist_ok=True)
    write_report(manifest.out / "report.csv", rows)
    write_utterance_report(manifest.out / "report_per_utterance.csv", scores)
    return rows, scores


# ----------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="f0track", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-utts", type=int, default=100)
    s.add_argument("--n-cv", type=int, default=10)
    s.add_argument("--n-test", type=int, default=20)
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--f0-range", type=float, nargs=2, default=(80.0, 300.0))
    s.add_argument("--contour", choices=corpus.CONTOUR_KINDS, default="mixed")
    s.add_argument("--seed", type=int, default=0)

    for name, help_ in (("mix", "render noisy copies"), ("train", "train one tracker"),
                        ("eval", "score contours")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--manifest", required=True)
        c.add_argument("--jobs", type=int, default=1)
        c.add_argument("--seed", type=int)
        if name == "train":
            c.add_argument("--kind", required=True, choices=("dnn_reg", "rnn_reg", "dnn_hmm"))
        if name == "eval":
            c.add_argument("contour_dirs", nargs="*")

    t = sub.add_parser("track", help="track WAV files with a model or 'yin'")
    t.add_argument("tracker", help="model file or 'yin'")
    t.add_argument("wavs", nargs="*")
    t.add_argument("--manifest", help="track every test-split file of the manifest")
    t.add_argument("--out", help="output directory for contour CSVs")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--head-trim", type=int, help="YIN leading frames to drop (default 400)")
    t.add_argument("--tail-trim", type=int, help="YIN trailing frames to drop (default 200)")
    return p


def _run(args) -> None:
    if args.command == "synth":
        path = cmd_synth(Path(args.out), args.n_utts, args.duration, tuple(args.f0_range),
                         args.contour, args.seed, args.n_cv, args.n_test)
        print(path)
        return
    if args.command == "track":
        manifest = Manifest.load(args.manifest) if args.manifest else None
        wavs = list(args.wavs)
        framing = manifest.framing if manifest else FramingConfig()
        trims = {k: v for k, v in (("head_trim_frames", args.head_trim),
                                   ("tail_trim_frames", args.tail_trim)) if v is not None}
        if trims:
            framing = dataclasses.replace(framing, **trims)
        if manifest:
            wavs += [e.wav for e in _index(manifest) if e.split == "test"]
        if not wavs:
            raise ParameterError("no input WAV files given")
        name = "yin" if args.tracker == "yin" else load_model(args.tracker).kind
        out = args.out or (manifest.out / "contours" / name if manifest else None)
        if out is None:
            raise ParameterError("--out is required without --manifest")
        for path in cmd_track(args.tracker, wavs, out, args.jobs, framing):
            log.debug("wrote %s", path)
        print(out)
        return
    manifest = Manifest.load(args.manifest)
    if args.seed is not None:
        manifest.seed = args.seed
    if args.command == "mix":
        plan = cmd_mix(manifest, args.jobs)
        print(f"{len(plan)} files -> {manifest.index_path}")
    elif args.command == "train":
        path, rows = cmd_train(manifest, args.kind, args.seed)
        print(path)
    elif args.command == "eval":
        dirs = args.contour_dirs or sorted(str(d) for d in (manifest.out / "contours").glob("*")
                                           if d.is_dir())
        rows, _ = cmd_eval(manifest, dirs, args.jobs)
        print(manifest.out / "report.csv")


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (ParameterError, yaml.YAMLError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (FormatError, ParseError, DegenerateInputError, AlignmentError, ModelMismatchError,
            FileNotFoundError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
