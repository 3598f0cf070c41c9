"""The three learned trackers (DNN-REG, RNN-REG, DNN-HMM), training, decoding and persistence."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dsp import FramingConfig, Spectrogram, spectrogram
from .errors import FormatError, ModelMismatchError, ParameterError
from .features import (ContextConfig, NormStats, Quantizer, context_indices,
                       contour_targets, dequantize, fit_norm_stats, quantize_f0)
from .nn import (SGD, BatchNorm, DenseLayer, DenseNet, RecurrentLayer, RecurrentNet,
                 TrainConfig, backprop_dnn, bptt)
from .signal_io import F0Contour, Waveform, trim_contour

log = logging.getLogger(__name__)

KINDS = ("dnn_reg", "rnn_reg", "dnn_hmm")
MAGIC = b"F0TK"
FORMAT_VERSION = 1
PRIOR_FLOOR = 1e-8


# ---------------------------------------------------------------------- HMM


@dataclass
class HmmParams:
    log_prior: np.ndarray       # (U,)
    log_trans: np.ndarray       # (U, U), row = from-state

    @property
    def n_states(self) -> int:
        return len(self.log_prior)


def estimate_hmm(state_seqs: Sequence[np.ndarray], n_states: int) -> HmmParams:
    """State priors and bigram transitions from label sequences, add-one smoothed."""
    prior = np.ones(n_states)
    trans = np.ones((n_states, n_states))
    for seq in state_seqs:
        seq = np.asarray(seq, dtype=np.int64)
        np.add.at(prior, seq, 1.0)
        if len(seq) > 1:
            np.add.at(trans, (seq[:-1], seq[1:]), 1.0)
    prior /= prior.sum()
    trans /= trans.sum(axis=1, keepdims=True)
    return HmmParams(np.log(prior), np.log(trans))


def scaled_log_likelihoods(posteriors: np.ndarray, log_prior: np.ndarray) -> np.ndarray:
    """log P(s|x) - log P(s), i.e. log P(x|s) up to a per-frame constant."""
    logp = np.log(np.maximum(posteriors, np.finfo(float).tiny))
    return logp - np.maximum(log_prior, np.log(PRIOR_FLOOR))


def viterbi_decode(posteriors: np.ndarray, hmm: HmmParams, return_score: bool = False):
    """Most likely state path under prior-scaled posteriors and HMM transitions.

    The path score is the sum of per-frame scaled log-likelihoods plus the log
    transition probabilities between consecutive states.  Ties resolve toward
    the lower state id.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    n_frames, n_states = post.shape
    if hmm.log_trans.shape != (n_states, n_states) or len(hmm.log_prior) != n_states:
        raise ParameterError("posterior width does not match HMM state count")
    if n_frames == 0:
        path = np.zeros(0, dtype=np.int64)
        return (path, 0.0) if return_score else path
    emit = scaled_log_likelihoods(post, hmm.log_prior)
    back = np.zeros((n_frames, n_states), dtype=np.int64)
    delta = emit[0].copy()
    for i in range(1, n_frames):
        cand = delta[:, None] + hmm.log_trans
        back[i] = np.argmax(cand, axis=0)
        delta = cand[back[i], np.arange(n_states)] + emit[i]
    path = np.zeros(n_frames, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for i in range(n_frames - 1, 0, -1):
        path[i - 1] = back[i, path[i]]
    if return_score:
        return path, float(delta[path[-1]])
    return path


def path_score(posteriors: np.ndarray, hmm: HmmParams, path: Sequence[int]) -> float:
    emit = scaled_log_likelihoods(np.asarray(posteriors, dtype=np.float64), hmm.log_prior)
    path = np.asarray(path, dtype=np.int64)
    score = float(emit[np.arange(len(path)), path].sum())
    return score + float(hmm.log_trans[path[:-1], path[1:]].sum())


# -------------------------------------------------------------------- model


@dataclass
class TrackerModel:
    kind: str
    network: object
    norm_stats: NormStats
    context: ContextConfig
    framing: FramingConfig
    sample_rate_hz: int = 16000
    feature_kind: str = "log_psd"
    quantizer: Optional[Quantizer] = None
    hmm: Optional[HmmParams] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown tracker kind {self.kind!r}")
        needs_hmm = self.kind == "dnn_hmm"
        if needs_hmm != (self.quantizer is not None) or needs_hmm != (self.hmm is not None):
            raise ParameterError("quantizer and HMM are required for dnn_hmm and only for it")
        recurrent = isinstance(self.network, RecurrentNet)
        if recurrent != (self.kind == "rnn_reg"):
            raise ParameterError(f"{self.kind} needs a {'recurrent' if not recurrent else 'dense'} network")

    @property
    def n_bins(self) -> int:
        return len(self.norm_stats.mean)


def build_network(kind: str, n_bins: int, context: ContextConfig, cfg: TrainConfig,
                  n_states: int = 68):
    """Architecture per tracker kind, sized by ``cfg.n_hidden`` x ``cfg.hidden_units``."""
    hidden = [cfg.hidden_units] * cfg.n_hidden
    if kind == "rnn_reg":
        return RecurrentNet.build(n_bins, hidden, 1, seed=cfg.seed)
    sizes = [context.width * n_bins] + hidden + [n_states if kind == "dnn_hmm" else 1]
    return DenseNet.build(sizes, hidden="relu",
                          output="softmax" if kind == "dnn_hmm" else "identity",
                          batch_norm=cfg.batch_norm, dropout_rate=cfg.dropout_rate,
                          seed=cfg.seed)


# ------------------------------------------------------------ frame pooling


class FramePool:
    """Normalized frames of many utterances in one array, with per-frame bounds.

    Context windows are clamped to the owning utterance, so edge frames repeat
    the first/last frame of their own utterance rather than leaking across.
    """

    def __init__(self, specs: List[Spectrogram], f0s: List[np.ndarray], stats: NormStats):
        self.frames = np.concatenate([stats.apply(s.frames) for s in specs]) if specs else np.zeros((0, 0))
        self.f0 = np.concatenate(f0s) if f0s else np.zeros(0)
        lo, hi, start = [], [], 0
        for s in specs:
            n = s.n_frames
            lo.append(np.full(n, start))
            hi.append(np.full(n, start + n - 1))
            start += n
        self.lo = np.concatenate(lo) if lo else np.zeros(0, dtype=np.int64)
        self.hi = np.concatenate(hi) if hi else np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.f0)

    def gather(self, ids: np.ndarray, context: ContextConfig) -> np.ndarray:
        """(M, 2p+1, K) context windows for pool frames ``ids``."""
        idx = context_indices(ids, context, self.lo[ids], self.hi[ids])
        return self.frames[idx]


def _net_inputs(kind: str, windows: np.ndarray) -> np.ndarray:
    if kind == "rnn_reg":
        return np.ascontiguousarray(windows.transpose(1, 0, 2))
    return windows.reshape(windows.shape[0], -1)


def _aligned(w: Waveform, ref: F0Contour, framing: FramingConfig, feature_kind: str):
    spec = spectrogram(w, framing, feature_kind)
    ref = trim_contour(ref, framing.head_trim_frames, framing.tail_trim_frames)
    if spec.n_frames and len(ref) and not np.isclose(ref.hop_s, spec.hop_s):
        raise ModelMismatchError(f"ground-truth hop {ref.hop_s} s != analysis hop {spec.hop_s} s")
    return spec, contour_targets(ref, spec.n_frames)


@dataclass
class _Batches:
    """Batch source for one split; regression pools keep voiced frames only."""
    pool: FramePool
    ids: np.ndarray
    targets: np.ndarray


def _make_split(utts, framing, feature_kind, stats, kind, quantizer):
    specs, f0s = [], []
    for w, ref in utts:
        spec, f0 = _aligned(w, ref, framing, feature_kind)
        specs.append(spec)
        f0s.append(f0)
    pool = FramePool(specs, f0s, stats)
    if kind == "dnn_hmm":
        ids = np.arange(len(pool))
        targets = quantize_f0(pool.f0, quantizer)
    else:
        ids = np.flatnonzero(pool.f0 > 0)
        targets = pool.f0[ids]
    return specs, f0s, _Batches(pool, ids, targets)


def _eval_loss(net, kind, split: _Batches, context, target_mu, target_sd, chunk=1024) -> float:
    """Mean loss over a split in inference mode (Hz^2 for regression)."""
    if len(split.ids) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(split.ids), chunk):
        ids = split.ids[i:i + chunk]
        out = net.forward(_net_inputs(kind, split.pool.gather(ids, context)))[0]
        t = split.targets[i:i + chunk]
        if kind == "dnn_hmm":
            p = out[np.arange(len(ids)), t]
            total += float(-np.sum(np.log(np.maximum(p, np.finfo(float).tiny))))
        else:
            pred = out[:, 0] * target_sd + target_mu
            total += float(np.sum((pred - t) ** 2))
    return total / len(split.ids)


def _fold_target_scaling(net, mu: float, sd: float) -> None:
    """Rescale an identity head trained on standardized targets to output Hz."""
    W = net.layers[-1].W if isinstance(net, DenseNet) else net.head_layer.W
    W *= sd
    W[:, 0] += mu


def train_tracker(kind: str, train_utts, cv_utts, cfg: TrainConfig,
                  framing: FramingConfig = FramingConfig(),
                  context: ContextConfig = ContextConfig(),
                  quantizer: Optional[Quantizer] = None,
                  feature_kind: str = "log_psd", log_path=None):
    """Train one tracker on (Waveform, reference F0Contour) pairs.

    Returns ``(model, log_rows)``; each log row is ``(epoch, train_loss,
    cv_loss, lr, seconds)``.  The weights with the lowest CV loss are kept.
    Regression heads are trained on standardized F0 and rescaled to Hz at the
    end, so the returned network maps features to Hz directly.
    """
    if kind not in KINDS:
        raise ParameterError(f"unknown tracker kind {kind!r}")
    train_utts, cv_utts = list(train_utts), list(cv_utts)
    if not train_utts:
        raise ParameterError("empty training set")
    rates = {w.sample_rate_hz for w, _ in train_utts + cv_utts}
    if len(rates) != 1:
        raise ParameterError(f"mixed sample rates in corpus: {sorted(rates)}")
    rate = rates.pop()
    if kind == "dnn_hmm":
        quantizer = quantizer or Quantizer()
    else:
        quantizer = None

    specs = [spectrogram(w, framing, feature_kind) for w, _ in train_utts]
    stats = fit_norm_stats(specs)
    _, train_f0s, train = _make_split(train_utts, framing, feature_kind, stats, kind, quantizer)
    cv = _make_split(cv_utts, framing, feature_kind, stats, kind, quantizer)[2] if cv_utts else None
    if len(train.ids) == 0:
        raise ParameterError("training set has no usable frames")

    hmm = None
    if kind == "dnn_hmm":
        hmm = estimate_hmm([quantize_f0(f, quantizer) for f in train_f0s], quantizer.n_states)
        target_mu, target_sd = 0.0, 1.0
    else:
        target_mu = float(np.mean(train.targets))
        target_sd = float(np.std(train.targets)) or 1.0

    net = build_network(kind, stats.mean.shape[0], context, cfg,
                        quantizer.n_states if quantizer else 68)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.momentum)
    best = (np.inf, None)
    rows = []
    n_batches = int(np.ceil(len(train.ids) / cfg.batch_size))
    if cfg.max_batches_per_epoch:
        n_batches = min(n_batches, cfg.max_batches_per_epoch)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train.ids))
        losses = []
        for b in range(n_batches):
            sel = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            ids = train.ids[sel]
            x = _net_inputs(kind, train.pool.gather(ids, context))
            if kind == "dnn_hmm":
                y = train.targets[sel]
            else:
                y = (train.targets[sel] - target_mu) / target_sd
            if kind == "rnn_reg":
                loss = bptt(net, _Batch(x, y), cfg, lr=lr, optimizer=opt)
            else:
                loss = backprop_dnn(net, _Batch(x, y), cfg, rng=rng, lr=lr, optimizer=opt)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        if kind != "dnn_hmm":
            train_loss *= target_sd ** 2
        cv_loss = _eval_loss(net, kind, cv, context, target_mu, target_sd) if cv else float("nan")
        seconds = time.perf_counter() - t0
        rows.append((epoch + 1, train_loss, cv_loss, lr, seconds))
        log.info("%s epoch %d: train %.4g cv %.4g lr %.3g (%.1fs)",
                 kind, epoch + 1, train_loss, cv_loss, lr, seconds)
        score = cv_loss if np.isfinite(cv_loss) else train_loss
        if score < best[0]:
            best = (score, copy.deepcopy(net))

    net = best[1] if best[1] is not None else net
    if kind != "dnn_hmm":
        _fold_target_scaling(net, target_mu, target_sd)
    model = TrackerModel(kind, net, stats, context, framing, rate, feature_kind, quantizer, hmm)
    if log_path is not None:
        write_training_log(log_path, rows)
    return model, rows


@dataclass
class _Batch:
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def steps(self):
        return self.inputs


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "cv_loss", "lr", "seconds"])
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# ----------------------------------------------------------------- inference


def _forward_all(model: TrackerModel, spec: Spectrogram, chunk: int = 1024) -> np.ndarray:
    if spec.n_bins != model.n_bins:
        raise ModelMismatchError(f"spectrogram has {spec.n_bins} bins, model expects {model.n_bins}")
    if spec.feature_kind != model.feature_kind:
        raise ModelMismatchError(f"feature kind {spec.feature_kind} != model's {model.feature_kind}")
    normed = model.norm_stats.apply(spec.frames)
    outs = []
    for start in range(0, spec.n_frames, chunk):
        ids = np.arange(start, min(start + chunk, spec.n_frames))
        windows = normed[context_indices(ids, model.context, 0, spec.n_frames - 1)]
        outs.append(model.network.forward(_net_inputs(model.kind, windows))[0])
    if not outs:
        return np.zeros((0, model.network.n_out))
    return np.concatenate(outs)


def infer_regression(model: TrackerModel, spec: Spectrogram) -> F0Contour:
    """Continuous F0 per frame, clamped to [0, Nyquist]; voicing is left to the caller."""
    if model.kind not in ("dnn_reg", "rnn_reg"):
        raise ModelMismatchError(f"{model.kind} is not a regression tracker")
    f0 = _forward_all(model, spec)[:, 0]
    f0 = np.clip(f0, 0.0, model.sample_rate_hz / 2.0)
    return F0Contour(f0, hop_s=spec.hop_s, offset_s=spec.offset_s)


def posteriors(model: TrackerModel, spec: Spectrogram) -> np.ndarray:
    if model.kind != "dnn_hmm":
        raise ModelMismatchError(f"{model.kind} does not produce state posteriors")
    return _forward_all(model, spec)


def track(model: TrackerModel, waveform: Waveform) -> F0Contour:
    """Estimate the F0 contour of one utterance on the model's frame grid."""
    if waveform.sample_rate_hz != model.sample_rate_hz:
        raise ModelMismatchError(
            f"waveform at {waveform.sample_rate_hz} Hz, model expects {model.sample_rate_hz} Hz")
    spec = spectrogram(waveform, model.framing, model.feature_kind)
    if model.kind != "dnn_hmm":
        return infer_regression(model, spec)
    path = viterbi_decode(posteriors(model, spec), model.hmm)
    return F0Contour(dequantize(path, model.quantizer), hop_s=spec.hop_s, offset_s=spec.offset_s)


# --------------------------------------------------------------- persistence


def _network_meta_and_arrays(net):
    if isinstance(net, RecurrentNet):
        meta = {"type": "recurrent", "n_layers": len(net.layers),
                "head_activation": net.head_layer.activation}
        arrays = [a for layer in net.layers for a in (layer.W, layer.H)] + [net.head_layer.W]
        return meta, arrays
    layers, arrays = [], []
    for layer in net.layers:
        entry = {"activation": layer.activation, "batch_norm": layer.bn is not None}
        arrays.append(layer.W)
        if layer.bn is not None:
            entry.update(momentum=layer.bn.momentum, eps=layer.bn.eps)
            arrays += [layer.bn.gamma, layer.bn.beta, layer.bn.running_mean, layer.bn.running_var]
        layers.append(entry)
    return {"type": "dense", "layers": layers, "dropout_rate": net.dropout_rate}, arrays


def _network_from(meta, arrays):
    arrays = list(arrays)
    if meta["type"] == "recurrent":
        layers = [RecurrentLayer(arrays.pop(0), arrays.pop(0)) for _ in range(meta["n_layers"])]
        return RecurrentNet(layers, DenseLayer(arrays.pop(0), meta["head_activation"])), arrays
    layers = []
    for entry in meta["layers"]:
        W = arrays.pop(0)
        bn = None
        if entry["batch_norm"]:
            bn = BatchNorm(*(arrays.pop(0) for _ in range(4)), entry["momentum"], entry["eps"])
        layers.append(DenseLayer(W, entry["activation"], bn))
    return DenseNet(layers, meta["dropout_rate"]), arrays


def save_model(model: TrackerModel, path) -> None:
    """Write a versioned binary model file.

    Layout: ``F0TK`` magic, uint16 version, uint8 kind code, one pad byte;
    uint32 length + UTF-8 JSON metadata (configs and layer layout); uint32
    array count, then each array as uint32 ndim, uint32 dims and little-endian
    float64 data.  Arrays come in order: norm mean/std, HMM prior/transitions
    (dnn_hmm only), then network weights.
    """
    net_meta, net_arrays = _network_meta_and_arrays(model.network)
    meta = {
        "framing": model.framing.to_dict(),
        "context": {"p": model.context.p},
        "sample_rate_hz": model.sample_rate_hz,
        "feature_kind": model.feature_kind,
        "quantizer": asdict(model.quantizer) if model.quantizer else None,
        "network": net_meta,
    }
    arrays = [model.norm_stats.mean, model.norm_stats.std]
    if model.hmm is not None:
        arrays += [model.hmm.log_prior, model.hmm.log_trans]
    arrays += net_arrays

    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<HBx", FORMAT_VERSION, KINDS.index(model.kind)))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)) + blob)
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        buf.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated model file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path, expected_kind: Optional[str] = None) -> TrackerModel:
    """Read a model written by :func:`save_model`.

    Raises FormatError on a bad magic, unsupported version, truncation,
    trailing bytes, or (when ``expected_kind`` is given) a different kind.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an F0TK model file")
    version, kind_code = r.unpack("<HBx")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if kind_code >= len(KINDS):
        raise FormatError(f"{path}: unknown model kind code {kind_code}")
    kind = KINDS[kind_code]
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"{path}: holds a {kind} model, expected {expected_kind}")
    (n_meta,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n_meta).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata ({exc})") from None
    (n_arrays,) = r.unpack("<I")
    arrays = []
    for _ in range(n_arrays):
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after model payload")

    try:
        stats = NormStats(arrays.pop(0), arrays.pop(0))
        hmm = HmmParams(arrays.pop(0), arrays.pop(0)) if kind == "dnn_hmm" else None
        net, rest = _network_from(meta["network"], arrays)
        if rest:
            raise FormatError(f"{path}: {len(rest)} unused arrays")
        quantizer = Quantizer(**meta["quantizer"]) if meta["quantizer"] else None
        return TrackerModel(kind, net, stats, ContextConfig(**meta["context"]),
                            FramingConfig(**meta["framing"]), meta["sample_rate_hz"],
                            meta["feature_kind"], quantizer, hmm)
    except (IndexError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: inconsistent model payload ({exc})") from None
