"""A small numpy neural-network engine.

Weight matrices keep the bias in column 0, so a layer with ``q_in`` inputs and
``q_out`` units holds a ``(q_out, q_in + 1)`` matrix and computes
``g(W @ [1; x])``.  Batches are row-major: ``(M, features)``.

Two network shapes are supported: :class:`DenseNet` (feed-forward, optional
batch norm and dropout on hidden layers) and :class:`RecurrentNet` (stacked
simple tanh recurrent layers read out through a dense head at the final step).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DegenerateInputError, DimensionError, DivergenceError, ParameterError

ACTIVATIONS = ("relu", "tanh", "identity", "softmax")
CLIP_NORM = 5.0


# ------------------------------------------------------------------ activations


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    if kind == "softmax":
        return softmax(z)
    raise ParameterError(f"unknown activation {kind!r}")


def activation_grad(z: np.ndarray, a: np.ndarray, kind: str, da: np.ndarray) -> np.ndarray:
    """Backpropagate ``da`` through an elementwise activation.

    Softmax is excluded: it only appears on output layers, where the loss
    supplies the gradient at the logits directly.
    """
    if kind == "relu":
        return da * (z > 0)
    if kind == "tanh":
        return da * (1.0 - a * a)
    if kind == "identity":
        return da
    raise ParameterError(f"no elementwise gradient for {kind!r}")


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in + 1) weights, uniform in +-sqrt(6/(fan_in+fan_out)), zero bias."""
    a = np.sqrt(6.0 / (n_in + n_out))
    W = np.zeros((n_out, n_in + 1))
    W[:, 1:] = rng.uniform(-a, a, size=(n_out, n_in))
    return W


def _affine(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != W.shape[1] - 1:
        raise DimensionError(f"input shape {x.shape} does not fit weights {W.shape}")
    return x @ W[:, 1:].T + W[:, 0]


# ------------------------------------------------------------------------ layers


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, n_units: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNorm":
        return cls(np.ones(n_units), np.zeros(n_units), np.zeros(n_units),
                   np.ones(n_units), momentum, eps)

    def forward(self, z: np.ndarray, train: bool):
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        zhat = (z - mu) * inv_std
        return self.gamma * zhat + self.beta, (zhat, inv_std, mu, var)

    def backward(self, cache, dy: np.ndarray):
        zhat, inv_std, _, _ = cache
        m = dy.shape[0]
        dgamma = np.sum(dy * zhat, axis=0)
        dbeta = np.sum(dy, axis=0)
        dzhat = dy * self.gamma
        dz = (inv_std / m) * (m * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0))
        return dz, dgamma, dbeta

    def update_running(self, mu: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mu
        self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var


@dataclass
class DenseLayer:
    W: np.ndarray
    activation: str = "relu"
    bn: Optional[BatchNorm] = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.W.shape[1] - 1

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


@dataclass
class RecurrentLayer:
    W: np.ndarray       # (q, q_in + 1) feed-forward
    H: np.ndarray       # (q, q + 1) feedback from the same layer's previous output

    @property
    def n_in(self) -> int:
        return self.W.shape[1] - 1

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


def dense_forward(layer: DenseLayer, inputs: np.ndarray) -> np.ndarray:
    """g(W [1; x]) for each row of ``inputs`` (batch norm in inference mode)."""
    z = _affine(layer.W, np.asarray(inputs, dtype=np.float64))
    if layer.bn is not None:
        z, _ = layer.bn.forward(z, train=False)
    return activate(z, layer.activation)


def recurrent_step(layer: RecurrentLayer, input_t: np.ndarray, hidden_prev: np.ndarray) -> np.ndarray:
    """tanh(W [1; x_t] + H [1; h_{t-1}])."""
    if hidden_prev.shape != (input_t.shape[0], layer.n_out):
        raise DimensionError(f"hidden state shape {hidden_prev.shape} does not fit layer")
    return np.tanh(_affine(layer.W, input_t) + _affine(layer.H, hidden_prev))


# ------------------------------------------------------------------------ losses


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise DimensionError("prediction and target lengths differ")
    m = len(pred)
    if m == 0:
        raise DegenerateInputError("MSE over an empty batch")
    diff = pred - target
    return float(np.dot(diff, diff) / m), (2.0 / m) * diff


def cross_entropy_loss(probs: np.ndarray, target_states: np.ndarray):
    """Mean negative log-probability of the targets; gradient is at the logits."""
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(target_states, dtype=np.int64).reshape(-1)
    m, u = probs.shape
    if len(t) != m:
        raise DimensionError("target count differs from batch size")
    if np.any((t < 0) | (t >= u)):
        raise IndexError(f"target state outside [0, {u})")
    picked = probs[np.arange(m), t]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))
    grad = probs.copy()
    grad[np.arange(m), t] -= 1.0
    return loss, grad / m


# ---------------------------------------------------------------------- networks


class DenseNet:
    """Feed-forward stack; hidden layers may carry batch norm and dropout."""

    def __init__(self, layers: List[DenseLayer], dropout_rate: float = 0.0):
        for layer in layers[:-1]:
            if layer.activation == "softmax":
                raise ParameterError("softmax is only allowed on the output layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.n_out != b.n_in:
                raise DimensionError(f"layer widths {a.n_out} -> {b.n_in} do not chain")
        self.layers = layers
        self.dropout_rate = dropout_rate

    @classmethod
    def build(cls, sizes, hidden="relu", output="identity", batch_norm=False,
              dropout_rate=0.0, seed=0, momentum=0.9) -> "DenseNet":
        rng = np.random.default_rng(seed)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            bn = None if (last or not batch_norm) else BatchNorm.create(n_out, momentum)
            layers.append(DenseLayer(glorot_uniform(rng, n_out, n_in),
                                     output if last else hidden, bn))
        return cls(layers, dropout_rate)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def head(self) -> str:
        return self.layers[-1].activation

    def forward(self, x: np.ndarray, train: bool = False, rng=None):
        """Returns (output, cache).  Dropout is drawn from ``rng`` when training."""
        caches = []
        a = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            a_in = a
            z = _affine(layer.W, a_in)
            bn_cache = None
            y = z
            if layer.bn is not None:
                y, bn_cache = layer.bn.forward(z, train)
            act = activate(y, layer.activation)
            mask = None
            a = act
            if train and i < last and self.dropout_rate > 0:
                keep = 1.0 - self.dropout_rate
                mask = (rng.random(act.shape) < keep) / keep
                a = act * mask
            caches.append((a_in, y, act, bn_cache, mask))
        return a, caches

    def backward(self, caches, d_out: np.ndarray):
        """Gradients for every parameter, ordered as :meth:`parameters`.

        For a softmax output ``d_out`` is the gradient at the logits.
        """
        grads = []
        d = d_out
        for layer, (a_in, y, a, bn_cache, mask) in zip(reversed(self.layers), reversed(caches)):
            if mask is not None:
                d = d * mask
            dy = d if layer.activation == "softmax" else activation_grad(y, a, layer.activation, d)
            layer_grads = []
            if layer.bn is not None:
                dz, dgamma, dbeta = layer.bn.backward(bn_cache, dy)
                layer_grads = [dgamma, dbeta]
            else:
                dz = dy
            dW = np.empty_like(layer.W)
            dW[:, 0] = dz.sum(axis=0)
            dW[:, 1:] = dz.T @ a_in
            grads = [dW] + layer_grads + grads
            d = dz @ layer.W[:, 1:]
        return grads

    def parameters(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.W)
            if layer.bn is not None:
                out += [layer.bn.gamma, layer.bn.beta]
        return out

    def update_running_stats(self, caches) -> None:
        for layer, (_, _, _, bn_cache, _) in zip(self.layers, caches):
            if layer.bn is not None and bn_cache is not None:
                layer.bn.update_running(bn_cache[2], bn_cache[3])

    def predict(self, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
        outs = [self.forward(x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
        return np.concatenate(outs) if outs else np.zeros((0, self.n_out))


class RecurrentNet:
    """Stacked tanh recurrent layers with a dense head on the last time step."""

    def __init__(self, layers: List[RecurrentLayer], head: DenseLayer):
        for a, b in zip(layers[:-1], layers[1:]):
            if a.n_out != b.n_in:
                raise DimensionError(f"layer widths {a.n_out} -> {b.n_in} do not chain")
        if head.n_in != layers[-1].n_out:
            raise DimensionError("head does not fit the top recurrent layer")
        self.layers = layers
        self.head_layer = head

    @classmethod
    def build(cls, n_in: int, hidden: List[int], n_out: int = 1, seed: int = 0) -> "RecurrentNet":
        rng = np.random.default_rng(seed)
        layers = []
        prev = n_in
        for q in hidden:
            layers.append(RecurrentLayer(glorot_uniform(rng, q, prev), glorot_uniform(rng, q, q)))
            prev = q
        return cls(layers, DenseLayer(glorot_uniform(rng, n_out, prev), "identity"))

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.head_layer.n_out

    @property
    def head(self) -> str:
        return self.head_layer.activation

    def forward(self, steps: np.ndarray, train: bool = False, rng=None):
        """Run (T, M, K) inputs through all layers; returns ((M, n_out), cache)."""
        steps = np.asarray(steps, dtype=np.float64)
        if steps.ndim != 3 or steps.shape[2] != self.n_in:
            raise DimensionError(f"expected (T, M, {self.n_in}) steps, got {steps.shape}")
        n_steps, m, _ = steps.shape
        states = []      # states[l][t] = output of layer l at step t
        x_seq = list(steps)
        for layer in self.layers:
            h = np.zeros((m, layer.n_out))
            seq = []
            for x_t in x_seq:
                h = recurrent_step(layer, x_t, h)
                seq.append(h)
            states.append(seq)
            x_seq = seq
        top = states[-1][-1]
        out = activate(_affine(self.head_layer.W, top), self.head_layer.activation)
        return out, (steps, states)

    def backward(self, cache, d_out: np.ndarray):
        """Exact backpropagation through time over the whole sequence."""
        steps, states = cache
        n_steps, m, _ = steps.shape
        head = self.head_layer
        top = states[-1][-1]
        d_head = d_out if head.activation == "softmax" else activation_grad(None, None, head.activation, d_out)
        dW_head = np.empty_like(head.W)
        dW_head[:, 0] = d_head.sum(axis=0)
        dW_head[:, 1:] = d_head.T @ top

        # gradient flowing into each step's output of the current layer from above
        d_from_above = [np.zeros_like(s) for s in states[-1]]
        d_from_above[-1] = d_head @ head.W[:, 1:]
        layer_grads = []
        for li in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[li]
            outs = states[li]
            inputs = states[li - 1] if li > 0 else list(steps)
            dW = np.zeros_like(layer.W)
            dH = np.zeros_like(layer.H)
            d_inputs = [None] * n_steps
            d_next = np.zeros((m, layer.n_out))
            for t in range(n_steps - 1, -1, -1):
                dh = d_from_above[t] + d_next
                dz = dh * (1.0 - outs[t] ** 2)
                h_prev = outs[t - 1] if t > 0 else np.zeros_like(outs[t])
                dW[:, 0] += dz.sum(axis=0)
                dW[:, 1:] += dz.T @ inputs[t]
                dH[:, 0] += dz.sum(axis=0)
                dH[:, 1:] += dz.T @ h_prev
                d_next = dz @ layer.H[:, 1:]
                d_inputs[t] = dz @ layer.W[:, 1:]
            layer_grads = [dW, dH] + layer_grads
            d_from_above = d_inputs
        return layer_grads + [dW_head]

    def parameters(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.H]
        return out + [self.head_layer.W]

    def update_running_stats(self, caches) -> None:
        pass

    def predict(self, steps: np.ndarray, chunk: int = 2048) -> np.ndarray:
        m = steps.shape[1]
        outs = [self.forward(steps[:, i:i + chunk])[0] for i in range(0, m, chunk)]
        return np.concatenate(outs) if outs else np.zeros((0, self.n_out))


def encoder_forward(rnn_net: RecurrentNet, batch) -> np.ndarray:
    """F0 estimate per batch column from the final-step readout."""
    steps = batch.steps if hasattr(batch, "steps") else batch
    if rnn_net.n_out != 1 or rnn_net.head != "identity":
        raise DimensionError("encoder head must be a single identity unit")
    return rnn_net.forward(steps)[0][:, 0]


# --------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 200
    dropout_rate: float = 0.5
    seed: int = 0
    lr_schedule: str = "constant"
    lr_step_epochs: int = 10
    lr_decay: float = 0.5
    momentum: float = 0.0       # 0 = plain SGD
    clip_norm: float = CLIP_NORM
    batch_norm: bool = True
    hidden_units: int = 1024
    n_hidden: int = 3
    max_batches_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError("dropout_rate must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "step"):
            raise ParameterError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a zero-based epoch."""
        if self.lr_schedule == "step":
            return self.learning_rate * self.lr_decay ** (epoch // self.lr_step_epochs)
        return self.learning_rate

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


class SGD:
    """Mini-batch gradient descent, with optional classical momentum."""

    def __init__(self, momentum: float = 0.0):
        self.momentum = momentum
        self._velocity = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray], lr: float) -> None:
        if self.momentum == 0.0:
            for p, g in zip(params, grads):
                p -= lr * g
            return
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self._velocity):
            v *= self.momentum
            v -= lr * g
            p += v


def global_norm(grads: List[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: List[np.ndarray], threshold: float) -> List[np.ndarray]:
    norm = global_norm(grads)
    if norm > threshold > 0:
        return [g * (threshold / norm) for g in grads]
    return grads


def _loss_and_grad(out: np.ndarray, targets: np.ndarray, head: str):
    if head == "softmax":
        return cross_entropy_loss(out, targets)
    loss, g = mse_loss(out[:, 0], targets)
    return loss, g[:, None]


def _check_finite(loss: float, params) -> None:
    if not np.isfinite(loss):
        biggest = max(float(np.max(np.abs(p))) for p in params)
        raise DivergenceError(f"non-finite loss {loss}; largest |weight| = {biggest:.3g}")


def backprop_dnn(net: DenseNet, batch, cfg: TrainConfig, rng=None, lr=None,
                 optimizer: Optional[SGD] = None) -> float:
    """One SGD step on a :class:`DnnBatch`; returns the pre-update batch loss.

    Runs in training mode: dropout masks and batch statistics are used, and
    the batch-norm running statistics are updated afterwards.
    """
    if (net.head == "softmax") != np.issubdtype(np.asarray(batch.targets).dtype, np.integer):
        raise ParameterError("network head does not match target kind")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    out, caches = net.forward(batch.inputs, train=True, rng=rng)
    loss, d_out = _loss_and_grad(out, batch.targets, net.head)
    _check_finite(loss, net.parameters())
    grads = net.backward(caches, d_out)
    (optimizer or SGD()).step(net.parameters(), grads, cfg.learning_rate if lr is None else lr)
    net.update_running_stats(caches)
    return loss


def bptt(rnn_net: RecurrentNet, batch, cfg: TrainConfig, lr=None,
         optimizer: Optional[SGD] = None) -> float:
    """One clipped SGD step on an :class:`RnnBatch`; returns the pre-update loss."""
    out, cache = rnn_net.forward(batch.steps, train=True)
    loss, d_out = _loss_and_grad(out, batch.targets, rnn_net.head)
    _check_finite(loss, rnn_net.parameters())
    grads = clip_by_global_norm(rnn_net.backward(cache, d_out), cfg.clip_norm)
    (optimizer or SGD()).step(rnn_net.parameters(), grads, cfg.learning_rate if lr is None else lr)
    return loss
