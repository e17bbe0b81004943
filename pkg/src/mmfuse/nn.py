"""Minimal dense network engine.

Everything here works on numpy float64 arrays. Vectors are 1-D, batches are
2-D with one row per instance; functions accept either and return the same
rank they were given.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")
MAGIC = "mmfuse-net-v1"
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Input or parameter dimensions do not chain."""


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2:
            raise ShapeError("weights must be a 2-D (out, in) matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class DenseNetwork:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}")
        if self.layers[-1].activation != "identity":
            raise ValueError("last layer must be identity (logits)")
        if self.output_dim < 2:
            raise ShapeError("output_dim must be at least 2")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNetwork":
        return copy.deepcopy(self)


def init_network(dims: Sequence[int], seed: int | np.random.Generator = 0,
                 hidden_activation: str = "relu") -> DenseNetwork:
    """Glorot-uniform weights, zero biases, identity on the last layer."""
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = "identity" if i == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return DenseNetwork(layers)


# ---------------------------------------------------------------- forward


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ShapeError(f"expected a vector or a 2-D batch, got shape {x.shape}")
    return x, False


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else z


def forward_cache(net: DenseNetwork, X: np.ndarray) -> list[np.ndarray]:
    """Post-activation outputs of every layer, input first, logits last."""
    if X.shape[1] != net.input_dim:
        raise ShapeError(f"input has {X.shape[1]} features, network expects {net.input_dim}")
    acts = [X]
    a = X
    for layer in net.layers:
        a = _activate(a @ layer.weights.T + layer.bias, layer.activation)
        acts.append(a)
    return acts


def forward(net: DenseNetwork, x) -> np.ndarray:
    X, vec = _as_batch(x)
    out = forward_cache(net, X)[-1]
    return out[0] if vec else out


def forward_hidden(net: DenseNetwork, x, layer_index: int) -> np.ndarray:
    """Post-activation output of ``net.layers[layer_index]``."""
    if not 0 <= layer_index < len(net.layers):
        raise IndexError(f"layer_index {layer_index} out of range for {len(net.layers)} layers")
    X, vec = _as_batch(x)
    if X.shape[1] != net.input_dim:
        raise ShapeError(f"input has {X.shape[1]} features, network expects {net.input_dim}")
    a = X
    for layer in net.layers[: layer_index + 1]:
        a = _activate(a @ layer.weights.T + layer.bias, layer.activation)
    return a[0] if vec else a


def softmax_k(z, k: float = 1.0) -> np.ndarray:
    """Parameterized softmax ``exp(k z_p) / sum_t exp(k z_t)`` along the last axis."""
    if not k > 0:
        raise ValueError(f"softmax temperature k must be positive, got {k}")
    z = np.asarray(z, dtype=float)
    s = k * (z - z.max(axis=-1, keepdims=True))
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_k_vjp(y: np.ndarray, grad_y: np.ndarray, k: float) -> np.ndarray:
    """Pull ``grad_y`` back through ``y = softmax_k(z)``; returns dL/dz."""
    return k * y * (grad_y - np.sum(y * grad_y, axis=-1, keepdims=True))


def crispify(z) -> np.ndarray:
    """One-hot of the argmax along the last axis; ties go to the lowest index."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] == 0:
        raise ValueError("cannot crispify an empty vector")
    out = np.zeros_like(z)
    np.put_along_axis(out, np.argmax(z, axis=-1)[..., None], 1.0, axis=-1)
    return out


def cross_entropy(y_pred, label) -> float | np.ndarray:
    """``-ln(y_pred[label])`` with the probability floored at 1e-12.

    Given a batch, returns the per-row losses.
    """
    y = np.asarray(y_pred, dtype=float)
    lab = np.asarray(label)
    if np.any(lab < 0) or np.any(lab >= y.shape[-1]):
        raise ValueError(f"label {label} outside 0..{y.shape[-1] - 1}")
    if y.ndim == 1:
        return float(-math.log(max(y[int(lab)], LOG_FLOOR)))
    p = y[np.arange(len(y)), lab]
    return -np.log(np.maximum(p, LOG_FLOOR))


# ---------------------------------------------------------------- backward


def backprop(net: DenseNetwork, acts: list[np.ndarray], grad_out: np.ndarray,
             need_input_grad: bool = False) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Reverse pass given the cache from :func:`forward_cache` and dL/dlogits.

    Gradients are sums over the batch rows (callers divide if they want a mean).
    """
    return backprop_layers(net.layers, acts, grad_out, need_input_grad)


def backprop_layers(layers: Sequence[DenseLayer], acts: list[np.ndarray], grad_out: np.ndarray,
                    need_input_grad: bool = False) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Backprop through ``layers`` where ``grad_out`` is dL/d(post-activation of the last one).

    ``acts`` holds the input followed by each layer's post-activation output.
    """
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.activation == "relu":
            g = g * (acts[i + 1] > 0)
        grads[2 * i] = g.T @ acts[i]
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ layer.weights
    return grads, (g if need_input_grad else None)


def loss_and_grads(net: DenseNetwork, X: np.ndarray, labels: np.ndarray,
                   k: float = 1.0) -> tuple[float, list[np.ndarray]]:
    """Mean softmax_k cross-entropy over the batch and its parameter gradients."""
    acts = forward_cache(net, X)
    y = softmax_k(acts[-1], k)
    n = len(X)
    loss = float(np.mean(cross_entropy(y, labels)))
    onehot = np.zeros_like(y)
    onehot[np.arange(n), labels] = 1.0
    # d CE(softmax_k(z)) / dz = k (y - onehot); exact except where the floor is active
    grads, _ = backprop(net, acts, k * (y - onehot) / n)
    return loss, grads


def backward(net: DenseNetwork, x, label, k: float = 1.0) -> list[np.ndarray]:
    """Analytic gradients of ``cross_entropy(softmax_k(forward(x)), label)``.

    Returned in :meth:`DenseNetwork.params` order. For a batch the loss is the
    mean over rows.
    """
    X, vec = _as_batch(x)
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    if len(labels) != len(X):
        raise ShapeError("one label per input row required")
    if np.any(labels < 0) or np.any(labels >= net.output_dim):
        raise ValueError(f"label outside 0..{net.output_dim - 1}")
    return loss_and_grads(net, X, labels, k)[1]


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Parameters and moments are updated in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state have different lengths")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 300
    early_stop_patience: int = 25
    lr_plateau_patience: int = 10
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "early_stop_patience",
                     "lr_plateau_patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")


class PlateauSchedule:
    """Reduce-on-plateau learning rate plus early stopping on validation loss.

    ``since_best`` counts epochs without a new minimum; the learning rate is
    cut each time the plateau counter reaches ``lr_plateau_patience`` (the
    counter then restarts), and training stops once ``since_best`` reaches
    ``early_stop_patience``.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.best = math.inf
        self.since_best = 0
        self._plateau = 0
        self.n_reductions = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns True if this epoch set a new minimum."""
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = 0
            self._plateau = 0
            return True
        self.since_best += 1
        self._plateau += 1
        if self._plateau >= self.cfg.lr_plateau_patience:
            self.lr *= self.cfg.lr_decay_factor
            self.n_reductions += 1
            self._plateau = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.cfg.early_stop_patience


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    @property
    def n_epochs(self) -> int:
        return len(self.val_loss)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss, "val_loss": self.val_loss, "lr": self.lr,
            "best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
        }


def fit(params: Sequence[np.ndarray],
        batch_loss_grad: Callable[[np.ndarray], tuple[float, list[np.ndarray]]],
        val_loss: Callable[[], float],
        n_train: int,
        cfg: TrainConfig) -> TrainLog:
    """Generic mini-batch Adam loop over live parameter arrays.

    ``batch_loss_grad(idx)`` returns the mean loss on training rows ``idx``
    and gradients aligned with ``params``. On return ``params`` hold the
    values from the epoch with the lowest validation loss.
    """
    if n_train <= 0:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(params)
    sched = PlateauSchedule(cfg)
    tlog = TrainLog()
    best = [p.copy() for p in params]
    # the starting point competes too, so a warm start is never made worse
    init_loss = float(val_loss())
    if math.isfinite(init_loss):
        sched.best = tlog.best_val_loss = init_loss
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_train)
        total = 0.0
        lr = sched.lr
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = batch_loss_grad(idx)
            if not math.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            total += loss * len(idx)
            adam_step(params, grads, state, lr)
        vl = float(val_loss())
        if not math.isfinite(vl):
            raise TrainingError("non-finite validation loss", epoch)
        tlog.train_loss.append(total / n_train)
        tlog.val_loss.append(vl)
        tlog.lr.append(lr)
        if sched.step(vl):
            tlog.best_epoch, tlog.best_val_loss = epoch, vl
            for b, p in zip(best, params):
                b[...] = p
        if sched.should_stop:
            tlog.stopped_early = True
            break
    for b, p in zip(best, params):
        p[...] = b
    log.debug("fit: %d epochs, best epoch %d (val %.4f)", tlog.n_epochs, tlog.best_epoch,
              tlog.best_val_loss)
    return tlog


def train(net: DenseNetwork, train_set: tuple[np.ndarray, np.ndarray],
          val_set: tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
          k: float = 1.0) -> tuple[DenseNetwork, TrainLog]:
    """Train a copy of ``net`` on ``(X, y)`` pairs; the input is left untouched."""
    X, y = np.asarray(train_set[0], float), np.asarray(train_set[1], int)
    Xv, yv = np.asarray(val_set[0], float), np.asarray(val_set[1], int)
    if len(X) == 0 or len(Xv) == 0:
        raise TrainingError("training and validation sets must be nonempty")
    if X.shape[1] != net.input_dim or Xv.shape[1] != net.input_dim:
        raise ShapeError("dataset width does not match network input")
    net = net.copy()

    def batch(idx):
        return loss_and_grads(net, X[idx], y[idx], k)

    def val():
        return float(np.mean(cross_entropy(softmax_k(forward(net, Xv), k), yv)))

    tlog = fit(net.params(), batch, val, len(X), cfg)
    return net, tlog


def accuracy(net: DenseNetwork, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(forward(net, X), axis=1) == np.asarray(y)))


# ---------------------------------------------------------------- serialization


def _fmt(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def network_block(net: DenseNetwork, name: str = "net") -> list[str]:
    lines = [f"net {name}", "dims " + " ".join(map(str, net.dims)),
             "activations " + " ".join(layer.activation for layer in net.layers)]
    for i, layer in enumerate(net.layers):
        lines.append(f"W {i} {_fmt(layer.weights)}")
        lines.append(f"b {i} {_fmt(layer.bias)}")
    lines.append("end")
    return lines


def parse_network_block(lines: list[str], pos: int) -> tuple[str, DenseNetwork, int]:
    """Parse one ``net ... end`` block starting at ``lines[pos]``."""
    head = lines[pos].split(maxsplit=1)
    if head[0] != "net":
        raise ValueError(f"expected 'net' at line {pos + 1}, got {lines[pos][:20]!r}")
    name = head[1] if len(head) > 1 else "net"
    dims = [int(t) for t in lines[pos + 1].split()[1:]]
    acts = lines[pos + 2].split()[1:]
    if len(acts) != len(dims) - 1:
        raise ValueError("activation count does not match dims")
    layers = []
    p = pos + 3
    for i in range(len(acts)):
        w_tok = lines[p].split()
        b_tok = lines[p + 1].split()
        if w_tok[:2] != ["W", str(i)] or b_tok[:2] != ["b", str(i)]:
            raise ValueError(f"malformed weights for layer {i}")
        w = np.array([float(t) for t in w_tok[2:]]).reshape(dims[i + 1], dims[i])
        b = np.array([float(t) for t in b_tok[2:]])
        layers.append(DenseLayer(w, b, acts[i]))
        p += 2
    if lines[p].strip() != "end":
        raise ValueError("missing 'end' after network block")
    return name, DenseNetwork(layers), p + 1


def dumps_network(net: DenseNetwork) -> str:
    return "\n".join([MAGIC] + network_block(net)) + "\n"


def loads_network(text: str) -> DenseNetwork:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ValueError(f"not a {MAGIC} document")
    return parse_network_block(lines, 1)[1]
