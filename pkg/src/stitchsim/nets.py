"""Minimal deterministic feedforward networks with manual backprop.

Networks are stacks of dense layers (relu or identity nonlinearity); the
final layer is always identity and its width is the number of classes.
Backprop is written out explicitly so gradients can be routed through a
frozen tail (needed for stitching-layer training) and checked against
finite differences.

Conventions, fixed so independent reproductions match bit-for-bit:

* the surrogate loss is softmax cross-entropy;
* ``grad_wrt_intermediate`` and ``backprop_logits`` use the SUM of the
  per-sample losses (training divides by the batch size);
* weight decay is decoupled: it is added to the optimizer step, never to
  the Adam moment estimates;
* epoch shuffles come from the splitmix64 stream seeded by the train
  config (see _rng), weight init from numpy PCG64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import derive_seed, generator, permutation
from .errors import TrainingDivergedError

_NET_MAGIC = b"FFNC"
_NET_VERSION = 1
_NONLIN_CODES = {"identity": 0, "relu": 1}
_NONLIN_NAMES = {code: name for name, code in _NONLIN_CODES.items()}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    return float(np.mean(lse - picked))


def _onehot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class DenseLayer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    nonlinearity: str  # "relu" | "identity"

    def __post_init__(self):
        if self.nonlinearity not in _NONLIN_CODES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    def activate(self, z: np.ndarray) -> np.ndarray:
        return np.maximum(z, 0.0) if self.nonlinearity == "relu" else z

    def activate_grad(self, z: np.ndarray, dout: np.ndarray) -> np.ndarray:
        return np.where(z > 0.0, dout, 0.0) if self.nonlinearity == "relu" else dout


class FeedforwardNet:
    """Ordered dense layers; the last layer emits logits (identity)."""

    def __init__(self, layers: list[DenseLayer], frozen: bool = False):
        if not layers:
            raise ValueError("a network needs at least one layer")
        if layers[-1].nonlinearity != "identity":
            raise ValueError("the final layer must be identity (logits)")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise ValueError("consecutive layer widths do not chain")
        self.layers = layers
        self.frozen = frozen

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].w.shape[0]] + [layer.w.shape[1] for layer in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].w.shape[1]

    def layer_width(self, i: int) -> int:
        """Output width of layer i (i = 0 is the input)."""
        return self.widths[i]

    def freeze(self) -> "FeedforwardNet":
        self.frozen = True
        return self

    def copy(self, frozen: bool | None = None) -> "FeedforwardNet":
        layers = [DenseLayer(l.w.copy(), l.b.copy(), l.nonlinearity) for l in self.layers]
        return FeedforwardNet(layers, self.frozen if frozen is None else frozen)

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.w, layer.b])
        return params

    # -- forward ---------------------------------------------------------

    def _check_index(self, i: int):
        if not 0 <= i <= self.num_layers:
            raise IndexError(f"layer index {i} out of range [0, {self.num_layers}]")

    def forward_to(self, i: int, x: np.ndarray) -> np.ndarray:
        """Activations of layer i; i = 0 returns the input unchanged."""
        self._check_index(i)
        a = np.asarray(x, dtype=np.float64)
        for layer in self.layers[:i]:
            a = layer.activate(a @ layer.w + layer.b)
        return a

    def forward_from(self, i: int, a: np.ndarray) -> np.ndarray:
        """Logits from layer-i activations; i = m is the identity."""
        self._check_index(i)
        a = np.asarray(a, dtype=np.float64)
        for layer in self.layers[i:]:
            a = layer.activate(a @ layer.w + layer.b)
        return a

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_to(self.num_layers, x)

    # -- backward --------------------------------------------------------

    def _forward_cached(self, start: int, a: np.ndarray):
        acts = [np.asarray(a, dtype=np.float64)]
        pres = []
        for layer in self.layers[start:]:
            z = acts[-1] @ layer.w + layer.b
            pres.append(z)
            acts.append(layer.activate(z))
        return acts, pres

    def _backward(self, start: int, acts, pres, dlogits: np.ndarray):
        grads = []
        din = dlogits
        for k in range(self.num_layers - 1, start - 1, -1):
            layer = self.layers[k]
            dz = layer.activate_grad(pres[k - start], din)
            grads.append((acts[k - start].T @ dz, dz.sum(axis=0)))
            din = dz @ layer.w.T
        grads.reverse()
        return grads, din

    def backprop_logits(self, x: np.ndarray, dlogits: np.ndarray):
        """Parameter grads [(dw, db), ...] and input grad for a given dL/dlogits."""
        acts, pres = self._forward_cached(0, x)
        return self._backward(0, acts, pres, dlogits)

    def _tail_grad(self, i: int, a: np.ndarray, labels: np.ndarray):
        """(dL_sum/da, loss_sum, logits) for the tail i+1..m, params untouched."""
        acts, pres = self._forward_cached(i, a)
        logits = acts[-1]
        dlogits = softmax(logits) - _onehot(labels, self.num_classes)
        _, din = self._backward(i, acts, pres, dlogits)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        loss_sum = float(np.sum(lse - shifted[np.arange(len(labels)), labels]))
        return din, loss_sum, logits

    def grad_wrt_intermediate(self, i: int, a: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Gradient of the summed cross-entropy of forward_from(i, a) w.r.t. a."""
        self._check_index(i)
        a = np.asarray(a, dtype=np.float64)
        if a.shape[1] != self.layer_width(i):
            raise ValueError(f"expected width {self.layer_width(i)} at layer {i}, got {a.shape[1]}")
        din, _, _ = self._tail_grad(i, a, np.asarray(labels, dtype=np.int64))
        return din

    # -- checkpoints -----------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_NET_MAGIC)
            fh.write(struct.pack("<I", _NET_VERSION))
            fh.write(struct.pack("<I", self.num_layers))
            for width in self.widths:
                fh.write(struct.pack("<Q", width))
            for layer in self.layers:
                fh.write(struct.pack("<B", _NONLIN_CODES[layer.nonlinearity]))
            for layer in self.layers:
                fh.write(np.ascontiguousarray(layer.w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "FeedforwardNet":
        path = Path(path)
        with open(path, "rb") as fh:
            if fh.read(4) != _NET_MAGIC:
                raise ValueError(f"{path}: not a net checkpoint")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != _NET_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            (m,) = struct.unpack("<I", fh.read(4))
            widths = [struct.unpack("<Q", fh.read(8))[0] for _ in range(m + 1)]
            codes = [struct.unpack("<B", fh.read(1))[0] for _ in range(m)]
            layers = []
            for k in range(m):
                w = np.frombuffer(fh.read(widths[k] * widths[k + 1] * 8), dtype="<f8")
                w = w.reshape(widths[k], widths[k + 1]).copy()
                b = np.frombuffer(fh.read(widths[k + 1] * 8), dtype="<f8").copy()
                layers.append(DenseLayer(w, b, _NONLIN_NAMES[codes[k]]))
        return cls(layers)


def init_net(layer_widths, nonlinearity: str = "relu", seed: int = 0) -> FeedforwardNet:
    """Fresh net with fan-in-scaled uniform weights and zero biases.

    Hidden layers use ``nonlinearity``; the final layer is identity.
    Identical (widths, nonlinearity, seed) give bit-identical parameters.
    """
    widths = list(layer_widths)
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    if any(w <= 0 for w in widths):
        raise ValueError("layer widths must be positive")
    layers = []
    for k in range(len(widths) - 1):
        rng = generator(seed, "init", k)
        bound = 1.0 / np.sqrt(widths[k])
        w = rng.uniform(-bound, bound, size=(widths[k], widths[k + 1]))
        b = np.zeros(widths[k + 1])
        last = k == len(widths) - 2
        layers.append(DenseLayer(w, b, "identity" if last else nonlinearity))
    return FeedforwardNet(layers)


@dataclass
class LabeledDataset:
    """Inputs (n, d) with integer labels in [0, num_classes)."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) < 1:
            raise ValueError("inputs must be a non-empty (n, d) matrix")
        if self.labels.shape != (len(self.inputs),):
            raise ValueError("labels must be one integer per input row")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    @property
    def n(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def split(self, holdout_fraction: float, seed: int):
        """Deterministic (train, heldout) split."""
        n_hold = int(round(self.n * holdout_fraction))
        if not 0 < n_hold < self.n:
            raise ValueError("holdout fraction leaves an empty split")
        perm = permutation(self.n, derive_seed(seed, "split"))
        return self.subset(perm[n_hold:]), self.subset(perm[:n_hold])


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Optimizer:
    """SGD / Adam over a list of parameter arrays, updated in place.

    The decoupled weight decay term is added to the step after the Adam
    moments, so the moments track the raw gradients only.
    """

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        for k, (p, g) in enumerate(zip(self.params, grads)):
            if cfg.optimizer == "adam":
                self.m[k] = ADAM_BETA1 * self.m[k] + (1 - ADAM_BETA1) * g
                self.v[k] = ADAM_BETA2 * self.v[k] + (1 - ADAM_BETA2) * g * g
                mhat = self.m[k] / (1 - ADAM_BETA1**self.t)
                vhat = self.v[k] / (1 - ADAM_BETA2**self.t)
                direction = mhat / (np.sqrt(vhat) + ADAM_EPS)
            else:
                direction = g
            if cfg.weight_decay:
                direction = direction + cfg.weight_decay * p
            p -= cfg.learning_rate * direction


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = permutation(n, derive_seed(seed, "shuffle", epoch))
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train(net: FeedforwardNet, dataset: LabeledDataset, cfg: TrainConfig) -> TrainLog:
    """Mini-batch cross-entropy training; deterministic given cfg.seed."""
    if net.frozen:
        raise ValueError("cannot train a frozen network")
    if dataset.inputs.shape[1] != net.layer_width(0):
        raise ValueError("dataset width does not match the network input")
    opt = Optimizer(net.parameters(), cfg)
    log = TrainLog()
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        for idx in _epoch_batches(dataset.n, cfg.batch_size, cfg.seed, epoch):
            xb, yb = dataset.inputs[idx], dataset.labels[idx]
            acts, pres = net._forward_cached(0, xb)
            logits = acts[-1]
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} (lr={cfg.learning_rate})"
                )
            loss_sum += loss * len(idx)
            dlogits = (softmax(logits) - _onehot(yb, net.num_classes)) / len(idx)
            grads, _ = net._backward(0, acts, pres, dlogits)
            opt.step([g for pair in grads for g in pair])
        log.losses.append(loss_sum / dataset.n)
        log.accuracies.append(accuracy(net, dataset))
    return log


def accuracy(net: FeedforwardNet, dataset: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    preds = np.argmax(net.forward(dataset.inputs), axis=1)
    return float(np.mean(preds == dataset.labels))
