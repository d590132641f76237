"""Affine stitching layers: direct matching, task loss matching, and
stitched-model evaluation.

A stitching layer maps the activations of one network's layer i into the
activation space of another network's layer j, applying the same affine
map at every position.  Direct matching fits the map by least squares on
activation pairs; task loss matching trains it against the downstream
classification loss through the frozen receiving half-network.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from ._rng import derive_seed, permutation
from .activations import ActivationSet
from .errors import DegenerateInputError, TrainingDivergedError
from .nets import (
    FeedforwardNet,
    LabeledDataset,
    Optimizer,
    TrainConfig,
    TrainLog,
    _epoch_batches,
    accuracy,
    cross_entropy,
)

DM_SAMPLES_DEFAULT = 100  # samples used to fit a direct-matching stitcher


def default_tlm_config(seed: int = 0) -> TrainConfig:
    """Toy-scale task-loss-matching defaults: Adam, lr 1e-3, wd 1e-5."""
    return TrainConfig(
        epochs=100, batch_size=128, learning_rate=1e-3, weight_decay=1e-5,
        optimizer="adam", seed=seed,
    )


@dataclass
class AffineMap:
    """x -> x @ weights + bias, applied identically at every position."""

    weights: np.ndarray  # (c_in, c_out)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("weights must be (c_in, c_out) with matching bias")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("affine map parameters must be finite")

    @property
    def c_in(self) -> int:
        return self.weights.shape[0]

    @property
    def c_out(self) -> int:
        return self.weights.shape[1]

    def apply_rows(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.bias

    def copy(self) -> "AffineMap":
        return AffineMap(self.weights.copy(), self.bias.copy())

    @classmethod
    def identity(cls, c: int) -> "AffineMap":
        return cls(np.eye(c), np.zeros(c))


def apply_map(amap: AffineMap, acts: ActivationSet) -> ActivationSet:
    """Map every (sample, position) row; sample count and positions kept."""
    if acts.c != amap.c_in:
        raise ValueError(f"map expects width {amap.c_in}, activations have {acts.c}")
    flat = amap.apply_rows(acts.positions_as_samples())
    return ActivationSet(flat.reshape(acts.n, acts.s, amap.c_out), acts.labels)


@dataclass
class DirectFit:
    map: AffineMap
    residual: float  # Frobenius norm of the training residual
    rank: int  # numerical rank of the bias-augmented design matrix
    rank_deficient: bool


def fit_direct_detailed(source: ActivationSet, target: ActivationSet,
                        rcond: float | None = None) -> DirectFit:
    """Least-squares affine map from source to target activations.

    Minimizes ||source @ W + 1 b^T - target||_F over all rows (every
    position of every sample) via the pseudoinverse of the bias-augmented
    design matrix.  Labels play no role.  A rank-deficient design still
    returns the minimum-norm best map, flagged in the result.
    """
    if source.n != target.n or source.s != target.s:
        raise ValueError("source and target must share sample and position counts")
    x = source.positions_as_samples()
    y = target.positions_as_samples()
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    if rcond is None:
        rcond = numerics.default_rcond(design)
    s = numerics.svd(design).singular_values
    rank = int(np.sum(s > rcond * s[0])) if s[0] > 0 else 0
    coeffs = numerics.pseudoinverse(design, rcond) @ y
    amap = AffineMap(coeffs[:-1], coeffs[-1])
    residual = float(np.linalg.norm(design @ coeffs - y))
    return DirectFit(map=amap, residual=residual, rank=rank,
                     rank_deficient=rank < design.shape[1])


def fit_direct(source: ActivationSet, target: ActivationSet,
               rcond: float | None = None) -> AffineMap:
    return fit_direct_detailed(source, target, rcond).map


@dataclass
class StitchSpec:
    """Front half of f up to layer i, stitched into g after layer j."""

    source_net: FeedforwardNet
    source_layer: int
    target_net: FeedforwardNet
    target_layer: int
    map: AffineMap

    def __post_init__(self):
        f, g = self.source_net, self.target_net
        if not 0 <= self.source_layer <= f.num_layers:
            raise ValueError("source layer index out of range")
        if not 0 <= self.target_layer <= g.num_layers:
            raise ValueError("target layer index out of range")
        expected = (f.layer_width(self.source_layer), g.layer_width(self.target_layer))
        if (self.map.c_in, self.map.c_out) != expected:
            raise ValueError(f"map dims {(self.map.c_in, self.map.c_out)} != layer widths {expected}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = self.source_net.forward_to(self.source_layer, x)
        return self.target_net.forward_from(self.target_layer, self.map.apply_rows(a))


def stitched_accuracy(spec: StitchSpec, data: LabeledDataset) -> float:
    preds = np.argmax(spec.forward(data.inputs), axis=1)
    return float(np.mean(preds == data.labels))


def relative_accuracy(spec: StitchSpec, data: LabeledDataset) -> float:
    """Stitched accuracy divided by the receiving network's own accuracy."""
    target_acc = accuracy(spec.target_net, data)
    if target_acc == 0.0:
        raise DegenerateInputError("target network accuracy is zero")
    return stitched_accuracy(spec, data) / target_acc


def train_tlm(f: FeedforwardNet, i: int, g: FeedforwardNet, j: int,
              init: AffineMap, data: LabeledDataset,
              cfg: TrainConfig | None = None):
    """Train the stitching map against the task loss; halves stay frozen.

    Gradients reach the map by chaining the receiver's gradient w.r.t.
    its layer-j input.  Returns (trained map, per-epoch log).
    """
    if not (f.frozen and g.frozen):
        raise ValueError("both half-networks must be frozen for task loss matching")
    if cfg is None:
        cfg = default_tlm_config()
    expected = (f.layer_width(i), g.layer_width(j))
    if (init.c_in, init.c_out) != expected:
        raise ValueError(f"init map dims {(init.c_in, init.c_out)} != layer widths {expected}")
    amap = init.copy()
    opt = Optimizer([amap.weights, amap.bias], cfg)
    log = TrainLog()
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        for idx in _epoch_batches(data.n, cfg.batch_size, cfg.seed, epoch):
            xb, yb = data.inputs[idx], data.labels[idx]
            a = f.forward_to(i, xb)
            z = amap.apply_rows(a)
            din, batch_loss_sum, _ = g._tail_grad(j, z, yb)
            loss = batch_loss_sum / len(idx)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite stitching loss at epoch {epoch}")
            loss_sum += batch_loss_sum
            dz = din / len(idx)
            opt.step([a.T @ dz, dz.sum(axis=0)])
        log.losses.append(loss_sum / data.n)
        spec = StitchSpec(f, i, g, j, amap)
        log.accuracies.append(stitched_accuracy(spec, data))
    return amap, log


@dataclass
class SimilarityGrid:
    """Scores for every (source layer, target layer) pair.

    values[r, c] compares source layer source_layers[r] with target layer
    target_layers[c]; the direction flag says whether higher means more
    similar.  Cell failures are recorded in meta["failures"] and leave
    NaN in the grid.
    """

    values: np.ndarray
    index_name: str
    higher_is_similar: bool
    source_layers: list[int]
    target_layers: list[int]
    meta: dict = field(default_factory=dict)


def _map_cells(fn, cells, threads: int):
    if threads <= 1:
        return [fn(cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, cells))


def _pick_dm_rows(n: int, k: int, seed: int) -> np.ndarray:
    if k >= n:
        return np.arange(n)
    return permutation(n, derive_seed(seed, "dm-samples"))[:k]


def similarity_grid(f: FeedforwardNet, g: FeedforwardNet, method: str,
                    data: LabeledDataset, eval_data: LabeledDataset | None = None,
                    dm_samples: int = DM_SAMPLES_DEFAULT,
                    tlm_cfg: TrainConfig | None = None,
                    seed: int = 0, threads: int = 1) -> SimilarityGrid:
    """Relative-accuracy grid over all hidden-layer pairs.

    method "dm-functional" fits each stitcher by direct matching on
    dm_samples rows of ``data``; "tlm" additionally trains it against the
    task loss on all of ``data``.  Accuracies are measured on
    ``eval_data`` (defaults to ``data``).  Cell failures are collected
    rather than aborting the grid, and every cell derives its own seed,
    so threaded evaluation equals sequential evaluation.
    """
    if method not in ("tlm", "dm-functional"):
        raise ValueError(f"unknown stitching method {method!r}")
    if eval_data is None:
        eval_data = data
    f = f.copy(frozen=True)
    g = g.copy(frozen=True)
    src_layers = list(range(1, f.num_layers))
    tgt_layers = list(range(1, g.num_layers))
    target_acc = accuracy(g, eval_data)
    if target_acc == 0.0:
        raise DegenerateInputError("target network accuracy is zero")
    dm_rows = _pick_dm_rows(data.n, dm_samples, seed)
    fit_inputs = data.inputs[dm_rows]
    failures = []

    def cell(pair):
        i, j = pair
        try:
            src = ActivationSet(f.forward_to(i, fit_inputs)[:, None, :])
            tgt = ActivationSet(g.forward_to(j, fit_inputs)[:, None, :])
            amap = fit_direct(src, tgt)
            if method == "tlm":
                cfg = tlm_cfg if tlm_cfg is not None else default_tlm_config()
                cell_cfg = TrainConfig(
                    epochs=cfg.epochs, batch_size=cfg.batch_size,
                    learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                    optimizer=cfg.optimizer, seed=derive_seed(seed, "tlm-cell", i, j),
                )
                amap, _ = train_tlm(f, i, g, j, amap, data, cell_cfg)
            spec = StitchSpec(f, i, g, j, amap)
            return stitched_accuracy(spec, eval_data) / target_acc
        except Exception as exc:  # recorded per cell, grid keeps going
            failures.append({"source_layer": i, "target_layer": j, "error": str(exc)})
            return float("nan")

    cells = [(i, j) for i in src_layers for j in tgt_layers]
    values = np.array(_map_cells(cell, cells, threads)).reshape(len(src_layers), len(tgt_layers))
    failures.sort(key=lambda f: (f["source_layer"], f["target_layer"]))
    return SimilarityGrid(
        values=values, index_name=method, higher_is_similar=True,
        source_layers=src_layers, target_layers=tgt_layers,
        meta={"seed": seed, "dm_samples": int(len(dm_rows)), "method": method,
              "target_accuracy": target_acc, "failures": failures},
    )
