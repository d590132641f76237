"""Energy-based out-of-distribution scoring of representations.

A dedicated detector (a small classifier over one layer's position-pooled
activations) is pre-trained with cross-entropy on in-distribution
activations, then fine-tuned with an energy-margin term that pushes ID
energies below m_in and OOD energies above m_out.  Separability of two
activation sets is the AUROC of their energy scores; 0.5 means the
detector cannot tell them apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._ranks import average_ranks
from ._rng import derive_seed, permutation
from .activations import ActivationSet
from .errors import TrainingDivergedError
from .nets import (
    FeedforwardNet,
    LabeledDataset,
    Optimizer,
    TrainConfig,
    cross_entropy,
    init_net,
    softmax,
    train,
    _onehot,
)

# Toy-scale margin defaults; the -25 / -7 pair used on 10-class image
# classifiers is far below the energy range these small nets produce.
M_IN_DEFAULT = -7.0
M_OUT_DEFAULT = -3.0
LAMBDA_DEFAULT = 0.1


def energy_score(logits) -> float | np.ndarray:
    """Negative LogSumExp of the logits, max-shifted for stability.

    A 1-D input gives one score; a 2-D input gives one score per row.
    """
    z = np.asarray(logits, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    if z.shape[1] < 1 or not np.all(np.isfinite(z)):
        raise ValueError("need at least one finite logit")
    m = z.max(axis=1)
    e = -(m + np.log(np.exp(z - m[:, None]).sum(axis=1)))
    return float(e[0]) if squeeze else e


def energy_margin_loss(e_in, e_out, m_in: float, m_out: float) -> float:
    """mean(relu(e_in - m_in)^2) + mean(relu(m_out - e_out)^2)."""
    e_in = np.atleast_1d(np.asarray(e_in, dtype=np.float64))
    e_out = np.atleast_1d(np.asarray(e_out, dtype=np.float64))
    lo = np.maximum(0.0, e_in - m_in)
    hi = np.maximum(0.0, m_out - e_out)
    return float(np.mean(lo**2) + np.mean(hi**2))


@dataclass
class EnergyDetector:
    """Classifier over one layer's pooled activations plus energy margins."""

    net: FeedforwardNet
    m_in: float = M_IN_DEFAULT
    m_out: float = M_OUT_DEFAULT
    lam: float = LAMBDA_DEFAULT

    def __post_init__(self):
        if not self.m_in < self.m_out:
            raise ValueError(f"m_in ({self.m_in}) must be < m_out ({self.m_out})")

    def energies(self, acts: ActivationSet) -> np.ndarray:
        return energy_score(self.net.forward(acts.mean_pool()))


@dataclass
class DetectorConfig:
    hidden: tuple[int, ...] = (32, 32)
    m_in: float = M_IN_DEFAULT
    m_out: float = M_OUT_DEFAULT
    lam: float = LAMBDA_DEFAULT
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    seed: int = 0


def _finetune_batches(n_id: int, n_ood: int, cfg: TrainConfig, epoch: int):
    """Balanced ID/OOD index batches: each half is batch_size // 2."""
    half = max(1, cfg.batch_size // 2)
    id_perm = permutation(n_id, derive_seed(cfg.seed, "ft-id", epoch))
    ood_perm = permutation(n_ood, derive_seed(cfg.seed, "ft-ood", epoch))
    n_batches = max(1, min(n_id, n_ood) // half)
    for b in range(n_batches):
        yield id_perm[b * half : (b + 1) * half], ood_perm[b * half : (b + 1) * half]


def train_detector(id_acts: ActivationSet, ood_acts: ActivationSet,
                   cfg: DetectorConfig):
    """Two-stage detector training on in- vs out-of-distribution activations.

    Stage 1 minimizes cross-entropy on the labeled ID activations.
    Stage 2 minimizes cross-entropy + lam * energy-margin loss on batches
    split evenly between ID and OOD rows.  With lam == 0 stage 2 reduces
    exactly to cross-entropy on the ID halves (the OOD rows are not even
    forwarded).  Returns (detector, per-epoch stage-2 loss list).
    """
    if id_acts.labels is None:
        raise ValueError("in-distribution activations need labels")
    if (id_acts.s, id_acts.c) != (ood_acts.s, ood_acts.c):
        raise ValueError("ID and OOD activations must share the layer shape")
    x_id = id_acts.mean_pool()
    x_ood = ood_acts.mean_pool()
    classes = int(id_acts.labels.max()) + 1
    net = init_net([id_acts.c, *cfg.hidden, classes], "relu",
                   seed=derive_seed(cfg.seed, "detector-init"))

    pre_cfg = _reseed(cfg.pretrain, derive_seed(cfg.seed, "pretrain"))
    train(net, LabeledDataset(x_id, id_acts.labels, classes), pre_cfg)

    ft_cfg = _reseed(cfg.finetune, derive_seed(cfg.seed, "finetune"))
    losses = _finetune_energy(net, x_id, id_acts.labels, x_ood, ft_cfg,
                              cfg.m_in, cfg.m_out, cfg.lam)
    return EnergyDetector(net, cfg.m_in, cfg.m_out, cfg.lam), losses


def _reseed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                       optimizer=cfg.optimizer, seed=seed)


def finetune_loss_grads(net, x_id, y_id, x_ood, m_in: float, m_out: float, lam: float):
    """One fine-tuning step's loss and parameter gradients.

    loss = mean cross-entropy on the ID rows + lam * energy-margin loss;
    with lam == 0 the OOD rows are not forwarded at all, so the result is
    exactly the pure cross-entropy step.
    """
    xb = x_id if lam == 0 else np.vstack([x_id, x_ood])
    n_id, n_ood = len(x_id), len(x_ood)
    acts, pres = net._forward_cached(0, xb)
    logits = acts[-1]
    loss = cross_entropy(logits[:n_id], y_id)
    sm = softmax(logits)
    dlogits = np.zeros_like(logits)
    dlogits[:n_id] = (sm[:n_id] - _onehot(y_id, net.num_classes)) / n_id
    if lam != 0:
        e_in = energy_score(logits[:n_id])
        e_out = energy_score(logits[n_id:])
        loss += lam * energy_margin_loss(e_in, e_out, m_in, m_out)
        # d energy / d logits = -softmax
        g_in = 2.0 * np.maximum(0.0, e_in - m_in) / n_id
        g_out = 2.0 * np.maximum(0.0, m_out - e_out) / n_ood
        dlogits[:n_id] += lam * g_in[:, None] * -sm[:n_id]
        dlogits[n_id:] += lam * g_out[:, None] * sm[n_id:]
    grads, _ = net._backward(0, acts, pres, dlogits)
    return loss, [g for pair in grads for g in pair]


def _finetune_energy(net, x_id, y_id, x_ood, cfg: TrainConfig,
                     m_in: float, m_out: float, lam: float) -> list[float]:
    opt = Optimizer(net.parameters(), cfg)
    losses = []
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        batches = 0
        for id_idx, ood_idx in _finetune_batches(len(x_id), len(x_ood), cfg, epoch):
            loss, grads = finetune_loss_grads(net, x_id[id_idx], y_id[id_idx],
                                              x_ood[ood_idx], m_in, m_out, lam)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite detector loss at epoch {epoch}")
            opt.step(grads)
            loss_sum += loss
            batches += 1
        losses.append(loss_sum / batches)
    return losses


def auroc(negative_scores, positive_scores) -> float:
    """P(random positive > random negative) + 0.5 P(tie), rank-based."""
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    if len(neg) == 0 or len(pos) == 0:
        raise ValueError("both score lists must be non-empty")
    ranks = average_ranks(np.concatenate([neg, pos]))
    u = ranks[len(neg):].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def separability(detector: EnergyDetector, target_acts: ActivationSet,
                 stitched_acts: ActivationSet) -> float:
    """AUROC of energy scores: stitched activations are the positive class.

    0.5 means the stitched representations look in-distribution to the
    detector; values below 0.5 (stitched energies systematically lower)
    are reported as-is.
    """
    return auroc(detector.energies(target_acts), detector.energies(stitched_acts))
