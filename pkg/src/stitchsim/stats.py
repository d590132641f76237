"""Rank correlations with p-values, linear probing, and the
sensitivity/specificity testing procedures.

The testing procedures compare a functional measure F (probing accuracy)
against a structural dissimilarity d over a set of representations:
rank-correlating |F(A) - F(B)| with d(A, B) says whether the index tracks
functional differences.  Similarity-type indices (lcka, pwcca,
dm-functional) are converted to dissimilarities as d = 1 - s; opd and
dm-structural are distances already.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr

from . import simindex
from ._ranks import average_ranks
from ._rng import derive_seed, permutation
from .activations import ActivationSet
from .errors import DegenerateInputError
from .nets import FeedforwardNet, LabeledDataset, TrainConfig, init_net, train
from .numerics import low_rank_approx
from .stitching import SimilarityGrid, fit_direct

EXACT_P_MAX_N = 8  # up to here the permutation null is enumerated exactly
MIN_TEST_SET = 5  # smallest representation set a correlation is reported for

#: dissimilarity-conversion direction for every index usable in the tests
TEST_INDEX_DIRECTION = dict(simindex.INDEX_DIRECTION, **{"dm-functional": True})


@dataclass(frozen=True)
class RankCorrelation:
    statistic: float
    p_value: float
    method: str  # "kendall-tau-b" | "spearman-rho"
    n: int


def _check_pair(x, y, min_len: int):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise ValueError("inputs must have equal length")
    if len(x) < min_len:
        raise ValueError(f"need at least {min_len} observations")
    return x, y


def _pair_signs(v: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(len(v), k=1)
    return np.sign(v[j] - v[i]), i, j


def kendall_tau(x, y) -> RankCorrelation:
    """Tie-corrected Kendall tau-b with a two-sided p-value.

    The p-value is an exact permutation enumeration for n <= 8 and the
    normal approximation (null variance 2(2n+5) / (9 n (n-1))) above.
    """
    x, y = _check_pair(x, y, 2)
    n = len(x)
    sx, pi, pj = _pair_signs(x)
    sy = np.sign(y[pj] - y[pi])
    n0 = n * (n - 1) / 2.0
    tx = n0 - np.count_nonzero(sx)
    ty = n0 - np.count_nonzero(sy)
    denom = math.sqrt((n0 - tx) * (n0 - ty))
    if denom == 0.0:
        raise DegenerateInputError("Kendall tau undefined when one input is all ties")
    tau = float(np.sum(sx * sy) / denom)

    if n <= EXACT_P_MAX_N:
        perms = np.array(list(itertools.permutations(range(n))))
        sy_all = np.sign(y[perms[:, pj]] - y[perms[:, pi]])
        taus = sy_all @ sx / denom
        p = float(np.mean(np.abs(taus) >= abs(tau) - 1e-12))
    else:
        z = 3.0 * tau * math.sqrt(n * (n - 1)) / math.sqrt(2.0 * (2 * n + 5))
        p = math.erfc(abs(z) / math.sqrt(2.0))
    return RankCorrelation(tau, p, "kendall-tau-b", n)


def spearman_rho(x, y) -> RankCorrelation:
    """Pearson correlation of average-ranked data with a two-sided p-value.

    Exact permutation enumeration for n <= 8; Student-t approximation
    with n - 2 degrees of freedom above.
    """
    x, y = _check_pair(x, y, 3)
    n = len(x)
    rx = average_ranks(x) - (n + 1) / 2.0
    ry = average_ranks(y) - (n + 1) / 2.0
    norm = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if norm == 0.0:
        raise DegenerateInputError("Spearman rho undefined when one input is all ties")
    rho = float(np.clip(rx @ ry / norm, -1.0, 1.0))

    if n <= EXACT_P_MAX_N:
        perms = np.array(list(itertools.permutations(range(n))))
        rhos = rx[perms] @ ry / norm
        p = float(np.mean(np.abs(rhos) >= abs(rho) - 1e-12))
    elif abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return RankCorrelation(rho, p, "spearman-rho", n)


# -- linear probing -------------------------------------------------------


@dataclass
class ProbeConfig:
    # batch 32 keeps the Adam step count useful even on small toy sets
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    optimizer: str = "adam"
    holdout_fraction: float = 0.25
    eval_on: str = "holdout"  # "holdout" | "train"
    seed: int = 0

    def __post_init__(self):
        if self.eval_on not in ("holdout", "train"):
            raise ValueError(f"eval_on must be 'holdout' or 'train', got {self.eval_on!r}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")


def probe_split(n: int, cfg: ProbeConfig):
    """Deterministic (train_idx, heldout_idx) row split used by probes."""
    n_hold = int(round(n * cfg.holdout_fraction))
    if not 0 < n_hold < n:
        raise ValueError("holdout fraction leaves an empty split")
    perm = permutation(n, derive_seed(cfg.seed, "probe-split"))
    return perm[n_hold:], perm[:n_hold]


def linear_probe(acts: ActivationSet, labels, cfg: ProbeConfig | None = None) -> float:
    """Accuracy of a bias-included linear classifier on pooled activations.

    Activations are mean-pooled over positions, a single linear layer is
    trained with the probe defaults, and accuracy is measured on the
    held-out split (or the training split when cfg.eval_on == "train").
    """
    if cfg is None:
        cfg = ProbeConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (acts.n,):
        raise ValueError("labels must be one integer per sample")
    classes = int(labels.max()) + 1
    if classes < 2 or len(np.unique(labels)) < 2:
        raise DegenerateInputError("probing needs at least two classes present")
    pooled = acts.mean_pool()
    if cfg.eval_on == "holdout":
        train_idx, eval_idx = probe_split(acts.n, cfg)
    else:
        train_idx = eval_idx = np.arange(acts.n)
    net = init_net([acts.c, classes], seed=derive_seed(cfg.seed, "probe-init"))
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                     learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                     optimizer=cfg.optimizer, seed=derive_seed(cfg.seed, "probe-train"))
    train(net, LabeledDataset(pooled[train_idx], labels[train_idx], classes), tc)
    preds = np.argmax(net.forward(pooled[eval_idx]), axis=1)
    return float(np.mean(preds == labels[eval_idx]))


# -- sensitivity / specificity tests --------------------------------------


@dataclass
class TestRow:
    member_id: str
    probe_accuracy: float
    functional_gap: float
    dissimilarity: float


@dataclass
class TestReport:
    index_name: str
    reference_id: str
    rows: list[TestRow]
    kendall: RankCorrelation
    spearman: RankCorrelation
    meta: dict = field(default_factory=dict)


def _correlate_rows(index_name, reference_id, rows, meta) -> TestReport:
    gaps = [r.functional_gap for r in rows]
    ds = [r.dissimilarity for r in rows]
    return TestReport(index_name, reference_id, rows,
                      kendall=kendall_tau(gaps, ds),
                      spearman=spearman_rho(gaps, ds), meta=meta)


def _dissimilarity(index: str, ref: ActivationSet, other: ActivationSet) -> float:
    """d(ref, other) for the test procedures.

    The reference is the first index argument (it is the weighting view
    for pwcca) except for dm-structural, where the member plays the
    source: the residual asks how well the member can reconstruct the
    reference, matching the stitching direction.
    """
    if index == "dm-structural":
        return simindex.compute_index(index, other, ref)
    value = simindex.compute_index(index, ref, other)
    return 1.0 - value if simindex.INDEX_DIRECTION[index] else value


def _dm_functional_rel_acc(net, layer, source_train, target_train, source_eval,
                           labels_eval, target_acc, dm_fit_samples, seed) -> float:
    rows = permutation(source_train.n, derive_seed(seed, "dm-fit"))[:dm_fit_samples]
    amap = fit_direct(source_train.take(rows), target_train.take(rows))
    logits = net.forward_from(layer, amap.apply_rows(source_eval.mean_pool()))
    stitched = float(np.mean(np.argmax(logits, axis=1) == labels_eval))
    return stitched / target_acc


def sensitivity_test(acts: ActivationSet, labels, ranks, index: str, *,
                     net: FeedforwardNet | None = None, layer: int | None = None,
                     probe_cfg: ProbeConfig | None = None,
                     dm_fit_samples: int = 100, seed: int = 0) -> TestReport:
    """Rank-correlate probing-accuracy drops with index values across
    low-rank approximations of one layer's activations.

    The representation set is the given activations truncated at every
    rank in ``ranks`` (which must include the full rank and have at least
    five entries); the reference is the member with the highest probing
    accuracy.  For index "dm-functional" the receiver tail of ``net``
    after ``layer`` is stitched from each truncated member (the affine
    map is fitted on truncated source and target rows and the truncated
    source is used at evaluation), and net/layer are required.
    """
    if probe_cfg is None:
        probe_cfg = ProbeConfig(seed=derive_seed(seed, "probe"))
    labels = np.asarray(labels, dtype=np.int64)
    if index not in TEST_INDEX_DIRECTION:
        raise ValueError(f"unknown index {index!r}")
    if index == "dm-functional" and (net is None or layer is None):
        raise ValueError("dm-functional needs the owning net and layer index")
    ranks = list(ranks)
    if len(ranks) < MIN_TEST_SET:
        raise ValueError(f"need at least {MIN_TEST_SET} ranks for a meaningful correlation")
    full = min(acts.n * acts.s, acts.c)
    if any(not 1 <= r <= full for r in ranks):
        raise ValueError(f"ranks must lie in [1, {full}]")
    if full not in ranks:
        raise ValueError("the rank list must include the full rank")

    flat = acts.positions_as_samples()
    members = {r: ActivationSet(low_rank_approx(flat, r).reshape(acts.data.shape), acts.labels)
               for r in ranks}
    accs = {r: linear_probe(members[r], labels, probe_cfg) for r in ranks}
    ref_rank = max(ranks, key=lambda r: accs[r])
    ref = members[ref_rank]

    train_idx, eval_idx = probe_split(acts.n, probe_cfg)
    target_acc = None
    if index == "dm-functional":
        logits = net.forward_from(layer, acts.take(eval_idx).mean_pool())
        target_acc = float(np.mean(np.argmax(logits, axis=1) == labels[eval_idx]))
        if target_acc == 0.0:
            raise DegenerateInputError("receiver accuracy is zero")

    rows = []
    for r in ranks:
        member = members[r]
        if index == "dm-functional":
            rel = _dm_functional_rel_acc(
                net, layer, member.take(train_idx), ref.take(train_idx),
                member.take(eval_idx), labels[eval_idx], target_acc,
                dm_fit_samples, derive_seed(seed, "dm", r))
            d = 1.0 - rel
        else:
            d = _dissimilarity(index, ref.take(eval_idx), member.take(eval_idx))
        rows.append(TestRow(f"rank-{r}", accs[r], abs(accs[ref_rank] - accs[r]), d))
    meta = {"ranks": ranks, "reference_rank": ref_rank, "seed": seed}
    return _correlate_rows(index, f"rank-{ref_rank}", rows, meta)


def specificity_test(nets: list[FeedforwardNet], dataset: LabeledDataset, index: str, *,
                     num_layers: int | None = None,
                     probe_cfg: ProbeConfig | None = None,
                     dm_fit_samples: int = 100, seed: int = 0) -> list[TestReport]:
    """One report per anchor (instance, layer): the comparison set holds
    every layer of every other instance; gaps and dissimilarities are
    taken against the anchor.

    Requires at least three instances of the same architecture.  For
    "dm-functional" each member is stitched into the anchor's own tail.
    """
    if len(nets) < 3:
        raise ValueError("specificity needs at least 3 trained instances")
    widths = nets[0].widths
    if any(net.widths != widths for net in nets):
        raise ValueError("all instances must share one architecture")
    if index not in TEST_INDEX_DIRECTION:
        raise ValueError(f"unknown index {index!r}")
    if probe_cfg is None:
        probe_cfg = ProbeConfig(seed=derive_seed(seed, "probe"))
    layers = list(range(1, (num_layers or len(widths) - 2) + 1))
    if (len(nets) - 1) * len(layers) < MIN_TEST_SET:
        raise ValueError(f"comparison sets need at least {MIN_TEST_SET} members")

    acts = {(q, l): ActivationSet(net.forward_to(l, dataset.inputs)[:, None, :], dataset.labels)
            for q, net in enumerate(nets) for l in layers}
    accs = {key: linear_probe(a, dataset.labels, probe_cfg) for key, a in acts.items()}
    train_idx, eval_idx = probe_split(dataset.n, probe_cfg)
    labels_eval = dataset.labels[eval_idx]

    reports = []
    for q, net in enumerate(nets):
        net_acc = None
        for l in layers:
            anchor = acts[(q, l)]
            if index == "dm-functional":
                logits = net.forward_from(l, anchor.take(eval_idx).mean_pool())
                net_acc = float(np.mean(np.argmax(logits, axis=1) == labels_eval))
                if net_acc == 0.0:
                    raise DegenerateInputError(f"instance {q} has zero accuracy")
            rows = []
            for q2 in range(len(nets)):
                if q2 == q:
                    continue  # the anchor itself is never in the comparison set
                for l2 in layers:
                    member = acts[(q2, l2)]
                    if index == "dm-functional":
                        rel = _dm_functional_rel_acc(
                            net, l, member.take(train_idx), anchor.take(train_idx),
                            member.take(eval_idx), labels_eval, net_acc,
                            dm_fit_samples, derive_seed(seed, "dm", q, l, q2, l2))
                        d = 1.0 - rel
                    else:
                        d = _dissimilarity(index, anchor.take(eval_idx), member.take(eval_idx))
                    gap = abs(accs[(q, l)] - accs[(q2, l2)])
                    rows.append(TestRow(f"net{q2}-layer{l2}", accs[(q2, l2)], gap, d))
            meta = {"instance": q, "layer": l, "seed": seed}
            reports.append(_correlate_rows(index, f"net{q}-layer{l}", rows, meta))
    return reports


def pooled_correlations(reports: list[TestReport]):
    """(kendall, spearman) over the concatenated rows of many reports."""
    gaps = [r.functional_gap for rep in reports for r in rep.rows]
    ds = [r.dissimilarity for rep in reports for r in rep.rows]
    return kendall_tau(gaps, ds), spearman_rho(gaps, ds)


def mean_correlations(reports: list[TestReport]):
    """(mean tau, mean rho) across reports."""
    return (float(np.mean([r.kendall.statistic for r in reports])),
            float(np.mean([r.spearman.statistic for r in reports])))


# -- layer identification --------------------------------------------------


@dataclass
class IdentificationResult:
    accuracy: float
    correct: int
    total: int
    tie_rows: list[int]  # source layers whose best score was tied
    nan_cells: int  # cells excluded for being NaN


def layer_identification(grid: SimilarityGrid, mode: str = "intra") -> IdentificationResult:
    """Fraction of source layers whose best-scoring target is the
    architecturally corresponding one (itself, for intra grids).

    Direction comes from the grid metadata; NaN cells are excluded with a
    count; exact ties that include the corresponding layer break toward
    it and are flagged.
    """
    if mode not in ("intra", "inter"):
        raise ValueError(f"mode must be 'intra' or 'inter', got {mode!r}")
    values = grid.values
    if mode == "intra" and values.shape[0] != values.shape[1]:
        raise ValueError("intra-mode identification needs a square grid")
    nan_cells = int(np.isnan(values).sum())
    correct = 0
    total = 0
    tie_rows = []
    for r in range(values.shape[0]):
        if r >= values.shape[1]:
            continue  # no architecturally corresponding column
        row = values[r]
        finite = np.isfinite(row)
        if not finite.any():
            continue
        scores = np.where(finite, row, -np.inf if grid.higher_is_similar else np.inf)
        best = scores.max() if grid.higher_is_similar else scores.min()
        best_cols = np.flatnonzero(scores == best)
        total += 1
        if len(best_cols) > 1:
            tie_rows.append(grid.source_layers[r])
        chosen = r if r in best_cols else int(best_cols[0])
        if chosen == r:
            correct += 1
    if total == 0:
        raise DegenerateInputError("no usable rows in the grid")
    return IdentificationResult(accuracy=correct / total, correct=correct, total=total,
                                tie_rows=tie_rows, nan_cells=nan_cells)


# -- serialization ---------------------------------------------------------


def report_to_json(report: TestReport) -> dict:
    return {
        "index": report.index_name,
        "reference": report.reference_id,
        "kendall": {"tau": report.kendall.statistic, "p": report.kendall.p_value,
                    "n": report.kendall.n},
        "spearman": {"rho": report.spearman.statistic, "p": report.spearman.p_value,
                     "n": report.spearman.n},
        "rows": [{"member": r.member_id, "probe_accuracy": r.probe_accuracy,
                  "functional_gap": r.functional_gap, "dissimilarity": r.dissimilarity}
                 for r in report.rows],
        "meta": report.meta,
    }


def report_to_csv(report: TestReport) -> str:
    lines = ["member,probe_accuracy,functional_gap,dissimilarity"]
    for r in report.rows:
        lines.append(f"{r.member_id},{r.probe_accuracy!r},{r.functional_gap!r},{r.dissimilarity!r}")
    return "\n".join(lines) + "\n"
