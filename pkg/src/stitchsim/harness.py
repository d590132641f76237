"""Experiment orchestration: configs, activation extraction, structural
grids, report/heatmap emission, and the end-to-end pipelines.

Every experiment is described by a versioned JSON config with a mandatory
seed; all derived randomness comes from that seed, so reruns with an
identical config produce byte-identical CSV/JSON outputs.  Emitted
artifacts carry the config hash and the seed.  Numeric CSV cells use
Python's shortest round-trip float representation.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__, simindex
from ._rng import derive_seed
from .activations import ActivationSet
from .datasets import DATASET_NAMES, generate_dataset, uniform_noise_like
from .nets import FeedforwardNet, LabeledDataset, TrainConfig, accuracy, init_net, train
from .ood import DetectorConfig, separability, train_detector
from .stats import (
    ProbeConfig,
    layer_identification,
    mean_correlations,
    pooled_correlations,
    report_to_csv,
    report_to_json,
    sensitivity_test,
    specificity_test,
)
from .stitching import (
    SimilarityGrid,
    StitchSpec,
    fit_direct,
    relative_accuracy,
    similarity_grid,
    stitched_accuracy,
    train_tlm,
)

EXPERIMENT_KINDS = (
    "train-models", "similarity-grid", "sanity-check",
    "ood-grid", "sensitivity", "specificity",
)
CONFIG_VERSION = 1

STRUCTURAL_METHODS = ("lcka", "pwcca", "opd", "dm-structural")
STITCHING_METHODS = ("dm-functional", "tlm")
ALL_METHODS = STRUCTURAL_METHODS + STITCHING_METHODS

# Table-style display names, in the row order the sanity report uses.
METHOD_LABELS = {
    "pwcca": "PWCCA", "opd": "OPD", "lcka": "LCKA",
    "tlm": "TLM", "dm-structural": "DM-struct", "dm-functional": "DM-func",
}
SANITY_ROW_ORDER = ("pwcca", "opd", "lcka", "tlm", "dm-structural", "dm-functional")


class ConfigError(ValueError):
    """The experiment config failed validation; maps to exit code 2."""


# -- config ----------------------------------------------------------------


def _require(cfg: dict, key: str, kinds):
    if key not in cfg:
        raise ConfigError(f"config is missing required key {key!r}")
    if not isinstance(cfg[key], kinds):
        raise ConfigError(f"config key {key!r} has the wrong type")
    return cfg[key]


def default_config(kind: str, seed: int = 0) -> dict:
    """Toy-scale defaults: 3-class spiral, MLPs with 6 hidden blocks of 32.

    Grid-style kinds train on the full dataset and evaluate on a freshly
    generated eval dataset (the test-set analogue); the probing-based
    tests split one dataset instead.
    """
    cfg = {
        "version": CONFIG_VERSION,
        "kind": kind,
        "seed": seed,
        "dataset": {"name": "spiral",
                    "params": {"n": 3000, "classes": 3, "noise": 0.01, "turns": 2.0}},
        "model": {
            "hidden_width": 32, "hidden_blocks": 6, "instances": 5,
            "train": {"epochs": 300, "batch_size": 128, "learning_rate": 1e-3,
                      "weight_decay": 1e-5, "optimizer": "adam"},
            # second phase at a tenth of the learning rate settles the nets
            "train_finetune": {"epochs": 100, "batch_size": 128, "learning_rate": 1e-4,
                               "weight_decay": 1e-5, "optimizer": "adam"},
        },
        "eval_fraction": 0.25,
        "methods": list(SANITY_ROW_ORDER),
        "stitching": {"dm_samples": 100, "tlm": {"epochs": 30, "batch_size": 128,
                                                 "learning_rate": 1e-3, "weight_decay": 1e-5,
                                                 "optimizer": "adam"}},
        "threads": 1,
    }
    if kind in ("train-models", "similarity-grid", "sanity-check", "ood-grid"):
        cfg["eval_dataset"] = {"n": 6000}
    if kind == "similarity-grid":
        cfg["pairs"] = [[0, 0]]
    if kind == "sanity-check":
        cfg["inter_pairs"] = [[0, 1], [1, 2], [2, 3], [3, 4]]
    if kind == "ood-grid":
        cfg["methods"] = ["dm-functional"]
        cfg["ood"] = {
            "instance": 0, "detector_hidden": [32, 32], "m_in": -7.0, "m_out": -3.0,
            "lambda": 0.1, "pretrain_epochs": 60, "finetune_epochs": 30,
            "noise_inflate": 3.0, "noise_n": 3000,
        }
    if kind == "sensitivity":
        cfg["methods"] = ["lcka", "pwcca", "opd", "dm-structural", "dm-functional"]
        cfg["model"]["instances"] = 1
        cfg["sensitivity"] = {"layers": [4, 5, 6], "ranks": [32, 16, 8, 4, 2, 1],
                              "probe_epochs": 80}
    if kind == "specificity":
        cfg["methods"] = ["lcka", "pwcca", "opd", "dm-structural", "dm-functional"]
        cfg["specificity"] = {"probe_epochs": 80}
    return cfg


def validate_config(cfg: dict) -> dict:
    """Check schema, fill defaults, resolve referenced artifacts."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}")
    kind = _require(cfg, "kind", str)
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    _require(cfg, "seed", int)
    merged = default_config(kind, cfg["seed"])
    for key, value in cfg.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            sub = dict(merged[key])
            sub.update(value)
            merged[key] = sub
        else:
            merged[key] = value

    ds = merged["dataset"]
    if ds.get("name") not in DATASET_NAMES:
        raise ConfigError(f"unknown dataset {ds.get('name')!r}")
    if not isinstance(ds.get("params", {}).get("n", None), int):
        raise ConfigError("dataset params must include an integer n")
    model = merged["model"]
    load_from = model.get("load_from")
    if load_from is not None:
        root = Path(load_from)
        if not root.is_dir():
            raise ConfigError(f"model load_from directory {load_from!r} does not exist")
        missing = [k for k in range(model["instances"])
                   if not (root / f"instance_{k}.net").is_file()]
        if missing:
            raise ConfigError(f"missing checkpoints for instances {missing} in {load_from!r}")
    if not merged.get("methods"):
        raise ConfigError("the method list must not be empty")
    bad = [m for m in merged["methods"] if m not in ALL_METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {list(ALL_METHODS)}")
    if not 0.0 < merged["eval_fraction"] < 1.0:
        raise ConfigError("eval_fraction must be in (0, 1)")
    if kind == "specificity" and merged["model"]["instances"] < 3:
        raise ConfigError("specificity needs at least 3 model instances")
    return merged


def config_hash(cfg: dict) -> str:
    """Hash of the canonical config.

    Execution knobs that cannot change the numbers (output location,
    worker threads) are excluded, so parallel and sequential runs of one
    experiment share a hash and must produce byte-identical artifacts.
    """
    trimmed = {k: v for k, v in cfg.items() if k not in ("out", "threads")}
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# -- activation extraction and structural grids -----------------------------


def extract_activations(net: FeedforwardNet, dataset: LabeledDataset, layer: int) -> ActivationSet:
    """Layer activations for every dataset row (position axis of size 1)."""
    a = net.forward_to(layer, dataset.inputs)
    return ActivationSet(a[:, None, :], dataset.labels)


def structural_grid(f: FeedforwardNet, g: FeedforwardNet, index: str,
                    eval_data: LabeledDataset) -> SimilarityGrid:
    """Pairwise structural index over all hidden-layer pairs of f and g.

    The source layer (row) is the first argument of the index, so pwcca
    weights by the source view and dm-structural fits source -> target.
    """
    if index not in STRUCTURAL_METHODS:
        raise ValueError(f"unknown structural index {index!r}")
    src_layers = list(range(1, f.num_layers))
    tgt_layers = list(range(1, g.num_layers))
    acts_f = {i: extract_activations(f, eval_data, i) for i in src_layers}
    acts_g = {j: extract_activations(g, eval_data, j) for j in tgt_layers}
    values = np.empty((len(src_layers), len(tgt_layers)))
    failures = []
    for r, i in enumerate(src_layers):
        for c, j in enumerate(tgt_layers):
            try:
                values[r, c] = simindex.compute_index(index, acts_f[i], acts_g[j])
            except Exception as exc:
                failures.append({"source_layer": i, "target_layer": j, "error": str(exc)})
                values[r, c] = np.nan
    return SimilarityGrid(values=values, index_name=index,
                          higher_is_similar=simindex.INDEX_DIRECTION[index],
                          source_layers=src_layers, target_layers=tgt_layers,
                          meta={"failures": failures})


# -- deterministic writers ---------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def grid_to_json(grid: SimilarityGrid) -> dict:
    return {
        "index": grid.index_name,
        "higher_is_similar": grid.higher_is_similar,
        "source_layers": grid.source_layers,
        "target_layers": grid.target_layers,
        "values": [[float(v) for v in row] for row in grid.values],
        "meta": grid.meta,
    }


def grid_from_json(obj: dict) -> SimilarityGrid:
    return SimilarityGrid(values=np.array(obj["values"], dtype=np.float64),
                          index_name=obj["index"],
                          higher_is_similar=obj["higher_is_similar"],
                          source_layers=list(obj["source_layers"]),
                          target_layers=list(obj["target_layers"]),
                          meta=obj.get("meta", {}))


def grid_to_csv(grid: SimilarityGrid, extra_meta: dict | None = None) -> str:
    lines = [f"# index={grid.index_name}",
             f"# higher_is_similar={grid.higher_is_similar}"]
    for key, value in (extra_meta or {}).items():
        lines.append(f"# {key}={value}")
    lines.append("source/target," + ",".join(str(j) for j in grid.target_layers))
    for r, i in enumerate(grid.source_layers):
        lines.append(str(i) + "," + ",".join(_fmt(v) for v in grid.values[r]))
    return "\n".join(lines) + "\n"


def grid_from_csv(path) -> SimilarityGrid:
    """Re-read a grid CSV (values and the two metadata comment lines)."""
    index_name, higher = "unknown", True
    rows, src = [], []
    tgt = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "index":
                index_name = value
            elif key == "higher_is_similar":
                higher = value == "True"
            continue
        cells = line.split(",")
        if tgt is None:
            tgt = [int(c) for c in cells[1:]]
            continue
        src.append(int(cells[0]))
        rows.append([float(c) for c in cells[1:]])
    return SimilarityGrid(np.array(rows), index_name, higher, src, tgt, {})


def _ramp(v: float) -> tuple[int, int, int]:
    """White-to-blue single-hue ramp, monotone in v on [0, 1]."""
    return (255 - round(255 * v), 255 - round(191 * v), 255)


def emit_heatmap(grid: SimilarityGrid, path_base, cell_px: int = 24,
                 extra_meta: dict | None = None):
    """Write <base>.csv and a <base>.ppm heatmap with a white-to-blue ramp.

    Values are normalized to the grid's finite min/max (a constant grid
    maps everything to the low end); NaN cells render gray.  Rows are
    source layers, columns target layers.
    """
    base = Path(path_base)
    if not np.all(np.isfinite(grid.values) | np.isnan(grid.values)):
        raise ValueError("grid contains infinities")
    csv_path = base.with_suffix(".csv")
    _write_text(csv_path, grid_to_csv(grid, extra_meta))

    finite = grid.values[np.isfinite(grid.values)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 1.0
    span = vmax - vmin
    n_rows, n_cols = grid.values.shape
    pixels = bytearray()
    for r in range(n_rows * cell_px):
        for c in range(n_cols * cell_px):
            v = grid.values[r // cell_px, c // cell_px]
            rgb = (128, 128, 128) if np.isnan(v) else _ramp((v - vmin) / span if span else 0.0)
            pixels.extend(rgb)
    ppm_path = base.with_suffix(".ppm")
    ppm_path.parent.mkdir(parents=True, exist_ok=True)
    with open(ppm_path, "wb") as fh:
        fh.write(f"P6\n{n_cols * cell_px} {n_rows * cell_px}\n255\n".encode("ascii"))
        fh.write(bytes(pixels))
    return csv_path, ppm_path


# -- experiment pipelines ----------------------------------------------------


class _Runner:
    """Tracks stages and emitted artifacts for the run manifest."""

    def __init__(self, cfg: dict, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.hash = config_hash(cfg)
        self.stages = []
        self.outputs = []
        self.warnings = []

    def stage(self, name: str, fn, *args, **kwargs):
        try:
            result = fn(*args, **kwargs)
            self.stages.append({"name": name, "status": "ok"})
            return result
        except Exception as exc:
            self.stages.append({"name": name, "status": "failed", "error": str(exc)})
            return None

    def emit_json(self, rel: str, obj) -> None:
        _write_json(self.out / rel, obj)
        self.outputs.append(rel)

    def emit_text(self, rel: str, text: str) -> None:
        _write_text(self.out / rel, text)
        self.outputs.append(rel)

    def emit_grid(self, rel_base: str, grid: SimilarityGrid) -> None:
        meta = {"config_hash": self.hash, "seed": self.cfg["seed"]}
        grid.meta = dict(grid.meta, **meta)
        emit_heatmap(grid, self.out / rel_base, extra_meta=meta)
        self.emit_json(rel_base + ".json", grid_to_json(grid))
        self.outputs.append(rel_base + ".csv")
        self.outputs.append(rel_base + ".ppm")

    def finish(self) -> dict:
        failed = any(s["status"] == "failed" for s in self.stages)
        manifest = {
            "config": {k: v for k, v in self.cfg.items() if k != "out"},
            "config_hash": self.hash,
            "seed": self.cfg["seed"],
            "version": __version__,
            "stages": self.stages,
            "outputs": sorted(self.outputs),
            "warnings": self.warnings,
            "status": "partial" if failed else "ok",
        }
        _write_json(self.out / "manifest.json", manifest)
        return manifest


def _model_widths(cfg: dict, dataset: LabeledDataset) -> list[int]:
    model = cfg["model"]
    return ([dataset.inputs.shape[1]]
            + [model["hidden_width"]] * model["hidden_blocks"]
            + [dataset.num_classes])


def _train_config(spec: dict, seed: int) -> TrainConfig:
    return TrainConfig(epochs=spec["epochs"], batch_size=spec["batch_size"],
                       learning_rate=spec["learning_rate"],
                       weight_decay=spec["weight_decay"],
                       optimizer=spec["optimizer"], seed=seed)


def _prepare(cfg: dict, runner: _Runner | None = None):
    """(dataset, train_set, eval_set, nets): trains or loads the instances.

    With an "eval_dataset" section the models train on the whole dataset
    and a fresh eval dataset is generated from a derived seed; otherwise
    the dataset is split by eval_fraction.
    """
    seed = cfg["seed"]
    ds_cfg = cfg["dataset"]
    dataset = generate_dataset(ds_cfg["name"], ds_cfg.get("params"),
                               seed=derive_seed(seed, "dataset"))
    if "eval_dataset" in cfg:
        params = dict(ds_cfg.get("params", {}))
        params.update(cfg["eval_dataset"])
        train_set = dataset
        eval_set = generate_dataset(ds_cfg["name"], params,
                                    seed=derive_seed(seed, "eval-dataset"))
    else:
        train_set, eval_set = dataset.split(cfg["eval_fraction"], derive_seed(seed, "split"))
    model = cfg["model"]
    nets, logs = [], []
    for k in range(model["instances"]):
        if model.get("load_from"):
            net = FeedforwardNet.load(Path(model["load_from"]) / f"instance_{k}.net")
        else:
            net = init_net(_model_widths(cfg, dataset), seed=derive_seed(seed, "model-init", k))
            log = train(net, train_set, _train_config(model["train"], derive_seed(seed, "model-train", k)))
            if model.get("train_finetune"):
                log2 = train(net, train_set,
                             _train_config(model["train_finetune"], derive_seed(seed, "model-ft", k)))
                log.losses += log2.losses
                log.accuracies += log2.accuracies
            logs.append({"instance": k, "final_loss": log.losses[-1] if log.losses else None,
                         "final_train_accuracy": log.accuracies[-1] if log.accuracies else None,
                         "eval_accuracy": accuracy(net, eval_set)})
        nets.append(net)
        if runner is not None and not model.get("load_from"):
            path = runner.out / "models" / f"instance_{k}.net"
            path.parent.mkdir(parents=True, exist_ok=True)
            net.save(path)
            runner.outputs.append(f"models/instance_{k}.net")
    if runner is not None and logs:
        runner.emit_json("training_log.json", logs)
    return dataset, train_set, eval_set, nets


def _tlm_config(cfg: dict, seed: int) -> TrainConfig:
    return _train_config(cfg["stitching"]["tlm"], seed)


def _stitch_grid(cfg: dict, f, g, method, train_set, eval_set, pair_tag) -> SimilarityGrid:
    seed = derive_seed(cfg["seed"], "grid", method, *pair_tag)
    return similarity_grid(
        f, g, method, train_set, eval_data=eval_set,
        dm_samples=cfg["stitching"]["dm_samples"],
        tlm_cfg=_tlm_config(cfg, 0),  # per-cell seeds derive from `seed`
        seed=seed, threads=cfg.get("threads", 1),
    )


def _method_grid(cfg, method, f, g, train_set, eval_set, pair_tag) -> SimilarityGrid:
    if method in STRUCTURAL_METHODS:
        return structural_grid(f, g, method, eval_set)
    return _stitch_grid(cfg, f, g, method, train_set, eval_set, pair_tag)


def run_experiment(cfg: dict, out_dir=None) -> dict:
    """Validate and execute a config; returns the manifest dict.

    Per-stage failures are recorded in the manifest (status "partial")
    instead of aborting the whole run.
    """
    cfg = validate_config(cfg)
    out = Path(out_dir if out_dir is not None else cfg.get("out", "runs/" + cfg["kind"]))
    out.mkdir(parents=True, exist_ok=True)
    runner = _Runner(cfg, out)
    prepared = runner.stage("prepare-models", _prepare, cfg, runner)
    if prepared is None:
        return runner.finish()
    dataset, train_set, eval_set, nets = prepared
    kind = cfg["kind"]
    if kind == "train-models":
        runner.emit_json("models/summary.json", {
            "instances": cfg["model"]["instances"],
            "widths": _model_widths(cfg, dataset),
            "eval_accuracies": [accuracy(net, eval_set) for net in nets],
        })
    elif kind == "similarity-grid":
        for method in cfg["methods"]:
            for fq, gq in cfg["pairs"]:
                name = f"grid_{method}_f{fq}_g{gq}"
                grid = runner.stage(name, _method_grid, cfg, method, nets[fq], nets[gq],
                                    train_set, eval_set, (fq, gq))
                if grid is not None:
                    runner.emit_grid(name, grid)
    elif kind == "sanity-check":
        _run_sanity(cfg, runner, nets, train_set, eval_set)
    elif kind == "ood-grid":
        _run_ood(cfg, runner, nets, train_set, eval_set)
    elif kind == "sensitivity":
        _run_sensitivity(cfg, runner, nets, dataset)
    elif kind == "specificity":
        _run_specificity(cfg, runner, nets, dataset)
    return runner.finish()


def _run_sanity(cfg, runner, nets, train_set, eval_set):
    """Layer-identification accuracies, intra and inter, per method."""
    table = {}
    for method in cfg["methods"]:
        intra_accs, inter_accs = [], []
        for q, net in enumerate(nets):
            name = f"intra_{method}_net{q}"
            grid = runner.stage(name, _method_grid, cfg, method, net, net,
                                train_set, eval_set, (q, q))
            if grid is None:
                continue
            runner.emit_grid(name, grid)
            ident = layer_identification(grid, "intra")
            if ident.tie_rows or ident.nan_cells:
                runner.warnings.append({"grid": name, "tie_rows": ident.tie_rows,
                                        "nan_cells": ident.nan_cells})
            intra_accs.append(ident.accuracy)
        for fq, gq in cfg.get("inter_pairs", []):
            name = f"inter_{method}_f{fq}_g{gq}"
            grid = runner.stage(name, _method_grid, cfg, method, nets[fq], nets[gq],
                                train_set, eval_set, (fq, gq))
            if grid is None:
                continue
            runner.emit_grid(name, grid)
            ident = layer_identification(grid, "inter")
            if ident.tie_rows or ident.nan_cells:
                runner.warnings.append({"grid": name, "tie_rows": ident.tie_rows,
                                        "nan_cells": ident.nan_cells})
            inter_accs.append(ident.accuracy)
        table[method] = {
            "intra": float(np.mean(intra_accs)) if intra_accs else float("nan"),
            "inter": float(np.mean(inter_accs)) if inter_accs else float("nan"),
        }
    lines = [f"# config_hash={runner.hash}", f"# seed={cfg['seed']}"]
    if "tlm" in table:
        # full-scale reference points for the TLM intra-network column
        lines.append("# full-scale TLM intra reference: resnet18=0.6375, vit-ti=0.2417")
    lines.append("index,intra,inter")
    for method in SANITY_ROW_ORDER:
        if method in table:
            row = table[method]
            lines.append(f"{METHOD_LABELS[method]},{_fmt(row['intra'])},{_fmt(row['inter'])}")
    runner.emit_text("table1.csv", "\n".join(lines) + "\n")
    if "tlm" in table:
        table = dict(table, **{"tlm_full_scale_reference":
                               {"resnet18_intra": 0.6375, "vit_ti_intra": 0.2417}})
    runner.emit_json("identification.json", table)


def _detector_config(cfg: dict, seed: int) -> DetectorConfig:
    o = cfg["ood"]
    return DetectorConfig(
        hidden=tuple(o["detector_hidden"]), m_in=o["m_in"], m_out=o["m_out"],
        lam=o["lambda"],
        pretrain=TrainConfig(epochs=o["pretrain_epochs"]),
        finetune=TrainConfig(epochs=o["finetune_epochs"]),
        seed=seed,
    )


def _run_ood(cfg, runner, nets, train_set, eval_set):
    """Per-layer detectors plus the stitched-vs-target AUROC grid."""
    seed = cfg["seed"]
    net = nets[cfg["ood"]["instance"]].copy(frozen=True)
    layers = list(range(1, net.num_layers))
    noise_inputs = uniform_noise_like(train_set.inputs, cfg["ood"]["noise_n"],
                                      cfg["ood"]["noise_inflate"],
                                      derive_seed(seed, "ood-noise"))
    detectors = {}
    for j in layers:
        def build(j=j):
            id_acts = extract_activations(net, train_set, j)
            ood_acts = ActivationSet(net.forward_to(j, noise_inputs)[:, None, :])
            det, _ = train_detector(id_acts, ood_acts,
                                    _detector_config(cfg, derive_seed(seed, "detector", j)))
            det.net.save(runner.out / "detectors" / f"layer_{j}.net")
            runner.outputs.append(f"detectors/layer_{j}.net")
            runner.emit_json(f"detectors/layer_{j}.json",
                             {"m_in": det.m_in, "m_out": det.m_out, "lambda": det.lam,
                              "source_layer": j})
            return det
        det = runner.stage(f"detector_layer{j}", build)
        if det is not None:
            detectors[j] = det

    target_acc = accuracy(net, eval_set)
    for method in cfg["methods"]:
        sim = np.full((len(layers), len(layers)), np.nan)
        ood_vals = np.full((len(layers), len(layers)), np.nan)
        diag_self = {}
        for cj, j in enumerate(layers):
            if j not in detectors:
                continue
            target_acts = extract_activations(net, eval_set, j)
            diag_self[j] = separability(detectors[j], target_acts, target_acts)
            for ci, i in enumerate(layers):
                def cell(i=i, j=j, ci=ci, cj=cj, target_acts=target_acts):
                    amap = _fit_stitcher(cfg, net, i, net, j, method, train_set)
                    spec = StitchSpec(net, i, net, j, amap)
                    sim[ci, cj] = stitched_accuracy(spec, eval_set) / target_acc
                    stitched = ActivationSet(
                        amap.apply_rows(net.forward_to(i, eval_set.inputs))[:, None, :])
                    ood_vals[ci, cj] = separability(detectors[j], target_acts, stitched)
                runner.stage(f"ood_{method}_cell_{i}_{j}", cell)
        runner.emit_grid(f"simgrid_{method}", SimilarityGrid(
            sim, method, True, layers, layers, {"kind": "relative-accuracy"}))
        runner.emit_grid(f"oodgrid_{method}", SimilarityGrid(
            ood_vals, f"ood-auroc-{method}", True, layers, layers,
            {"kind": "ood-auroc", "self_separability": diag_self}))


def _fit_stitcher(cfg, f, i, g, j, method, train_set):
    seed = derive_seed(cfg["seed"], "stitcher", method, i, j)
    from ._rng import permutation  # local import to keep module top tidy

    rows = permutation(train_set.n, derive_seed(seed, "dm-samples"))
    rows = rows[: min(cfg["stitching"]["dm_samples"], train_set.n)]
    src = ActivationSet(f.forward_to(i, train_set.inputs[rows])[:, None, :])
    tgt = ActivationSet(g.forward_to(j, train_set.inputs[rows])[:, None, :])
    amap = fit_direct(src, tgt)
    if method == "tlm":
        amap, _ = train_tlm(f, i, g, j, amap, train_set, _tlm_config(cfg, seed))
    return amap


def _run_sensitivity(cfg, runner, nets, dataset):
    """Low-rank-approximation sensitivity reports per layer and index."""
    seed = cfg["seed"]
    sub = cfg["sensitivity"]
    net = nets[0].copy(frozen=True)
    probe = ProbeConfig(epochs=sub["probe_epochs"], seed=derive_seed(seed, "probe"))
    indices = [m for m in cfg["methods"] if m != "tlm"]
    summary = {}
    for index in indices:
        taus, rhos = [], []
        for layer in sub["layers"]:
            def build(layer=layer, index=index):
                acts = extract_activations(net, dataset, layer)
                report = sensitivity_test(
                    acts, dataset.labels, sub["ranks"], index, net=net, layer=layer,
                    probe_cfg=probe, seed=derive_seed(seed, "sens", index, layer))
                rel = f"sensitivity_{index}_layer{layer}"
                runner.emit_json(rel + ".json", report_to_json(report))
                runner.emit_text(rel + ".csv", report_to_csv(report))
                return report
            report = runner.stage(f"sensitivity_{index}_layer{layer}", build)
            if report is not None:
                taus.append(report.kendall.statistic)
                rhos.append(report.spearman.statistic)
        if taus:
            summary[index] = {"tau": float(np.mean(taus)), "rho": float(np.mean(rhos))}
    lines = [f"# config_hash={runner.hash}", f"# seed={cfg['seed']}", "index,tau,rho"]
    for index, row in summary.items():
        lines.append(f"{METHOD_LABELS[index]},{_fmt(row['tau'])},{_fmt(row['rho'])}")
    runner.emit_text("sensitivity_summary.csv", "\n".join(lines) + "\n")


def _run_specificity(cfg, runner, nets, dataset):
    seed = cfg["seed"]
    probe = ProbeConfig(epochs=cfg["specificity"]["probe_epochs"],
                        seed=derive_seed(seed, "probe"))
    indices = [m for m in cfg["methods"] if m != "tlm"]
    lines = [f"# config_hash={runner.hash}", f"# seed={cfg['seed']}",
             "index,mean_tau,mean_rho,pooled_tau,pooled_tau_p,pooled_rho,pooled_rho_p"]
    for index in indices:
        def build(index=index):
            reports = specificity_test(nets, dataset, index, probe_cfg=probe,
                                       dm_fit_samples=cfg["stitching"]["dm_samples"],
                                       seed=derive_seed(seed, "spec", index))
            for rep in reports:
                rel = f"specificity_{index}_net{rep.meta['instance']}_layer{rep.meta['layer']}"
                runner.emit_json(rel + ".json", report_to_json(rep))
            return reports
        reports = runner.stage(f"specificity_{index}", build)
        if reports is None:
            continue
        mean_tau, mean_rho = mean_correlations(reports)
        pk, ps = pooled_correlations(reports)
        lines.append(
            f"{METHOD_LABELS[index]},{_fmt(mean_tau)},{_fmt(mean_rho)},"
            f"{_fmt(pk.statistic)},{_fmt(pk.p_value)},{_fmt(ps.statistic)},{_fmt(ps.p_value)}")
    runner.emit_text("specificity_summary.csv", "\n".join(lines) + "\n")


# -- one-off stitching (CLI `stitch` verb) -----------------------------------


def run_stitch(cfg: dict, out_dir=None) -> dict:
    """Fit and evaluate a single stitching layer described by the config.

    Expects the usual dataset/model sections plus
    ``stitch: {source_instance, source_layer, target_instance,
    target_layer, method}``.
    """
    if "stitch" not in cfg:
        raise ConfigError("stitch config needs a 'stitch' section")
    spec_cfg = cfg["stitch"]
    base = {k: v for k, v in cfg.items() if k != "stitch"}
    base.setdefault("kind", "similarity-grid")
    base = validate_config(base)
    for key in ("source_instance", "source_layer", "target_instance", "target_layer"):
        if not isinstance(spec_cfg.get(key), int):
            raise ConfigError(f"stitch section needs integer {key!r}")
    method = spec_cfg.get("method", "dm-functional")
    if method not in STITCHING_METHODS:
        raise ConfigError(f"stitch method must be one of {STITCHING_METHODS}")
    _, train_set, eval_set, nets = _prepare(base)
    f = nets[spec_cfg["source_instance"]].copy(frozen=True)
    g = nets[spec_cfg["target_instance"]].copy(frozen=True)
    i, j = spec_cfg["source_layer"], spec_cfg["target_layer"]
    amap = _fit_stitcher(base, f, i, g, j, method, train_set)
    spec = StitchSpec(f, i, g, j, amap)
    report = {
        "config_hash": config_hash(base),
        "method": method,
        "source_layer": i,
        "target_layer": j,
        "stitched_accuracy": stitched_accuracy(spec, eval_set),
        "target_accuracy": accuracy(g, eval_set),
        "relative_accuracy": relative_accuracy(spec, eval_set),
    }
    if out_dir is not None:
        _write_json(Path(out_dir) / "stitch.json", report)
    return report
