"""Command-line interface.

Verbs map onto the experiment kinds (train, simgrid, sanity, ood,
sensitivity, specificity), plus `stitch` for a single stitching layer and
`heatmap` to render an emitted grid JSON.  Exit codes: 0 success,
2 validation failure, 3 partial or full stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness

VERB_KINDS = {
    "train": "train-models",
    "simgrid": "similarity-grid",
    "sanity": "sanity-check",
    "ood": "ood-grid",
    "sensitivity": "sensitivity",
    "specificity": "specificity",
}

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE_FAILURE = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stitchsim",
        description="Similarity indices, model stitching, and OOD analysis on toy networks.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in (*VERB_KINDS, "stitch"):
        p = sub.add_parser(verb, help=f"run the {verb} experiment")
        p.add_argument("--config", type=Path, default=None,
                       help="JSON experiment config (defaults are used if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker threads for grid cells")
    p = sub.add_parser("heatmap", help="render a grid JSON to CSV + PPM")
    p.add_argument("--grid", type=Path, required=True, help="path to a grid .json artifact")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--config", type=Path, default=None, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=None, help=argparse.SUPPRESS)
    return parser


def _load_config(args, kind: str | None) -> dict:
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise harness.ConfigError(f"cannot read config {args.config}: {exc}") from exc
    else:
        cfg = harness.default_config(kind or "similarity-grid", seed=0)
    if kind is not None:
        declared = cfg.get("kind", kind)
        if declared != kind:
            raise harness.ConfigError(f"config kind {declared!r} does not match the verb")
        cfg["kind"] = kind
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.out is not None:
        cfg["out"] = str(args.out)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "heatmap":
            obj = json.loads(args.grid.read_text())
            grid = harness.grid_from_json(obj)
            out = args.out if args.out is not None else args.grid.parent
            csv_path, ppm_path = harness.emit_heatmap(grid, Path(out) / args.grid.stem)
            print(f"wrote {csv_path} and {ppm_path}")
            return EXIT_OK
        if args.verb == "stitch":
            cfg = _load_config(args, None)
            report = harness.run_stitch(cfg, args.out)
            print(json.dumps(report, sort_keys=True, indent=2))
            return EXIT_OK
        kind = VERB_KINDS[args.verb]
        cfg = _load_config(args, kind)
        manifest = harness.run_experiment(cfg, args.out)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if manifest["status"] != "ok":
        failed = [s["name"] for s in manifest["stages"] if s["status"] == "failed"]
        print(f"stage failures: {failed}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    print(f"ok: {len(manifest['outputs'])} artifacts (config {manifest['config_hash']})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
