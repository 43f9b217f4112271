"""Command line entry point: ``serialreg register|evaluate|compare|synth``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import RegistrationError
from .metrics import SUMMARY_COLUMNS, evaluate_series
from .pipeline import PipelineConfig, load_manifest, run_pipeline, write_report, _tracks_for_case
from .propagation import METHODS, SeriesRegistration

log = logging.getLogger("serialreg")


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    return PipelineConfig.from_dict(data)


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    changes = {}
    if getattr(args, "method", None):
        changes["method"] = args.method
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if getattr(args, "emit_warped", False):
        changes["emit_warped"] = True
    if getattr(args, "emit_overlays", False):
        changes["emit_overlays"] = True
    if getattr(args, "emit_traces", False):
        changes["emit_traces"] = True
    return dataclasses.replace(cfg, **changes)


def cmd_register(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    manifest = load_manifest(args.manifest)
    outputs = run_pipeline(manifest, cfg, args.out)
    for t in outputs.fallbacks:
        log.warning("pair %s <- %s fell back: %s", outputs.registration.section_ids[t],
                    outputs.registration.section_ids[t + 1], outputs.pair_results[t].diagnostics.get("stage1"))
    if outputs.metrics is not None:
        _print_summary(cfg.method, outputs.metrics.summary)
    return outputs.exit_code


def cmd_evaluate(args) -> int:
    reg = SeriesRegistration.from_json(Path(args.registration).read_text())
    tracks = _tracks_for_case(Path(args.annotations), reg.case_id)
    report = evaluate_series(tracks, reg, spacing_um=args.spacing_um)
    write_report(report, Path(args.out), reg.method)
    _print_summary(reg.method, report.summary)
    return 0


def cmd_compare(args) -> int:
    from .plotting import plot_metric_distributions

    base = _apply_overrides(_load_config(args.config), args)
    manifest = load_manifest(args.manifest)
    if manifest.annotations_path is None:
        raise RegistrationError("compare needs a manifest with annotations_path")
    out = Path(args.out)
    rows, table, code = {}, [], 0
    for method in args.methods:
        cfg = dataclasses.replace(base, method=method)
        outputs = run_pipeline(manifest, cfg, out / method)
        rows[method] = outputs.metrics.rows
        table.append({"method": method, **outputs.metrics.summary})
        code = max(code, outputs.exit_code)
        _print_summary(method, outputs.metrics.summary)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w") as fh:
        fh.write(",".join(("method",) + SUMMARY_COLUMNS + ("n",)) + "\n")
        for r in table:
            fh.write(",".join([r["method"]] + [f"{r[k]:.4f}" for k in SUMMARY_COLUMNS] + [str(r["n"])]) + "\n")
    (out / "comparison.json").write_text(json.dumps(table, indent=2) + "\n")
    plot_metric_distributions(rows, out / "comparison.png")
    return code


def cmd_synth(args) -> int:
    from .synthetic import Artifacts, PhantomSpec, STAINS, make_series, random_affine, write_case

    spec = PhantomSpec(seed=args.seed, width=args.width, height=args.height, blob_count=args.blobs,
                       needle=not args.no_needle, spacing_um=args.spacing_um,
                       blob_radius=(args.blob_radius[0], args.blob_radius[1]))
    rng = np.random.default_rng([args.seed, 1])
    planted = [random_affine(rng, spec.width, spec.height, args.max_rotation, args.max_translation,
                             (args.scale_range[0], args.scale_range[1])) for _ in range(args.sections - 1)]
    if args.stains == "cycle":
        names = list(STAINS)
        stains = tuple(names[t % len(names)] for t in range(args.sections))
    else:
        stains = tuple(s.strip() for s in args.stains.split(","))
        if len(stains) == 1:
            stains = stains * args.sections
    series = make_series(spec, args.sections, planted, Artifacts(args.occlusion, args.noise, stains))
    path = write_case(series, args.out, args.case_id)
    print(path)
    return 0


def _print_summary(method: str, summary: dict) -> None:
    print(f"{method:12s} distance mean {summary['distance_mean_um']:.2f} um, "
          f"median {summary['distance_median_um']:.2f} um, box IoU {summary['box_iou_mean']:.3f}, "
          f"circle IoU {summary['circle_iou_mean']:.3f} (n={summary['n']})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="serialreg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_opts(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--emit-warped", action="store_true")
        p.add_argument("--emit-overlays", action="store_true")
        p.add_argument("--emit-traces", action="store_true")

    p = sub.add_parser("register", help="register a series described by a manifest")
    run_opts(p)
    p.add_argument("--method", choices=METHODS)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a registration against annotation boxes")
    p.add_argument("--registration", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing-um", type=float, help="override microns per annotation pixel")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="run several methods and tabulate their metrics")
    run_opts(p)
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="write a synthetic phantom series with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--sections", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case-id", default="synthetic")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--blobs", type=int, default=6)
    p.add_argument("--blob-radius", type=float, nargs=2, default=(9.0, 14.0))
    p.add_argument("--no-needle", action="store_true")
    p.add_argument("--spacing-um", type=float, default=1.0)
    p.add_argument("--max-rotation", type=float, default=15.0, help="degrees per pair")
    p.add_argument("--max-translation", type=float, default=0.08, help="fraction of width per pair")
    p.add_argument("--scale-range", type=float, nargs=2, default=(0.92, 1.08))
    p.add_argument("--occlusion", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--stains", default="H&E", help="comma list, one name for all, or 'cycle'")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RegistrationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
