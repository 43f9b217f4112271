"""End-to-end series registration: manifest in, matrices, images and metrics out."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from .errors import DecodeError, MissingImage, ParseError, WriteError
from .features import FeatureConfig
from .geometry import ImageGrid, warp_image
from .intensity import RefineConfig, SimilarityMetric
from .metrics import (
    BoundingBox,
    GlomerulusTrack,
    MetricsReport,
    evaluate_series,
    load_annotations,
    to_working,
    transform_box,
)
from .propagation import METHODS, PairConfig, PairResult, SeriesRegistration, assemble_series, register_pair

log = logging.getLogger(__name__)

STAIN_LABELS = ("C4d", "H&E", "CD45", "JMS", "PAS", "EVG", "PV", "MSB", "other")
YELLOW = (255, 215, 0)
GREEN = (0, 200, 0)


@dataclass(frozen=True)
class Section:
    section_id: str
    image_path: Path
    stain_label: str = "other"
    spacing_um: float = 1.0


@dataclass(frozen=True)
class SeriesManifest:
    case_id: str
    sections: tuple[Section, ...]
    annotations_path: Path | None = None

    @property
    def section_ids(self) -> list[str]:
        return [s.section_id for s in self.sections]


def load_manifest(path) -> SeriesManifest:
    """Parse and validate a manifest JSON file; image paths resolve relative to it."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: cannot read manifest ({exc})") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top level must be an object")
    base = path.parent
    case_id = str(raw.get("case_id", path.stem))
    entries = raw.get("sections")
    if not isinstance(entries, list) or not entries:
        raise ParseError(f"{path}: field 'sections' must be a non-empty list")
    sections = []
    seen: set[str] = set()
    for i, entry in enumerate(entries):
        where = f"{path}: sections[{i}]"
        if not isinstance(entry, dict):
            raise ParseError(f"{where}: must be an object")
        for key in ("section_id", "image_path"):
            if key not in entry:
                raise ParseError(f"{where}: missing field '{key}'")
        sid = str(entry["section_id"])
        if sid in seen:
            raise ParseError(f"{where}.section_id: duplicate section id {sid!r}")
        seen.add(sid)
        stain = str(entry.get("stain_label", "other"))
        if stain not in STAIN_LABELS:
            raise ParseError(f"{where}.stain_label: {stain!r} is not one of {STAIN_LABELS}")
        try:
            spacing = float(entry.get("spacing_um", 1.0))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}.spacing_um: not a number") from exc
        if not spacing > 0:
            raise ParseError(f"{where}.spacing_um: must be positive")
        img = Path(entry["image_path"])
        img = img if img.is_absolute() else base / img
        if not img.is_file():
            raise MissingImage(f"{where}: image not found: {img}")
        try:
            with Image.open(img) as im:
                im.size
        except (UnidentifiedImageError, OSError) as exc:
            raise DecodeError(f"{where}: unreadable image header {img}: {exc}") from exc
        sections.append(Section(sid, img, stain, spacing))
    ann = raw.get("annotations_path")
    if ann is not None:
        ann = Path(ann)
        ann = ann if ann.is_absolute() else base / ann
    return SeriesManifest(case_id, tuple(sections), ann)


def write_manifest(path, manifest: SeriesManifest) -> None:
    path = Path(path)
    base = path.parent

    def rel(p: Path) -> str:
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    doc = {
        "case_id": manifest.case_id,
        "sections": [
            {"section_id": s.section_id, "image_path": rel(s.image_path),
             "stain_label": s.stain_label, "spacing_um": s.spacing_um}
            for s in manifest.sections
        ],
    }
    if manifest.annotations_path is not None:
        doc["annotations_path"] = rel(manifest.annotations_path)
    path.write_text(json.dumps(doc, indent=2) + "\n")


@dataclass(frozen=True)
class PreprocessConfig:
    grayscale_weights: tuple[float, float, float] = (0.299, 0.587, 0.114)
    invert: bool = True
    percentiles: tuple[float, float] = (1.0, 99.0)


@dataclass(frozen=True)
class PipelineConfig:
    working_max_dim: int = 1024
    preprocess: PreprocessConfig = PreprocessConfig()
    features: FeatureConfig = FeatureConfig()
    refine: RefineConfig = RefineConfig()
    method: str = "two_stage"
    emit_warped: bool = False
    emit_overlays: bool = False
    emit_traces: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.working_max_dim < 64:
            raise ValueError("working_max_dim must be at least 64")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "preprocess" in d:
            pre = dict(d["preprocess"])
            for key in ("grayscale_weights", "percentiles"):
                if key in pre:
                    pre[key] = tuple(pre[key])
            d["preprocess"] = PreprocessConfig(**pre)
        if "features" in d:
            d["features"] = FeatureConfig(**d["features"])
        if "refine" in d:
            ref = dict(d["refine"])
            if "metric" in ref:
                ref["metric"] = SimilarityMetric(**ref["metric"])
            if "parameter_scales" in ref:
                ref["parameter_scales"] = tuple(ref["parameter_scales"])
            d["refine"] = RefineConfig(**ref)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParseError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I", "F"):
                arr = np.asarray(im, dtype=float)
                if im.mode == "L":
                    arr = arr / 255.0
                elif arr.max() > 1.0:
                    arr = arr / arr.max()
                return arr
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def working_downsample(sizes: Sequence[tuple[int, int]], working_max_dim: int) -> float:
    """Common downsample factor so every section fits ``working_max_dim``."""
    largest = max(max(w, h) for w, h in sizes)
    return max(1.0, largest / working_max_dim)


def preprocess(raw, cfg: PreprocessConfig = PreprocessConfig(), working_max_dim: int = 1024,
               spacing_um: float = 1.0, downsample: float | None = None) -> ImageGrid:
    """Luminance, optional inversion, percentile normalisation and downsampling.

    ``raw`` is an ``(H, W, 3)`` RGB array (uint8 or float in [0, 1]) or a
    grey ``(H, W)`` array. ``downsample`` defaults to the factor that fits
    ``working_max_dim``; spacing is scaled by it.
    """
    arr = np.asarray(raw)
    if arr.ndim not in (2, 3) or arr.size == 0:
        raise DecodeError(f"expected a 2D grey or 3-channel image, got shape {arr.shape}")
    scale = 255.0 if arr.dtype == np.uint8 else 1.0
    arr = arr.astype(float) / scale
    if arr.ndim == 3:
        if arr.shape[2] < 3:
            raise DecodeError(f"expected 3 colour channels, got {arr.shape[2]}")
        lum = arr[..., :3] @ np.asarray(cfg.grayscale_weights, dtype=float)
    else:
        lum = arr
    if cfg.invert:
        lum = 1.0 - lum
    lo, hi = np.percentile(lum, cfg.percentiles)
    if hi - lo > 1e-12:
        lum = (lum - lo) / (hi - lo)
    else:
        lum = lum - lo
    lum = np.clip(lum, 0.0, 1.0)
    h, w = lum.shape
    f = working_downsample([(w, h)], working_max_dim) if downsample is None else downsample
    if f > 1.0:
        size = (max(1, int(round(w / f))), max(1, int(round(h / f))))
        lum = np.asarray(Image.fromarray(lum.astype(np.float32)).resize(size, Image.BOX), dtype=float)
        lum = np.clip(lum, 0.0, 1.0)
    return ImageGrid(lum, spacing_um * f)


def to_uint8(image: ImageGrid | np.ndarray) -> np.ndarray:
    data = image.data if isinstance(image, ImageGrid) else np.asarray(image)
    if data.dtype == np.uint8:
        return data
    return np.round(np.clip(data, 0.0, 1.0) * 255).astype(np.uint8)


def render_overlay(image, boxes: Sequence[tuple[BoundingBox, tuple[int, int, int]]], path,
                   width: int = 2) -> None:
    """Write ``image`` with each box stroked in its colour; boxes are clipped to the frame."""
    arr = to_uint8(image)
    im = Image.fromarray(arr).convert("RGB")
    draw = ImageDraw.Draw(im)
    w, h = im.size
    for box, color in boxes:
        x0 = int(round(min(max(box.x_min, 0), w - 1)))
        y0 = int(round(min(max(box.y_min, 0), h - 1)))
        x1 = int(round(min(max(box.x_max, 0), w - 1)))
        y1 = int(round(min(max(box.y_max, 0), h - 1)))
        if x1 <= x0 or y1 <= y0:
            continue
        draw.rectangle([x0, y0, x1, y1], outline=tuple(color), width=width)
    try:
        im.save(path)
    except OSError as exc:
        raise WriteError(f"cannot write overlay {path}: {exc}") from exc


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class RunOutputs:
    registration: SeriesRegistration
    images: list[ImageGrid]
    pair_results: list[PairResult]
    metrics: MetricsReport | None = None
    summary: dict = field(default_factory=dict)

    @property
    def fallbacks(self) -> list[int]:
        return [t for t, r in enumerate(self.pair_results) if r.fell_back]

    @property
    def exit_code(self) -> int:
        return 2 if self.fallbacks else 0


def register_images(images: Sequence[ImageGrid], cfg: PipelineConfig, section_ids: Sequence[str] | None = None,
                    **series_kwargs) -> tuple[SeriesRegistration, list[PairResult]]:
    """Register consecutive pairs (fixed = lower index) and propagate to the middle."""
    section_ids = [str(i) for i in range(len(images))] if section_ids is None else list(section_ids)

    def run(t: int) -> PairResult:
        features = dataclasses.replace(cfg.features, seed=pair_seed(cfg.seed, t))
        pair_cfg = PairConfig.for_method(cfg.method, features, cfg.refine)
        return register_pair(images[t], images[t + 1], pair_cfg)

    indices = range(len(images) - 1)
    if cfg.workers > 1 and len(images) > 2:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, indices))
    else:
        results = [run(t) for t in indices]
    reg = assemble_series(section_ids, [r.transform for r in results],
                          pair_diagnostics=[r.diagnostics for r in results], method=cfg.method, **series_kwargs)
    return reg, results


def _tracks_for_case(path: Path, case_id: str) -> list[GlomerulusTrack]:
    by_case = load_annotations(path)
    if case_id in by_case:
        return by_case[case_id]
    if len(by_case) == 1:
        return next(iter(by_case.values()))
    raise ParseError(f"{path}: no annotations for case {case_id!r}")


def run_pipeline(manifest: SeriesManifest, cfg: PipelineConfig = PipelineConfig(), out_dir=None) -> RunOutputs:
    t_start = time.perf_counter()
    raws = [read_image(s.image_path) for s in manifest.sections]
    sizes = [(r.shape[1], r.shape[0]) for r in raws]
    f = working_downsample(sizes, cfg.working_max_dim)
    images = [preprocess(r, cfg.preprocess, cfg.working_max_dim, s.spacing_um, f)
              for r, s in zip(raws, manifest.sections)]
    t_pre = time.perf_counter()
    spacing = manifest.sections[0].spacing_um
    if any(not math.isclose(s.spacing_um, spacing) for s in manifest.sections):
        log.warning("sections have differing spacing; distances use the first section's %.4g um/px", spacing)
    reg, results = register_images(images, cfg, manifest.section_ids, downsample=f, spacing_um=spacing,
                                   case_id=manifest.case_id)
    t_reg = time.perf_counter()
    outputs = RunOutputs(reg, images, results)

    tracks = None
    if manifest.annotations_path is not None:
        tracks = _tracks_for_case(manifest.annotations_path, manifest.case_id)
        outputs.metrics = evaluate_series(tracks, reg)

    outputs.summary = {
        "case_id": manifest.case_id,
        "method": cfg.method,
        "sections": len(images),
        "pairs": len(results),
        "fallback_pairs": [{"fixed": reg.section_ids[t], "moving": reg.section_ids[t + 1],
                            "diagnostics": results[t].diagnostics} for t in outputs.fallbacks],
        "downsample": f,
        "timings_s": {
            "preprocess": t_pre - t_start,
            "registration": t_reg - t_pre,
            "pairs": [r.timings for r in results],
        },
        "config": cfg.to_dict(),
    }
    if outputs.metrics is not None:
        outputs.summary["metrics"] = outputs.metrics.summary
    if out_dir is not None:
        write_outputs(outputs, Path(out_dir), cfg, tracks)
        outputs.summary["timings_s"]["total"] = time.perf_counter() - t_start
        (Path(out_dir) / "run_summary.json").write_text(json.dumps(outputs.summary, indent=2, default=str) + "\n")
    return outputs


def write_trace_csv(results: Sequence[PairResult], reg: SeriesRegistration, path: Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fixed", "moving", "level", "iteration", "metric",
                         "tx", "ty", "rotation", "log_sx", "log_sy", "shear"])
        for t, r in enumerate(results):
            for e in r.trace:
                writer.writerow([reg.section_ids[t], reg.section_ids[t + 1], e.level, e.iteration,
                                 repr(e.metric), *(repr(p) for p in e.params)])


def write_outputs(outputs: RunOutputs, out_dir: Path, cfg: PipelineConfig,
                  tracks: Sequence[GlomerulusTrack] | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    reg = outputs.registration
    (out_dir / "registration.json").write_text(reg.to_json())
    middle = outputs.images[reg.middle_index]
    if cfg.emit_warped or cfg.emit_overlays:
        warped = [warp_image(g, img, middle.shape) for g, img in zip(reg.global_transforms, outputs.images)]
    if cfg.emit_warped:
        wdir = out_dir / "warped"
        wdir.mkdir(exist_ok=True)
        for sid, img in zip(reg.section_ids, warped):
            Image.fromarray(to_uint8(img)).save(wdir / f"{_safe(sid)}.png")
    if cfg.emit_overlays and tracks:
        odir = out_dir / "overlays"
        odir.mkdir(exist_ok=True)
        middle_id = reg.section_ids[reg.middle_index]
        for t, (sid, img) in enumerate(zip(reg.section_ids, warped)):
            boxes = []
            for track in tracks:
                ref = track.boxes.get(middle_id)
                box = track.boxes.get(sid)
                if ref is not None:
                    boxes.append((to_working(ref, reg.downsample), YELLOW))
                if box is not None and sid != middle_id:
                    boxes.append((transform_box(reg.global_transforms[t], to_working(box, reg.downsample)), GREEN))
            render_overlay(img, boxes, odir / f"{_safe(sid)}.png")
    if cfg.emit_traces:
        write_trace_csv(outputs.pair_results, reg, out_dir / "convergence_trace.csv")
    if outputs.metrics is not None:
        write_report(outputs.metrics, out_dir, cfg.method)


def write_report(report: MetricsReport, out_dir: Path, method: str | None = None) -> None:
    """Rows CSV, summary JSON and the distribution figures."""
    from .plotting import plot_distance_by_section, plot_metric_distributions

    report.write(out_dir, method)
    if report.rows:
        label = method or "registration"
        plot_metric_distributions({label: report.rows}, out_dir / "metrics_distributions.png")
        plot_distance_by_section(report.rows, out_dir / "distance_by_section.png")


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
