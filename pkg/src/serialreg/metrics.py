"""Evaluation metrics: box-centre distance, box IoU and inscribed-circle IoU.

Every non-middle annotation is pushed into the middle section's frame and
compared with the same glomerulus on the middle section. Aggregates follow
the four-column summary: mean and median distance (um), mean box IoU and
mean circle IoU.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NoMiddleAnnotation, ParseError
from .geometry import Affine2D, apply_points

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("distance_mean_um", "distance_median_um", "box_iou_mean", "circle_iou_mean")
ROW_COLUMNS = ("glomerulus_id", "section_id", "section_index", "distance_um", "box_iou", "circle_iou")
ANNOTATION_COLUMNS = ("case_id", "section_id", "glomerulus_id", "x_min", "y_min", "x_max", "y_max")


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> np.ndarray:
        return np.array([[self.x_min, self.y_min], [self.x_max, self.y_min],
                         [self.x_max, self.y_max], [self.x_min, self.y_max]])


@dataclass(frozen=True)
class BoundingCircle:
    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("circle radius must be positive")


@dataclass
class GlomerulusTrack:
    glomerulus_id: str
    boxes: dict[str, BoundingBox]  # section_id -> box

    def __post_init__(self):
        if not self.boxes:
            raise ValueError(f"track {self.glomerulus_id!r} has no boxes")


def transform_box(a: Affine2D, box: BoundingBox) -> BoundingBox:
    """Axis-aligned hull of the box corners mapped through ``a``."""
    pts = apply_points(a, box.corners())
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    return BoundingBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def center_distance(a: BoundingBox, b: BoundingBox, spacing_um: float = 1.0) -> float:
    if not spacing_um > 0:
        raise ValueError("spacing_um must be positive")
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by) * spacing_um


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def inscribed_circle(box: BoundingBox) -> BoundingCircle:
    cx, cy = box.center
    return BoundingCircle(cx, cy, min(box.width, box.height) / 2.0)


def circle_intersection_area(a: BoundingCircle, b: BoundingCircle) -> float:
    d = math.hypot(a.cx - b.cx, a.cy - b.cy)
    r1, r2 = a.r, b.r
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    # half-angles subtended by the chord at each centre
    c1 = np.clip((d * d + r1 * r1 - r2 * r2) / (2 * d * r1), -1.0, 1.0)
    c2 = np.clip((d * d + r2 * r2 - r1 * r1) / (2 * d * r2), -1.0, 1.0)
    a1 = math.acos(c1)
    a2 = math.acos(c2)
    seg1 = r1 * r1 * (a1 - math.sin(2 * a1) / 2.0)
    seg2 = r2 * r2 * (a2 - math.sin(2 * a2) / 2.0)
    return seg1 + seg2


def circle_iou(a: BoundingCircle, b: BoundingCircle) -> float:
    inter = circle_intersection_area(a, b)
    union = math.pi * (a.r * a.r + b.r * b.r) - inter
    return float(min(max(inter / union, 0.0), 1.0))


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    skipped_tracks: list[str] = field(default_factory=list)

    @property
    def summary(self) -> dict:
        if not self.rows:
            nan = float("nan")
            return {k: nan for k in SUMMARY_COLUMNS} | {"n": 0}
        dist = np.array([r["distance_um"] for r in self.rows])
        return {
            "distance_mean_um": float(dist.mean()),
            "distance_median_um": float(np.median(dist)),
            "box_iou_mean": float(np.mean([r["box_iou"] for r in self.rows])),
            "circle_iou_mean": float(np.mean([r["circle_iou"] for r in self.rows])),
            "n": len(self.rows),
        }

    def write(self, out_dir: Path, label: str | None = None) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows_csv(self.rows, out_dir / "metrics_rows.csv")
        import json

        summary = {"method": label, **self.summary, "skipped_tracks": self.skipped_tracks}
        (out_dir / "metrics_summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def write_rows_csv(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in ROW_COLUMNS})


def to_working(box: BoundingBox, downsample: float) -> BoundingBox:
    """Annotation-resolution box to working-resolution pixel coordinates."""
    if downsample == 1.0:
        return box
    f = downsample
    return BoundingBox((box.x_min + 0.5) / f - 0.5, (box.y_min + 0.5) / f - 0.5,
                       (box.x_max + 0.5) / f - 0.5, (box.y_max + 0.5) / f - 0.5)


def to_annotation(box: BoundingBox, downsample: float) -> BoundingBox:
    if downsample == 1.0:
        return box
    f = downsample
    return BoundingBox((box.x_min + 0.5) * f - 0.5, (box.y_min + 0.5) * f - 0.5,
                       (box.x_max + 0.5) * f - 0.5, (box.y_max + 0.5) * f - 0.5)


def evaluate_series(tracks: Sequence[GlomerulusTrack], reg, spacing_um: float | None = None,
                    downsample: float | None = None) -> MetricsReport:
    """Compare each non-middle box, mapped to the middle frame, with the middle box.

    ``reg`` is a :class:`~serialreg.propagation.SeriesRegistration`. Boxes are
    at annotation resolution; ``downsample`` (annotation px per working px)
    and ``spacing_um`` (um per annotation px) default to the values recorded
    on ``reg``.
    """
    spacing_um = reg.spacing_um if spacing_um is None else spacing_um
    downsample = reg.downsample if downsample is None else downsample
    index = {sid: i for i, sid in enumerate(reg.section_ids)}
    middle_id = reg.section_ids[reg.middle_index]
    report = MetricsReport()
    usable = 0
    for track in tracks:
        ref = track.boxes.get(middle_id)
        if ref is None:
            log.warning("track %s has no box on the middle section %s; skipped", track.glomerulus_id, middle_id)
            report.skipped_tracks.append(str(track.glomerulus_id))
            continue
        usable += 1
        ref_circle = inscribed_circle(ref)
        for sid, box in track.boxes.items():
            if sid == middle_id:
                continue
            if sid not in index:
                log.warning("section %s of track %s is not in the registration; ignored", sid, track.glomerulus_id)
                continue
            t = index[sid]
            mapped = to_annotation(transform_box(reg.global_transforms[t], to_working(box, downsample)), downsample)
            report.rows.append({
                "glomerulus_id": track.glomerulus_id,
                "section_id": sid,
                "section_index": t,
                "distance_um": center_distance(mapped, ref, spacing_um),
                "box_iou": box_iou(mapped, ref),
                "circle_iou": circle_iou(inscribed_circle(mapped), ref_circle),
            })
    if usable == 0:
        raise NoMiddleAnnotation(f"no track has a box on the middle section {middle_id!r}")
    report.rows.sort(key=lambda r: (str(r["glomerulus_id"]), r["section_index"]))
    return report


def load_annotations(path) -> dict[str, list[GlomerulusTrack]]:
    """Read the annotation CSV into tracks grouped by case id."""
    path = Path(path)
    grouped: dict[str, dict[str, dict[str, BoundingBox]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ANNOTATION_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                box = BoundingBox(*(float(row[k]) for k in ("x_min", "y_min", "x_max", "y_max")))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad box ({exc})") from exc
            case = grouped.setdefault(row["case_id"], {})
            case.setdefault(row["glomerulus_id"], {})[row["section_id"]] = box
    return {case: [GlomerulusTrack(gid, boxes) for gid, boxes in tracks.items()]
            for case, tracks in grouped.items()}


def write_annotations(path, case_id: str, tracks: Sequence[GlomerulusTrack]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_COLUMNS)
        for track in tracks:
            for sid, b in track.boxes.items():
                writer.writerow([case_id, sid, track.glomerulus_id,
                                 f"{b.x_min:.4f}", f"{b.y_min:.4f}", f"{b.x_max:.4f}", f"{b.y_max:.4f}"])
