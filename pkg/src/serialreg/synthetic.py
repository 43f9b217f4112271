"""Synthetic serial-section phantoms with known geometry.

A phantom is a tissue density map in [0, 1]: a textured tissue region (a
thin strip in needle-biopsy mode) holding ball-like blobs that stand in for
glomeruli. Series are produced by pushing the base geometry through planted
affine transforms, rendering each section with its own stain profile, and
adding missing-tissue patches and sensor noise.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import Affine2D, ImageGrid, apply_points, compose, invert, sample_bilinear
from .metrics import BoundingBox, GlomerulusTrack, write_annotations


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    width: int = 512
    height: int = 192
    blob_count: int = 6
    blob_radius: tuple[float, float] = (9.0, 14.0)
    texture_amplitude: float = 0.35
    needle: bool = True
    spacing_um: float = 1.0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("canvas must be at least 16x16")
        if self.blob_count < 0:
            raise ValueError("blob_count must be non-negative")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1]:
            raise ValueError("blob_radius must be an increasing positive pair")

    @property
    def pad(self) -> int:
        return int(round(0.3 * max(self.width, self.height)))


@dataclass(frozen=True)
class StainProfile:
    """Stain rendering: ``absorbance = optical_density * density ** gamma``."""

    name: str
    gamma: float
    optical_density: tuple[float, float, float]

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive for a strictly monotone transfer curve")

    def transfer(self, density: np.ndarray) -> np.ndarray:
        return np.power(np.clip(density, 0.0, 1.0), self.gamma)

    def render(self, density: np.ndarray) -> np.ndarray:
        """RGB float image in [0, 1]; zero density renders as white glass."""
        od = np.asarray(self.optical_density, dtype=float)
        return np.exp(-self.transfer(density)[..., None] * od)


STAINS: dict[str, StainProfile] = {
    p.name: p
    for p in (
        StainProfile("H&E", 1.0, (0.65, 1.6, 0.55)),
        StainProfile("PAS", 0.8, (0.45, 1.7, 0.7)),
        StainProfile("JMS", 1.6, (1.3, 1.4, 1.3)),
        StainProfile("EVG", 1.3, (0.5, 1.5, 1.1)),
        StainProfile("C4d", 0.7, (0.55, 0.9, 1.4)),
        StainProfile("CD45", 1.8, (0.7, 1.0, 1.5)),
        StainProfile("PV", 0.6, (0.9, 1.1, 0.7)),
        StainProfile("MSB", 1.2, (0.4, 1.5, 1.6)),
    )
}


@dataclass(frozen=True)
class Blob:
    cx: float
    cy: float
    r: float

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)


@dataclass(frozen=True)
class Artifacts:
    occlusion_fraction: float = 0.0
    noise_sigma: float = 0.0
    stains: tuple[str, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.occlusion_fraction <= 0.5:
            raise ValueError("occlusion_fraction must lie in [0, 0.5]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class SeriesData:
    sections: list[np.ndarray]  # uint8 RGB, (H, W, 3)
    densities: list[np.ndarray]
    stains: list[str]
    planted: list[Affine2D]  # section t -> section t+1
    pair_transforms: list[Affine2D]  # section t+1 -> section t
    cumulative: list[Affine2D]  # base geometry -> section t
    tracks: list[list[BoundingBox | None]]  # [blob][section]
    blobs: list[Blob] = field(default_factory=list)
    spacing_um: float = 1.0


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _tissue_mask(spec: PhantomSpec, rng, xs, ys):
    w, h = spec.width, spec.height
    if spec.needle:
        length = 0.82 * w
        half = min(0.2 * h, length / 10.0)
        bend = rng.uniform(-0.15, 0.15) * h / (length / 2.0) ** 2
        phase = rng.uniform(0, 2 * math.pi, 2)
        u = (xs - w / 2.0) / (length / 2.0)
        center_y = h / 2.0 + bend * (xs - w / 2.0) ** 2
        thickness = half * (1.0 + 0.12 * np.sin(3.1 * u + phase[0]) + 0.06 * np.sin(7.3 * u + phase[1]))
        v = (ys - center_y) / thickness
        inside = u ** 8 + v ** 2 < 1.0
        axis = (center_y, thickness)
    else:
        u = (xs - w / 2.0) / (0.4 * w)
        v = (ys - h / 2.0) / (0.4 * h)
        wobble = 1.0 + 0.1 * np.sin(5 * np.arctan2(v, u) + rng.uniform(0, 2 * math.pi))
        inside = np.hypot(u, v) < wobble
        axis = None
    return inside, axis


def _place_blobs(spec: PhantomSpec, rng) -> list[Blob]:
    w, h = spec.width, spec.height
    blobs: list[Blob] = []
    attempts = 0
    while len(blobs) < spec.blob_count and attempts < 5000:
        attempts += 1
        r = rng.uniform(*spec.blob_radius)
        if spec.needle:
            length = 0.82 * w
            half = min(0.2 * h, length / 10.0)
            x = rng.uniform(w / 2 - 0.42 * length + r, w / 2 + 0.42 * length - r)
            y = h / 2.0 + rng.uniform(-1, 1) * max(half * 0.8 - r - 3.0, 0.0)
        else:
            x = rng.uniform(0.2 * w, 0.8 * w)
            y = rng.uniform(0.2 * h, 0.8 * h)
        if all(math.hypot(x - b.cx, y - b.cy) > r + b.r + 8.0 for b in blobs):
            blobs.append(Blob(x, y, r))
    return blobs


def _render_density(spec: PhantomSpec, pad: int):
    """Density on a canvas padded by ``pad`` px; returns ``(density, blobs)``."""
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width + 2 * pad, spec.height + 2 * pad
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    xs -= pad
    ys -= pad
    inside, axis = _tissue_mask(spec, rng, xs, ys)
    fine = _smooth_noise(rng, (h, w), 1.5)
    coarse = _smooth_noise(rng, (h, w), 6.0)
    tissue = 0.38 + spec.texture_amplitude * (0.35 * fine + 0.25 * coarse)
    density = np.where(inside, np.clip(tissue, 0.08, 0.62), 0.0)

    blobs = _place_blobs(spec, rng)
    if spec.needle and axis is not None:
        center_y, _ = axis
        moved = []
        for b in blobs:
            iy = int(round(b.cy + pad))
            ix = int(np.clip(round(b.cx + pad), 0, w - 1))
            dy = center_y[np.clip(iy, 0, h - 1), ix] - spec.height / 2.0
            moved.append(Blob(b.cx, b.cy + dy, b.r))
        blobs = moved
    for b in blobs:
        rho = np.hypot(xs - b.cx, ys - b.cy)
        ring = (rho >= b.r) & (rho < b.r + 2.5)
        disc = rho < b.r
        density[ring] = 0.1
        tuft = 0.7 + 0.25 * (1.0 - (rho / b.r) ** 2) + 0.05 * np.clip(fine, -2, 2) / 2.0
        density[disc] = np.clip(tuft[disc], 0.0, 1.0)
    density = np.clip(ndimage.gaussian_filter(density, 0.7), 0.0, 1.0)
    return density, blobs


def generate_phantom(spec: PhantomSpec) -> tuple[ImageGrid, list[BoundingBox]]:
    """Density image and the exact bounding box of each blob."""
    pad = spec.pad
    density, blobs = _render_density(spec, pad)
    crop = density[pad:pad + spec.height, pad:pad + spec.width]
    return ImageGrid(crop, spec.spacing_um), [b.box for b in blobs]


def ellipse_box(blob: Blob, t: Affine2D) -> BoundingBox:
    """Tight axis-aligned box of the blob's disc after mapping through ``t``."""
    cx, cy = apply_points(t, [[blob.cx, blob.cy]])[0]
    lin = t.linear
    hx = blob.r * math.hypot(lin[0, 0], lin[0, 1])
    hy = blob.r * math.hypot(lin[1, 0], lin[1, 1])
    return BoundingBox(cx - hx, cy - hy, cx + hx, cy + hy)


def random_affine(rng: np.random.Generator, width: int, height: int, max_rotation_deg: float = 15.0,
                  max_translation_frac: float = 0.08, scale_range: tuple[float, float] = (0.92, 1.08),
                  max_shear: float = 0.0) -> Affine2D:
    """Random affine acting about the image centre."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    theta = math.radians(rng.uniform(-max_rotation_deg, max_rotation_deg))
    sx, sy = rng.uniform(*scale_range, size=2)
    shear = rng.uniform(-max_shear, max_shear) if max_shear > 0 else 0.0
    tx, ty = rng.uniform(-max_translation_frac, max_translation_frac, size=2) * width
    c, s = math.cos(theta), math.sin(theta)
    lin = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([sx, sy])
    off = np.array([cx + tx, cy + ty]) - lin @ np.array([cx, cy])
    return Affine2D.from_linear(lin, off)


def _occlude(density: np.ndarray, fraction: float, rng) -> np.ndarray:
    if fraction <= 0:
        return density
    tissue = density > 0.05
    total = tissue.sum()
    if total == 0:
        return density
    h, w = density.shape
    ys, xs = np.nonzero(tissue)
    hole = np.zeros_like(tissue)
    gy, gx = np.mgrid[0:h, 0:w]
    scale = math.sqrt(total) * 0.25
    for _ in range(200):
        if (hole & tissue).sum() >= fraction * total:
            break
        k = rng.integers(len(xs))
        ry, rx = rng.uniform(0.4, 1.0, size=2) * scale
        hole |= ((gx - xs[k]) / rx) ** 2 + ((gy - ys[k]) / ry) ** 2 < 1.0
    soft = ndimage.gaussian_filter(hole.astype(float), 1.0)
    return density * (1.0 - soft)


def make_series(spec: PhantomSpec, count: int, planted: Sequence[Affine2D],
                artifacts: Artifacts = Artifacts()) -> SeriesData:
    """Render ``count`` sections; section ``t + 1`` is ``planted[t]`` applied to section ``t``.

    Stains default to H&E throughout. Blob boxes are tight boxes of the
    mapped discs and are dropped (``None``) when not fully inside a section.
    """
    if len(planted) != count - 1:
        raise ValueError(f"need {count - 1} planted transforms for {count} sections, got {len(planted)}")
    stains = list(artifacts.stains) if artifacts.stains else ["H&E"] * count
    if len(stains) != count:
        raise ValueError("one stain per section required")
    for s in stains:
        if s not in STAINS:
            raise ValueError(f"unknown stain {s!r}")
    pad = spec.pad
    base, blobs = _render_density(spec, pad)
    rng = np.random.default_rng([spec.seed, 7919])

    cumulative = [Affine2D.identity()]
    for p in planted:
        cumulative.append(compose(cumulative[-1], p))

    xs = np.arange(spec.width, dtype=float)
    ys = np.arange(spec.height, dtype=float)[:, None]
    sections, densities = [], []
    for t in range(count):
        inv = invert(cumulative[t]).m
        sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2] + pad
        sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2] + pad
        dens, _ = sample_bilinear(base, sx, sy, 0.0)
        dens = _occlude(dens, artifacts.occlusion_fraction, rng)
        rgb = STAINS[stains[t]].render(dens)
        if artifacts.noise_sigma > 0:
            rgb = rgb + rng.normal(0.0, artifacts.noise_sigma, rgb.shape)
        sections.append(np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8))
        densities.append(dens)

    tracks = []
    for b in blobs:
        row = []
        for t in range(count):
            box = ellipse_box(b, cumulative[t])
            inside = box.x_min >= 0 and box.y_min >= 0 and box.x_max <= spec.width - 1 and box.y_max <= spec.height - 1
            row.append(box if inside else None)
        tracks.append(row)
    return SeriesData(
        sections=sections,
        densities=densities,
        stains=stains,
        planted=list(planted),
        pair_transforms=[invert(p) for p in planted],
        cumulative=cumulative,
        tracks=tracks,
        blobs=blobs,
        spacing_um=spec.spacing_um,
    )


def section_ids(count: int) -> list[str]:
    return [f"s{t:02d}" for t in range(count)]


def series_tracks(series: SeriesData, ids: Sequence[str] | None = None) -> list[GlomerulusTrack]:
    ids = section_ids(len(series.sections)) if ids is None else list(ids)
    out = []
    for k, row in enumerate(series.tracks):
        boxes = {sid: box for sid, box in zip(ids, row) if box is not None}
        if boxes:
            out.append(GlomerulusTrack(f"g{k:02d}", boxes))
    return out


def write_case(series: SeriesData, out_dir, case_id: str = "synthetic") -> Path:
    """Write section PNGs, ``manifest.json``, ``annotations.csv`` and ``ground_truth.json``.

    Returns the manifest path.
    """
    from PIL import Image

    from .pipeline import Section, SeriesManifest, write_manifest
    from .propagation import propagate, select_middle

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    ids = section_ids(len(series.sections))
    sections = []
    for sid, rgb, stain in zip(ids, series.sections, series.stains):
        path = img_dir / f"{sid}.png"
        Image.fromarray(rgb).save(path)
        sections.append(Section(sid, path, stain, series.spacing_um))
    ann = out_dir / "annotations.csv"
    write_annotations(ann, case_id, series_tracks(series, ids))
    manifest = SeriesManifest(case_id, tuple(sections), ann)
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, manifest)
    middle = select_middle(len(ids))
    truth = {
        "case_id": case_id,
        "section_ids": ids,
        "middle_index": middle,
        "pair_transforms": [m.to_list() for m in series.pair_transforms],
        "global_transforms": [m.to_list() for m in propagate(series.pair_transforms, middle)],
        "planted": [m.to_list() for m in series.planted],
        "stains": series.stains,
    }
    (out_dir / "ground_truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    return manifest_path
