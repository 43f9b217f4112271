"""Homogeneous 2D affine transforms, image resampling and affine fitting.

Coordinates are ``(x, y)`` in pixels with pixel centres on integers; image
arrays are indexed ``data[y, x]``. A transform maps points of one frame into
another. ``compose(first, second)`` applies ``first`` and then ``second``,
which is the matrix product ``second.m @ first.m``.

Transforms serialize as a row-major list of nine numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InsufficientPoints,
    ShapeMismatch,
    SingularTransform,
)

SINGULAR_THRESHOLD = 1e-8
CONDITION_CAP = 1e10

Point2D = Tuple[float, float]


@dataclass(frozen=True, eq=False)
class Affine2D:
    """3x3 homogeneous affine matrix (row-major, bottom row ``0 0 1``)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("affine entries must be finite")
        if m[2, 0] != 0.0 or m[2, 1] != 0.0 or m[2, 2] != 1.0:
            raise ValueError(f"affine bottom row must be (0, 0, 1), got {m[2]}")
        if m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0] == 0.0:
            raise SingularTransform("linear block has zero determinant")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    # constructors
    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Affine2D":
        return cls([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])

    @classmethod
    def rotation(cls, angle: float, center: Point2D = (0.0, 0.0), degrees: bool = False) -> "Affine2D":
        """Counter-clockwise rotation (in x-right, y-up terms) about ``center``."""
        if degrees:
            angle = math.radians(angle)
        c, s = math.cos(angle), math.sin(angle)
        cx, cy = center
        return cls([
            [c, -s, cx - c * cx + s * cy],
            [s, c, cy - s * cx - c * cy],
            [0.0, 0.0, 1.0],
        ])

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None, center: Point2D = (0.0, 0.0)) -> "Affine2D":
        sy = sx if sy is None else sy
        cx, cy = center
        return cls([[sx, 0.0, cx - sx * cx], [0.0, sy, cy - sy * cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_linear(cls, linear, offset=(0.0, 0.0)) -> "Affine2D":
        m = np.eye(3)
        m[:2, :2] = linear
        m[:2, 2] = offset
        return cls(m)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Affine2D":
        if len(values) != 9:
            raise ValueError(f"expected 9 values, got {len(values)}")
        return cls(np.asarray(values, dtype=float).reshape(3, 3))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.m.ravel()]

    @property
    def linear(self) -> np.ndarray:
        return self.m[:2, :2]

    @property
    def offset(self) -> np.ndarray:
        return self.m[:2, 2]

    @property
    def det(self) -> float:
        return float(self.m[0, 0] * self.m[1, 1] - self.m[0, 1] * self.m[1, 0])

    def then(self, other: "Affine2D") -> "Affine2D":
        return compose(self, other)

    def inverse(self) -> "Affine2D":
        return invert(self)

    def allclose(self, other: "Affine2D", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.m, other.m, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        rows = ", ".join("[" + ", ".join(f"{v:.6g}" for v in row) + "]" for row in self.m[:2])
        return f"Affine2D({rows})"


def compose(first: Affine2D, second: Affine2D) -> Affine2D:
    """Transform equivalent to applying ``first`` then ``second``."""
    m = second.m @ first.m
    m[2] = (0.0, 0.0, 1.0)
    return Affine2D(m)


def compose_all(transforms: Sequence[Affine2D]) -> Affine2D:
    """Apply ``transforms[0]`` first, then the rest in order."""
    out = Affine2D.identity()
    for t in transforms:
        out = compose(out, t)
    return out


def invert(a: Affine2D, threshold: float = SINGULAR_THRESHOLD) -> Affine2D:
    det = a.det
    if not abs(det) > threshold:
        raise SingularTransform(f"|det| = {abs(det):.3g} is below {threshold:g}")
    (p, q), (r, s) = a.linear
    inv = np.array([[s, -q], [-r, p]]) / det
    return Affine2D.from_linear(inv, -inv @ a.offset)


def apply_point(a: Affine2D, p: Point2D) -> Point2D:
    m = a.m
    x, y = float(p[0]), float(p[1])
    return (m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2])


def apply_points(a: Affine2D, pts) -> np.ndarray:
    """Map an ``(N, 2)`` array of points."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return pts @ a.linear.T + a.offset


def corner_points(width: int, height: int) -> np.ndarray:
    """The four pixel-centre corners of a ``width x height`` image."""
    return np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])


def corner_error(estimate: Affine2D, truth: Affine2D, width: int, height: int) -> np.ndarray:
    """Per-corner displacement between two transforms over an image frame."""
    c = corner_points(width, height)
    return np.linalg.norm(apply_points(estimate, c) - apply_points(truth, c), axis=1)


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Single-channel image with intensities in [0, 1].

    ``data`` has shape ``(height, width)``. ``spacing_um`` is microns per
    pixel at the resolution of ``data``.
    """

    data: np.ndarray
    spacing_um: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2 or data.size == 0:
            raise ValueError(f"image data must be a non-empty 2D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        if not self.spacing_um > 0:
            raise ValueError("spacing_um must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_um", float(self.spacing_um))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """``(width, height)``, the order used by warp targets."""
        return (self.width, self.height)


def sample_bilinear(data: np.ndarray, x: np.ndarray, y: np.ndarray, fill: float = 0.0):
    """Bilinearly sample ``data`` at ``(x, y)``.

    Returns ``(values, valid)`` where ``valid`` marks samples inside the
    pixel-centre hull of ``data``; invalid samples get ``fill``.
    """
    h, w = data.shape
    valid = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    fx = xc - x0
    fy = yc - y0
    flat = data.ravel()
    i00 = y0 * w + x0
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    v00 = flat.take(i00)
    v01 = flat.take(i00 + dx)
    v10 = flat.take(i00 + dy)
    v11 = flat.take(i00 + dy + dx)
    top = v00 + (v01 - v00) * fx
    bottom = v10 + (v11 - v10) * fx
    out = top + (bottom - top) * fy
    out[~valid] = fill
    return out, valid


def warp_array(a: Affine2D, data: np.ndarray, target_shape: tuple[int, int], fill: float = 0.0):
    """Resample ``data`` into a ``(width, height)`` target frame through ``a``.

    Output pixel ``(x, y)`` reads ``data`` at ``invert(a)(x, y)``. Returns
    ``(out, valid)`` arrays of shape ``(height, width)``.
    """
    w, h = target_shape
    if w <= 0 or h <= 0:
        raise ValueError("target shape must be positive")
    inv = invert(a)
    m = inv.m
    xs = np.arange(w, dtype=float)
    ys = np.arange(h, dtype=float)[:, None]
    sx = m[0, 0] * xs + (m[0, 1] * ys + m[0, 2])
    sy = m[1, 0] * xs + (m[1, 1] * ys + m[1, 2])
    return sample_bilinear(data, sx, sy, fill)


def warp_image(a: Affine2D, moving: ImageGrid, target_shape: tuple[int, int] | None = None,
               fill: float = 0.0, spacing_um: float | None = None) -> ImageGrid:
    """Resample ``moving`` into the frame that ``a`` maps it to."""
    target_shape = moving.shape if target_shape is None else target_shape
    out, _ = warp_array(a, moving.data, target_shape, fill)
    if 0.0 <= fill <= 1.0:
        np.clip(out, 0.0, 1.0, out=out)
    return ImageGrid(out, moving.spacing_um if spacing_um is None else spacing_um)


def _normalizing(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    spread = np.sqrt(((pts - centroid) ** 2).sum(axis=1).mean())
    s = 1.0 if spread == 0 else math.sqrt(2.0) / spread
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def fit_affine_least_squares(src, dst, condition_cap: float = CONDITION_CAP) -> Affine2D:
    """Affine transform minimising the summed squared residual ``|A(src) - dst|^2``.

    Points are normalised (centred, unit RMS radius) before solving so the
    conditioning check is independent of the pixel scale.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ShapeMismatch(f"{len(src)} source points vs {len(dst)} destination points")
    if len(src) < 3:
        raise InsufficientPoints(f"need at least 3 point pairs, got {len(src)}")
    ns = _normalizing(src)
    nd = _normalizing(dst)
    xs = src @ ns[:2, :2].T + ns[:2, 2]
    xd = dst @ nd[:2, :2].T + nd[:2, 2]
    design = np.column_stack([xs, np.ones(len(xs))])
    normal = design.T @ design
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > condition_cap:
        raise DegenerateConfiguration(f"point configuration is degenerate (condition number {cond:.3g})")
    sol = np.linalg.solve(normal, design.T @ xd)  # (3, 2)
    m = np.eye(3)
    m[:2, :] = sol.T
    # undo normalisation: dst = nd^-1 . m . ns . src
    nd_inv = np.array([[1.0 / nd[0, 0], 0.0, -nd[0, 2] / nd[0, 0]],
                       [0.0, 1.0 / nd[1, 1], -nd[1, 2] / nd[1, 1]],
                       [0.0, 0.0, 1.0]])
    full = nd_inv @ m @ ns
    full[2] = (0.0, 0.0, 1.0)
    return Affine2D(full)
