"""Intensity stage: multi-resolution affine refinement of MI or CC.

The optimiser is a Hooke-Jeeves pattern search over six parameters
(x/y translation, rotation, log x/y scale, shear) of a correction applied
about the fixed image centre on top of the current estimate. Steps are
expressed so that a unit step moves the image corners by about one pixel at
the level being optimised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateVariance, EmptyOverlap, ShapeMismatch, SingularTransform
from .geometry import Affine2D, ImageGrid, compose, invert, warp_array

MIN_PYRAMID_SIDE = 16
PARAM_NAMES = ("tx", "ty", "rotation", "log_sx", "log_sy", "shear")


@dataclass(frozen=True)
class SimilarityMetric:
    kind: str = "mi"  # "mi" or "cc"
    bins: int = 32

    def __post_init__(self):
        if self.kind not in ("mi", "cc"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.bins < 2:
            raise ValueError("bins must be at least 2")


@dataclass(frozen=True)
class RefineConfig:
    metric: SimilarityMetric = SimilarityMetric()
    pyramid_levels: int = 3
    max_iterations_per_level: int = 200
    parameter_scales: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    convergence_tol: float = 1e-6
    step_shrink: float = 0.5
    initial_step_px: float = 2.0
    min_step_px: float = 0.05
    min_overlap: float = 0.25
    smoothing_sigma: float = 1.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be at least 1")
        if len(self.parameter_scales) != 6:
            raise ValueError("parameter_scales needs 6 entries")
        if not 0.0 < self.step_shrink < 1.0:
            raise ValueError("step_shrink must lie in (0, 1)")
        if self.max_iterations_per_level < 1:
            raise ValueError("max_iterations_per_level must be positive")


@dataclass(frozen=True)
class TraceEntry:
    level: int
    iteration: int
    metric: float
    params: tuple[float, ...]


@dataclass
class RefineResult:
    transform: Affine2D
    trace: list[TraceEntry] = field(default_factory=list)
    init_metric: float = float("nan")
    final_metric: float = float("nan")
    iterations: int = 0
    evaluations: int = 0

    def level_trace(self, level: int) -> list[float]:
        return [e.metric for e in self.trace if e.level == level]


def _check_pair(a: np.ndarray, b: np.ndarray, mask):
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        return a.ravel(), b.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} does not match image shape {a.shape}")
    if not mask.any():
        raise EmptyOverlap("overlap mask selects no pixels")
    return a[mask], b[mask]


def _as_array(img) -> np.ndarray:
    return img.data if isinstance(img, ImageGrid) else np.asarray(img, dtype=float)


def bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bin index over [0, 1]."""
    return np.minimum((values * bins).astype(np.intp), bins - 1)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _mi_from_indices(ia: np.ndarray, ib: np.ndarray, bins: int) -> float:
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    n = joint.sum()
    if n == 0:
        raise EmptyOverlap("no overlapping pixels")
    pab = joint / n
    pa = pab.sum(axis=1)
    pb = pab.sum(axis=0)
    nz = pab > 0
    outer = np.outer(pa, pb)
    return float(np.sum(pab[nz] * np.log(pab[nz] / outer[nz])))


def entropy(image, bins: int = 32, overlap_mask=None) -> float:
    """Shannon entropy (nats) of the equal-width intensity histogram."""
    a = _as_array(image)
    vals = a[np.asarray(overlap_mask, dtype=bool)] if overlap_mask is not None else a.ravel()
    if vals.size == 0:
        raise EmptyOverlap("overlap mask selects no pixels")
    counts = np.bincount(bin_indices(vals, bins), minlength=bins)
    return _entropy(counts / counts.sum())


def mutual_information(a, b, bins: int = 32, overlap_mask=None) -> float:
    """Histogram mutual information in nats over the (masked) overlap."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    va, vb = _check_pair(_as_array(a), _as_array(b), overlap_mask)
    if va.size == 0:
        raise EmptyOverlap("no overlapping pixels")
    mi = _mi_from_indices(bin_indices(va, bins), bin_indices(vb, bins), bins)
    return max(mi, 0.0) if mi > -1e-12 else mi


def cross_correlation(a, b, overlap_mask=None) -> float:
    """Pearson correlation of intensities over the (masked) overlap."""
    va, vb = _check_pair(_as_array(a), _as_array(b), overlap_mask)
    da = va - va.mean()
    db = vb - vb.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    if sa <= 1e-12 * math.sqrt(va.size) or sb <= 1e-12 * math.sqrt(vb.size):
        raise DegenerateVariance("an input is constant over the overlap")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def build_pyramid(image: ImageGrid, levels: int, sigma: float = 1.0) -> list[ImageGrid]:
    """Coarse-to-fine list; each coarser level is smoothed then subsampled by 2.

    Level ``k`` pixel ``x`` sits at ``2 ** (n - 1 - k) * x`` in the finest
    level. Levels are dropped while the coarsest side would fall under 16 px.
    """
    if levels < 1:
        raise ValueError("levels must be at least 1")
    while levels > 1 and min(image.width, image.height) / 2 ** (levels - 1) < MIN_PYRAMID_SIDE:
        levels -= 1
    out = [image]
    current = image
    for _ in range(levels - 1):
        smooth = ndimage.gaussian_filter(current.data, sigma, mode="nearest")
        current = ImageGrid(np.clip(smooth[::2, ::2], 0.0, 1.0), current.spacing_um * 2.0)
        out.append(current)
    return out[::-1]


def _to_level(t: Affine2D, factor: float) -> Affine2D:
    if factor == 1.0:
        return t
    m = t.m.copy()
    m[:2, 2] /= factor
    return Affine2D(m)


def _from_level(t: Affine2D, factor: float) -> Affine2D:
    if factor == 1.0:
        return t
    m = t.m.copy()
    m[:2, 2] *= factor
    return Affine2D(m)


def correction(params, center) -> Affine2D:
    """Correction transform for a parameter vector, acting about ``center``."""
    tx, ty, rot, lsx, lsy, shear = params
    c, s = math.cos(rot), math.sin(rot)
    rot_m = np.array([[c, -s], [s, c]])
    lin = rot_m @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([math.exp(lsx), math.exp(lsy)])
    cx, cy = center
    off = np.array([cx + tx, cy + ty]) - lin @ np.array([cx, cy])
    return Affine2D.from_linear(lin, off)


class _LevelObjective:
    def __init__(self, fixed: ImageGrid, moving: ImageGrid, cfg: RefineConfig):
        self.fixed = fixed.data
        self.moving = moving.data
        self.shape = fixed.shape
        self.metric = cfg.metric
        self.min_count = cfg.min_overlap * fixed.data.size
        if self.metric.kind == "mi":
            self.fixed_bins = bin_indices(self.fixed.ravel(), self.metric.bins)
        self.evaluations = 0

    def __call__(self, t: Affine2D) -> float:
        self.evaluations += 1
        try:
            warped, valid = warp_array(t, self.moving, self.shape, 0.0)
        except SingularTransform:
            return -np.inf
        valid = valid.ravel()
        if valid.sum() < self.min_count:
            return -np.inf
        w = warped.ravel()[valid]
        if self.metric.kind == "mi":
            return _mi_from_indices(self.fixed_bins[valid], bin_indices(w, self.metric.bins), self.metric.bins)
        f = self.fixed.ravel()[valid]
        try:
            return cross_correlation(f, w)
        except DegenerateVariance:
            return -np.inf


def _pattern_search(objective, base: Affine2D, center, steps0: np.ndarray, cfg: RefineConfig,
                    min_steps: np.ndarray, level: int, trace: list[TraceEntry]):
    def evaluate(p):
        try:
            return objective(compose(base, correction(p, center)))
        except SingularTransform:
            return -np.inf

    p = np.zeros(6)
    best = evaluate(p)
    trace.append(TraceEntry(level, 0, best, tuple(p)))
    steps = steps0.copy()
    iterations = 0

    def better(v, ref):
        return v > ref + cfg.convergence_tol * abs(ref)

    while iterations < cfg.max_iterations_per_level:
        iterations += 1
        start = p.copy()
        start_val = best
        for i in range(6):
            for sign in (1.0, -1.0):
                cand = p.copy()
                cand[i] += sign * steps[i]
                v = evaluate(cand)
                if better(v, best):
                    p, best = cand, v
                    break
        if better(best, start_val):
            # pattern move along the successful sweep direction
            jump = p + (p - start)
            v = evaluate(jump)
            if better(v, best):
                p, best = jump, v
            trace.append(TraceEntry(level, iterations, best, tuple(p)))
        else:
            steps = steps * cfg.step_shrink
            if np.all(steps < min_steps):
                break
    return p, best, iterations


def refine_affine(fixed: ImageGrid, moving: ImageGrid, init: Affine2D | None = None,
                  cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """Maximise the similarity of ``fixed`` and ``moving`` warped into it.

    ``init`` maps moving coordinates into fixed coordinates, as does the
    returned transform. The finest-level metric of the result is never below
    that of ``init``.
    """
    init = Affine2D.identity() if init is None else init
    invert(init)  # raises SingularTransform for an unusable start
    pf = build_pyramid(fixed, cfg.pyramid_levels, cfg.smoothing_sigma)
    pm = build_pyramid(moving, len(pf), cfg.smoothing_sigma)
    if len(pm) != len(pf):
        n = min(len(pf), len(pm))
        pf, pm = pf[-n:], pm[-n:]
    n_levels = len(pf)
    scales = np.asarray(cfg.parameter_scales, dtype=float)

    current = init
    trace: list[TraceEntry] = []
    iterations = evaluations = 0
    init_metric = final_metric = float("nan")
    for level, (f_img, m_img) in enumerate(zip(pf, pm)):
        factor = float(2 ** (n_levels - 1 - level))
        objective = _LevelObjective(f_img, m_img, cfg)
        cand_current = _to_level(current, factor)
        v_current = objective(cand_current)
        base = cand_current
        v_init = v_current
        if current is not init:
            init_level = _to_level(init, factor)
            v_init = objective(init_level)
            if v_init > v_current:
                base = init_level
        if level == n_levels - 1:
            init_metric = v_init

        w, h = f_img.shape
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
        radius = max(math.hypot(w - 1, h - 1) / 2.0, 1.0)
        unit = np.array([1.0, 1.0, 1.0 / radius, 1.0 / radius, 1.0 / radius, 1.0 / radius])
        steps0 = cfg.initial_step_px * unit * scales
        min_steps = cfg.min_step_px * unit * scales
        p, best, its = _pattern_search(objective, base, center, steps0, cfg, min_steps, level, trace)
        iterations += its
        evaluations += objective.evaluations
        current = _from_level(compose(base, correction(p, center)), factor)
        final_metric = best
    return RefineResult(current, trace, init_metric, final_metric, iterations, evaluations)
