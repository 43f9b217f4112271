"""Keypoint stage: global affine from matched corners.

Harris corners on a smoothed image, 8x8 patch descriptors sampled on a
4-pixel lattice (optionally rotated to the patch's dominant orientation),
mutual-nearest-neighbour matching with a ratio test, then seeded RANSAC over
3-point samples followed by a least-squares refit on the consensus set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateConfiguration,
    DescriptorLengthMismatch,
    InsufficientMatches,
    NoConsensus,
    Stage1Failure,
)
from .geometry import Affine2D, ImageGrid, apply_points, fit_affine_least_squares


@dataclass(frozen=True)
class FeatureConfig:
    max_keypoints: int = 2048
    detection_threshold: float = 0.01
    ratio_test: float = 0.8
    ransac_iterations: int = 2000
    inlier_tolerance_px: float = 3.0
    min_inliers: int = 12
    seed: int = 0
    nms_radius: int = 5
    patch_size: int = 8
    patch_step: float = 4.0
    smoothing_sigma: float = 1.0
    integration_sigma: float = 2.0
    oriented: bool = True
    guided_min_inliers: int = 6
    guided_radius_px: float = 12.0

    def __post_init__(self):
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be positive")
        if not 0.0 < self.ratio_test <= 1.0:
            raise ValueError("ratio_test must lie in (0, 1]")
        if self.ransac_iterations < 1:
            raise ValueError("ransac_iterations must be positive")
        if not self.inlier_tolerance_px > 0:
            raise ValueError("inlier_tolerance_px must be positive")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be at least 3")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class Keypoint:
    position: tuple[float, float]
    response: float
    descriptor: np.ndarray
    orientation: float = 0.0


@dataclass(frozen=True, eq=False)
class Keypoints:
    """Column-wise keypoint storage: positions ``(N, 2)``, responses, descriptors ``(N, D)``."""

    positions: np.ndarray
    responses: np.ndarray
    descriptors: np.ndarray
    orientations: np.ndarray | None = None

    def __post_init__(self):
        if self.orientations is None:
            object.__setattr__(self, "orientations", np.zeros(len(self.positions)))

    @classmethod
    def empty(cls, descriptor_length: int = 64) -> "Keypoints":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, descriptor_length)))

    @classmethod
    def from_list(cls, kps: list[Keypoint]) -> "Keypoints":
        if not kps:
            return cls.empty()
        return cls(
            np.array([k.position for k in kps], dtype=float),
            np.array([k.response for k in kps], dtype=float),
            np.vstack([k.descriptor for k in kps]).astype(float),
            np.array([k.orientation for k in kps], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Keypoint:
        x, y = self.positions[i]
        return Keypoint((float(x), float(y)), float(self.responses[i]),
                        self.descriptors[i], float(self.orientations[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def descriptor_length(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True, eq=False)
class MatchSet:
    """One-to-one correspondences ``idx_a[k] <-> idx_b[k]`` with scores in [0, 1]."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    scores: np.ndarray
    inlier_mask: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), np.zeros(0))

    def __len__(self) -> int:
        return len(self.idx_a)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(s)) for a, b, s in zip(self.idx_a, self.idx_b, self.scores)]

    @property
    def inlier_count(self) -> int:
        return 0 if self.inlier_mask is None else int(np.count_nonzero(self.inlier_mask))


@dataclass
class Stage1Result:
    transform: Affine2D
    matches: MatchSet
    diagnostics: dict = field(default_factory=dict)


def harris_response(data: np.ndarray, smoothing_sigma: float = 1.0, integration_sigma: float = 2.0,
                    k: float = 0.04) -> np.ndarray:
    smooth = ndimage.gaussian_filter(data, smoothing_sigma)
    gx = ndimage.sobel(smooth, axis=1) / 8.0
    gy = ndimage.sobel(smooth, axis=0) / 8.0
    ixx = ndimage.gaussian_filter(gx * gx, integration_sigma)
    iyy = ndimage.gaussian_filter(gy * gy, integration_sigma)
    ixy = ndimage.gaussian_filter(gx * gy, integration_sigma)
    return ixx * iyy - ixy * ixy - k * (ixx + iyy) ** 2


def _subpixel_offsets(resp: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = resp.shape
    xm = np.clip(xs - 1, 0, w - 1)
    xp = np.clip(xs + 1, 0, w - 1)
    ym = np.clip(ys - 1, 0, h - 1)
    yp = np.clip(ys + 1, 0, h - 1)
    c = resp[ys, xs]
    dxx = resp[ys, xp] - 2 * c + resp[ys, xm]
    dyy = resp[yp, xs] - 2 * c + resp[ym, xs]
    dx = np.where(dxx < 0, -0.5 * (resp[ys, xp] - resp[ys, xm]) / np.where(dxx < 0, dxx, -1.0), 0.0)
    dy = np.where(dyy < 0, -0.5 * (resp[yp, xs] - resp[ym, xs]) / np.where(dyy < 0, dyy, -1.0), 0.0)
    return np.clip(dx, -0.5, 0.5), np.clip(dy, -0.5, 0.5)


def _patch_offsets(cfg: FeatureConfig) -> np.ndarray:
    n = cfg.patch_size
    ticks = (np.arange(n) - (n - 1) / 2.0) * cfg.patch_step
    gx, gy = np.meshgrid(ticks, ticks)
    return np.column_stack([gx.ravel(), gy.ravel()])


def _dominant_orientation(smooth: np.ndarray, positions: np.ndarray, radius: float) -> np.ndarray:
    """Angle of the intensity centroid around each keypoint."""
    r = int(math.ceil(radius))
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    inside = ox ** 2 + oy ** 2 <= radius ** 2
    ox, oy = ox[inside], oy[inside]
    xs = positions[:, :1] + ox[None, :]
    ys = positions[:, 1:] + oy[None, :]
    vals = ndimage.map_coordinates(smooth, [ys.ravel(), xs.ravel()], order=1, mode="nearest")
    vals = vals.reshape(xs.shape)
    vals = vals - vals.mean(axis=1, keepdims=True)
    return np.arctan2(vals @ oy, vals @ ox)


def describe(data: np.ndarray, positions: np.ndarray, cfg: FeatureConfig):
    """Descriptors for ``positions``; returns ``(descriptors, orientations, keep_mask)``."""
    offsets = _patch_offsets(cfg)
    if len(positions) == 0:
        return np.zeros((0, len(offsets))), np.zeros(0), np.zeros(0, dtype=bool)
    smooth = ndimage.gaussian_filter(data, cfg.patch_step / 2.0)
    if cfg.oriented:
        radius = cfg.patch_step * cfg.patch_size / 2.0
        theta = _dominant_orientation(smooth, positions, radius)
    else:
        theta = np.zeros(len(positions))
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    xs = positions[:, :1] + c * offsets[None, :, 0] - s * offsets[None, :, 1]
    ys = positions[:, 1:] + s * offsets[None, :, 0] + c * offsets[None, :, 1]
    vals = ndimage.map_coordinates(smooth, [ys.ravel(), xs.ravel()], order=1, mode="nearest")
    desc = vals.reshape(xs.shape)
    desc = desc - desc.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(desc, axis=1)
    keep = norms > 1e-9
    desc[keep] /= norms[keep, None]
    return desc, theta, keep


def detect_keypoints(image: ImageGrid, cfg: FeatureConfig = FeatureConfig()) -> Keypoints:
    """Harris corners sorted by descending response, at most ``cfg.max_keypoints``."""
    data = image.data
    resp = harris_response(data, cfg.smoothing_sigma, cfg.integration_sigma)
    peak = float(resp.max())
    n_desc = cfg.patch_size ** 2
    if not peak > 1e-12:
        return Keypoints.empty(n_desc)
    size = 2 * cfg.nms_radius + 1
    local_max = resp == ndimage.maximum_filter(resp, size=size, mode="constant", cval=-np.inf)
    cand = local_max & (resp > cfg.detection_threshold * peak)
    border = max(2, cfg.nms_radius)
    cand[:border, :] = False
    cand[-border:, :] = False
    cand[:, :border] = False
    cand[:, -border:] = False
    ys, xs = np.nonzero(cand)
    if len(ys) == 0:
        return Keypoints.empty(n_desc)
    r = resp[ys, xs]
    order = np.lexsort((xs, ys, -r))
    ys, xs, r = ys[order], xs[order], r[order]
    dx, dy = _subpixel_offsets(resp, ys, xs)
    positions = np.column_stack([xs + dx, ys + dy])
    desc, theta, keep = describe(data, positions, cfg)
    positions, r, desc, theta = positions[keep], r[keep], desc[keep], theta[keep]
    n = cfg.max_keypoints
    return Keypoints(positions[:n], r[:n], desc[:n], theta[:n])


def match_keypoints(a: Keypoints, b: Keypoints, cfg: FeatureConfig = FeatureConfig()) -> MatchSet:
    """Mutual nearest neighbours in descriptor space that pass the ratio test."""
    if len(a) and len(b) and a.descriptor_length != b.descriptor_length:
        raise DescriptorLengthMismatch(f"descriptor lengths differ: {a.descriptor_length} vs {b.descriptor_length}")
    if len(a) == 0 or len(b) == 0:
        return MatchSet.empty()
    sim = a.descriptors @ b.descriptors.T
    dist = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * sim))
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    ia = np.arange(len(a))
    mutual = nn_ba[nn_ab] == ia
    d1 = dist[ia, nn_ab]
    if len(b) > 1:
        d2 = np.partition(dist, 1, axis=1)[:, 1]
        ratio_ok = (d1 < cfg.ratio_test * d2) | (d1 == 0.0)
    else:
        ratio_ok = np.ones(len(a), dtype=bool)
    ok = mutual & ratio_ok
    idx_a = ia[ok]
    idx_b = nn_ab[ok]
    scores = np.clip(1.0 - d1[ok] / 2.0, 0.0, 1.0)
    return MatchSet(idx_a.astype(np.intp), idx_b.astype(np.intp), scores)


def _sample_triples(rng: np.random.Generator, n: int, iterations: int) -> np.ndarray:
    first = rng.integers(0, n, iterations)
    second = (first + rng.integers(1, n, iterations)) % n
    third = rng.integers(0, n - 2, iterations)
    lo = np.minimum(first, second)
    hi = np.maximum(first, second)
    third = third + (third >= lo)
    third = third + (third >= hi)
    return np.column_stack([first, second, third])


def _minimal_solutions(src: np.ndarray, dst: np.ndarray, triples: np.ndarray):
    """Affine maps through each 3-point sample; returns ``(params (K, 3, 2), ok)``."""
    s = src[triples]  # (K, 3, 2)
    d = dst[triples]
    design = np.concatenate([s, np.ones(s.shape[:2] + (1,))], axis=2)  # (K, 3, 3)
    e1 = s[:, 1] - s[:, 0]
    e2 = s[:, 2] - s[:, 0]
    area = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    ok = area > 1.0
    design[~ok] = np.eye(3)
    params = np.linalg.solve(design, d)
    return params, ok


def _residuals(t: Affine2D, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.linalg.norm(apply_points(t, src) - dst, axis=1)


def estimate_affine_ransac(a: Keypoints, b: Keypoints, matches: MatchSet,
                           cfg: FeatureConfig = FeatureConfig()) -> tuple[Affine2D, MatchSet]:
    """Robust affine mapping ``a`` positions onto ``b`` positions.

    Returns the refit transform and a copy of ``matches`` carrying an inlier
    mask computed under that transform.
    """
    n = len(matches)
    if n < 3:
        raise InsufficientMatches(f"need at least 3 matches, got {n}")
    src = a.positions[matches.idx_a]
    dst = b.positions[matches.idx_b]
    return _ransac_points(src, dst, matches, cfg)


def _ransac_points(src, dst, matches: MatchSet, cfg: FeatureConfig):
    n = len(src)
    tol = cfg.inlier_tolerance_px
    rng = np.random.default_rng(cfg.seed)
    triples = _sample_triples(rng, n, cfg.ransac_iterations)
    src_h = np.column_stack([src, np.ones(n)])
    best_count, best_cost, best_params = -1, np.inf, None
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, len(triples), chunk):
        params, ok = _minimal_solutions(src, dst, triples[start:start + chunk])
        pred = np.einsum("nj,kjd->knd", src_h, params)
        err = np.linalg.norm(pred - dst[None], axis=2)
        inl = err <= tol
        counts = np.where(ok, inl.sum(axis=1), -1)
        cost = np.where(inl, err, tol).sum(axis=1)
        for k in np.flatnonzero(counts == counts.max()):
            if counts[k] > best_count or (counts[k] == best_count and cost[k] < best_cost):
                best_count, best_cost, best_params = int(counts[k]), float(cost[k]), params[k]
    if best_params is None or best_count < 3:
        raise NoConsensus(f"no non-degenerate sample reached 3 inliers (best {max(best_count, 0)})",
                          best_inliers=max(best_count, 0))

    m = np.eye(3)
    m[:2, :] = best_params.T
    try:
        transform = Affine2D(m)
    except Exception as exc:
        raise NoConsensus(f"best sample is singular: {exc}", best_inliers=best_count) from exc
    mask = _residuals(transform, src, dst) <= tol
    for _ in range(10):
        if mask.sum() < 3:
            break
        try:
            refit = fit_affine_least_squares(src[mask], dst[mask])
        except DegenerateConfiguration:
            break
        new_mask = _residuals(refit, src, dst) <= tol
        if new_mask.sum() < mask.sum():
            break
        transform = refit
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    mask = _residuals(transform, src, dst) <= tol
    count = int(mask.sum())
    if count < cfg.min_inliers:
        raise NoConsensus(f"best consensus has {count} inliers, need {cfg.min_inliers}",
                          best_inliers=count, hypothesis=transform)
    return transform, MatchSet(matches.idx_a, matches.idx_b, matches.scores, mask)


def guided_matches(a: Keypoints, b: Keypoints, hypothesis: Affine2D, radius: float) -> MatchSet:
    """Mutual best descriptor matches among pairs that ``hypothesis`` places within ``radius`` px."""
    if len(a) == 0 or len(b) == 0:
        return MatchSet.empty()
    pred = apply_points(hypothesis, a.positions)
    near = np.linalg.norm(pred[:, None, :] - b.positions[None, :, :], axis=2) <= radius
    sim = np.where(near, a.descriptors @ b.descriptors.T, -np.inf)
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)
    ia = np.arange(len(a))
    ok = near[ia, nn_ab] & (nn_ba[nn_ab] == ia)
    d = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * sim[ia[ok], nn_ab[ok]]))
    return MatchSet(ia[ok].astype(np.intp), nn_ab[ok].astype(np.intp), np.clip(1.0 - d / 2.0, 0.0, 1.0))


def register_pair_features(fixed: ImageGrid, moving: ImageGrid,
                           cfg: FeatureConfig = FeatureConfig()) -> Stage1Result:
    """Transform mapping ``moving`` pixel coordinates into ``fixed``'s frame.

    When the ratio-tested matches leave RANSAC short of ``min_inliers`` but
    with a hypothesis of at least ``guided_min_inliers``, matching is redone
    within ``guided_radius_px`` of that hypothesis and RANSAC runs again.
    """
    kp_fixed = detect_keypoints(fixed, cfg)
    kp_moving = detect_keypoints(moving, cfg)
    diag = {"keypoints_fixed": len(kp_fixed), "keypoints_moving": len(kp_moving)}
    matches = match_keypoints(kp_moving, kp_fixed, cfg)
    diag["matches"] = len(matches)
    diag["guided"] = False
    try:
        transform, matches = estimate_affine_ransac(kp_moving, kp_fixed, matches, cfg)
    except (InsufficientMatches, NoConsensus) as exc:
        hyp = getattr(exc, "hypothesis", None)
        best = getattr(exc, "best_inliers", 0)
        if hyp is None or best < cfg.guided_min_inliers:
            diag["inliers"] = best
            raise Stage1Failure(f"keypoint stage failed: {exc}", diag) from exc
        guided = guided_matches(kp_moving, kp_fixed, hyp, cfg.guided_radius_px)
        diag["guided"] = True
        diag["guided_matches"] = len(guided)
        try:
            transform, matches = estimate_affine_ransac(kp_moving, kp_fixed, guided, cfg)
        except (InsufficientMatches, NoConsensus) as exc2:
            diag["inliers"] = getattr(exc2, "best_inliers", 0)
            raise Stage1Failure(f"keypoint stage failed after guided matching: {exc2}", diag) from exc2
    src = kp_moving.positions[matches.idx_a[matches.inlier_mask]]
    dst = kp_fixed.positions[matches.idx_b[matches.inlier_mask]]
    res = _residuals(transform, src, dst)
    diag["inliers"] = matches.inlier_count
    diag["rms_residual_px"] = float(np.sqrt(np.mean(res ** 2)))
    return Stage1Result(transform, matches, diag)
