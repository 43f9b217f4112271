import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from serialreg.errors import NoMiddleAnnotation, ParseError
from serialreg.geometry import Affine2D
from serialreg.metrics import (
    SUMMARY_COLUMNS,
    BoundingBox,
    BoundingCircle,
    GlomerulusTrack,
    box_iou,
    center_distance,
    circle_intersection_area,
    circle_iou,
    evaluate_series,
    inscribed_circle,
    load_annotations,
    to_annotation,
    to_working,
    transform_box,
    write_annotations,
)
from serialreg.propagation import assemble_series

coord = st.floats(-50, 50)
size = st.floats(0.5, 40)
radius = st.floats(0.1, 20)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(size), draw(size)
    return BoundingBox(x, y, x + w, y + h)


@st.composite
def circles(draw):
    return BoundingCircle(draw(coord), draw(coord), draw(radius))


def test_transform_box_rotation_hull():
    out = transform_box(Affine2D.rotation(90, degrees=True), BoundingBox(0, 0, 2, 4))
    assert (out.x_min, out.y_min, out.x_max, out.y_max) == pytest.approx((-4, 0, 0, 2), abs=1e-12)


def test_box_iou_examples():
    a = BoundingBox(0, 0, 2, 2)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, BoundingBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert box_iou(a, BoundingBox(2, 0, 4, 2)) == 0.0  # touching edges
    assert box_iou(a, BoundingBox(5, 5, 6, 6)) == 0.0


def test_circle_iou_examples():
    c = BoundingCircle(0, 0, 1)
    assert circle_iou(c, c) == 1.0
    assert circle_iou(c, BoundingCircle(2, 0, 1)) == 0.0
    # unit circles one radius apart; a 1e7-sample Monte Carlo gives 0.2431
    assert circle_iou(c, BoundingCircle(1, 0, 1)) == pytest.approx(0.24302, abs=5e-5)
    # nested: area ratio
    assert circle_iou(c, BoundingCircle(0.1, 0, 0.5)) == pytest.approx(0.25, abs=1e-12)


def test_center_distance_examples():
    a = BoundingBox(0, 0, 2, 2)
    b = BoundingBox(3, 4, 5, 6)
    assert center_distance(a, b) == pytest.approx(5.0)
    assert center_distance(a, b, spacing_um=0.5) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        center_distance(a, b, spacing_um=0)


def test_inscribed_circle():
    c = inscribed_circle(BoundingBox(0, 0, 4, 2))
    assert (c.cx, c.cy, c.r) == (2.0, 1.0, 1.0)


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(2, 0, 1, 1)
    with pytest.raises(ValueError):
        BoundingCircle(0, 0, -1)


def test_circle_intersection_monte_carlo():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (400_000, 2))
    for _ in range(5):
        a = BoundingCircle(*rng.uniform(-0.3, 0.3, 2), rng.uniform(0.2, 0.6))
        b = BoundingCircle(*rng.uniform(-0.3, 0.3, 2), rng.uniform(0.2, 0.6))
        ina = np.hypot(pts[:, 0] - a.cx, pts[:, 1] - a.cy) <= a.r
        inb = np.hypot(pts[:, 0] - b.cx, pts[:, 1] - b.cy) <= b.r
        est = 4.0 * np.mean(ina & inb)
        assert circle_intersection_area(a, b) == pytest.approx(est, abs=5e-3)


def test_box_iou_raster():
    rng = np.random.default_rng(1)
    n = 1000
    grid = (np.arange(n) + 0.5) / n * 10
    for _ in range(10):
        xa = np.sort(rng.uniform(0, 10, 2))
        ya = np.sort(rng.uniform(0, 10, 2))
        xb = np.sort(rng.uniform(0, 10, 2))
        yb = np.sort(rng.uniform(0, 10, 2))
        a = BoundingBox(xa[0], ya[0], xa[1], ya[1])
        b = BoundingBox(xb[0], yb[0], xb[1], yb[1])
        # separable raster: each box is a product of 1-D indicator vectors
        ax, ay = (grid >= a.x_min) & (grid <= a.x_max), (grid >= a.y_min) & (grid <= a.y_max)
        bx, by = (grid >= b.x_min) & (grid <= b.x_max), (grid >= b.y_min) & (grid <= b.y_max)
        inter = (ax & bx).sum() * (ay & by).sum()
        union = ax.sum() * ay.sum() + bx.sum() * by.sum() - inter
        assert box_iou(a, b) == pytest.approx(inter / union, abs=5e-3)


@settings(max_examples=100, deadline=None)
@given(boxes(), boxes())
def test_box_iou_symmetric_bounded(a, b):
    v = box_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == box_iou(b, a)


@settings(max_examples=100, deadline=None)
@given(circles(), circles())
def test_circle_iou_symmetric_bounded(a, b):
    v = circle_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(circle_iou(b, a), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(circles(), circles())
def test_circle_intersection_continuous_at_containment(a, b):
    # area stays within the smaller disc and is continuous across tangency
    inter = circle_intersection_area(a, b)
    assert 0.0 <= inter <= math.pi * min(a.r, b.r) ** 2 + 1e-9
    d = math.hypot(a.cx - b.cx, a.cy - b.cy)
    assume(d > 1e-6)
    ux, uy = (b.cx - a.cx) / d, (b.cy - a.cy) / d
    for target in (abs(a.r - b.r), a.r + b.r):
        for eps in (-1e-7, 1e-7):
            dd = max(target + eps, 0.0)
            moved = BoundingCircle(a.cx + ux * dd, a.cy + uy * dd, b.r)
            at = BoundingCircle(a.cx + ux * target, a.cy + uy * target, b.r)
            assert circle_intersection_area(a, moved) == pytest.approx(
                circle_intersection_area(a, at), abs=1e-3 * max(1.0, a.r * b.r))


@settings(max_examples=60, deadline=None)
@given(boxes())
def test_contained_box_iou_is_area_ratio(a):
    inner = BoundingBox(a.x_min + 0.1 * a.width, a.y_min + 0.1 * a.height,
                        a.x_max - 0.1 * a.width, a.y_max - 0.1 * a.height)
    assert box_iou(a, inner) == pytest.approx(inner.area / a.area, rel=1e-9)


def test_working_annotation_round_trip():
    b = BoundingBox(10.0, 20.0, 50.0, 70.0)
    back = to_annotation(to_working(b, 4.0), 4.0)
    assert (back.x_min, back.y_min, back.x_max, back.y_max) == pytest.approx((10, 20, 50, 70), abs=1e-12)
    assert to_working(b, 1.0) is b


def _series(pairs, **kwargs):
    ids = [f"s{i}" for i in range(len(pairs) + 1)]
    return assemble_series(ids, pairs, **kwargs)


def test_evaluate_identity_registration():
    reg = _series([Affine2D.identity()] * 2)
    box = BoundingBox(10, 10, 30, 30)
    tracks = [GlomerulusTrack("g0", {"s0": box, "s1": box, "s2": box})]
    report = evaluate_series(tracks, reg)
    assert len(report.rows) == 2
    assert report.summary["distance_mean_um"] == 0.0
    assert report.summary["box_iou_mean"] == 1.0
    assert report.summary["circle_iou_mean"] == 1.0
    assert set(SUMMARY_COLUMNS) <= set(report.summary)


def test_evaluate_offset_gives_distance():
    reg = _series([Affine2D.identity()], spacing_um=2.0)
    tracks = [GlomerulusTrack("g0", {"s0": BoundingBox(0, 0, 10, 10), "s1": BoundingBox(15, 20, 25, 30)})]
    report = evaluate_series(tracks, reg, spacing_um=2.0)
    # s1 is the middle; centre offset (15, 20) px = 25 px = 50 um
    assert report.rows[0]["distance_um"] == pytest.approx(50.0)
    assert report.rows[0]["box_iou"] == 0.0


def test_evaluate_uses_registration():
    reg = _series([Affine2D.translation(-5, 0)])
    tracks = [GlomerulusTrack("g0", {"s0": BoundingBox(0, 0, 10, 10), "s1": BoundingBox(5, 0, 15, 10)})]
    # s0 -> s1 is the inverse of the pair map, a +5 shift
    report = evaluate_series(tracks, reg)
    assert report.rows[0]["distance_um"] == pytest.approx(0.0, abs=1e-12)


def test_evaluate_without_middle_annotation():
    reg = _series([Affine2D.identity()] * 2)
    tracks = [GlomerulusTrack("g0", {"s0": BoundingBox(0, 0, 1, 1), "s2": BoundingBox(0, 0, 1, 1)})]
    with pytest.raises(NoMiddleAnnotation):
        evaluate_series(tracks, reg)


def test_report_write(tmp_path):
    reg = _series([Affine2D.identity()])
    box = BoundingBox(0, 0, 4, 4)
    report = evaluate_series([GlomerulusTrack("g0", {"s0": box, "s1": box})], reg)
    report.write(tmp_path, "two_stage")
    assert (tmp_path / "metrics_rows.csv").read_text().splitlines()[0].startswith("glomerulus_id")
    assert '"method": "two_stage"' in (tmp_path / "metrics_summary.json").read_text()


def test_annotation_csv_round_trip(tmp_path):
    tracks = [GlomerulusTrack("g0", {"s0": BoundingBox(1.5, 2.25, 10, 12), "s1": BoundingBox(3, 4, 5, 6)}),
              GlomerulusTrack("g1", {"s1": BoundingBox(0, 0, 1, 1)})]
    path = tmp_path / "ann.csv"
    write_annotations(path, "case", tracks)
    loaded = load_annotations(path)
    assert list(loaded) == ["case"]
    got = {t.glomerulus_id: t.boxes for t in loaded["case"]}
    assert got["g0"]["s0"] == BoundingBox(1.5, 2.25, 10, 12)
    assert set(got["g1"]) == {"s1"}


def test_annotation_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("case_id,section_id\nx,y\n")
    with pytest.raises(ParseError):
        load_annotations(path)
    path.write_text("case_id,section_id,glomerulus_id,x_min,y_min,x_max,y_max\nc,s,g,a,0,1,1\n")
    with pytest.raises(ParseError):
        load_annotations(path)
