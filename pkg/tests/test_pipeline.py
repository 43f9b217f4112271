import json

import numpy as np
import pytest
from PIL import Image

from serialreg.cli import main
from serialreg.errors import DecodeError, MissingImage, ParseError, WriteError
from serialreg.metrics import BoundingBox
from serialreg.pipeline import (
    GREEN,
    PipelineConfig,
    load_manifest,
    preprocess,
    render_overlay,
    run_pipeline,
)
from serialreg.synthetic import PhantomSpec, make_series, random_affine, write_case

SPEC = PhantomSpec(seed=21, width=256, height=96, blob_count=4)


@pytest.fixture(scope="module")
def case_dir(tmp_path_factory):
    rng = np.random.default_rng(0)
    planted = [random_affine(rng, SPEC.width, SPEC.height, 2.0, 0.03, (0.98, 1.02)) for _ in range(3)]
    series = make_series(SPEC, 4, planted)
    out = tmp_path_factory.mktemp("case")
    write_case(series, out, "demo")
    return out


def _write_manifest(tmp_path, sections):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"case_id": "c", "sections": sections}))
    return path


def _png(path, shape=(8, 8)):
    Image.fromarray(np.zeros(shape, dtype=np.uint8)).save(path)
    return path.name


def test_manifest_valid(case_dir):
    m = load_manifest(case_dir / "manifest.json")
    assert m.case_id == "demo"
    assert len(m.sections) == 4
    assert m.annotations_path == case_dir / "annotations.csv"


def test_manifest_duplicate_id(tmp_path):
    name = _png(tmp_path / "a.png")
    path = _write_manifest(tmp_path, [{"section_id": "x", "image_path": name}] * 2)
    with pytest.raises(ParseError, match="duplicate"):
        load_manifest(path)


def test_manifest_missing_image(tmp_path):
    path = _write_manifest(tmp_path, [{"section_id": "x", "image_path": "nope.png"}])
    with pytest.raises(MissingImage):
        load_manifest(path)


def test_manifest_bad_json_reports_position(tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"case_id": "c",\n "sections": [}')
    with pytest.raises(ParseError, match="line 2"):
        load_manifest(path)


def test_manifest_unknown_stain_and_bad_image(tmp_path):
    name = _png(tmp_path / "a.png")
    with pytest.raises(ParseError, match="stain_label"):
        load_manifest(_write_manifest(tmp_path, [{"section_id": "x", "image_path": name, "stain_label": "Foo"}]))
    (tmp_path / "b.png").write_bytes(b"not an image")
    with pytest.raises(DecodeError):
        load_manifest(_write_manifest(tmp_path, [{"section_id": "x", "image_path": "b.png"}]))


def test_preprocess_inverts_and_normalises():
    rgb = np.full((20, 30, 3), 255, dtype=np.uint8)
    rgb[5:15, 10:20] = 40
    img = preprocess(rgb)
    assert img.data[0, 0] == 0.0  # white glass maps to zero density
    assert img.data.max() == 1.0


def test_preprocess_downsamples_to_working_size():
    raw = np.random.default_rng(0).integers(0, 255, (2048, 4096, 3), dtype=np.uint8)
    img = preprocess(raw, spacing_um=0.25)
    assert img.shape == (1024, 512)
    assert img.spacing_um == pytest.approx(1.0)


def test_preprocess_rejects_bad_shape():
    with pytest.raises(DecodeError):
        preprocess(np.zeros((4, 4, 2)))


def test_config_from_dict():
    cfg = PipelineConfig.from_dict({"method": "stage1_only", "refine": {"metric": {"kind": "cc"}},
                                    "features": {"ratio_test": 0.7}})
    assert cfg.method == "stage1_only"
    assert cfg.refine.metric.kind == "cc"
    assert cfg.features.ratio_test == 0.7
    with pytest.raises(ParseError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PipelineConfig(method="nope")


def test_overlay_without_boxes_is_plain_image(tmp_path):
    data = np.random.default_rng(1).random((20, 30))
    render_overlay(data, [], tmp_path / "o.png")
    out = np.asarray(Image.open(tmp_path / "o.png"))
    assert out.shape == (20, 30, 3)
    assert np.array_equal(out[..., 0], np.round(data * 255).astype(np.uint8))


def test_overlay_strokes_and_clips(tmp_path):
    data = np.zeros((40, 40))
    render_overlay(data, [(BoundingBox(5, 5, 20, 20), GREEN), (BoundingBox(30, 30, 90, 90), GREEN)],
                   tmp_path / "o.png", width=1)
    out = np.asarray(Image.open(tmp_path / "o.png"))
    assert tuple(out[5, 10]) == GREEN
    assert tuple(out[10, 10]) == (0, 0, 0)
    assert tuple(out[39, 35]) == GREEN  # clipped edge lands on the frame border


def test_overlay_write_error(tmp_path):
    with pytest.raises(WriteError):
        render_overlay(np.zeros((4, 4)), [], tmp_path / "missing_dir" / "o.png")


def test_single_section_run(tmp_path):
    name = _png(tmp_path / "a.png", (32, 32))
    out = run_pipeline(load_manifest(_write_manifest(tmp_path, [{"section_id": "x", "image_path": name}])),
                       out_dir=tmp_path / "out")
    assert out.registration.middle_index == 0
    assert out.exit_code == 0
    reg = json.loads((tmp_path / "out" / "registration.json").read_text())
    assert reg["sections"][0]["matrix"] == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]


def test_run_is_deterministic_and_thread_safe(case_dir, tmp_path):
    manifest = load_manifest(case_dir / "manifest.json")
    run_pipeline(manifest, PipelineConfig(seed=3), tmp_path / "a")
    run_pipeline(manifest, PipelineConfig(seed=3), tmp_path / "b")
    run_pipeline(manifest, PipelineConfig(seed=3, workers=3), tmp_path / "c")
    a = (tmp_path / "a" / "registration.json").read_bytes()
    assert a == (tmp_path / "b" / "registration.json").read_bytes()
    assert a == (tmp_path / "c" / "registration.json").read_bytes()


def test_run_writes_artifacts(case_dir, tmp_path):
    manifest = load_manifest(case_dir / "manifest.json")
    cfg = PipelineConfig(emit_warped=True, emit_overlays=True, emit_traces=True)
    out = run_pipeline(manifest, cfg, tmp_path)
    for name in ("registration.json", "run_summary.json", "metrics_rows.csv", "metrics_summary.json",
                 "metrics_distributions.png", "distance_by_section.png", "convergence_trace.csv"):
        assert (tmp_path / name).exists(), name
    assert len(list((tmp_path / "warped").glob("*.png"))) == 4
    assert len(list((tmp_path / "overlays").glob("*.png"))) == 4
    assert out.metrics.summary["distance_mean_um"] < 2.0


def test_cli_register_and_evaluate(case_dir, tmp_path, capsys):
    code = main(["register", "--manifest", str(case_dir / "manifest.json"), "--out", str(tmp_path / "r")])
    assert code == 0
    code = main(["evaluate", "--registration", str(tmp_path / "r" / "registration.json"),
                 "--annotations", str(case_dir / "annotations.csv"), "--out", str(tmp_path / "e")])
    assert code == 0
    assert "distance mean" in capsys.readouterr().out
    summary = json.loads((tmp_path / "e" / "metrics_summary.json").read_text())
    assert {"distance_mean_um", "distance_median_um", "box_iou_mean", "circle_iou_mean"} <= set(summary)


def test_cli_compare(case_dir, tmp_path):
    code = main(["compare", "--manifest", str(case_dir / "manifest.json"), "--out", str(tmp_path),
                 "--methods", "two_stage", "stage1_only"])
    assert code == 0
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0].startswith("method,distance_mean_um")
    assert len(lines) == 3
    assert (tmp_path / "comparison.png").exists()


def test_cli_errors(tmp_path, capsys):
    assert main(["register", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_synth(tmp_path):
    code = main(["synth", "--out", str(tmp_path), "--sections", "3", "--width", "128", "--height", "64",
                 "--blobs", "2", "--stains", "cycle"])
    assert code == 0
    m = load_manifest(tmp_path / "manifest.json")
    assert [s.stain_label for s in m.sections] == ["H&E", "PAS", "JMS"]


def test_cli_fallback_exit_code(tmp_path):
    rng = np.random.default_rng(0)
    names = []
    for i in range(2):
        Image.fromarray(rng.integers(0, 255, (64, 64), dtype=np.uint8)).save(tmp_path / f"n{i}.png")
        names.append({"section_id": f"n{i}", "image_path": f"n{i}.png"})
    path = _write_manifest(tmp_path, names)
    assert main(["register", "--manifest", str(path), "--out", str(tmp_path / "o"), "--method", "stage1_only"]) == 2
