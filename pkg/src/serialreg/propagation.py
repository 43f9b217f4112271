"""Pairwise two-stage registration and propagation into the middle section's frame.

``pair_transforms[t]`` maps section ``t + 1`` into section ``t``. The global
transform of section ``t`` maps its pixels into the middle section by
chaining pairwise maps toward the middle, inverting on the low side.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

from .errors import EmptySeries, PairRegistrationFailure, Stage1Failure
from .features import FeatureConfig, register_pair_features
from .geometry import Affine2D, ImageGrid, compose, compose_all, invert
from .intensity import RefineConfig, refine_affine

METHODS = ("two_stage", "stage1_only", "stage2_only")


@dataclass(frozen=True)
class PairConfig:
    features: FeatureConfig = FeatureConfig()
    refine: RefineConfig = RefineConfig()
    use_stage1: bool = True
    use_stage2: bool = True

    @classmethod
    def for_method(cls, method: str, features: FeatureConfig = FeatureConfig(),
                   refine: RefineConfig = RefineConfig()) -> "PairConfig":
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        return cls(features, refine, use_stage1=method != "stage2_only", use_stage2=method != "stage1_only")


@dataclass
class PairResult:
    transform: Affine2D
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    @property
    def fell_back(self) -> bool:
        return bool(self.diagnostics.get("fallback"))


def register_pair(fixed: ImageGrid, moving: ImageGrid, cfg: PairConfig = PairConfig()) -> PairResult:
    """Transform mapping ``moving`` into ``fixed`` (stage-2 refinement of stage 1).

    A failed keypoint stage falls back to an identity start (or, with stage 2
    disabled, to the identity itself); the fallback is flagged in
    ``diagnostics``.
    """
    if not (cfg.use_stage1 or cfg.use_stage2):
        raise ValueError("at least one stage must be enabled")
    diag: dict = {"stage1": None, "stage2": None, "fallback": False}
    timings: dict = {}
    init = Affine2D.identity()
    stage1_error = None
    if cfg.use_stage1:
        t0 = time.perf_counter()
        try:
            s1 = register_pair_features(fixed, moving, cfg.features)
            init = s1.transform
            diag["stage1"] = {"status": "ok", **s1.diagnostics, "matrix": init.to_list()}
        except Stage1Failure as exc:
            stage1_error = exc
            diag["stage1"] = {"status": "failed", "reason": str(exc), **exc.diagnostics}
            diag["fallback"] = True
        timings["stage1"] = time.perf_counter() - t0
    if not cfg.use_stage2:
        return PairResult(init, diag, timings)

    t0 = time.perf_counter()
    try:
        res = refine_affine(fixed, moving, init, cfg.refine)
    except Exception as exc:
        if stage1_error is not None or not cfg.use_stage1:
            raise PairRegistrationFailure(f"both stages failed: {stage1_error}; {exc}") from exc
        diag["stage2"] = {"status": "failed", "reason": str(exc)}
        diag["fallback"] = True
        return PairResult(init, diag, timings)
    timings["stage2"] = time.perf_counter() - t0
    diag["stage2"] = {
        "status": "ok",
        "metric": cfg.refine.metric.kind,
        "init_metric": res.init_metric,
        "final_metric": res.final_metric,
        "iterations": res.iterations,
        "evaluations": res.evaluations,
        "correction": compose(invert(init), res.transform).to_list(),
    }
    return PairResult(res.transform, diag, timings, res.trace)


def select_middle(count: int) -> int:
    if count < 1:
        raise EmptySeries("series has no sections")
    return count // 2


def propagate(pair_transforms: Sequence[Affine2D], middle_index: int) -> list[Affine2D]:
    """Per-section transforms into the frame of section ``middle_index``."""
    count = len(pair_transforms) + 1
    if not 0 <= middle_index < count:
        raise IndexError(f"middle index {middle_index} outside 0..{count - 1}")
    out: list[Affine2D] = [Affine2D.identity()] * count
    # above the middle: t -> t-1 -> ... -> middle
    acc = Affine2D.identity()
    for t in range(middle_index + 1, count):
        acc = compose(pair_transforms[t - 1], acc)
        out[t] = acc
    # below the middle: invert the chain middle -> ... -> t
    for t in range(middle_index - 1, -1, -1):
        chain = compose_all([pair_transforms[i] for i in range(middle_index - 1, t - 1, -1)])
        out[t] = invert(chain)
    return out


@dataclass
class SeriesRegistration:
    section_ids: list[str]
    pair_transforms: list[Affine2D]
    middle_index: int
    global_transforms: list[Affine2D]
    pair_diagnostics: list[dict] = field(default_factory=list)
    downsample: float = 1.0
    spacing_um: float = 1.0
    case_id: str = ""
    method: str = "two_stage"

    def __post_init__(self):
        n = len(self.section_ids)
        if len(self.pair_transforms) != n - 1 or len(self.global_transforms) != n:
            raise ValueError("transform counts do not match the number of sections")
        if not 0 <= self.middle_index < n:
            raise ValueError("middle index out of range")

    @property
    def working_spacing_um(self) -> float:
        return self.spacing_um * self.downsample

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "method": self.method,
            "section_ids": list(self.section_ids),
            "middle_index": self.middle_index,
            "middle_section_id": self.section_ids[self.middle_index],
            "downsample": self.downsample,
            "spacing_um": self.spacing_um,
            "working_spacing_um": self.working_spacing_um,
            "matrix_layout": "row-major 3x3, working-resolution pixels (x, y)",
            "pairs": [
                {"fixed": self.section_ids[t], "moving": self.section_ids[t + 1],
                 "matrix": m.to_list(), "diagnostics": self.pair_diagnostics[t] if self.pair_diagnostics else {}}
                for t, m in enumerate(self.pair_transforms)
            ],
            "sections": [
                {"section_id": sid, "matrix": m.to_list()}
                for sid, m in zip(self.section_ids, self.global_transforms)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SeriesRegistration":
        return cls(
            section_ids=[str(s["section_id"]) for s in d["sections"]],
            pair_transforms=[Affine2D.from_list(p["matrix"]) for p in d["pairs"]],
            middle_index=int(d["middle_index"]),
            global_transforms=[Affine2D.from_list(s["matrix"]) for s in d["sections"]],
            pair_diagnostics=[p.get("diagnostics", {}) for p in d["pairs"]],
            downsample=float(d.get("downsample", 1.0)),
            spacing_um=float(d.get("spacing_um", 1.0)),
            case_id=str(d.get("case_id", "")),
            method=str(d.get("method", "two_stage")),
        )

    @classmethod
    def from_json(cls, text: str) -> "SeriesRegistration":
        return cls.from_dict(json.loads(text))


def assemble_series(section_ids: Sequence[str], pair_transforms: Sequence[Affine2D], **kwargs) -> SeriesRegistration:
    section_ids = [str(s) for s in section_ids]
    if len(pair_transforms) != len(section_ids) - 1:
        raise ValueError(f"{len(section_ids)} sections need {len(section_ids) - 1} pair transforms, "
                         f"got {len(pair_transforms)}")
    middle = select_middle(len(section_ids))
    return SeriesRegistration(section_ids, list(pair_transforms), middle,
                              propagate(pair_transforms, middle), **kwargs)
