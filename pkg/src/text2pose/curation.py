"""Clip filters over manifests: video quality, human quality and caption quality stages.

External-model outputs (optical flow, text boxes, aesthetics, person detection) are
read from the manifest. Laplacian blur and every pose statistic are computed here.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .pose import (BODY, FACE_POINTS, FrameDims, PoseLengthError, PoseSequence, load_pose_sequence,
                   uniform_sample_indices)

log = logging.getLogger(__name__)

VIDEO, HUMAN, CAPTION = "video_quality", "human_quality", "caption_quality"
STAGES = (VIDEO, HUMAN, CAPTION)
LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


class SignalMissingError(ValueError):
    pass


@dataclass
class ClipSignals:
    frame_dims: FrameDims
    flow_magnitudes: list[float] | None = None
    text_box_areas: list[list[float]] | None = None
    aesthetic: float | None = None
    blur: float | None = None
    gray_frames: np.ndarray | None = None
    human_bbox_areas: list[float] | None = None
    human_counts: list[int] | None = None

    @classmethod
    def from_record(cls, rec: dict, root: Path | None = None) -> "ClipSignals":
        gray = None
        if rec.get("gray_frames_path"):
            gray = np.load(_resolve(rec["gray_frames_path"], root))
        return cls(
            frame_dims=FrameDims(rec["frame_width"], rec["frame_height"]),
            flow_magnitudes=rec.get("flow_magnitudes"),
            text_box_areas=rec.get("text_box_areas"),
            aesthetic=rec.get("aesthetic"),
            blur=rec.get("blur"),
            gray_frames=gray,
            human_bbox_areas=rec.get("human_bbox_areas"),
            human_counts=rec.get("human_counts"),
        )


@dataclass
class FilterVerdict:
    stage: str
    rule: str
    keep: bool
    score: float | None
    error: str | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        if d["error"] is None:
            d.pop("error")
        return d


@dataclass
class CurationConfig:
    movement_threshold: float = 0.5
    text_ratio: float = 0.07
    aesthetic_min: float = 4.0
    blur_threshold: float = 20.0
    motion_threshold: float = 1e-3
    coverage_min: float = 1.0 / 3.0
    max_humans: int = 1
    face_confidence: float = 0.3
    # "any": discard only when no sampled frame shows the face; "all": every sampled frame must
    face_rule: str = "any"
    caption_threshold: float = 0.2
    samples: int = 5


def _resolve(path, root: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or root is None else root / p


# statistics

def movement_intensity(flow_magnitudes) -> float:
    if flow_magnitudes is None or len(flow_magnitudes) == 0:
        raise SignalMissingError("optical-flow magnitudes missing")
    flow = np.asarray(flow_magnitudes, dtype=np.float64)
    if (flow < 0).any():
        raise ValueError("flow magnitudes must be non-negative")
    return float(flow.mean())


def laplacian(frame: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian with replicate border."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 3:
        raise ValueError(f"frame must be a 2-D raster of at least 3x3, got {f.shape}")
    p = np.pad(f, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4 * f


def blur_intensity(gray_frames) -> float:
    """Mean over frames of the variance of the Laplacian response."""
    frames = np.asarray(gray_frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ValueError("expected (T, H, W) grayscale frames")
    return float(np.mean([laplacian(f).var() for f in frames]))


def motion_magnitude(seq) -> float:
    """Mean over transitions of the mean keypoint displacement, in the input's units."""
    data = seq.data if isinstance(seq, PoseSequence) else np.asarray(seq)
    xy = np.asarray(data, dtype=np.float64)[..., :2]
    if xy.shape[0] < 2:
        raise PoseLengthError("motion magnitude needs at least 2 frames")
    return float(np.linalg.norm(np.diff(xy, axis=0), axis=-1).mean())


# rules

def movement_verdict(signals: ClipSignals, cfg: CurationConfig) -> FilterVerdict:
    s = movement_intensity(signals.flow_magnitudes)
    return FilterVerdict(VIDEO, "movement", s > cfg.movement_threshold, s)


def text_coverage_verdict(signals: ClipSignals, cfg: CurationConfig) -> FilterVerdict:
    per_frame = [float(np.sum(boxes)) for boxes in (signals.text_box_areas or [])]
    ratio = max(per_frame, default=0.0) / signals.frame_dims.area
    return FilterVerdict(VIDEO, "text_coverage", ratio <= cfg.text_ratio, ratio)


def aesthetic_verdict(signals: ClipSignals, cfg: CurationConfig) -> FilterVerdict:
    if signals.aesthetic is None:
        raise SignalMissingError("aesthetic score missing")
    s = float(signals.aesthetic)
    return FilterVerdict(VIDEO, "aesthetic", s >= cfg.aesthetic_min, s)


def blur_verdict(signals: ClipSignals, cfg: CurationConfig) -> FilterVerdict:
    if signals.gray_frames is not None:
        s = blur_intensity(signals.gray_frames)
    elif signals.blur is not None:
        s = float(signals.blur)
    else:
        raise SignalMissingError("neither grayscale frames nor a blur value given")
    return FilterVerdict(VIDEO, "blur", s > cfg.blur_threshold, s)


def motion_verdict(seq: PoseSequence, cfg: CurationConfig) -> FilterVerdict:
    s = motion_magnitude(seq)
    return FilterVerdict(HUMAN, "motion_magnitude", s > cfg.motion_threshold, s)


def human_coverage_verdict(signals: ClipSignals, cfg: CurationConfig) -> FilterVerdict:
    if not signals.human_bbox_areas:
        raise SignalMissingError("human bounding boxes missing")
    ratio = float(np.mean(signals.human_bbox_areas) / signals.frame_dims.area)
    return FilterVerdict(HUMAN, "human_coverage", ratio >= cfg.coverage_min, ratio)


def human_count_verdict(signals: ClipSignals, cfg: CurationConfig) -> FilterVerdict:
    counts = signals.human_counts or []
    if len(counts) < cfg.samples:
        raise SignalMissingError(f"need {cfg.samples} sampled human counts, got {len(counts)}")
    if len(counts) > cfg.samples:
        counts = [counts[i] for i in uniform_sample_indices(len(counts), cfg.samples)]
    peak = max(counts)
    return FilterVerdict(HUMAN, "human_count", peak <= cfg.max_humans, float(peak))


def face_visibility_verdict(seq: PoseSequence, cfg: CurationConfig) -> FilterVerdict:
    """Score is the number of sampled frames with all five face points confident."""
    start, _ = seq.layout.range_of("body")
    idx = [start + BODY[name] for name in FACE_POINTS]
    frames = uniform_sample_indices(seq.frames, cfg.samples)
    conf = seq.data[frames][:, idx, 2]
    visible = int((conf >= cfg.face_confidence).all(axis=1).sum())
    if cfg.face_rule == "any":
        keep = visible > 0
    elif cfg.face_rule == "all":
        keep = visible == len(frames)
    else:
        raise ValueError(f"unknown face_rule {cfg.face_rule!r}")
    return FilterVerdict(HUMAN, "face_visibility", keep, float(visible))


def caption_similarity_verdict(h_e, h_p, cfg: CurationConfig) -> FilterVerdict:
    a = np.asarray(getattr(h_e, "vector", h_e), dtype=np.float64)
    b = np.asarray(getattr(h_p, "vector", h_p), dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm embedding")
    cos = float(a @ b / (na * nb))
    return FilterVerdict(CAPTION, "caption_similarity", cos >= cfg.caption_threshold, cos)


# pipeline

@dataclass
class StageStats:
    entered: int = 0
    kept: int = 0

    @property
    def retention(self) -> float:
        return 100.0 * self.kept / self.entered if self.entered else 0.0


@dataclass
class PipelineReport:
    total: int = 0
    kept: int = 0
    errors: int = 0
    stages: dict = field(default_factory=lambda: {s: StageStats() for s in STAGES})
    rules: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "total": self.total, "kept": self.kept, "errors": self.errors,
            "stages": {k: {"entered": v.entered, "kept": v.kept, "retention": v.retention}
                       for k, v in self.stages.items()},
            "rules": self.rules,
        }


def _guarded(stage: str, rule: str, fn: Callable[[], FilterVerdict]) -> FilterVerdict:
    try:
        return fn()
    except (SignalMissingError, ValueError, OSError, KeyError) as exc:
        return FilterVerdict(stage, rule, False, None, f"{type(exc).__name__}: {exc}")


def clip_verdicts(rec: dict, cfg: CurationConfig, root: Path | None = None,
                  caption_scorer: Callable | None = None) -> list[FilterVerdict]:
    """Run the rules for one manifest record in stage order, stopping at the first discard.

    The caption stage uses the record's ``caption_similarity`` when present, then
    ``caption_scorer(caption, pose)``; with neither it is skipped as kept.
    """
    try:
        signals = ClipSignals.from_record(rec, root)
    except (KeyError, ValueError, OSError) as exc:
        return [FilterVerdict(VIDEO, "signals", False, None, f"{type(exc).__name__}: {exc}")]

    seq_cache: dict = {}

    def pose() -> PoseSequence:
        if "seq" not in seq_cache:
            if not rec.get("pose_path"):
                raise SignalMissingError("pose_path missing")
            seq_cache["seq"] = load_pose_sequence(_resolve(rec["pose_path"], root))
        return seq_cache["seq"]

    def caption_rule() -> FilterVerdict:
        if rec.get("caption_similarity") is not None:
            s = float(rec["caption_similarity"])
            return FilterVerdict(CAPTION, "caption_similarity", s >= cfg.caption_threshold, s)
        if caption_scorer is None:
            return FilterVerdict(CAPTION, "caption_similarity", True, None, "skipped: no scorer")
        h_e, h_p = caption_scorer(rec.get("caption", ""), pose(), signals.frame_dims)
        return caption_similarity_verdict(h_e, h_p, cfg)

    rules = [
        (VIDEO, "movement", lambda: movement_verdict(signals, cfg)),
        (VIDEO, "text_coverage", lambda: text_coverage_verdict(signals, cfg)),
        (VIDEO, "aesthetic", lambda: aesthetic_verdict(signals, cfg)),
        (VIDEO, "blur", lambda: blur_verdict(signals, cfg)),
        (HUMAN, "motion_magnitude", lambda: motion_verdict(pose(), cfg)),
        (HUMAN, "human_coverage", lambda: human_coverage_verdict(signals, cfg)),
        (HUMAN, "human_count", lambda: human_count_verdict(signals, cfg)),
        (HUMAN, "face_visibility", lambda: face_visibility_verdict(pose(), cfg)),
        (CAPTION, "caption_similarity", caption_rule),
    ]
    verdicts = []
    for stage, rule, fn in rules:
        v = _guarded(stage, rule, fn)
        verdicts.append(v)
        if not v.keep:
            break
    return verdicts


def read_manifest(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def write_jsonl_atomic(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


def run_pipeline(manifest_in, manifest_out, config: CurationConfig | None = None,
                 caption_scorer: Callable | None = None, kept_only: bool = False) -> PipelineReport:
    """Filter every clip of ``manifest_in``; write records with verdicts to ``manifest_out``."""
    cfg = config or CurationConfig()
    manifest_in = Path(manifest_in)
    root = manifest_in.parent
    report = PipelineReport()
    out = []
    with manifest_in.open() as fh:
        lines = [ln for ln in fh if ln.strip()]
    for n, line in enumerate(lines):
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            verdicts = clip_verdicts(rec, cfg, root, caption_scorer)
        except ValueError as exc:
            rec = {"id": f"line_{n}"}
            verdicts = [FilterVerdict(VIDEO, "record", False, None, f"{type(exc).__name__}: {exc}")]
        kept = all(v.keep for v in verdicts) and len(verdicts) == 9
        report.total += 1
        report.kept += kept
        report.errors += any(v.error and not v.keep for v in verdicts)
        failed = None if kept else verdicts[-1].stage
        for stage in STAGES:
            report.stages[stage].entered += 1
            if stage == failed:
                break
            report.stages[stage].kept += 1
        for v in verdicts:
            r = report.rules.setdefault(v.rule, {"evaluated": 0, "kept": 0})
            r["evaluated"] += 1
            r["kept"] += v.keep
        rec = dict(rec)
        rec["verdicts"] = [v.to_json() for v in verdicts]
        rec["kept"] = bool(kept)
        if kept or not kept_only:
            out.append(rec)
    write_jsonl_atomic(manifest_out, out)
    log.info("curation: kept %d / %d clips", report.kept, report.total)
    return report
