"""
Turning per-timestep predictions into scored segments.

- decode: threshold p_event and convert offsets to (start, end) in seconds
- decode_runs: segments from runs of above-threshold steps (classification-only models)
- t_iou: temporal intersection over union
- nms: hard or soft (linear / gaussian) greedy suppression
- predictions files: header line plus one JSON record per segment
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from model import TimestepPrediction

logger = logging.getLogger(__name__)

PREDICTIONS_FORMAT = "tal-predictions"
PREDICTIONS_VERSION = 1


class NmsMode(str, Enum):
    hard = "hard"
    soft_linear = "soft-linear"
    soft_gaussian = "soft-gaussian"


@dataclass
class PostprocessConfig:
    """Decoding and suppression settings."""
    threshold: float = 0.4
    nms_mode: str = "hard"
    overlap_threshold: float = 0.5
    score_floor: float = 0.001
    sigma: float = 0.5

    def __post_init__(self):
        self.nms_mode = NmsMode(self.nms_mode).value
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ValueError(f"overlap_threshold must be in [0, 1], got {self.overlap_threshold}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.score_floor < 0:
            raise ValueError(f"score_floor must be >= 0, got {self.score_floor}")


@dataclass(frozen=True)
class ScoredSegment:
    """A candidate behavior instance."""
    start_s: float
    end_s: float
    score: float
    label: str = "event"

    def __post_init__(self):
        if not 0.0 <= self.start_s < self.end_s:
            raise ValueError(f"Segment ({self.start_s}, {self.end_s}) needs 0 <= start < end")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Segment score {self.score} outside [0, 1]")

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


def _ranking_key(segment: ScoredSegment) -> tuple[float, float, float]:
    # descending score, then earlier start, then shorter
    return (-segment.score, segment.start_s, segment.duration)


def decode(
    predictions: Sequence[TimestepPrediction],
    time_grid: np.ndarray,
    threshold: float = 0.4,
    duration_s: float | None = None,
    label: str = "event",
) -> list[ScoredSegment]:
    """
    Emit (t - D_s, t + D_e, p) for every timestep with p >= threshold.

    Offsets are clamped to >= 0 first, the start to >= 0 and the end to the
    video duration; candidates that collapse to zero length are dropped.
    """
    grid = np.asarray(time_grid, dtype=np.float64)
    if len(predictions) != grid.size:
        raise ValueError(f"decode: {len(predictions)} predictions for a grid of {grid.size} timesteps")
    segments = []
    for t, prediction in zip(grid, predictions):
        if prediction.p_event < threshold:
            continue
        start = max(0.0, float(t) - max(prediction.d_s, 0.0))
        end = float(t) + max(prediction.d_e, 0.0)
        if duration_s is not None:
            end = min(end, duration_s)
        if end <= start:
            continue
        segments.append(ScoredSegment(start, end, min(max(prediction.p_event, 0.0), 1.0), label))
    return segments


def decode_runs(
    predictions: Sequence[TimestepPrediction],
    time_grid: np.ndarray,
    threshold: float = 0.4,
    step_seconds: float | None = None,
    label: str = "event",
) -> list[ScoredSegment]:
    """
    Segments from maximal runs of consecutive above-threshold timesteps.

    Each run spans its windows' edges (center +- step / 2) and scores the mean
    probability of the run. Used when the model has no regression head.
    """
    grid = np.asarray(time_grid, dtype=np.float64)
    if len(predictions) != grid.size:
        raise ValueError(f"decode_runs: {len(predictions)} predictions for a grid of {grid.size} timesteps")
    if step_seconds is None:
        step_seconds = float(grid[1] - grid[0]) if grid.size > 1 else 2.0 * float(grid[0])
    half = step_seconds / 2.0

    probs = np.array([p.p_event for p in predictions])
    above = probs >= threshold
    segments = []
    index = 0
    while index < len(above):
        if not above[index]:
            index += 1
            continue
        run_end = index
        while run_end + 1 < len(above) and above[run_end + 1]:
            run_end += 1
        start = max(0.0, grid[index] - half)
        end = grid[run_end] + half
        score = float(np.clip(probs[index:run_end + 1].mean(), 0.0, 1.0))
        segments.append(ScoredSegment(float(start), float(end), score, label))
        index = run_end + 1
    return segments


def t_iou(a: ScoredSegment | tuple[float, float], b: ScoredSegment | tuple[float, float]) -> float:
    """Intersection length over union length of two segments."""
    a_start, a_end = (a.start_s, a.end_s) if isinstance(a, ScoredSegment) else a
    b_start, b_end = (b.start_s, b.end_s) if isinstance(b, ScoredSegment) else b
    intersection = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - intersection
    if union <= 0:
        return 0.0
    return intersection / union


def nms(
    candidates: Sequence[ScoredSegment],
    overlap_threshold: float = 0.5,
    mode: str = "hard",
    score_floor: float = 0.001,
    sigma: float = 0.5,
) -> list[ScoredSegment]:
    """
    Greedy suppression by descending score.

    hard: drop every remaining candidate with t-IoU > overlap_threshold against
        the one just kept.
    soft-linear: scale overlapping (> threshold) scores by (1 - iou).
    soft-gaussian: scale every remaining score by exp(-iou^2 / sigma).
    Soft modes drop candidates whose decayed score falls below score_floor.
    Output is sorted by descending score.
    """
    mode = NmsMode(mode)
    remaining = sorted(candidates, key=_ranking_key)
    if mode is NmsMode.hard:
        kept = []
        while remaining:
            best = remaining.pop(0)
            kept.append(best)
            remaining = [c for c in remaining if t_iou(best, c) <= overlap_threshold]
        return kept

    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        decayed = []
        for candidate in remaining:
            iou = t_iou(best, candidate)
            if mode is NmsMode.soft_linear:
                weight = 1.0 - iou if iou > overlap_threshold else 1.0
            else:
                weight = math.exp(-(iou * iou) / sigma)
            score = candidate.score * weight
            if score >= score_floor:
                decayed.append(ScoredSegment(candidate.start_s, candidate.end_s, score, candidate.label))
        remaining = sorted(decayed, key=_ranking_key)
    return sorted(kept, key=_ranking_key)


# ==========================================
# Predictions files
# ==========================================

class PredictionRecord(BaseModel):
    """One predicted segment for one video."""
    model_config = ConfigDict(populate_by_name=True)

    video_id: str
    behavior: str = Field(alias="class")
    start_s: float
    end_s: float
    score: float

    def to_segment(self) -> ScoredSegment:
        return ScoredSegment(self.start_s, self.end_s, self.score, self.behavior)


class PredictionsHeader(BaseModel):
    format: str = PREDICTIONS_FORMAT
    version: int = PREDICTIONS_VERSION
    classes: list[str] = Field(default_factory=list)


def write_predictions(path: str | Path, classes: list[str], records: list[PredictionRecord]):
    """Write header + records as JSON lines (write-then-rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [PredictionsHeader(classes=sorted(classes)).model_dump_json()]
    lines.extend(record.model_dump_json(by_alias=True) for record in records)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    os.replace(tmp_path, path)
    logger.info(f"Wrote {len(records)} predicted segments to {path}")


def read_predictions(path: str | Path) -> tuple[PredictionsHeader, list[PredictionRecord]]:
    with open(path, encoding="utf-8") as handle:
        lines = [line for line in handle if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty predictions file")
    header = PredictionsHeader.model_validate(json.loads(lines[0]))
    if header.format != PREDICTIONS_FORMAT:
        raise ValueError(f"{path}: not a predictions file (format {header.format!r})")
    return header, [PredictionRecord.model_validate_json(line) for line in lines[1:]]
