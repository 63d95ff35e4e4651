"""
Frame-level confusion metrics and segment-level average precision.

Frame metrics are counted on the feature-step grid: one decision per timestep.
AP is the area under the non-interpolated precision-recall curve, with each
prediction greedily matched to the unmatched ground-truth segment of highest
t-IoU.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from dataset import BEHAVIOR_NAMES, Video
from postprocess import PredictionRecord, ScoredSegment, t_iou

logger = logging.getLogger(__name__)

DEFAULT_TIOU_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)
AVERAGE_COLUMN = "Avg."
FRAME_COLUMNS = ("Sensitivity", "Specificity", "F1-score", "Accuracy")

Segment = ScoredSegment | tuple[float, float]


@dataclass
class EvaluationConfig:
    tiou_thresholds: tuple[float, ...] = DEFAULT_TIOU_THRESHOLDS

    def __post_init__(self):
        self.tiou_thresholds = tuple(float(t) for t in self.tiou_thresholds)
        if not self.tiou_thresholds:
            raise ValueError("tiou_thresholds must not be empty")
        for threshold in self.tiou_thresholds:
            if not 0.0 < threshold <= 1.0:
                raise ValueError(f"t-IoU threshold {threshold} outside (0, 1]")


# ==========================================
# Frame-level metrics
# ==========================================

@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"Confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class FrameMetrics:
    """Derived ratios; a ratio with a zero denominator is 0 and listed in `degenerate`."""
    counts: ConfusionCounts
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    degenerate: list[str] = field(default_factory=list)


def _ratio(numerator: float, denominator: float, name: str, degenerate: list[str]) -> float:
    if denominator == 0:
        degenerate.append(name)
        return 0.0
    return numerator / denominator


def metrics_from_counts(counts: ConfusionCounts) -> FrameMetrics:
    degenerate: list[str] = []
    accuracy = _ratio(counts.tp + counts.tn, counts.total, "accuracy", degenerate)
    sensitivity = _ratio(counts.tp, counts.tp + counts.fn, "sensitivity", degenerate)
    specificity = _ratio(counts.tn, counts.tn + counts.fp, "specificity", degenerate)
    precision = _ratio(counts.tp, counts.tp + counts.fp, "precision", degenerate)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity, "f1", degenerate)
    return FrameMetrics(counts, accuracy, sensitivity, specificity, precision, f1, degenerate)


def rasterize(segments: Iterable[Segment], time_grid: np.ndarray) -> np.ndarray:
    """1 for every timestep whose center lies inside any segment (bounds inclusive)."""
    grid = np.asarray(time_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("rasterize: timestep grid is empty")
    labels = np.zeros(grid.shape, dtype=np.int64)
    for segment in segments:
        start, end = (segment.start_s, segment.end_s) if isinstance(segment, ScoredSegment) else segment
        labels[(grid >= start) & (grid <= end)] = 1
    return labels


def confusion_counts(pred_labels, gt_labels) -> ConfusionCounts:
    pred = np.asarray(pred_labels).astype(bool)
    gt = np.asarray(gt_labels).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"Label length mismatch: predictions {pred.shape} vs ground truth {gt.shape}")
    return ConfusionCounts(
        tp=int(np.sum(pred & gt)),
        fp=int(np.sum(pred & ~gt)),
        tn=int(np.sum(~pred & ~gt)),
        fn=int(np.sum(~pred & gt)),
    )


def frame_metrics(pred_labels, gt_labels) -> FrameMetrics:
    """
    Accuracy, sensitivity (recall), specificity, precision and F1 of binary labels.

    Raises:
        ValueError: if the label sequences differ in length.
    """
    return metrics_from_counts(confusion_counts(pred_labels, gt_labels))


# ==========================================
# Average precision
# ==========================================

@dataclass
class APScore:
    """AP with a status: ok, no_ground_truth (AP 0) or undefined (no predictions, no ground truth)."""
    ap: float
    status: str = "ok"

    @property
    def defined(self) -> bool:
        return self.status != "undefined"


def _as_interval(segment: Segment) -> tuple[float, float]:
    return (segment.start_s, segment.end_s) if isinstance(segment, ScoredSegment) else tuple(segment)


def _ranked(predictions: Sequence[tuple[str, ScoredSegment]]) -> list[tuple[str, ScoredSegment]]:
    return sorted(predictions, key=lambda item: (-item[1].score, item[1].start_s, item[0]))


def _pooled_ap(
    predictions: Sequence[tuple[str, ScoredSegment]],
    ground_truth: dict[str, list[tuple[float, float]]],
    tiou_threshold: float,
) -> APScore:
    num_gt = sum(len(segments) for segments in ground_truth.values())
    if num_gt == 0:
        if predictions:
            return APScore(0.0, "no_ground_truth")
        return APScore(0.0, "undefined")
    if not predictions:
        return APScore(0.0)

    matched = {video_id: np.zeros(len(segments), dtype=bool) for video_id, segments in ground_truth.items()}
    true_positives = 0
    ap = 0.0
    for rank, (video_id, prediction) in enumerate(_ranked(predictions), start=1):
        candidates = ground_truth.get(video_id, [])
        best_iou, best_index = -1.0, -1
        for index, gt in enumerate(candidates):
            if matched[video_id][index]:
                continue
            iou = t_iou(prediction, gt)
            if iou > best_iou:
                best_iou, best_index = iou, index
        if best_index >= 0 and best_iou >= tiou_threshold:
            matched[video_id][best_index] = True
            true_positives += 1
            ap += (true_positives / rank) * (1.0 / num_gt)
    return APScore(float(min(ap, 1.0)))


def average_precision(
    predictions: Sequence[ScoredSegment],
    gts: Sequence[Segment],
    tiou_threshold: float,
) -> APScore:
    """
    Non-interpolated AP of one class in one video.

    Predictions are ranked by descending score (ties: earlier start). Each is
    matched to the unmatched ground-truth segment of highest t-IoU and counts as
    a true positive iff that t-IoU >= tiou_threshold. AP sums precision-at-rank
    times the recall increment over true-positive ranks.
    """
    return _pooled_ap(
        [("", p) for p in predictions],
        {"": [_as_interval(g) for g in gts]},
        tiou_threshold,
    )


def dataset_average_precision(
    predictions: dict[str, Sequence[ScoredSegment]],
    gts: dict[str, Sequence[Segment]],
    tiou_threshold: float,
) -> APScore:
    """AP with predictions of all videos ranked jointly, each matched only within its own video."""
    pooled = [(video_id, p) for video_id, segments in sorted(predictions.items()) for p in segments]
    return _pooled_ap(
        pooled,
        {video_id: [_as_interval(g) for g in segments] for video_id, segments in gts.items()},
        tiou_threshold,
    )


def ap_table(
    predictions: dict[str, Sequence[ScoredSegment]] | Sequence[ScoredSegment],
    gts: dict[str, Sequence[Segment]] | Sequence[Segment],
    thresholds: Sequence[float] = DEFAULT_TIOU_THRESHOLDS,
) -> dict[str, float | None]:
    """
    AP per threshold plus their arithmetic mean under "Avg.".

    Accepts one video's segment lists or per-video dicts. Undefined scores are
    None and excluded from the mean.
    """
    if not isinstance(predictions, dict):
        predictions = {"": predictions}
    if not isinstance(gts, dict):
        gts = {"": gts}
    row: dict[str, float | None] = {}
    defined = []
    for threshold in thresholds:
        score = dataset_average_precision(predictions, gts, threshold)
        if score.defined:
            row[_threshold_key(threshold)] = score.ap
            defined.append(score.ap)
        else:
            row[_threshold_key(threshold)] = None
    row[AVERAGE_COLUMN] = float(np.mean(defined)) if defined else None
    return row


def _threshold_key(threshold: float) -> str:
    return f"{threshold:g}"


# ==========================================
# Report
# ==========================================

class BehaviorReport(BaseModel):
    behavior: str
    display_name: str
    counts: dict[str, int]
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    degenerate: list[str] = Field(default_factory=list)
    average_precision: dict[str, float | None]


class MetricsReport(BaseModel):
    """Per-behavior frame metrics and AP rows."""
    thresholds: list[float]
    videos: int
    behaviors: list[BehaviorReport] = Field(default_factory=list)

    def frame_table(self) -> pd.DataFrame:
        rows = {
            b.display_name: [b.sensitivity, b.specificity, b.f1, b.accuracy]
            for b in self.behaviors
        }
        return pd.DataFrame.from_dict(rows, orient="index", columns=list(FRAME_COLUMNS))

    def ap_frame(self) -> pd.DataFrame:
        columns = [_threshold_key(t) for t in self.thresholds] + [AVERAGE_COLUMN]
        rows = {b.display_name: [b.average_precision.get(c) for c in columns] for b in self.behaviors}
        return pd.DataFrame.from_dict(rows, orient="index", columns=columns)

    def render_text(self) -> str:
        """Two aligned plain-text tables: frame metrics, then AP by t-IoU threshold."""
        frame = self.frame_table().to_string(float_format=lambda v: f"{v:.4f}", na_rep="n/a")
        ap = self.ap_frame().to_string(float_format=lambda v: f"{v:.4f}", na_rep="n/a")
        return (
            f"Frame-level metrics ({self.videos} videos)\n{frame}\n\n"
            f"Average precision by t-IoU threshold\n{ap}\n"
        )


def evaluate_videos(
    records: Sequence[PredictionRecord],
    videos: Sequence[Video],
    behaviors: Sequence[str],
    config: EvaluationConfig | None = None,
) -> MetricsReport:
    """
    Score prediction records against the ground truth of `videos`.

    Frame metrics are summed over every video; videos without predictions count
    as all-negative. AP is pooled over videos per behavior.

    Raises:
        ValueError: if any record names a video not in `videos`.
    """
    config = config or EvaluationConfig()
    known = {video.video_id for video in videos}
    unknown = sorted({r.video_id for r in records} - known)
    if unknown:
        raise ValueError(f"Predictions reference unknown video ids: {', '.join(unknown)}")

    report = MetricsReport(thresholds=list(config.tiou_thresholds), videos=len(videos))
    for behavior in behaviors:
        by_video: dict[str, list[ScoredSegment]] = {video.video_id: [] for video in videos}
        for record in records:
            if record.behavior == behavior:
                by_video[record.video_id].append(record.to_segment())

        counts = ConfusionCounts()
        gts = {}
        for video in videos:
            grid = video.features.time_grid
            gt_segments = video.track(behavior).segments
            gts[video.video_id] = gt_segments
            counts = counts + confusion_counts(rasterize(by_video[video.video_id], grid), rasterize(gt_segments, grid))

        metrics = metrics_from_counts(counts)
        if metrics.degenerate:
            logger.warning(f"{behavior}: degenerate denominators for {', '.join(metrics.degenerate)}")
        report.behaviors.append(BehaviorReport(
            behavior=behavior,
            display_name=BEHAVIOR_NAMES.get(behavior, behavior),
            counts={"TP": counts.tp, "FP": counts.fp, "TN": counts.tn, "FN": counts.fn},
            accuracy=metrics.accuracy,
            sensitivity=metrics.sensitivity,
            specificity=metrics.specificity,
            precision=metrics.precision,
            f1=metrics.f1,
            degenerate=metrics.degenerate,
            average_precision=ap_table(by_video, gts, config.tiou_thresholds),
        ))
        logger.info(f"{behavior}: accuracy {metrics.accuracy:.4f}, F1 {metrics.f1:.4f}")
    return report


def write_report(directory: str | Path, report: MetricsReport) -> tuple[Path, Path]:
    """Write report.json and report.txt (write-then-rename)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, text in (("report.json", report.model_dump_json(indent=2)), ("report.txt", report.render_text())):
        path = directory / name
        tmp_path = path.with_name(name + ".tmp")
        tmp_path.write_text(text, encoding="utf-8")
        os.replace(tmp_path, path)
        outputs.append(path)
    return outputs[0], outputs[1]
