"""
Feature and annotation ingestion for behavior localization.

This module covers everything between files on disk and the model:
- The ATFX binary feature format (one file per video)
- Line-delimited annotation records in seconds
- The corpus manifest (video_id -> subject_id -> feature file)
- The timestep <-> seconds grid
- A seeded synthetic corpus generator used in place of clinical recordings
- A subject-disjoint train/test split

Usage:
    from dataset import load_corpus, train_test_split

    videos = load_corpus("runs/corpus")
    train_videos, test_videos = train_test_split(videos, ratio=0.8, seed=7)
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

logger = logging.getLogger(__name__)


BEHAVIOR_CLASSES: tuple[str, ...] = ("look_face", "look_object", "smile", "vocal")

BEHAVIOR_NAMES: dict[str, str] = {
    "look_face": "Look Face",
    "look_object": "Look Object",
    "smile": "Smile",
    "vocal": "Vocal",
}

FEATURE_MAGIC = b"ATFX"
FEATURE_VERSION = 1
_FEATURE_FIXED = struct.Struct("<4sII")
_FEATURE_DIMS = struct.Struct("<IIId")

ANNOTATIONS_FILE = "annotations.jsonl"
MANIFEST_FILE = "manifest.json"


class FeatureFormatError(ValueError):
    """Raised when an ATFX file is malformed."""


class AnnotationError(ValueError):
    """Raised when an annotation record is invalid."""


# ==========================================
# Domain types
# ==========================================

@dataclass
class FeatureSequence:
    """Per-timestep feature vectors of one video plus its time mapping."""
    video_id: str
    features: np.ndarray
    frames_per_step: int = 64
    frames_per_second: float = 30.0

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(
                f"Video {self.video_id}: features must be [T x feature_dim] with T >= 1, "
                f"got shape {self.features.shape}"
            )
        if self.frames_per_step <= 0 or self.frames_per_second <= 0:
            raise ValueError(f"Video {self.video_id}: frames_per_step and frames_per_second must be positive")

    @property
    def num_steps(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def step_seconds(self) -> float:
        return self.frames_per_step / self.frames_per_second

    @property
    def duration_s(self) -> float:
        return self.num_steps * self.frames_per_step / self.frames_per_second

    @property
    def time_grid(self) -> np.ndarray:
        return time_grid(self.num_steps, self.frames_per_step, self.frames_per_second)


@dataclass
class AnnotationTrack:
    """Ground-truth segments of one behavior in one video, in seconds."""
    video_id: str
    behavior: str
    segments: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.behavior not in BEHAVIOR_CLASSES:
            raise AnnotationError(f"Unknown behavior {self.behavior!r}; valid: {', '.join(BEHAVIOR_CLASSES)}")
        for start, end in self.segments:
            if not start < end:
                raise AnnotationError(f"Video {self.video_id} {self.behavior}: segment ({start}, {end}) has start >= end")
        self.segments = merge_segments(self.segments)


@dataclass
class Video:
    """A video's features, its subject and its annotation tracks by behavior."""
    features: FeatureSequence
    subject_id: str
    tracks: dict[str, AnnotationTrack] = field(default_factory=dict)

    @property
    def video_id(self) -> str:
        return self.features.video_id

    def track(self, behavior: str) -> AnnotationTrack:
        """Return the behavior's track, empty when the video has none."""
        return self.tracks.get(behavior) or AnnotationTrack(self.video_id, behavior, [])


def merge_segments(segments: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Sort segments and merge any that overlap or touch."""
    merged: list[list[float]] = []
    for start, end in sorted((float(s), float(e)) for s, e in segments):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(s, e) for s, e in merged]


# ==========================================
# Time mapping
# ==========================================

def time_grid(num_steps: int, frames_per_step: int = 64, frames_per_second: float = 30.0) -> np.ndarray:
    """Timestep centers in seconds: (i * frames_per_step + frames_per_step / 2) / fps."""
    steps = np.arange(num_steps, dtype=np.float64)
    return (steps * frames_per_step + frames_per_step / 2.0) / frames_per_second


def seconds_to_step(seconds: float, frames_per_step: int = 64, frames_per_second: float = 30.0) -> int:
    """Index of the feature window containing the given time."""
    return int(np.floor(seconds * frames_per_second / frames_per_step))


# ==========================================
# ATFX feature files
# ==========================================

def _atomic_write_bytes(path: Path, payload: bytes):
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as handle:
        handle.write(payload)
    os.replace(tmp_path, path)


def encode_features(sequence: FeatureSequence) -> bytes:
    video_id = sequence.video_id.encode("utf-8")
    header = _FEATURE_FIXED.pack(FEATURE_MAGIC, FEATURE_VERSION, len(video_id)) + video_id
    header += _FEATURE_DIMS.pack(
        sequence.num_steps,
        sequence.feature_dim,
        sequence.frames_per_step,
        float(sequence.frames_per_second),
    )
    return header + np.ascontiguousarray(sequence.features, dtype="<f4").tobytes()


def write_features(path: str | Path, sequence: FeatureSequence):
    """Write one video's features in the ATFX format (write-then-rename)."""
    _atomic_write_bytes(Path(path), encode_features(sequence))


def decode_features(data: bytes, source: str = "<bytes>") -> FeatureSequence:
    """Parse ATFX bytes, validating every header field against the payload."""
    if len(data) < _FEATURE_FIXED.size:
        raise FeatureFormatError(f"{source}: truncated header ({len(data)} bytes, need {_FEATURE_FIXED.size})")
    magic, version, id_length = _FEATURE_FIXED.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{source}: bad magic {magic!r} at offset 0, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{source}: unsupported version {version} at offset 4, expected {FEATURE_VERSION}")

    offset = _FEATURE_FIXED.size
    if offset + id_length + _FEATURE_DIMS.size > len(data):
        raise FeatureFormatError(
            f"{source}: truncated header; video id length {id_length} at offset 8 "
            f"runs past end of file ({len(data)} bytes)"
        )
    try:
        video_id = data[offset:offset + id_length].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FeatureFormatError(f"{source}: video id at offset {offset} is not UTF-8: {e}") from None
    offset += id_length

    num_steps, feature_dim, frames_per_step, fps = _FEATURE_DIMS.unpack_from(data, offset)
    dims_offset = offset
    offset += _FEATURE_DIMS.size
    if num_steps < 1 or feature_dim < 1:
        raise FeatureFormatError(
            f"{source}: header at offset {dims_offset} declares T={num_steps}, feature_dim={feature_dim}; both must be >= 1"
        )
    if frames_per_step < 1 or not np.isfinite(fps) or fps <= 0:
        raise FeatureFormatError(
            f"{source}: header at offset {dims_offset} declares frames_per_step={frames_per_step}, fps={fps}"
        )

    payload = len(data) - offset
    expected = num_steps * feature_dim * 4
    if payload != expected:
        floats = payload // 4
        if payload % 4 == 0 and floats % num_steps == 0 and floats // num_steps != feature_dim:
            raise FeatureFormatError(
                f"{source}: header declares feature_dim {feature_dim} but rows hold "
                f"{floats // num_steps} floats (payload at offset {offset})"
            )
        raise FeatureFormatError(
            f"{source}: payload at offset {offset} has {payload} bytes, expected {expected} "
            f"for T={num_steps} x feature_dim={feature_dim}"
        )

    features = np.frombuffer(data, dtype="<f4", count=num_steps * feature_dim, offset=offset)
    return FeatureSequence(
        video_id=video_id,
        features=features.reshape(num_steps, feature_dim).copy(),
        frames_per_step=frames_per_step,
        frames_per_second=fps,
    )


def load_features(path: str | Path) -> FeatureSequence:
    """Load an ATFX feature file; nothing is returned unless the whole file is valid."""
    path = Path(path)
    return decode_features(path.read_bytes(), source=str(path))


# ==========================================
# Annotations and manifest
# ==========================================

class AnnotationRecord(BaseModel):
    """One annotated behavior segment."""
    model_config = ConfigDict(populate_by_name=True)

    video_id: str
    subject_id: str
    behavior: str = Field(alias="class")
    start_s: float
    end_s: float

    @model_validator(mode="after")
    def _check(self):
        if self.behavior not in BEHAVIOR_CLASSES:
            raise ValueError(f"unknown class {self.behavior!r}; valid: {', '.join(BEHAVIOR_CLASSES)}")
        if not self.start_s < self.end_s:
            raise ValueError(f"start_s {self.start_s} must be < end_s {self.end_s}")
        return self


class ManifestEntry(BaseModel):
    video_id: str
    subject_id: str
    features: str


def load_annotations(path: str | Path) -> dict[tuple[str, str], AnnotationTrack]:
    """
    Read annotation records into tracks keyed by (video_id, behavior).

    Records are sorted and overlapping same-class segments merged. An empty
    file yields no tracks.

    Raises:
        AnnotationError: naming the line and record that failed validation.
    """
    path = Path(path)
    grouped: dict[tuple[str, str], list[tuple[float, float]]] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = AnnotationRecord.model_validate_json(line)
            except ValidationError as e:
                raise AnnotationError(f"{path}:{line_no}: invalid record {line.strip()}: {e.errors()[0]['msg']}") from None
            grouped.setdefault((record.video_id, record.behavior), []).append((record.start_s, record.end_s))

    return {
        key: AnnotationTrack(video_id=key[0], behavior=key[1], segments=segments)
        for key, segments in sorted(grouped.items())
    }


def load_subjects(path: str | Path) -> dict[str, str]:
    """Map video_id -> subject_id from an annotation file."""
    subjects: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                record = AnnotationRecord.model_validate_json(line)
                subjects[record.video_id] = record.subject_id
    return subjects


def write_annotations(path: str | Path, videos: list[Video]):
    lines = []
    for video in videos:
        for behavior in sorted(video.tracks):
            for start, end in video.tracks[behavior].segments:
                record = AnnotationRecord(
                    video_id=video.video_id,
                    subject_id=video.subject_id,
                    behavior=behavior,
                    start_s=start,
                    end_s=end,
                )
                lines.append(record.model_dump_json(by_alias=True))
    _atomic_write_bytes(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def write_corpus(directory: str | Path, videos: list[Video]) -> Path:
    """Write ATFX files, annotations.jsonl and manifest.json under directory."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)

    entries = []
    for video in videos:
        relative = f"features/{video.video_id}.atfx"
        write_features(directory / relative, video.features)
        entries.append(ManifestEntry(video_id=video.video_id, subject_id=video.subject_id, features=relative))

    write_annotations(directory / ANNOTATIONS_FILE, videos)
    manifest = json.dumps([e.model_dump() for e in entries], indent=2) + "\n"
    _atomic_write_bytes(directory / MANIFEST_FILE, manifest.encode("utf-8"))
    logger.info(f"Wrote corpus of {len(videos)} videos to {directory}")
    return directory


def load_manifest(directory: str | Path) -> list[ManifestEntry]:
    directory = Path(directory)
    with open(directory / MANIFEST_FILE, encoding="utf-8") as handle:
        return [ManifestEntry.model_validate(item) for item in json.load(handle)]


def load_corpus(directory: str | Path) -> list[Video]:
    """Load every video listed in the manifest together with its annotation tracks."""
    directory = Path(directory)
    entries = load_manifest(directory)
    annotations_path = directory / ANNOTATIONS_FILE
    tracks = load_annotations(annotations_path) if annotations_path.exists() else {}

    videos = []
    for entry in entries:
        features = load_features(directory / entry.features)
        if features.video_id != entry.video_id:
            raise FeatureFormatError(
                f"{entry.features}: file holds video {features.video_id!r}, manifest says {entry.video_id!r}"
            )
        video_tracks = {
            behavior: track for (video_id, behavior), track in tracks.items() if video_id == entry.video_id
        }
        videos.append(Video(features=features, subject_id=entry.subject_id, tracks=video_tracks))
    logger.info(f"Loaded {len(videos)} videos from {directory}")
    return videos


# ==========================================
# Synthetic corpus
# ==========================================

@dataclass
class SynthConfig:
    """Configuration for the synthetic corpus generator."""
    num_videos: int = 50
    steps_per_video: int = 84
    feature_dim: int = 32
    snr: float = 4.0
    segments_per_video: tuple[int, int] = (1, 3)
    segment_steps: tuple[int, int] = (3, 12)
    videos_per_subject: int = 2
    frames_per_step: int = 64
    frames_per_second: float = 30.0
    behaviors: tuple[str, ...] = BEHAVIOR_CLASSES
    signatures: list[list[float]] | None = None
    max_retries: int = 200
    seed: int | None = None

    def __post_init__(self):
        self.segments_per_video = tuple(self.segments_per_video)
        self.segment_steps = tuple(self.segment_steps)
        self.behaviors = tuple(self.behaviors)
        if self.num_videos < 1 or self.steps_per_video < 1 or self.feature_dim < 1:
            raise ValueError("num_videos, steps_per_video and feature_dim must be positive")
        if self.snr < 0:
            raise ValueError(f"snr must be >= 0, got {self.snr}")
        low, high = self.segments_per_video
        if not 0 <= low <= high:
            raise ValueError(f"segments_per_video range {self.segments_per_video} is invalid")
        shortest, longest = self.segment_steps
        if not 1 <= shortest <= longest < self.steps_per_video:
            raise ValueError(
                f"segment_steps {self.segment_steps} must be positive and shorter than "
                f"steps_per_video {self.steps_per_video}"
            )
        if self.videos_per_subject < 1:
            raise ValueError("videos_per_subject must be >= 1")
        unknown = set(self.behaviors) - set(BEHAVIOR_CLASSES)
        if unknown:
            raise ValueError(f"Unknown behaviors {sorted(unknown)}")
        if len(self.behaviors) > self.feature_dim:
            raise ValueError("feature_dim must be at least the number of behaviors for independent signatures")


def make_signatures(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm class signature vectors, one row per behavior, linearly independent."""
    if config.signatures is not None:
        signatures = np.asarray(config.signatures, dtype=np.float64)
        if signatures.shape != (len(config.behaviors), config.feature_dim):
            raise ValueError(
                f"signatures shape {signatures.shape} != ({len(config.behaviors)}, {config.feature_dim})"
            )
    else:
        signatures = rng.standard_normal((len(config.behaviors), config.feature_dim))
    norms = np.linalg.norm(signatures, axis=1, keepdims=True)
    if np.any(norms == 0) or np.linalg.matrix_rank(signatures) < len(config.behaviors):
        raise ValueError("class signatures must be linearly independent")
    return signatures / norms


def _place_segments(
    count: int,
    config: SynthConfig,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    """
    Sample `count` non-touching [start, end) step ranges.

    Lengths are resampled together until they fit with one free step between
    neighbours; the remaining free steps are then split at random over the
    count + 1 gaps, so a length draw that fits always places.
    """
    if count == 0:
        return []
    shortest, longest = config.segment_steps
    steps = config.steps_per_video
    failure = (
        f"Could not fit {count} segments of {shortest}-{longest} steps into "
        f"{steps} steps"
    )
    if count * shortest + (count - 1) > steps:
        raise ValueError(f"{failure}: even the shortest segments need {count * shortest + count - 1} steps")

    for _ in range(config.max_retries):
        lengths = rng.integers(shortest, longest + 1, size=count)
        slack = steps - int(lengths.sum()) - (count - 1)
        if slack >= 0:
            break
    else:
        logger.warning(f"{failure} after {config.max_retries} length draws")
        raise ValueError(f"{failure} after {config.max_retries} attempts")

    # Stars and bars: count cut points among slack + count positions.
    cuts = np.sort(rng.choice(slack + count, size=count, replace=False))
    gaps = np.diff(np.concatenate(([-1], cuts))) - 1

    placed = []
    cursor = 0
    for length, gap in zip(lengths, gaps):
        start = cursor + int(gap)
        placed.append((start, start + int(length)))
        cursor = start + int(length) + 1
    return placed


def synth_generate(config: SynthConfig) -> list[Video]:
    """
    Generate a seeded synthetic corpus.

    Base features are unit-variance Gaussian noise. Inside every sampled segment
    of a behavior, that behavior's unit signature scaled by the SNR is added to
    each timestep. Segment boundaries fall on window edges, so every segment
    covers at least one timestep center.
    """
    rng = np.random.default_rng(config.seed)
    signatures = make_signatures(config, rng)
    step_seconds = config.frames_per_step / config.frames_per_second
    low, high = config.segments_per_video

    videos = []
    for index in range(config.num_videos):
        video_id = f"vid{index:04d}"
        subject_id = f"subj{index // config.videos_per_subject:03d}"
        features = rng.standard_normal((config.steps_per_video, config.feature_dim))

        tracks = {}
        for class_index, behavior in enumerate(config.behaviors):
            count = int(rng.integers(low, high + 1))
            steps = _place_segments(count, config, rng)
            for start, end in steps:
                features[start:end] += config.snr * signatures[class_index]
            tracks[behavior] = AnnotationTrack(
                video_id=video_id,
                behavior=behavior,
                segments=[(start * step_seconds, end * step_seconds) for start, end in steps],
            )

        sequence = FeatureSequence(
            video_id=video_id,
            features=features,
            frames_per_step=config.frames_per_step,
            frames_per_second=config.frames_per_second,
        )
        videos.append(Video(features=sequence, subject_id=subject_id, tracks=tracks))

    logger.info(
        f"Generated {len(videos)} synthetic videos ({config.steps_per_video} steps, "
        f"dim {config.feature_dim}, snr {config.snr})"
    )
    return videos


def corpus_summary(videos: list[Video]) -> dict:
    """Counts used by the synth command's summary printout."""
    behaviors = sorted({b for video in videos for b in video.tracks})
    summary = {
        "videos": len(videos),
        "subjects": len({video.subject_id for video in videos}),
        "segments": {},
        "positive_rate": {},
    }
    total_steps = sum(video.features.num_steps for video in videos)
    for behavior in behaviors:
        summary["segments"][behavior] = sum(len(video.track(behavior).segments) for video in videos)
        positives = 0
        for video in videos:
            grid = video.features.time_grid
            inside = np.zeros(grid.shape, dtype=bool)
            for start, end in video.track(behavior).segments:
                inside |= (grid >= start) & (grid <= end)
            positives += int(inside.sum())
        summary["positive_rate"][behavior] = positives / total_steps if total_steps else 0.0
    return summary


# ==========================================
# Splitting
# ==========================================

def train_test_split(videos: list[Video], ratio: float, seed: int | None = None) -> tuple[list[Video], list[Video]]:
    """
    Split videos by subject so no subject appears on both sides.

    Subjects are shuffled with the seed and assigned to the train side until it
    holds at least `ratio` of the videos; both sides always get one subject.

    Raises:
        ValueError: if fewer than two subjects are present or ratio is outside (0, 1).
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    by_subject: dict[str, list[Video]] = {}
    for video in videos:
        by_subject.setdefault(video.subject_id, []).append(video)
    if len(by_subject) < 2:
        raise ValueError(f"Need at least 2 subjects to split, found {len(by_subject)}")

    rng = np.random.default_rng(seed)
    subjects = sorted(by_subject)
    order = [subjects[i] for i in rng.permutation(len(subjects))]

    target = ratio * len(videos)
    train_subjects: set[str] = set()
    train_count = 0
    for subject in order[:-1]:
        if train_subjects and train_count >= target:
            break
        train_subjects.add(subject)
        train_count += len(by_subject[subject])

    train_side = [v for v in videos if v.subject_id in train_subjects]
    test_side = [v for v in videos if v.subject_id not in train_subjects]
    logger.info(
        f"Split {len(videos)} videos into {len(train_side)} train / {len(test_side)} test "
        f"({len(train_subjects)} / {len(by_subject) - len(train_subjects)} subjects)"
    )
    return train_side, test_side
