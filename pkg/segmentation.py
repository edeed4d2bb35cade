import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import DataFormatError, SchemaVersionError
from frame_ingest import VideoTrack
from subtitle_ingest import DEFAULT_GAP_MS, SentenceSpan, Transcript, sentence_spans

# Configure logging
logger = logging.getLogger(__name__)

SEGMENTS_SCHEMA_VERSION = 1
EVALUATED_K_SECONDS = (0, 5, 10)


class SegmenterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k_seconds: int = Field(5, ge=0)
    alpha: float = Field(3.0, gt=0)
    window: int = Field(24, ge=1)
    min_shot_ms: int = Field(2000, ge=0)
    min_segment_ms: int = Field(3000, ge=0)
    silence_ms: int = Field(3000, ge=0)
    gap_ms: int = Field(DEFAULT_GAP_MS, ge=0)
    max_keyframes: int = Field(10, ge=1)


class SnapRule(str, Enum):
    SENTENCE_END = "sentence_end"
    SILENCE_PASSTHROUGH = "silence_passthrough"


@dataclass(frozen=True)
class ShotTransition:
    timestamp_ms: int
    score: float


@dataclass(frozen=True)
class CutPoint:
    cut_ms: int
    source_shot_ms: int
    shifted_ms: int
    snap_rule: SnapRule


@dataclass(frozen=True)
class Segment:
    segment_id: str
    video_id: str
    start_ms: int
    end_ms: int
    cue_indices: Tuple[int, ...] = field(default_factory=tuple)
    keyframe_timestamps: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms

    def to_dict(self):
        data = asdict(self)
        data["cue_indices"] = list(self.cue_indices)
        data["keyframe_timestamps"] = list(self.keyframe_timestamps)
        return data


class ShotDetector(Protocol):
    def detect(self, track: VideoTrack, cfg: SegmenterConfig) -> List[ShotTransition]:
        ...


class HistogramShotDetector:
    """Adaptive threshold on consecutive L1 histogram distances"""

    def detect(self, track: VideoTrack, cfg: SegmenterConfig) -> List[ShotTransition]:
        frames = track.frames
        if len(frames) < 2:
            logger.warning(f"Video {track.video_id} has {len(frames)} frame(s); no shot transitions detected")
            return []
        histograms = track.histograms()
        distances = np.abs(np.diff(histograms, axis=0)).sum(axis=1)
        shots: List[ShotTransition] = []
        last_shot_ms = None
        # distances[i - 1] is the change into frame i
        for i in range(2, len(frames)):
            current = distances[i - 1]
            history = distances[max(0, i - 1 - cfg.window):i - 1]
            threshold = history.mean() + cfg.alpha * history.std()
            if current <= threshold:
                continue
            timestamp = frames[i].timestamp_ms
            if last_shot_ms is not None and timestamp - last_shot_ms < cfg.min_shot_ms:
                continue
            shots.append(ShotTransition(timestamp_ms=timestamp, score=float(current)))
            last_shot_ms = timestamp
        return shots


def detect_shot_transitions(track: VideoTrack, cfg: SegmenterConfig,
                            detector: Optional[ShotDetector] = None) -> List[ShotTransition]:
    detector = detector or HistogramShotDetector()
    return detector.detect(track, cfg)


def _snap(shifted: int, spans: Sequence[SentenceSpan], silence_ms: int) -> Optional[SentenceSpan]:
    for span in spans:
        if span.start_ms <= shifted < span.end_ms:
            return span
    for span in spans:
        if shifted < span.start_ms <= shifted + silence_ms:
            return span
    return None


def derive_cut_points(shots: Sequence[ShotTransition], transcript: Transcript, cfg: SegmenterConfig,
                      duration_ms: Optional[int] = None) -> List[CutPoint]:
    """Shift every shot by the reaction time and snap it to the end of the sentence being spoken"""
    spans = sorted(sentence_spans(transcript, cfg.gap_ms), key=lambda s: (s.start_ms, s.end_ms))
    cuts = {}
    for shot in sorted(shots, key=lambda s: s.timestamp_ms):
        shifted = shot.timestamp_ms + cfg.k_seconds * 1000
        span = _snap(shifted, spans, cfg.silence_ms)
        if span is not None:
            cut = CutPoint(cut_ms=span.end_ms, source_shot_ms=shot.timestamp_ms,
                           shifted_ms=shifted, snap_rule=SnapRule.SENTENCE_END)
        else:
            cut = CutPoint(cut_ms=shifted, source_shot_ms=shot.timestamp_ms,
                           shifted_ms=shifted, snap_rule=SnapRule.SILENCE_PASSTHROUGH)
        if duration_ms is not None and not 0 < cut.cut_ms < duration_ms:
            logger.debug(f"Dropping cut at {cut.cut_ms} ms outside (0, {duration_ms})")
            continue
        cuts.setdefault(cut.cut_ms, cut)
    return [cuts[t] for t in sorted(cuts)]


def _merge_short(bounds: List[Tuple[int, int]], min_segment_ms: int) -> List[Tuple[int, int]]:
    merged: List[Tuple[int, int]] = []
    for start, end in bounds:
        if merged and end - start < min_segment_ms:
            merged[-1] = (merged[-1][0], end)
        else:
            merged.append((start, end))
    # a short head has no predecessor; fold it into its successor
    if len(merged) > 1 and merged[0][1] - merged[0][0] < min_segment_ms:
        merged[1] = (merged[0][0], merged[1][1])
        merged.pop(0)
    return merged


def _keyframes(track: VideoTrack, start: int, end: int, shot_times: Sequence[int], limit: int) -> Tuple[int, ...]:
    inside = track.frames_between(start, end)
    stamps = [f.timestamp_ms for f in inside]
    picked: List[int] = []
    for shot in shot_times:
        if not start <= shot < end:
            continue
        first_after = next((ts for ts in stamps if ts >= shot), None)
        if first_after is not None and first_after not in picked:
            picked.append(first_after)
        if len(picked) == limit:
            break
    if picked:
        return tuple(picked)
    if stamps:
        return (stamps[len(stamps) // 2],)
    if track.frames:
        # segment falls between two samples: take the frame nearest its middle
        middle = (start + end) / 2
        nearest = min(track.frames, key=lambda f: (abs(f.timestamp_ms - middle), f.timestamp_ms))
        return (nearest.timestamp_ms,)
    raise DataFormatError(f"video {track.video_id} has no frames to take keyframes from")


def build_segments(track: VideoTrack, cuts: Sequence[CutPoint], transcript: Transcript, cfg: SegmenterConfig,
                   shots: Optional[Sequence[ShotTransition]] = None) -> List[Segment]:
    """Tile [0, duration) at the cut points, merging segments shorter than min_segment_ms"""
    duration = track.duration_ms
    if duration <= 0:
        logger.warning(f"Video {track.video_id} has zero duration; no segments built")
        return []
    cut_times = sorted({c.cut_ms for c in cuts})
    for t in cut_times:
        if not 0 < t < duration:
            raise ValueError(f"cut at {t} ms lies outside (0, {duration})")
    edges = [0, *cut_times, duration]
    bounds = _merge_short(list(zip(edges[:-1], edges[1:])), cfg.min_segment_ms)
    if shots is None:
        shot_times = sorted({c.source_shot_ms for c in cuts})
    else:
        shot_times = sorted(s.timestamp_ms for s in shots)

    cue_owner = {}
    for cue in transcript.cues:
        mid2 = cue.midpoint_x2
        owner = next((n for n, (s, e) in enumerate(bounds) if 2 * s <= mid2 < 2 * e), None)
        if owner is None and mid2 >= 2 * duration:
            owner = len(bounds) - 1
        if owner is not None:
            cue_owner.setdefault(owner, []).append(cue.index)

    segments = []
    for n, (start, end) in enumerate(bounds):
        segments.append(Segment(
            segment_id=f"{track.video_id}-{n:04d}",
            video_id=track.video_id,
            start_ms=start,
            end_ms=end,
            cue_indices=tuple(cue_owner.get(n, ())),
            keyframe_timestamps=_keyframes(track, start, end, shot_times, cfg.max_keyframes),
        ))
    return segments


def segment_video(track: VideoTrack, transcript: Transcript, cfg: SegmenterConfig,
                  detector: Optional[ShotDetector] = None) -> List[Segment]:
    """Run shot detection, cut-point derivation and tiling for one video"""
    shots = detect_shot_transitions(track, cfg, detector)
    cuts = derive_cut_points(shots, transcript, cfg, duration_ms=track.duration_ms)
    segments = build_segments(track, cuts, transcript, cfg, shots=shots)
    logger.info(f"Video {track.video_id}: {len(shots)} shots, {len(cuts)} cuts, {len(segments)} segments")
    return segments


def segment_text(segment: Segment, transcript: Transcript) -> str:
    cues = transcript.by_index()
    return " ".join(cues[i].text for i in segment.cue_indices if i in cues)


def segment_from_bounds(track: VideoTrack, transcript: Transcript, start_ms: int, end_ms: int,
                        segment_id: str, cfg: SegmenterConfig,
                        shots: Optional[Sequence[ShotTransition]] = None) -> Segment:
    """Build a segment for externally given boundaries (manual splits of training videos)

    Pass the track's shot transitions when building many segments of one video; they are
    detected here otherwise.
    """
    if not 0 <= start_ms < end_ms:
        raise DataFormatError(f"segment {segment_id}: bad bounds [{start_ms}, {end_ms})")
    if shots is None:
        shots = detect_shot_transitions(track, cfg)
    shot_times = sorted(s.timestamp_ms for s in shots)
    cues = tuple(c.index for c in transcript.cues if 2 * start_ms <= c.midpoint_x2 < 2 * end_ms)
    return Segment(
        segment_id=segment_id,
        video_id=track.video_id,
        start_ms=start_ms,
        end_ms=end_ms,
        cue_indices=cues,
        keyframe_timestamps=_keyframes(track, start_ms, end_ms, shot_times, cfg.max_keyframes),
    )


def write_segments_jsonl(segments: Iterable[Segment]) -> str:
    lines = [
        json.dumps({"schema_version": SEGMENTS_SCHEMA_VERSION, **s.to_dict()}, sort_keys=True)
        for s in segments
    ]
    return "".join(line + "\n" for line in lines)


def read_segments_jsonl(path) -> List[Segment]:
    segments = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}:{number}: {e}") from e
        if data.pop("schema_version", None) != SEGMENTS_SCHEMA_VERSION:
            raise SchemaVersionError(f"{path}:{number}: unsupported segments schema")
        segments.append(Segment(
            segment_id=data["segment_id"],
            video_id=data["video_id"],
            start_ms=int(data["start_ms"]),
            end_ms=int(data["end_ms"]),
            cue_indices=tuple(data["cue_indices"]),
            keyframe_timestamps=tuple(data["keyframe_timestamps"]),
        ))
    return segments
