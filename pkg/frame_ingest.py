import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import FrameFormatError

# Configure logging
logger = logging.getLogger(__name__)

DEFAULT_BINS = 16
CHANNELS = 3
LUMA = np.array([0.299, 0.587, 0.114])
BLOCK_TOLERANCE = 1e-9
PPM_COMMENT = re.compile(rb"#[^\n\r]*")


@dataclass(frozen=True, eq=False)
class FrameDescriptor:
    timestamp_ms: int
    histogram: np.ndarray
    luminance_mean: float

    @property
    def bins_per_channel(self) -> int:
        return self.histogram.shape[0] // CHANNELS


@dataclass(frozen=True, eq=False)
class VideoTrack:
    video_id: str
    frames: Tuple[FrameDescriptor, ...] = field(default_factory=tuple)
    duration_ms: int = 0

    @cached_property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp_ms for f in self.frames], dtype=np.int64)

    def histograms(self) -> np.ndarray:
        if not self.frames:
            return np.zeros((0, CHANNELS * DEFAULT_BINS))
        return np.stack([f.histogram for f in self.frames])

    def frame_at(self, timestamp_ms: int) -> FrameDescriptor:
        position = int(np.searchsorted(self.timestamps, timestamp_ms))
        if position >= len(self.frames) or self.frames[position].timestamp_ms != timestamp_ms:
            raise KeyError(f"no frame at {timestamp_ms} ms in {self.video_id}")
        return self.frames[position]

    def frames_between(self, start_ms: int, end_ms: int) -> Tuple[FrameDescriptor, ...]:
        """Frames with start_ms <= timestamp < end_ms"""
        stamps = self.timestamps
        lo = int(np.searchsorted(stamps, start_ms, side="left"))
        hi = int(np.searchsorted(stamps, end_ms, side="left"))
        return self.frames[lo:hi]


def compute_histogram(image: np.ndarray, bins_per_channel: int = DEFAULT_BINS):
    """Per-channel RGB histogram, each block L1-normalized, plus mean luminance in [0,1]"""
    if not 2 <= bins_per_channel <= 64:
        raise ValueError(f"bins_per_channel must be in [2, 64], got {bins_per_channel}")
    pixels = np.asarray(image).reshape(-1, CHANNELS)
    if pixels.shape[0] == 0:
        raise ValueError("image has no pixels")
    pixels = pixels.astype(np.int64)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("channel values must lie in [0, 255]")
    bin_index = pixels * bins_per_channel // 256
    blocks = [
        np.bincount(bin_index[:, channel], minlength=bins_per_channel) / pixels.shape[0]
        for channel in range(CHANNELS)
    ]
    histogram = np.concatenate(blocks).astype(np.float64)
    luminance = float((pixels @ LUMA).mean() / 255.0)
    return histogram, min(max(luminance, 0.0), 1.0)


def describe_frame(timestamp_ms: int, image: np.ndarray, bins_per_channel: int = DEFAULT_BINS) -> FrameDescriptor:
    histogram, luminance = compute_histogram(image, bins_per_channel)
    histogram.setflags(write=False)
    return FrameDescriptor(timestamp_ms=int(timestamp_ms), histogram=histogram, luminance_mean=luminance)


def check_histogram(histogram: np.ndarray) -> None:
    """Raise unless every channel block sums to 1"""
    if histogram.ndim != 1 or histogram.shape[0] % CHANNELS:
        raise FrameFormatError(f"histogram length {histogram.shape} is not a multiple of {CHANNELS}")
    if not np.all(np.isfinite(histogram)) or histogram.min() < 0:
        raise FrameFormatError("histogram has negative or non-finite entries")
    sums = histogram.reshape(CHANNELS, -1).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > BLOCK_TOLERANCE):
        raise FrameFormatError(f"histogram blocks do not sum to 1: {sums.tolist()}")


def _ppm_tokens(data: bytes, count: int):
    """Read `count` whitespace-separated header tokens; returns (tokens, offset after last token)"""
    tokens, position = [], 0
    while len(tokens) < count:
        while position < len(data) and (data[position:position + 1].isspace() or data[position:position + 1] == b"#"):
            if data[position:position + 1] == b"#":
                comment = PPM_COMMENT.match(data, position)
                position = comment.end()
            else:
                position += 1
        start = position
        while position < len(data) and not data[position:position + 1].isspace() and data[position:position + 1] != b"#":
            position += 1
        if start == position:
            raise FrameFormatError("truncated PPM header")
        tokens.append(data[start:position])
    return tokens, position


def parse_ppm_frame(data: bytes) -> np.ndarray:
    """Decode a P6 (binary) or P3 (ASCII) PPM with maxval 255 into an (H, W, 3) uint8 array"""
    tokens, position = _ppm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P6", b"P3"):
        raise FrameFormatError(f"unsupported PPM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FrameFormatError(f"bad PPM header: {e}") from e
    if width <= 0 or height <= 0:
        raise FrameFormatError(f"bad PPM size {width}x{height}")
    if maxval != 255:
        raise FrameFormatError(f"maxval must be 255, got {maxval}")
    expected = width * height * CHANNELS
    if magic == b"P6":
        payload = data[position + 1:position + 1 + expected]
        if len(payload) < expected:
            raise FrameFormatError(f"truncated P6 payload: {len(payload)} of {expected} bytes")
        values = np.frombuffer(payload, dtype=np.uint8)
    else:
        body = PPM_COMMENT.sub(b" ", data[position:]).split()
        if len(body) < expected:
            raise FrameFormatError(f"truncated P3 payload: {len(body)} of {expected} samples")
        try:
            values = np.array([int(v) for v in body[:expected]], dtype=np.int64)
        except ValueError as e:
            raise FrameFormatError(f"bad P3 sample: {e}") from e
        if values.min() < 0 or values.max() > 255:
            raise FrameFormatError("P3 sample outside [0, 255]")
        values = values.astype(np.uint8)
    return values.reshape(height, width, CHANNELS)


def _describe_file(path: Path, timestamp_ms: int, bins: int) -> FrameDescriptor:
    return describe_frame(timestamp_ms, parse_ppm_frame(path.read_bytes()), bins)


def _finish_track(video_id, frames, duration_ms) -> VideoTrack:
    last = frames[-1].timestamp_ms if frames else 0
    if duration_ms is None:
        duration_ms = last
    elif duration_ms < last:
        raise FrameFormatError(f"duration {duration_ms} ms is before the last frame at {last} ms")
    return VideoTrack(video_id=video_id, frames=tuple(frames), duration_ms=int(duration_ms))


def load_frame_directory(directory, video_id: str, duration_ms: Optional[int] = None,
                         bins: int = DEFAULT_BINS, n_jobs: int = 1) -> VideoTrack:
    """Frames named `<timestamp_ms>.ppm`; descriptors computed in parallel, merged by timestamp"""
    directory = Path(directory)
    sources = {}
    for path in sorted(directory.glob("*.ppm")):
        if not path.stem.isdigit():
            raise FrameFormatError(f"frame name {path.name} is not <timestamp_ms>.ppm")
        timestamp = int(path.stem)
        if timestamp in sources:
            raise FrameFormatError(f"duplicate timestamp {timestamp} ms: {sources[timestamp].name} and {path.name}")
        sources[timestamp] = path
    if not sources:
        logger.warning(f"No frames found in {directory} for video {video_id}")
        return _finish_track(video_id, [], duration_ms)
    ordered = sorted(sources.items())
    frames = Parallel(n_jobs=n_jobs)(delayed(_describe_file)(path, ts, bins) for ts, path in ordered)
    return _finish_track(video_id, list(frames), duration_ms)


def descriptor_columns(bins: int = DEFAULT_BINS):
    return ["timestamp_ms"] + [f"h{i}" for i in range(CHANNELS * bins)] + ["luminance"]


def read_descriptor_csv(path, video_id: str, duration_ms: Optional[int] = None) -> VideoTrack:
    """Load `timestamp_ms,h0..hN,luminance` rows; timestamps must increase strictly"""
    path = Path(path)
    try:
        table = pd.read_csv(path, dtype=float)
    except (pd.errors.ParserError, ValueError) as e:
        raise FrameFormatError(f"{path}: {e}") from e
    columns = list(table.columns)
    n_hist = len(columns) - 2
    if n_hist <= 0 or n_hist % CHANNELS or columns != descriptor_columns(n_hist // CHANNELS):
        raise FrameFormatError(f"{path}: unexpected header {columns[:3]}...")
    frames, previous = [], None
    for row_number, row in enumerate(table.itertuples(index=False, name=None), start=2):
        timestamp = int(row[0])
        if previous is not None and timestamp <= previous:
            if timestamp == previous:
                raise FrameFormatError(f"{path}:{row_number}: duplicate timestamp {timestamp}")
            raise FrameFormatError(f"{path}:{row_number}: timestamps not increasing ({previous} then {timestamp})")
        histogram = np.array(row[1:-1], dtype=np.float64)
        check_histogram(histogram)
        luminance = float(row[-1])
        if not 0.0 <= luminance <= 1.0:
            raise FrameFormatError(f"{path}:{row_number}: luminance {luminance} outside [0, 1]")
        histogram.setflags(write=False)
        frames.append(FrameDescriptor(timestamp_ms=timestamp, histogram=histogram, luminance_mean=luminance))
        previous = timestamp
    if not frames:
        logger.warning(f"Descriptor file {path} has no rows")
    return _finish_track(video_id, frames, duration_ms)


def write_descriptor_csv(track: VideoTrack, path) -> None:
    bins = track.frames[0].bins_per_channel if track.frames else DEFAULT_BINS
    rows = [
        [frame.timestamp_ms, *frame.histogram.tolist(), frame.luminance_mean]
        for frame in track.frames
    ]
    table = pd.DataFrame(rows, columns=descriptor_columns(bins))
    table["timestamp_ms"] = table["timestamp_ms"].astype(np.int64)
    table.to_csv(path, index=False, float_format="%.12f", lineterminator="\n", encoding="utf-8")


def load_track(source, video_id: str, duration_ms: Optional[int] = None,
               bins: int = DEFAULT_BINS, n_jobs: int = 1) -> VideoTrack:
    """Load a frame directory or a descriptor CSV"""
    source = Path(source)
    if source.is_dir():
        return load_frame_directory(source, video_id, duration_ms, bins=bins, n_jobs=n_jobs)
    if source.suffix.lower() == ".csv":
        return read_descriptor_csv(source, video_id, duration_ms)
    raise FrameFormatError(f"{source} is neither a frame directory nor a descriptor CSV")


def l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).sum())
