import json
import os

import numpy as np
import pandas as pd
import pytest

from config import load_config
from frame_ingest import CHANNELS, DEFAULT_BINS, FrameDescriptor, VideoTrack, write_descriptor_csv
from subtitle_ingest import Cue, Transcript, write_srt

LINES = {
    "NonInformative": "what a lovely view of the valley.",
    "Performance": "the frame rate drops and the game lags badly.",
    "Logic": "my character is stuck inside the wall again.",
}
# label of each 20 s region, per video
REGIONS = {
    "alpha": ("NonInformative", "Performance", "Logic"),
    "beta": ("Performance", "Logic", "NonInformative"),
    "gamma": ("Logic", "NonInformative", "Performance"),
}
VIDEO_MS = 60000


def scene_histogram(scene, jitter=0.0, bins=DEFAULT_BINS):
    """Histogram whose mass sits on two bins owned by the scene; scenes below bins/2 are disjoint"""
    block = np.zeros(bins)
    first = (2 * scene) % bins
    block[first] = 1.0 - jitter
    block[first + 1] = jitter
    return np.tile(block, CHANNELS)


def build_track(video_id, scene_at, duration_ms=VIDEO_MS, step_ms=500, jitter=0.0, seed=0, luminance=0.5):
    """scene_at(timestamp) -> scene number; optional per-frame jitter inside a scene"""
    rng = np.random.default_rng(seed)
    frames = []
    for ts in range(0, duration_ms, step_ms):
        amount = rng.uniform(0, jitter) if jitter else 0.0
        histogram = scene_histogram(scene_at(ts), amount)
        histogram.setflags(write=False)
        frames.append(FrameDescriptor(timestamp_ms=ts, histogram=histogram, luminance_mean=luminance))
    return VideoTrack(video_id=video_id, frames=tuple(frames), duration_ms=duration_ms)


def build_transcript(video_id, cues):
    return Transcript(video_id=video_id, cues=tuple(
        Cue(index=n, start_ms=start, end_ms=end, text=text) for n, (start, end, text) in enumerate(cues, start=1)
    ))


def random_cues(rng, n, start_ms=0, punctuation=0.5):
    """n non-overlapping cues with random lengths, gaps and sentence endings"""
    cues = []
    clock = start_ms
    for _ in range(n):
        clock += int(rng.integers(0, 4000))
        length = int(rng.integers(200, 5000))
        text = "word " * int(rng.integers(1, 6)) + ("end." if rng.uniform() < punctuation else "and")
        cues.append((clock, clock + length, text))
        clock += length
    return cues


def region_cues(regions):
    """A 3 s cue every 4 s, spoken text following the region's label"""
    return [(start, start + 3000, LINES[regions[start // 20000]]) for start in range(0, VIDEO_MS, 4000)]


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for key in list(os.environ):
        if key.startswith("GELID_"):
            monkeypatch.delenv(key, raising=False)


@pytest.fixture
def run_config():
    return load_config(overrides={
        "pipeline": {"seed": 7},
        "model": {"forest": {"n_trees": 15}},
    })


@pytest.fixture
def three_scene_track():
    return build_track("alpha", lambda ts: ts // 20000)


@pytest.fixture
def dataset(tmp_path):
    """Three 60 s videos on disk with a manifest and a training label table"""
    videos = []
    label_rows = []
    for video_id, regions in REGIONS.items():
        offset = {"alpha": 0, "beta": 1, "gamma": 2}[video_id]
        track = build_track(video_id, lambda ts, o=offset: (ts // 20000 + o) % 3)
        transcript = build_transcript(video_id, region_cues(regions))
        (tmp_path / f"{video_id}.srt").write_text(write_srt(transcript), encoding="utf-8")
        write_descriptor_csv(track, tmp_path / f"{video_id}.csv")
        videos.append({"video_id": video_id, "subtitles": f"{video_id}.srt", "frames": f"{video_id}.csv",
                       "duration_ms": VIDEO_MS})
        for region, label in enumerate(regions):
            label_rows.append({"video_id": video_id, "start_ms": region * 20000, "end_ms": (region + 1) * 20000,
                               "label": label})
    pd.DataFrame(label_rows).to_csv(tmp_path / "labels.csv", index=False)
    manifest = {"schema_version": 1, "videos": videos, "labels": "labels.csv"}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest), encoding="utf-8")
    return path
