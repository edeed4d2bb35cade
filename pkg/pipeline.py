"""
Orchestration of the issue mining pipeline.

Stages run in a fixed order (ingest, segment, train when no model is supplied,
classify, group, cluster) and every per-video stage is merged back in manifest
order, so the worker count never changes the result. Nothing is written here:
callers persist artifacts only after run_pipeline returned.
"""
import hashlib
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from artifacts import SCHEMA_VERSION, canonical_json, read_json
from classifiers import (IssueLabel, LABEL_ORDER, ModelKind, TrainedModel, evaluate, predict_matrix, train)
from clustering import (ClusterAssignment, ClusteringConfig, cluster_issues, group_by_context, promote_noise)
from config import RunConfig, config_digest
from errors import DataFormatError, GelidError, InvariantViolation, StageError
from evalstats import KappaResult, Partition, cohens_kappa, mojo_fm
from features import VARIANTS, Featurizer, fit_vocabulary, group_mask, smote_oversample, text_matrix
from frame_ingest import VideoTrack, load_track
from ledger import record_run
from segmentation import (
    Segment,
    ShotTransition,
    detect_shot_transitions,
    segment_from_bounds,
    segment_text,
    segment_video,
)
from subtitle_ingest import Transcript, load_transcript

# Configure logging
logger = logging.getLogger(__name__)

GRID_VARIANTS = ("text", "video", "all")
CLUSTER_ALGORITHMS = ("dbscan", "optics", "mean_shift")


class VideoEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    video_id: str = Field(min_length=1)
    subtitles: Path
    frames: Path
    duration_ms: Optional[int] = Field(None, ge=0)
    language: str = "en"


class Manifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    videos: List[VideoEntry]
    labels: Optional[Path] = None

    @model_validator(mode="after")
    def _check(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {self.schema_version}")
        ids = [v.video_id for v in self.videos]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"duplicate video ids: {duplicates}")
        return self

    def resolved(self, base: Path) -> "Manifest":
        """Copy with paths made relative to the manifest's directory"""
        def fix(path):
            return path if path is None or path.is_absolute() else base / path
        return self.model_copy(update={
            "videos": [v.model_copy(update={"subtitles": fix(v.subtitles), "frames": fix(v.frames)})
                       for v in self.videos],
            "labels": fix(self.labels),
        })


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        manifest = Manifest.model_validate(read_json(path))
    except ValidationError as e:
        raise DataFormatError(f"{path}: invalid manifest: {e}") from e
    return manifest.resolved(path.parent)


@dataclass(frozen=True, eq=False)
class VideoData:
    video_id: str
    transcript: Transcript
    track: VideoTrack


@dataclass(frozen=True)
class LabeledSegment:
    segment: Segment
    label: IssueLabel
    text: str


@dataclass(frozen=True, eq=False)
class Prediction:
    segment: Segment
    text: str
    label: IssueLabel
    probabilities: Tuple[float, ...]


@dataclass(frozen=True)
class Consolidation:
    rows: pd.DataFrame
    kappa: KappaResult
    discarded: int


# Hierarchy

@dataclass(frozen=True)
class SegmentRef:
    segment_id: str
    video_id: str
    start_ms: int
    end_ms: int

    @classmethod
    def of(cls, segment: Segment) -> "SegmentRef":
        return cls(segment.segment_id, segment.video_id, segment.start_ms, segment.end_ms)

    def to_dict(self):
        return {"segment_id": self.segment_id, "video_id": self.video_id,
                "start_ms": self.start_ms, "end_ms": self.end_ms}


def _summary(members: Sequence[SegmentRef], labels: Mapping[str, int]):
    return {
        "segments": len(members),
        "duration_ms": sum(m.end_ms - m.start_ms for m in members),
        "labels": dict(sorted(labels.items())),
    }


@dataclass
class IssueCluster:
    cluster_id: int
    medoid: str
    members: List[SegmentRef]

    def to_dict(self, label: IssueLabel):
        return {
            "cluster_id": self.cluster_id,
            "medoid": self.medoid,
            "segments": [m.to_dict() for m in self.members],
            "summary": _summary(self.members, {label.value: len(self.members)}),
        }


@dataclass
class CategoryNode:
    label: IssueLabel
    clusters: List[IssueCluster] = field(default_factory=list)

    @property
    def members(self) -> List[SegmentRef]:
        return [m for c in self.clusters for m in c.members]

    def to_dict(self):
        return {
            "label": self.label.value,
            "clusters": [c.to_dict(self.label) for c in self.clusters],
            "summary": _summary(self.members, {self.label.value: len(self.members)}),
        }


@dataclass
class ContextNode:
    context_id: str
    categories: List[CategoryNode] = field(default_factory=list)

    @property
    def members(self) -> List[SegmentRef]:
        return [m for c in self.categories for m in c.members]

    def to_dict(self):
        labels = {c.label.value: len(c.members) for c in self.categories}
        return {
            "context_id": self.context_id,
            "categories": [c.to_dict() for c in self.categories],
            "summary": _summary(self.members, labels),
        }


@dataclass
class IssueHierarchy:
    contexts: List[ContextNode] = field(default_factory=list)
    n_segments: int = 0
    n_non_informative: int = 0

    @property
    def n_informative(self) -> int:
        return sum(len(c.members) for c in self.contexts)

    def check_conservation(self) -> None:
        ids = [m.segment_id for c in self.contexts for m in c.members]
        if len(ids) != len(set(ids)):
            raise InvariantViolation("a segment appears more than once in the hierarchy")
        if self.n_informative + self.n_non_informative != self.n_segments:
            raise InvariantViolation(
                f"segment conservation broken: {self.n_informative} informative + "
                f"{self.n_non_informative} non-informative != {self.n_segments}")

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "contexts": [c.to_dict() for c in self.contexts],
            "summary": {
                "segments": self.n_segments,
                "informative": self.n_informative,
                "non_informative": self.n_non_informative,
                "contexts": len(self.contexts),
                "clusters": sum(len(cat.clusters) for c in self.contexts for cat in c.categories),
            },
        }

    @classmethod
    def from_dict(cls, data) -> "IssueHierarchy":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise DataFormatError(f"unsupported hierarchy schema {data.get('schema_version')!r}")
        contexts = []
        for ctx in data["contexts"]:
            categories = []
            for cat in ctx["categories"]:
                clusters = [
                    IssueCluster(cluster_id=int(cl["cluster_id"]), medoid=cl["medoid"],
                                 members=[SegmentRef(**s) for s in cl["segments"]])
                    for cl in cat["clusters"]
                ]
                categories.append(CategoryNode(label=IssueLabel(cat["label"]), clusters=clusters))
            contexts.append(ContextNode(context_id=ctx["context_id"], categories=categories))
        summary = data.get("summary", {})
        return cls(contexts=contexts, n_segments=int(summary.get("segments", 0)),
                   n_non_informative=int(summary.get("non_informative", 0)))


def hierarchy_json(hierarchy: IssueHierarchy) -> str:
    return canonical_json(hierarchy.to_dict())


@dataclass
class PipelineResult:
    hierarchy: IssueHierarchy
    report: Dict
    predictions: List[Prediction]
    model: TrainedModel
    contexts: ClusterAssignment
    videos: List[VideoData]


# Stage helpers

@contextmanager
def stage(name: str, video_id: Optional[str] = None):
    """Re-raise any failure as a StageError naming the stage and video"""
    try:
        yield
    except StageError:
        raise
    except (GelidError, ValueError, OSError, KeyError) as e:
        logger.error(f"Error in stage {name}{f' for {video_id}' if video_id else ''}: {e}")
        raise StageError(name, video_id, e) from e


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return Parallel(n_jobs=workers)(delayed(fn)(item) for item in items)


def ingest_video(entry: VideoEntry, bins: int = 16) -> VideoData:
    with stage("ingest", entry.video_id):
        for path in (entry.subtitles, entry.frames):
            if not Path(path).exists():
                raise DataFormatError(f"missing input {path}")
        transcript = load_transcript(entry.subtitles, video_id=entry.video_id, language=entry.language)
        track = load_track(entry.frames, entry.video_id, entry.duration_ms, bins=bins)
    logger.info(f"Ingested {entry.video_id}: {len(transcript.cues)} cues, {len(track.frames)} frames")
    return VideoData(video_id=entry.video_id, transcript=transcript, track=track)


def ingest_videos(manifest: Manifest, cfg: RunConfig) -> List[VideoData]:
    bins = cfg.pipeline.bins_per_channel
    return _map(lambda entry: ingest_video(entry, bins), manifest.videos, cfg.pipeline.workers)


def segment_videos(videos: Sequence[VideoData], cfg: RunConfig) -> Dict[str, List[Segment]]:
    def run(video: VideoData):
        with stage("segment", video.video_id):
            return segment_video(video.track, video.transcript, cfg.segmenter)

    segments = _map(run, list(videos), cfg.pipeline.workers)
    return {video.video_id: result for video, result in zip(videos, segments)}


def featurize(featurizer: Featurizer, items: Sequence[Tuple[Segment, str]],
              videos: Mapping[str, VideoData]) -> Tuple[np.ndarray, Tuple[str, ...]]:
    names = featurizer.names
    rows = []
    for segment, text in items:
        video = videos[segment.video_id]
        with stage("features", segment.video_id):
            vector = featurizer.transform(segment, text, video.track, video.transcript)
        rows.append(vector.values)
    X = np.stack(rows) if rows else np.zeros((0, len(names)))
    return X, names


# Training data

def consolidate_annotations(table: pd.DataFrame) -> Consolidation:
    """Keep rows where both annotators agree; disagreements are discarded as ambiguous"""
    for column in ("annotator_1", "annotator_2"):
        if column not in table.columns:
            raise DataFormatError(f"labels table lacks column {column}")
    first = table["annotator_1"].astype(str).tolist()
    second = table["annotator_2"].astype(str).tolist()
    kappa = cohens_kappa(first, second) if len(table) else KappaResult(0.0, 0.0, 0.0, degenerate=True)
    agreed = table[table["annotator_1"].astype(str) == table["annotator_2"].astype(str)].copy()
    agreed["label"] = agreed["annotator_1"].astype(str)
    discarded = len(table) - len(agreed)
    logger.info(f"Annotators agree on {len(agreed)} of {len(table)} segments (kappa {kappa.kappa:.3f}); "
                f"{discarded} discarded")
    return Consolidation(rows=agreed.drop(columns=["annotator_1", "annotator_2"]), kappa=kappa,
                         discarded=discarded)


def load_label_table(path) -> pd.DataFrame:
    """`video_id,start_ms,end_ms,label` rows, or two annotator columns instead of label"""
    path = Path(path)
    try:
        table = pd.read_csv(path, dtype={"video_id": str})
    except (pd.errors.ParserError, ValueError, OSError) as e:
        raise DataFormatError(f"{path}: {e}") from e
    for column in ("video_id", "start_ms", "end_ms"):
        if column not in table.columns:
            raise DataFormatError(f"{path}: missing column {column}")
    if "label" not in table.columns:
        table = consolidate_annotations(table).rows
    valid = {label.value for label in IssueLabel}
    unknown = sorted(set(table["label"].astype(str)) - valid)
    if unknown:
        raise DataFormatError(f"{path}: unknown labels {unknown}")
    return table.reset_index(drop=True)


def bounded_segments(table: pd.DataFrame, videos: Mapping[str, VideoData], cfg: RunConfig,
                     tag: str = "L") -> List[Segment]:
    """Segments for externally given `video_id,start_ms,end_ms` rows, numbered per video"""
    counters: Dict[str, int] = {}
    shots: Dict[str, List[ShotTransition]] = {}
    segments = []
    for row in table.itertuples(index=False):
        video = videos.get(row.video_id)
        if video is None:
            raise DataFormatError(f"segment row refers to unknown video {row.video_id}")
        if row.video_id not in shots:
            shots[row.video_id] = detect_shot_transitions(video.track, cfg.segmenter)
        n = counters.get(row.video_id, 0)
        counters[row.video_id] = n + 1
        segments.append(segment_from_bounds(video.track, video.transcript, int(row.start_ms), int(row.end_ms),
                                            f"{row.video_id}-{tag}{n:04d}", cfg.segmenter,
                                            shots=shots[row.video_id]))
    return segments


def labeled_segments(table: pd.DataFrame, videos: Mapping[str, VideoData], cfg: RunConfig) -> List[LabeledSegment]:
    return [
        LabeledSegment(segment=segment, label=IssueLabel(str(label)),
                       text=segment_text(segment, videos[segment.video_id].transcript))
        for segment, label in zip(bounded_segments(table, videos, cfg), table["label"])
    ]


def load_truth_table(path) -> pd.DataFrame:
    """`video_id,start_ms,end_ms,context` rows naming the true context of each segment"""
    path = Path(path)
    try:
        table = pd.read_csv(path, dtype={"video_id": str, "context": str})
    except (pd.errors.ParserError, ValueError, OSError) as e:
        raise DataFormatError(f"{path}: {e}") from e
    for column in ("video_id", "start_ms", "end_ms", "context"):
        if column not in table.columns:
            raise DataFormatError(f"{path}: missing column {column}")
    return table


def truth_segments(table: pd.DataFrame, videos: Mapping[str, VideoData],
                   cfg: RunConfig) -> Tuple[List[Segment], Dict[str, str]]:
    segments = bounded_segments(table, videos, cfg, tag="T")
    return segments, {s.segment_id: str(c) for s, c in zip(segments, table["context"])}


def split_dataset(items: Sequence, labels: Sequence, fractions: Tuple[float, float] = (0.1, 0.9),
                  seed: int = 0):
    """Stratified seeded split into (evaluation, test) with largest-remainder allocation per label"""
    if len(items) != len(labels):
        raise ValueError("items and labels differ in length")
    if min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    share = fractions[0]
    rng = np.random.default_rng(seed)
    by_label: Dict[str, List[int]] = {}
    for position, label in enumerate(labels):
        by_label.setdefault(str(getattr(label, "value", label)), []).append(position)
    for label, members in sorted(by_label.items()):
        if len(members) < 2:
            logger.warning(f"Label {label} has {len(members)} member(s); cannot stratify it")
    target = math.floor(share * len(items) + 0.5)
    quota = {label: math.floor(share * len(m)) for label, m in by_label.items()}
    remainders = sorted(by_label, key=lambda label: (-(share * len(by_label[label]) - quota[label]), label))
    spare = target - sum(quota.values())
    for label in remainders:
        if spare <= 0:
            break
        if quota[label] < len(by_label[label]):
            quota[label] += 1
            spare -= 1
    evaluation, test = [], []
    for label in sorted(by_label):
        members = list(by_label[label])
        shuffled = [members[i] for i in rng.permutation(len(members))]
        chosen = set(shuffled[:quota[label]])
        for position in members:
            (evaluation if position in chosen else test).append(position)
    evaluation.sort()
    test.sort()
    return [items[p] for p in evaluation], [items[p] for p in test]


def train_classifier(labeled: Sequence[LabeledSegment], videos: Mapping[str, VideoData], cfg: RunConfig,
                     kind: Optional[ModelKind] = None) -> TrainedModel:
    """Fit features on the training segments, rebalance, and train the configured model"""
    if not labeled:
        raise DataFormatError("no labelled training segments")
    featurizer = Featurizer(cfg.features).fit([item.text for item in labeled])
    X, names = featurize(featurizer, [(item.segment, item.text) for item in labeled], videos)
    y = [item.label.value for item in labeled]
    if cfg.features.smote:
        X, y = smote_oversample(X, y, cfg.features.smote_k, cfg.pipeline.seed)
    kind = ModelKind(kind or cfg.model.kind)
    return train(kind, X, list(y), cfg.model.hyper(kind), seed=cfg.pipeline.seed, feature_names=names,
                 metadata={"featurizer": featurizer.to_dict()})


def featurizer_for(model: TrainedModel) -> Featurizer:
    data = model.metadata.get("featurizer")
    if not data:
        raise DataFormatError("model carries no featurizer; retrain it with this tool")
    return Featurizer.from_dict(data)


def classify_segments(model: TrainedModel, videos: Sequence[VideoData],
                      segments: Mapping[str, Sequence[Segment]]) -> List[Prediction]:
    featurizer = featurizer_for(model)
    by_id = {v.video_id: v for v in videos}
    items = [
        (segment, segment_text(segment, video.transcript))
        for video in videos for segment in segments[video.video_id]
    ]
    if not items:
        return []
    X, names = featurize(featurizer, items, by_id)
    with stage("classify"):
        proba = predict_matrix(model, X, names)
    return [
        Prediction(segment=segment, text=text, label=model.label_order[int(np.argmax(row))],
                   probabilities=tuple(float(p) for p in row))
        for (segment, text), row in zip(items, proba)
    ]


def predictions_to_json(predictions: Sequence[Prediction]):
    return {
        "schema_version": SCHEMA_VERSION,
        "labels": [label.value for label in LABEL_ORDER],
        "predictions": [
            {"segment_id": p.segment.segment_id, "label": p.label.value, "probabilities": list(p.probabilities)}
            for p in predictions
        ],
    }


def predictions_from_json(data, segments: Sequence[Segment], videos: Mapping[str, VideoData]) -> List[Prediction]:
    """Rejoin stored labels with their segments; segment order is kept"""
    if data.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(f"unsupported predictions schema {data.get('schema_version')!r}")
    stored = {row["segment_id"]: row for row in data["predictions"]}
    missing = sorted({s.segment_id for s in segments} - set(stored))
    if missing:
        raise DataFormatError(f"no prediction for segments {missing[:5]}")
    predictions = []
    for segment in segments:
        row = stored[segment.segment_id]
        predictions.append(Prediction(segment=segment, text=segment_text(segment, videos[segment.video_id].transcript),
                                      label=IssueLabel(row["label"]),
                                      probabilities=tuple(float(p) for p in row["probabilities"])))
    return predictions


def evaluate_model_grid(train_set: Sequence[LabeledSegment], test_set: Sequence[LabeledSegment],
                        videos: Mapping[str, VideoData], cfg: RunConfig) -> List[Dict]:
    """Every model kind on the text, video and combined feature variants"""
    base = Featurizer(cfg.features.model_copy(update={"variant": "all"})).fit([i.text for i in train_set])
    X_train, names = featurize(base, [(i.segment, i.text) for i in train_set], videos)
    X_test, _ = featurize(base, [(i.segment, i.text) for i in test_set], videos)
    y_train = [i.label.value for i in train_set]
    y_test = [i.label.value for i in test_set]
    rows = []
    for kind in ModelKind:
        for variant in GRID_VARIANTS:
            mask = group_mask(names, VARIANTS[variant])
            if not mask.any():
                logger.warning(f"Variant {variant} has no features; skipped")
                continue
            X, y = X_train[:, mask], y_train
            if cfg.features.smote:
                X, y = smote_oversample(X, y, cfg.features.smote_k, cfg.pipeline.seed)
            model = train(kind, X, list(y), cfg.model.hyper(kind), seed=cfg.pipeline.seed,
                          feature_names=[n for n, keep in zip(names, mask) if keep])
            result = evaluate(model, X_test[:, mask], y_test)
            logger.info(f"{kind.value} on {variant} features: accuracy {result.accuracy:.3f}")
            rows.append({"model": kind.value, "features": variant, **result.to_dict()})
    return rows


def evaluate_partition(assignment: ClusterAssignment, truth: Mapping[str, Hashable]) -> float:
    """MoJoFM of a clustering against a ground-truth grouping; noise counts as singletons"""
    promoted = promote_noise(assignment)
    produced = dict(zip(promoted.ids, promoted.labels.tolist()))
    if set(produced) != set(truth):
        raise ValueError("clustering and ground truth cover different segments")
    return mojo_fm(Partition(produced), Partition(dict(truth)))


def evaluate_context_grid(segments: Sequence[Segment], videos: Mapping[str, VideoData],
                          truth: Mapping[str, Hashable], cfg: ClusteringConfig) -> List[Dict]:
    tracks = {vid: v.track for vid, v in videos.items()}
    chosen = [s for s in segments if s.segment_id in truth]
    rows = []
    for algorithm in CLUSTER_ALGORITHMS:
        algo_cfg = cfg.model_copy(update={"algorithm": algorithm})
        assignment = group_by_context(chosen, tracks, algo_cfg)
        score = evaluate_partition(assignment, {s.segment_id: truth[s.segment_id] for s in chosen})
        rows.append({"algorithm": algorithm, "params": algo_cfg.params(), "mojofm": score,
                     "clusters": promote_noise(assignment).n_clusters, "noise": len(assignment.noise())})
    return rows


# Grouping and hierarchy

def _issue_text_vectors(texts: Sequence[str], cfg: RunConfig) -> np.ndarray:
    try:
        vocab = fit_vocabulary(texts, cfg.features.ngrams, cfg.features.stopword_list(), 1)
    except ValueError:
        logger.warning("Informative segments carry no text; issue clustering uses visuals only")
        return np.zeros((len(texts), 1))
    return text_matrix(texts, vocab)


def informative_predictions(predictions: Sequence[Prediction]) -> List[Prediction]:
    return [p for p in predictions if p.label != IssueLabel.NON_INFORMATIVE]


def group_contexts(predictions: Sequence[Prediction], videos: Sequence[VideoData],
                   cfg: RunConfig) -> ClusterAssignment:
    """Context grouping of the informative segments; noise contexts become singletons"""
    tracks = {v.video_id: v.track for v in videos}
    with stage("group"):
        contexts = group_by_context([p.segment for p in informative_predictions(predictions)], tracks, cfg.context)
    return promote_noise(contexts)


def build_hierarchy(predictions: Sequence[Prediction], videos: Sequence[VideoData], cfg: RunConfig,
                    contexts: Optional[ClusterAssignment] = None) -> IssueHierarchy:
    tracks = {v.video_id: v.track for v in videos}
    informative = informative_predictions(predictions)
    hierarchy = IssueHierarchy(n_segments=len(predictions), n_non_informative=len(predictions) - len(informative))
    if contexts is None:
        contexts = group_contexts(predictions, videos, cfg)
    if set(contexts.ids) != {p.segment.segment_id for p in informative}:
        raise InvariantViolation("context grouping does not cover exactly the informative segments")
    if not informative:
        return hierarchy
    contexts = promote_noise(contexts)
    row_of = {p.segment.segment_id: n for n, p in enumerate(informative)}
    text_vectors = _issue_text_vectors([p.text for p in informative], cfg)
    for context_label, member_ids in contexts.clusters().items():
        node = ContextNode(context_id=f"ctx-{context_label:04d}")
        members = [informative[row_of[i]] for i in member_ids]
        for label in LABEL_ORDER:
            chosen = sorted((p for p in members if p.label == label), key=lambda p: p.segment.segment_id)
            if not chosen:
                continue
            rows = [row_of[p.segment.segment_id] for p in chosen]
            with stage("cluster"):
                assignment, medoid_of = cluster_issues([p.segment for p in chosen], text_vectors[rows], tracks,
                                                       cfg.issues)
            refs = {p.segment.segment_id: SegmentRef.of(p.segment) for p in chosen}
            category = CategoryNode(label=label)
            for cluster_id, ids in assignment.clusters().items():
                medoid = medoid_of[cluster_id]
                ordered = [medoid] + [i for i in ids if i != medoid]
                category.clusters.append(IssueCluster(cluster_id=cluster_id, medoid=medoid,
                                                      members=[refs[i] for i in ordered]))
            node.categories.append(category)
        hierarchy.contexts.append(node)
    return hierarchy


def run_pipeline(manifest: Manifest, cfg: RunConfig, model: Optional[TrainedModel] = None) -> PipelineResult:
    """All stages end to end; deterministic for a given manifest, config and seed"""
    timings: List[Tuple[str, float, int]] = []

    def timed(name, fn, count=len):
        started = time.perf_counter()
        value = fn()
        elapsed = time.perf_counter() - started
        items = count(value)
        timings.append((name, elapsed, items))
        logger.info(f"Stage {name} finished in {elapsed:.3f}s ({items} items)")
        return value

    videos = timed("ingest", lambda: ingest_videos(manifest, cfg))
    by_id = {v.video_id: v for v in videos}
    segments = timed("segment", lambda: segment_videos(videos, cfg), lambda s: sum(map(len, s.values())))
    if model is None:
        if manifest.labels is None:
            raise StageError("train", None, DataFormatError("no model given and the manifest names no labels"))

        def fit():
            with stage("train"):
                table = load_label_table(manifest.labels)
                return train_classifier(labeled_segments(table, by_id, cfg), by_id, cfg)

        model = timed("train", fit, lambda m: len(m.feature_names))
    predictions = timed("classify", lambda: classify_segments(model, videos, segments))
    contexts = timed("group", lambda: group_contexts(predictions, videos, cfg), lambda a: a.n_clusters)
    hierarchy = timed("cluster", lambda: build_hierarchy(predictions, videos, cfg, contexts),
                      lambda h: sum(len(cat.clusters) for c in h.contexts for cat in c.categories))
    hierarchy.check_conservation()

    notes = []
    if predictions and not hierarchy.contexts:
        notes.append("all segments classified non-informative; hierarchy is empty")
    report = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.pipeline.seed,
        "config_digest": config_digest(cfg),
        "hierarchy_sha256": hashlib.sha256(hierarchy_json(hierarchy).encode("utf-8")).hexdigest(),
        "counts": {
            "videos": len(videos),
            "segments": hierarchy.n_segments,
            "informative": hierarchy.n_informative,
            "non_informative": hierarchy.n_non_informative,
            "contexts": len(hierarchy.contexts),
        },
        "timings": [{"stage": s, "seconds": t, "items": n} for s, t, n in timings],
        "notes": notes,
    }
    for note in notes:
        logger.warning(note)
    return PipelineResult(hierarchy=hierarchy, report=report, predictions=predictions, model=model,
                          contexts=contexts, videos=videos)


def record_result(result: PipelineResult, cfg: RunConfig) -> Optional[int]:
    report = result.report
    return record_run(cfg.pipeline.ledger_url, cfg.pipeline.seed, report["config_digest"],
                      [(t["stage"], t["seconds"], t["items"]) for t in report["timings"]],
                      report["counts"], report["hierarchy_sha256"])


def record_failure(error: Exception, cfg: RunConfig) -> Optional[int]:
    return record_run(cfg.pipeline.ledger_url, cfg.pipeline.seed, config_digest(cfg), [], {}, error=str(error))
