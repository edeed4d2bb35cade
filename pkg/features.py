import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from gensim.models import KeyedVectors
from imblearn.over_sampling import SMOTE
from pydantic import BaseModel, ConfigDict, Field
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS, CountVectorizer

from errors import DataFormatError
from frame_ingest import VideoTrack
from segmentation import Segment
from subtitle_ingest import Transcript

# Configure logging
logger = logging.getLogger(__name__)

TOKEN = re.compile(r"[^\W_]+")
BLANK_LUMINANCE = 0.05

# group name -> feature-name prefix
FEATURE_GROUPS: Dict[str, str] = {
    "text": "text:",
    "embedding": "emb:",
    "video": "video:",
    "speech": "speech:",
}
VARIANTS: Dict[str, Tuple[str, ...]] = {
    "text": ("text", "embedding"),
    "video": ("video", "speech"),
    "all": ("text", "embedding", "video", "speech"),
}
VIDEO_FEATURES = ("duration_s", "n_frames", "motion_mean", "motion_std", "luminance_mean", "blank_fraction",
                  "had_video")
SPEECH_FEATURES = ("density", "words_per_second", "n_cues")


class FeatureConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ngrams: int = Field(1, ge=1, le=2)
    min_df: int = Field(1, ge=1)
    stopwords: List[str] = Field(default_factory=list)
    english_stopwords: bool = False
    embedding_path: Optional[str] = None
    variant: Literal["text", "video", "all"] = "all"
    smote: bool = True
    smote_k: int = Field(5, ge=1)

    def stopword_list(self) -> List[str]:
        words = {w.lower() for w in self.stopwords}
        if self.english_stopwords:
            words |= set(ENGLISH_STOP_WORDS)
        return sorted(words)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    names: Tuple[str, ...]
    segment_id: str = ""

    def __post_init__(self):
        if self.values.shape != (len(self.names),):
            raise ValueError(f"{len(self.names)} names for values of shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite feature value in segment {self.segment_id}")


@dataclass(frozen=True)
class Vocabulary:
    terms: Tuple[str, ...]
    document_frequencies: Tuple[int, ...]
    n_documents: int
    ngrams: int = 1
    stopwords: Tuple[str, ...] = ()

    @property
    def idf(self) -> np.ndarray:
        df = np.asarray(self.document_frequencies, dtype=np.float64)
        return np.log((1.0 + self.n_documents) / (1.0 + df)) + 1.0

    def vectorizer(self) -> CountVectorizer:
        """Counting transform bound to the fitted terms; never refits"""
        return CountVectorizer(
            tokenizer=tokenize,
            token_pattern=None,
            lowercase=False,
            stop_words=list(self.stopwords) or None,
            ngram_range=(1, self.ngrams),
            vocabulary=list(self.terms),
        )

    def to_dict(self):
        return {
            "terms": list(self.terms),
            "document_frequencies": list(self.document_frequencies),
            "n_documents": self.n_documents,
            "ngrams": self.ngrams,
            "stopwords": list(self.stopwords),
        }

    @classmethod
    def from_dict(cls, data) -> "Vocabulary":
        return cls(
            terms=tuple(data["terms"]),
            document_frequencies=tuple(int(v) for v in data["document_frequencies"]),
            n_documents=int(data["n_documents"]),
            ngrams=int(data.get("ngrams", 1)),
            stopwords=tuple(data.get("stopwords", ())),
        )


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    vectors: Dict[str, np.ndarray] = field(default_factory=dict)
    dim: int = 0

    def __post_init__(self):
        for token, vector in self.vectors.items():
            if vector.shape != (self.dim,):
                raise ValueError(f"vector for {token!r} has shape {vector.shape}, expected ({self.dim},)")


def tokenize(text: str) -> List[str]:
    """Lowercased maximal alphanumeric runs"""
    return TOKEN.findall(text.lower())


def fit_vocabulary(texts: Sequence[str], ngrams: int = 1, stopwords: Iterable[str] = (),
                   min_df: int = 1) -> Vocabulary:
    """Fit a lexicographically ordered n-gram vocabulary on training texts"""
    if not texts:
        raise ValueError("fit_vocabulary needs at least one document")
    stopwords = tuple(sorted({w.lower() for w in stopwords}))
    vectorizer = CountVectorizer(
        tokenizer=tokenize,
        token_pattern=None,
        lowercase=False,
        stop_words=list(stopwords) or None,
        ngram_range=(1, ngrams),
        min_df=min_df,
    )
    try:
        counts = vectorizer.fit_transform(texts)
    except ValueError as e:
        raise ValueError(f"no surviving terms: {e}") from e
    terms = vectorizer.get_feature_names_out()
    df = np.asarray((counts > 0).sum(axis=0)).ravel()
    logger.info(f"Vocabulary fitted: {len(terms)} terms from {len(texts)} documents")
    return Vocabulary(
        terms=tuple(str(t) for t in terms),
        document_frequencies=tuple(int(v) for v in df),
        n_documents=len(texts),
        ngrams=ngrams,
        stopwords=stopwords,
    )


def _tfidf_rows(counts: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    weights = counts * vocab.idf
    norms = np.linalg.norm(weights, axis=1, keepdims=True)
    return np.divide(weights, norms, out=np.zeros_like(weights), where=norms > 0)


def text_matrix(texts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    if not texts:
        return np.zeros((0, len(vocab.terms)))
    counts = vocab.vectorizer().transform(texts).toarray().astype(np.float64)
    return _tfidf_rows(counts, vocab)


def text_feature_names(vocab: Vocabulary) -> Tuple[str, ...]:
    return tuple(FEATURE_GROUPS["text"] + term for term in vocab.terms)


def text_features(text: str, vocab: Vocabulary, segment_id: str = "") -> FeatureVector:
    """L2-normalized tf-idf over the fitted vocabulary; unknown tokens are ignored"""
    values = text_matrix([text], vocab)[0]
    return FeatureVector(values=values, names=text_feature_names(vocab), segment_id=segment_id)


def load_embedding_table(path) -> EmbeddingTable:
    """Read `token v1 ... vd` lines (word2vec text format without header)"""
    path = Path(path)
    try:
        keyed = KeyedVectors.load_word2vec_format(str(path), binary=False, no_header=True)
    except (ValueError, UnicodeDecodeError) as e:
        raise DataFormatError(f"{path}: {e}") from e
    vectors = {token: np.asarray(keyed[token], dtype=np.float64) for token in keyed.index_to_key}
    if not vectors:
        raise DataFormatError(f"{path}: embedding table is empty")
    logger.info(f"Loaded {len(vectors)} embeddings of dimension {keyed.vector_size} from {path}")
    return EmbeddingTable(vectors=vectors, dim=int(keyed.vector_size))


def embedding_feature_names(table: EmbeddingTable) -> Tuple[str, ...]:
    return tuple(f"{FEATURE_GROUPS['embedding']}{i}" for i in range(table.dim))


def embedding_features(text: str, table: EmbeddingTable, segment_id: str = "") -> FeatureVector:
    """Mean vector of the in-table token occurrences"""
    found = [table.vectors[token] for token in tokenize(text) if token in table.vectors]
    values = np.mean(found, axis=0) if found else np.zeros(table.dim)
    return FeatureVector(values=np.asarray(values, dtype=np.float64), names=embedding_feature_names(table),
                         segment_id=segment_id)


def video_features(segment: Segment, track: VideoTrack) -> FeatureVector:
    frames = track.frames_between(segment.start_ms, segment.end_ms)
    n = len(frames)
    if n >= 2:
        histograms = np.stack([f.histogram for f in frames])
        motion = np.abs(np.diff(histograms, axis=0)).sum(axis=1)
        motion_mean, motion_std = float(motion.mean()), float(motion.std())
    else:
        motion_mean = motion_std = 0.0
    if n:
        luminance = np.array([f.luminance_mean for f in frames])
        luminance_mean = float(luminance.mean())
        blank_fraction = float((luminance < BLANK_LUMINANCE).mean())
    else:
        # nothing on screen counts as blank
        luminance_mean, blank_fraction = 0.0, 1.0
    values = np.array([
        segment.duration_ms / 1000.0,
        float(n),
        motion_mean,
        motion_std,
        luminance_mean,
        blank_fraction,
        1.0 if n >= 2 else 0.0,
    ])
    names = tuple(FEATURE_GROUPS["video"] + name for name in VIDEO_FEATURES)
    return FeatureVector(values=values, names=names, segment_id=segment.segment_id)


def _covered_ms(intervals: List[Tuple[int, int]]) -> int:
    covered, reach = 0, None
    for start, end in sorted(intervals):
        if reach is None or start > reach:
            covered += end - start
            reach = end
        elif end > reach:
            covered += end - reach
            reach = end
    return covered


def speech_features(segment: Segment, transcript: Transcript) -> FeatureVector:
    duration = segment.duration_ms
    clipped = [
        (max(c.start_ms, segment.start_ms), min(c.end_ms, segment.end_ms))
        for c in transcript.cues
        if c.start_ms < segment.end_ms and c.end_ms > segment.start_ms
    ]
    cues = transcript.by_index()
    own = [cues[i] for i in segment.cue_indices if i in cues]
    words = sum(len(c.text.split()) for c in own)
    if duration > 0:
        density = _covered_ms(clipped) / duration
        rate = words / (duration / 1000.0)
    else:
        density = rate = 0.0
    values = np.array([density, rate, float(len(own))])
    names = tuple(FEATURE_GROUPS["speech"] + name for name in SPEECH_FEATURES)
    return FeatureVector(values=values, names=names, segment_id=segment.segment_id)


def concat_features(parts: Sequence[FeatureVector], segment_id: str = "") -> FeatureVector:
    names = tuple(name for part in parts for name in part.names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate feature names in assembly")
    values = np.concatenate([part.values for part in parts]) if parts else np.zeros(0)
    return FeatureVector(values=values, names=names, segment_id=segment_id)


def group_mask(names: Sequence[str], groups: Iterable[str]) -> np.ndarray:
    groups = list(groups)
    unknown = [g for g in groups if g not in FEATURE_GROUPS]
    if unknown:
        raise ValueError(f"unknown feature groups: {unknown}")
    prefixes = tuple(FEATURE_GROUPS[g] for g in groups)
    return np.array([name.startswith(prefixes) for name in names], dtype=bool)


def mask_features(vector: FeatureVector, groups: Iterable[str]) -> FeatureVector:
    """Keep only the named feature groups"""
    keep = group_mask(vector.names, groups)
    return FeatureVector(
        values=vector.values[keep],
        names=tuple(n for n, k in zip(vector.names, keep) if k),
        segment_id=vector.segment_id,
    )


def smote_oversample(X: np.ndarray, y: Sequence, k_neighbors: int = 5, seed: int = 0):
    """Grow every class to the majority count; originals come first, synthetic rows after"""
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    labels, counts = np.unique(y, return_counts=True)
    if len(labels) < 2 or counts.min() == counts.max():
        return X.copy(), y.copy()
    singles = [str(label) for label, count in zip(labels, counts) if count < 2]
    if singles:
        raise ValueError(f"classes {singles} have a single member; lower k_neighbors or drop the class")
    k = min(k_neighbors, int(counts.min()) - 1)
    if k < k_neighbors:
        logger.warning(f"SMOTE k_neighbors lowered from {k_neighbors} to {k} for the smallest class")
    sampler = SMOTE(k_neighbors=k, random_state=seed % 2**32)
    X_res, y_res = sampler.fit_resample(X, y)
    logger.info(f"SMOTE added {len(X_res) - len(X)} synthetic rows")
    return np.asarray(X_res, dtype=np.float64), np.asarray(y_res)


class Featurizer:
    """Fitted feature extraction for segments: vocabulary, optional embeddings, video and speech statistics"""

    def __init__(self, cfg: FeatureConfig, vocabulary: Optional[Vocabulary] = None,
                 embeddings: Optional[EmbeddingTable] = None):
        self.cfg = cfg
        self.vocabulary = vocabulary
        self.embeddings = embeddings

    @property
    def groups(self) -> Tuple[str, ...]:
        return VARIANTS[self.cfg.variant]

    def fit(self, texts: Sequence[str]) -> "Featurizer":
        if "text" in self.groups:
            self.vocabulary = fit_vocabulary(texts, self.cfg.ngrams, self.cfg.stopword_list(), self.cfg.min_df)
        if "embedding" in self.groups and self.cfg.embedding_path and self.embeddings is None:
            self.embeddings = load_embedding_table(self.cfg.embedding_path)
        return self

    @property
    def names(self) -> Tuple[str, ...]:
        names: List[str] = []
        if "text" in self.groups and self.vocabulary is not None:
            names.extend(text_feature_names(self.vocabulary))
        if "embedding" in self.groups and self.embeddings is not None:
            names.extend(embedding_feature_names(self.embeddings))
        if "video" in self.groups:
            names.extend(FEATURE_GROUPS["video"] + n for n in VIDEO_FEATURES)
        if "speech" in self.groups:
            names.extend(FEATURE_GROUPS["speech"] + n for n in SPEECH_FEATURES)
        return tuple(names)

    def transform(self, segment: Segment, text: str, track: VideoTrack, transcript: Transcript) -> FeatureVector:
        parts = []
        if "text" in self.groups:
            if self.vocabulary is None:
                raise ValueError("featurizer is not fitted")
            parts.append(text_features(text, self.vocabulary, segment.segment_id))
        if "embedding" in self.groups and self.embeddings is not None:
            parts.append(embedding_features(text, self.embeddings, segment.segment_id))
        if "video" in self.groups:
            parts.append(video_features(segment, track))
        if "speech" in self.groups:
            parts.append(speech_features(segment, transcript))
        return concat_features(parts, segment.segment_id)

    def to_dict(self):
        return {
            "config": self.cfg.model_dump(),
            "vocabulary": self.vocabulary.to_dict() if self.vocabulary else None,
        }

    @classmethod
    def from_dict(cls, data) -> "Featurizer":
        cfg = FeatureConfig(**data["config"])
        vocabulary = Vocabulary.from_dict(data["vocabulary"]) if data.get("vocabulary") else None
        featurizer = cls(cfg, vocabulary=vocabulary)
        if "embedding" in featurizer.groups and cfg.embedding_path:
            featurizer.embeddings = load_embedding_table(cfg.embedding_path)
        return featurizer


def write_feature_csv(vectors: Sequence[FeatureVector], path, labels: Optional[Sequence[str]] = None) -> None:
    """One row per segment under a header of feature names"""
    if not vectors:
        raise ValueError("no feature vectors to export")
    names = vectors[0].names
    for vector in vectors:
        if vector.names != names:
            raise ValueError(f"segment {vector.segment_id} has a different feature layout")
    table = pd.DataFrame(np.stack([v.values for v in vectors]), columns=list(names))
    table.insert(0, "segment_id", [v.segment_id for v in vectors])
    if labels is not None:
        table.insert(1, "label", list(labels))
    table.to_csv(path, index=False, lineterminator="\n", encoding="utf-8", float_format="%.12g")
