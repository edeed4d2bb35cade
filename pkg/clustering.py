import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist
from sklearn.cluster import OPTICS

from errors import DataFormatError, InvariantViolation
from frame_ingest import CHANNELS, VideoTrack
from segmentation import Segment

# Configure logging
logger = logging.getLogger(__name__)

NOISE = -1
SYMMETRY_TOLERANCE = 1e-12


class ClusteringConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    algorithm: Literal["dbscan", "optics", "mean_shift"] = "dbscan"
    eps: float = Field(0.3, gt=0)
    min_pts: int = Field(2, ge=1)
    eps_max: float = Field(1.0, gt=0)
    bandwidth: float = Field(0.5, gt=0)
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(300, ge=1)
    alpha: float = Field(0.5, ge=0, le=1)
    n_jobs: int = 1

    def params(self) -> Dict:
        if self.algorithm == "dbscan":
            return {"eps": self.eps, "min_pts": self.min_pts}
        if self.algorithm == "optics":
            return {"eps_cut": self.eps, "eps_max": self.eps_max, "min_pts": self.min_pts}
        return {"bandwidth": self.bandwidth, "tol": self.tol, "max_iter": self.max_iter}


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    ids: Tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise InvariantViolation(f"distance matrix shape {self.values.shape} for {n} items")
        if n and (not np.all(np.isfinite(self.values)) or self.values.min() < 0 or self.values.max() > 1):
            raise InvariantViolation("distances must be finite and lie in [0, 1]")
        if np.any(np.diag(self.values) != 0):
            raise InvariantViolation("distance matrix diagonal must be zero")
        if np.max(np.abs(self.values - self.values.T), initial=0.0) > SYMMETRY_TOLERANCE:
            raise InvariantViolation("distance matrix is not symmetric")

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    ids: Tuple[str, ...]
    labels: np.ndarray
    algorithm: str
    params: Dict = field(default_factory=dict)

    def clusters(self) -> Dict[int, List[str]]:
        groups: Dict[int, List[str]] = {}
        for item, label in zip(self.ids, self.labels.tolist()):
            if label != NOISE:
                groups.setdefault(label, []).append(item)
        return {label: sorted(members) for label, members in sorted(groups.items())}

    def noise(self) -> List[str]:
        return sorted(item for item, label in zip(self.ids, self.labels.tolist()) if label == NOISE)

    @property
    def n_clusters(self) -> int:
        return len(set(self.labels.tolist()) - {NOISE})


def canonical_labels(ids: Sequence[str], labels: Sequence[int]) -> np.ndarray:
    """Renumber clusters 0.. in order of their smallest member id; noise stays NOISE"""
    smallest: Dict[int, str] = {}
    for item, label in zip(ids, labels):
        if label != NOISE and (label not in smallest or item < smallest[label]):
            smallest[label] = item
    mapping = {label: n for n, label in enumerate(sorted(smallest, key=smallest.get))}
    return np.array([mapping.get(label, NOISE) for label in labels], dtype=np.int64)


def promote_noise(assignment: ClusterAssignment) -> ClusterAssignment:
    """Give every noise item a singleton cluster of its own"""
    labels = assignment.labels.copy()
    next_label = assignment.n_clusters
    for position in sorted(np.flatnonzero(labels == NOISE), key=lambda p: assignment.ids[p]):
        labels[position] = next_label
        next_label += 1
    return ClusterAssignment(ids=assignment.ids, labels=canonical_labels(assignment.ids, labels),
                             algorithm=assignment.algorithm, params=assignment.params)


def histogram_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Histogram intersection of two 3-block histograms, scaled to [0,1]"""
    return float(np.minimum(a, b).sum() / CHANNELS)


def keyframe_histograms(segment: Segment, track: VideoTrack) -> np.ndarray:
    if not segment.keyframe_timestamps:
        raise ValueError(f"segment {segment.segment_id} has no keyframes")
    return np.stack([track.frame_at(ts).histogram for ts in segment.keyframe_timestamps])


def context_distance(a: np.ndarray, b: np.ndarray) -> float:
    """One minus the mean pairwise keyframe similarity; identical keyframe sets are at distance 0"""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("context distance needs at least one keyframe per segment")
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    overlap = np.minimum(a[:, None, :], b[None, :, :]).sum(axis=2) / CHANNELS
    return float(np.clip(1.0 - overlap.mean(), 0.0, 1.0))


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 1.0
    return float(np.clip(1.0 - np.dot(u, v) / (nu * nv), 0.0, 1.0))


def issue_distance(text_a: np.ndarray, text_b: np.ndarray, frames_a: np.ndarray, frames_b: np.ndarray,
                   alpha: float = 0.5) -> float:
    """alpha·cosine distance of the text vectors + (1 − alpha)·context distance"""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if np.array_equal(text_a, text_b) and np.shape(frames_a) == np.shape(frames_b) \
            and np.array_equal(frames_a, frames_b):
        return 0.0
    value = alpha * cosine_distance(text_a, text_b) + (1 - alpha) * context_distance(frames_a, frames_b)
    return float(np.clip(value, 0.0, 1.0))


def _matrix(ids: Sequence[str], pair_distance, n_jobs: int = 1) -> DistanceMatrix:
    n = len(ids)

    def row(i):
        return [pair_distance(i, j) for j in range(i + 1, n)]

    rows = Parallel(n_jobs=n_jobs)(delayed(row)(i) for i in range(n)) if n_jobs != 1 else [row(i) for i in range(n)]
    values = np.zeros((n, n))
    for i, distances in enumerate(rows):
        values[i, i + 1:] = distances
        values[i + 1:, i] = distances
    return DistanceMatrix(ids=tuple(ids), values=values)


def context_matrix(ids: Sequence[str], keyframes: Sequence[np.ndarray], n_jobs: int = 1) -> DistanceMatrix:
    return _matrix(ids, lambda i, j: context_distance(keyframes[i], keyframes[j]), n_jobs)


def issue_matrix(ids: Sequence[str], text_vectors: np.ndarray, keyframes: Sequence[np.ndarray],
                 alpha: float = 0.5, n_jobs: int = 1) -> DistanceMatrix:
    return _matrix(
        ids,
        lambda i, j: issue_distance(text_vectors[i], text_vectors[j], keyframes[i], keyframes[j], alpha),
        n_jobs,
    )


def _attach_borders(D: DistanceMatrix, labels: np.ndarray, core: np.ndarray, eps: float) -> None:
    """Each non-core item within eps of a core joins the cluster of its lowest-id such core"""
    neighbours = D.values <= eps
    order = sorted(np.flatnonzero(core), key=lambda p: D.ids[p])
    for p in np.flatnonzero(~core):
        reachable = [q for q in order if neighbours[p, q]]
        if reachable:
            labels[p] = labels[reachable[0]]


def dbscan(D: DistanceMatrix, eps: float, min_pts: int) -> ClusterAssignment:
    """Density clustering on a precomputed dissimilarity; borders join the lowest-id core neighbour"""
    if eps <= 0 or min_pts < 1:
        raise ValueError("dbscan needs eps > 0 and min_pts >= 1")
    n = D.n
    params = {"eps": eps, "min_pts": min_pts}
    if n == 0:
        return ClusterAssignment(ids=(), labels=np.zeros(0, dtype=np.int64), algorithm="dbscan", params=params)
    neighbours = D.values <= eps
    core = neighbours.sum(axis=1) >= min_pts
    labels = np.full(n, NOISE, dtype=np.int64)
    core_positions = np.flatnonzero(core)
    if core_positions.size:
        graph = csr_matrix(neighbours[np.ix_(core_positions, core_positions)])
        _, components = connected_components(graph, directed=False)
        labels[core_positions] = components
        _attach_borders(D, labels, core, eps)
    return ClusterAssignment(ids=D.ids, labels=canonical_labels(D.ids, labels), algorithm="dbscan", params=params)


def optics(D: DistanceMatrix, min_pts: int, eps_max: float, eps_cut: float) -> ClusterAssignment:
    """Reachability ordering capped at eps_max, clusters cut at eps_cut"""
    if not 0 < eps_cut <= eps_max:
        raise ValueError("optics needs 0 < eps_cut <= eps_max")
    params = {"eps_cut": eps_cut, "eps_max": eps_max, "min_pts": min_pts}
    if min_pts <= 1:
        # every item is its own core: the reachability cut is plain eps-connectivity
        result = dbscan(D, eps_cut, 1)
        return ClusterAssignment(ids=result.ids, labels=result.labels, algorithm="optics", params=params)
    labels = np.full(D.n, NOISE, dtype=np.int64)
    if D.n < min_pts:
        return ClusterAssignment(ids=D.ids, labels=labels, algorithm="optics", params=params)
    model = OPTICS(min_samples=min_pts, max_eps=eps_max, metric="precomputed")
    model.fit(D.values)
    logger.debug(f"OPTICS ordering {model.ordering_.tolist()}")
    core = model.core_distances_ <= eps_cut
    # cores in ordering: a reachability above the cut opens the next cluster
    current = NOISE
    for position in model.ordering_:
        if not core[position]:
            continue
        if model.reachability_[position] > eps_cut:
            current += 1
        labels[position] = current
    _attach_borders(D, labels, core, eps_cut)
    return ClusterAssignment(ids=D.ids, labels=canonical_labels(D.ids, labels), algorithm="optics", params=params)


def mean_shift_modes(points: np.ndarray, bandwidth: float, tol: float = 1e-6, max_iter: int = 300) -> np.ndarray:
    """Flat-kernel mean shift started from every point"""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    points = np.asarray(points, dtype=np.float64)
    modes = points.copy()
    for _ in range(max_iter):
        window = cdist(modes, points) <= bandwidth
        counts = window.sum(axis=1, keepdims=True)
        shifted = np.where(counts > 0, (window @ points) / np.maximum(counts, 1), modes)
        moved = np.linalg.norm(shifted - modes, axis=1).max(initial=0.0)
        modes = shifted
        if moved < tol:
            break
    return modes


def mean_shift(points: np.ndarray, bandwidth: float, tol: float = 1e-6, max_iter: int = 300,
               ids: Optional[Sequence[str]] = None) -> ClusterAssignment:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0] if points.size else 0
    ids = tuple(ids) if ids is not None else tuple(f"{i:06d}" for i in range(n))
    params = {"bandwidth": bandwidth, "tol": tol, "max_iter": max_iter}
    if n == 0:
        if bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        return ClusterAssignment(ids=(), labels=np.zeros(0, dtype=np.int64), algorithm="mean_shift", params=params)
    modes = mean_shift_modes(points, bandwidth, tol, max_iter)
    centres: List[np.ndarray] = []
    labels = np.zeros(n, dtype=np.int64)
    for position in sorted(range(n), key=lambda p: ids[p]):
        mode = modes[position]
        match = next((c for c, centre in enumerate(centres) if np.linalg.norm(mode - centre) <= bandwidth / 2), None)
        if match is None:
            centres.append(mode)
            match = len(centres) - 1
        labels[position] = match
    return ClusterAssignment(ids=ids, labels=canonical_labels(ids, labels), algorithm="mean_shift", params=params)


def run_algorithm(D: Optional[DistanceMatrix], points: Optional[np.ndarray], ids: Sequence[str],
                  cfg: ClusteringConfig) -> ClusterAssignment:
    if cfg.algorithm == "dbscan":
        return dbscan(D, cfg.eps, cfg.min_pts)
    if cfg.algorithm == "optics":
        return optics(D, cfg.min_pts, cfg.eps_max, cfg.eps)
    return mean_shift(points, cfg.bandwidth, cfg.tol, cfg.max_iter, ids=ids)


def _empty(cfg: ClusteringConfig) -> ClusterAssignment:
    return ClusterAssignment(ids=(), labels=np.zeros(0, dtype=np.int64), algorithm=cfg.algorithm,
                             params=cfg.params())


def group_by_context(segments: Sequence[Segment], tracks: Mapping[str, VideoTrack],
                     cfg: ClusteringConfig) -> ClusterAssignment:
    """Cluster informative segments by keyframe similarity"""
    if not segments:
        logger.warning("No informative segments to group by context")
        return _empty(cfg)
    ids = [s.segment_id for s in segments]
    keyframes = [keyframe_histograms(s, tracks[s.video_id]) for s in segments]
    if cfg.algorithm == "mean_shift":
        points = np.stack([k.mean(axis=0) for k in keyframes])
        return run_algorithm(None, points, ids, cfg)
    return run_algorithm(context_matrix(ids, keyframes, cfg.n_jobs), None, ids, cfg)


def issue_embedding(text_vectors: np.ndarray, keyframes: Sequence[np.ndarray], alpha: float) -> np.ndarray:
    """Vector view for mean shift: weighted text vector next to the mean keyframe histogram"""
    visual = np.stack([k.mean(axis=0) / CHANNELS for k in keyframes])
    return np.hstack([np.sqrt(alpha) * np.asarray(text_vectors), np.sqrt(1 - alpha) * visual])


def medoids(assignment: ClusterAssignment, D: DistanceMatrix) -> Dict[int, str]:
    """Member with the least summed distance to its cluster, lowest id on ties"""
    position = {item: p for p, item in enumerate(D.ids)}
    result = {}
    for label, members in assignment.clusters().items():
        rows = [position[m] for m in members]
        totals = D.values[np.ix_(rows, rows)].sum(axis=1)
        best = min(zip(totals.tolist(), members))
        result[label] = best[1]
    return result


def cluster_issues(segments: Sequence[Segment], text_vectors: np.ndarray, tracks: Mapping[str, VideoTrack],
                   cfg: ClusteringConfig):
    """Cluster segments of one context and category; returns (assignment, medoid per cluster)"""
    if not segments:
        return _empty(cfg), {}
    ids = [s.segment_id for s in segments]
    keyframes = [keyframe_histograms(s, tracks[s.video_id]) for s in segments]
    D = issue_matrix(ids, text_vectors, keyframes, cfg.alpha, cfg.n_jobs)
    if cfg.algorithm == "mean_shift":
        assignment = run_algorithm(None, issue_embedding(text_vectors, keyframes, cfg.alpha), ids, cfg)
    else:
        assignment = run_algorithm(D, None, ids, cfg)
    assignment = promote_noise(assignment)
    return assignment, medoids(assignment, D)


def assignment_from_json(data) -> ClusterAssignment:
    ids, labels = [], []
    for cluster in data["clusters"]:
        for member in cluster["member_segment_ids"]:
            ids.append(member)
            labels.append(int(cluster["id"]))
    for member in data.get("noise", []):
        ids.append(member)
        labels.append(NOISE)
    if len(ids) != len(set(ids)):
        raise DataFormatError("a segment is assigned to more than one cluster")
    order = sorted(range(len(ids)), key=ids.__getitem__)
    ids = [ids[i] for i in order]
    labels = [labels[i] for i in order]
    return ClusterAssignment(ids=tuple(ids), labels=canonical_labels(ids, labels),
                             algorithm=data.get("algorithm", "dbscan"), params=data.get("params", {}))


def assignment_to_json(assignment: ClusterAssignment, medoid_ids: Optional[Mapping[int, str]] = None):
    medoid_ids = medoid_ids or {}
    return {
        "algorithm": assignment.algorithm,
        "params": assignment.params,
        "clusters": [
            {"id": label, "member_segment_ids": members, "medoid": medoid_ids.get(label)}
            for label, members in assignment.clusters().items()
        ],
        "noise": assignment.noise(),
    }
