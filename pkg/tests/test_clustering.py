import numpy as np
import pytest
from scipy.spatial.distance import cdist

from clustering import (
    NOISE,
    ClusterAssignment,
    ClusteringConfig,
    DistanceMatrix,
    assignment_from_json,
    assignment_to_json,
    canonical_labels,
    cluster_issues,
    context_distance,
    context_matrix,
    cosine_distance,
    dbscan,
    group_by_context,
    histogram_similarity,
    issue_distance,
    issue_matrix,
    mean_shift,
    mean_shift_modes,
    medoids,
    optics,
    promote_noise,
)
from conftest import build_track, scene_histogram
from errors import DataFormatError, InvariantViolation
from evalstats import Partition, mojo_fm
from frame_ingest import CHANNELS, DEFAULT_BINS
from segmentation import Segment

SEGMENTS_PER_SCENE = 20


def distances(ids, close, far=1.0):
    """Matrix with `far` everywhere except the listed pairs"""
    index = {item: n for n, item in enumerate(ids)}
    values = np.full((len(ids), len(ids)), far)
    np.fill_diagonal(values, 0.0)
    for (a, b), value in close.items():
        values[index[a], index[b]] = values[index[b], index[a]] = value
    return DistanceMatrix(ids=tuple(ids), values=values)


@pytest.fixture
def planted():
    """Three scenes of twenty one-keyframe segments with small histogram jitter"""
    track = build_track("planted", lambda ts: ts // (SEGMENTS_PER_SCENE * 1000),
                        duration_ms=3 * SEGMENTS_PER_SCENE * 1000, step_ms=1000, jitter=0.05, seed=4)
    segments = [
        Segment(f"planted-{i:04d}", "planted", i * 1000, (i + 1) * 1000, keyframe_timestamps=(i * 1000,))
        for i in range(3 * SEGMENTS_PER_SCENE)
    ]
    truth = Partition({s.segment_id: i // SEGMENTS_PER_SCENE for i, s in enumerate(segments)})
    return segments, {"planted": track}, truth


@pytest.mark.parametrize("algorithm", ["dbscan", "optics", "mean_shift"])
def test_planted_scenes_are_recovered(planted, algorithm):
    segments, tracks, truth = planted
    assignment = group_by_context(segments, tracks, ClusteringConfig(algorithm=algorithm))
    produced = Partition(dict(zip(assignment.ids, promote_noise(assignment).labels.tolist())))
    assert mojo_fm(produced, truth) >= 90.0
    assert assignment.algorithm == algorithm


def test_group_by_context_with_no_segments():
    assignment = group_by_context([], {}, ClusteringConfig())
    assert assignment.ids == ()
    assert assignment.n_clusters == 0


def test_histogram_similarity_extremes():
    assert histogram_similarity(scene_histogram(0), scene_histogram(0)) == 1.0
    assert histogram_similarity(scene_histogram(0), scene_histogram(1)) == 0.0


def test_context_distance_is_zero_for_identical_keyframes():
    frames = np.stack([scene_histogram(0, 0.3), scene_histogram(1, 0.2)])
    assert context_distance(frames, frames) == 0.0
    assert context_distance(scene_histogram(0), scene_histogram(1)) == 1.0
    assert context_distance(scene_histogram(0, 0.1), scene_histogram(0, 0.3)) == pytest.approx(0.2)


def test_cosine_distance_of_zero_vector():
    assert cosine_distance(np.zeros(3), np.array([1.0, 0, 0])) == 1.0
    assert cosine_distance(np.array([1.0, 0]), np.array([2.0, 0])) == pytest.approx(0.0)


def test_issue_distance_mixes_text_and_frames():
    frames_a, frames_b = scene_histogram(0)[None, :], scene_histogram(1)[None, :]
    text_a, text_b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert issue_distance(text_a, text_a, frames_a, frames_a) == 0.0
    assert issue_distance(text_a, text_b, frames_a, frames_a, alpha=0.25) == pytest.approx(0.25)
    assert issue_distance(text_a, text_a, frames_a, frames_b, alpha=0.25) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        issue_distance(text_a, text_b, frames_a, frames_b, alpha=1.5)


def test_distance_matrix_invariants():
    with pytest.raises(InvariantViolation):
        DistanceMatrix(ids=("a", "b"), values=np.array([[0.0, 0.2], [0.3, 0.0]]))
    with pytest.raises(InvariantViolation):
        DistanceMatrix(ids=("a", "b"), values=np.array([[0.0, 1.5], [1.5, 0.0]]))
    with pytest.raises(InvariantViolation):
        DistanceMatrix(ids=("a",), values=np.zeros((2, 2)))


def test_dbscan_marks_isolated_items_as_noise():
    D = distances(["a", "b", "z"], {("a", "b"): 0.1})
    result = dbscan(D, eps=0.3, min_pts=2)
    assert result.clusters() == {0: ["a", "b"]}
    assert result.noise() == ["z"]


def test_dbscan_border_joins_lowest_id_core():
    ids = ["m", "p1", "p2", "p3", "p4", "q1", "q2", "q3", "q4"]
    close = {}
    for group in (["p1", "p2", "p3", "p4"], ["q1", "q2", "q3", "q4"]):
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                close[(a, b)] = 0.1
    close[("m", "p4")] = 0.25
    close[("m", "q1")] = 0.25
    result = dbscan(distances(ids, close), eps=0.3, min_pts=4)
    assert result.clusters() == {0: ["m", "p1", "p2", "p3", "p4"], 1: ["q1", "q2", "q3", "q4"]}


def test_dbscan_is_independent_of_input_order():
    close = {("a", "b"): 0.1, ("c", "d"): 0.2}
    forward = dbscan(distances(["a", "b", "c", "d"], close), 0.3, 2)
    backward = dbscan(distances(["d", "c", "b", "a"], close), 0.3, 2)
    assert forward.clusters() == backward.clusters()


def test_optics_with_single_point_density_is_connectivity():
    D = distances(["a", "b", "c"], {("a", "b"): 0.2, ("b", "c"): 0.2})
    result = optics(D, min_pts=1, eps_max=1.0, eps_cut=0.3)
    assert result.clusters() == {0: ["a", "b", "c"]}
    assert result.algorithm == "optics"


def test_optics_rejects_inverted_radii():
    with pytest.raises(ValueError):
        optics(distances(["a"], {}), min_pts=2, eps_max=0.2, eps_cut=0.5)


def test_mean_shift_separates_distant_groups():
    result = mean_shift(np.array([[0.0], [0.1], [5.0], [5.1]]), bandwidth=0.5, ids=["a", "b", "c", "d"])
    assert result.clusters() == {0: ["a", "b"], 1: ["c", "d"]}


def test_canonical_labels_follow_smallest_member():
    assert canonical_labels(["b", "a", "c"], [7, 3, NOISE]).tolist() == [1, 0, NOISE]


def test_promote_noise_gives_singletons():
    assignment = ClusterAssignment(ids=("a", "b", "x", "y"), labels=np.array([0, 0, NOISE, NOISE]),
                                   algorithm="dbscan")
    promoted = promote_noise(assignment)
    assert promoted.noise() == []
    assert promoted.clusters() == {0: ["a", "b"], 1: ["x"], 2: ["y"]}


def test_medoid_minimizes_summed_distance_with_id_ties():
    D = distances(["a", "b", "c", "d", "e"], {("a", "b"): 0.1, ("b", "c"): 0.1, ("a", "c"): 0.2,
                                               ("d", "e"): 0.1})
    assignment = dbscan(D, eps=0.3, min_pts=2)
    assert medoids(assignment, D) == {0: "b", 1: "d"}


def test_cluster_issues_has_no_noise_and_a_medoid_per_cluster(three_scene_track):
    segments = [
        Segment("alpha-0000", "alpha", 0, 1000, keyframe_timestamps=(0,)),
        Segment("alpha-0001", "alpha", 1000, 2000, keyframe_timestamps=(1000,)),
        Segment("alpha-0002", "alpha", 40000, 41000, keyframe_timestamps=(40000,)),
    ]
    text = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assignment, medoid_ids = cluster_issues(segments, text, {"alpha": three_scene_track}, ClusteringConfig())
    assert assignment.clusters() == {0: ["alpha-0000", "alpha-0001"], 1: ["alpha-0002"]}
    assert medoid_ids == {0: "alpha-0000", 1: "alpha-0002"}


def test_cluster_issues_with_mean_shift(three_scene_track):
    segments = [Segment(f"alpha-{i:04d}", "alpha", i * 1000, (i + 1) * 1000, keyframe_timestamps=(i * 1000,))
                for i in range(3)]
    text = np.eye(3)
    assignment, medoid_ids = cluster_issues(segments, text, {"alpha": three_scene_track},
                                            ClusteringConfig(algorithm="mean_shift"))
    assert sorted(m for members in assignment.clusters().values() for m in members) == \
        [s.segment_id for s in segments]
    assert set(medoid_ids) == set(assignment.clusters())


def test_assignment_json_reloads_in_canonical_form():
    assignment = dbscan(distances(["a", "b", "z"], {("a", "b"): 0.1}), 0.3, 2)
    data = assignment_to_json(assignment, {0: "a"})
    assert data["clusters"] == [{"id": 0, "member_segment_ids": ["a", "b"], "medoid": "a"}]
    again = assignment_from_json(data)
    assert again.clusters() == assignment.clusters()
    assert again.noise() == ["z"]


def test_assignment_json_rejects_duplicate_members():
    data = {"clusters": [{"id": 0, "member_segment_ids": ["a"]}, {"id": 1, "member_segment_ids": ["a"]}]}
    with pytest.raises(DataFormatError):
        assignment_from_json(data)


def random_distances(rng, n):
    upper = np.triu(rng.uniform(0.0, 1.0, size=(n, n)), k=1)
    return DistanceMatrix(ids=tuple(f"s{i:02d}" for i in range(n)), values=upper + upper.T)


@pytest.mark.parametrize("seed", range(200))
def test_optics_cut_matches_dbscan_on_random_instances(seed):
    rng = np.random.default_rng(seed)
    D = random_distances(rng, int(rng.integers(3, 14)))
    eps = float(rng.uniform(0.05, 0.4))
    min_pts = int(rng.integers(2, 5))
    expected = dbscan(D, eps, min_pts)
    result = optics(D, min_pts=min_pts, eps_max=1.0, eps_cut=eps)
    assert result.noise() == expected.noise()
    assert result.clusters() == expected.clusters()


def as_partition(assignment):
    return Partition(dict(zip(assignment.ids, assignment.labels.tolist())))


def test_optics_matches_dbscan_on_two_pairs():
    D = distances(["a", "b", "c", "d"], {("a", "b"): 0.1, ("c", "d"): 0.15})
    produced = optics(D, min_pts=2, eps_max=1.0, eps_cut=0.3)
    expected = dbscan(D, eps=0.3, min_pts=2)
    assert produced.clusters() == {0: ["a", "b"], 1: ["c", "d"]}
    assert mojo_fm(as_partition(produced), as_partition(expected)) == 100.0
    assert mojo_fm(as_partition(expected), as_partition(produced)) == 100.0


def test_optics_tiny_cut_and_single_point_are_noise():
    D = distances(["a", "b", "c"], {("a", "b"): 0.1})
    assert optics(D, min_pts=2, eps_max=1.0, eps_cut=1e-9).noise() == ["a", "b", "c"]
    assert optics(distances(["a"], {}), min_pts=2, eps_max=1.0, eps_cut=0.3).noise() == ["a"]


@pytest.mark.parametrize("seed", range(20))
def test_context_matrix_is_symmetric_and_bounded_on_random_segments(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    keyframes = []
    for _ in range(n):
        blocks = rng.uniform(size=(int(rng.integers(1, 4)), CHANNELS, DEFAULT_BINS))
        keyframes.append((blocks / blocks.sum(axis=2, keepdims=True)).reshape(len(blocks), -1))
    ids = [f"v-{i:04d}" for i in range(n)]
    text = rng.uniform(size=(n, 5)) * (rng.uniform(size=(n, 1)) > 0.2)
    for D in (context_matrix(ids, keyframes), issue_matrix(ids, text, keyframes, alpha=float(rng.uniform()))):
        assert np.array_equal(D.values, D.values.T)
        assert np.all(np.diag(D.values) == 0.0)
        assert D.values.min() >= 0.0 and D.values.max() <= 1.0


@pytest.mark.parametrize("seed", range(10))
def test_mean_shift_modes_are_fixed_points(seed):
    rng = np.random.default_rng(seed)
    points = np.vstack([rng.normal(centre, 0.2, size=(15, 2)) for centre in (0.0, 4.0, 8.0)])
    tol = 1e-6
    modes = mean_shift_modes(points, bandwidth=1.0, tol=tol)
    window = cdist(modes, points) <= 1.0
    shifted = (window @ points) / window.sum(axis=1, keepdims=True)
    assert np.linalg.norm(shifted - modes, axis=1).max() < tol


def test_mean_shift_of_identical_points_is_one_cluster():
    points = np.tile([[0.3, 0.7]], (4, 1))
    result = mean_shift(points, bandwidth=0.1)
    assert result.n_clusters == 1
    assert np.allclose(mean_shift_modes(points, 0.1), points)
    with pytest.raises(ValueError):
        mean_shift(points, bandwidth=0.0)
