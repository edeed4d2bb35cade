import json

import numpy as np
import pandas as pd
import pytest

import pipeline
from classifiers import LABEL_ORDER, IssueLabel
from clustering import ClusterAssignment
from conftest import REGIONS, build_track, build_transcript
from errors import DataFormatError, InvariantViolation, StageError
from pipeline import (
    IssueHierarchy,
    Prediction,
    VideoData,
    build_hierarchy,
    consolidate_annotations,
    evaluate_context_grid,
    evaluate_model_grid,
    hierarchy_json,
    ingest_video,
    ingest_videos,
    labeled_segments,
    load_label_table,
    load_manifest,
    load_truth_table,
    predictions_from_json,
    predictions_to_json,
    run_pipeline,
    segment_videos,
    split_dataset,
    stage,
    truth_segments,
)
from segmentation import segment_text, segment_video

OFFSETS = {"alpha": 0, "beta": 1, "gamma": 2}


def single_scene_video(video_id, text="the boss fight lags every time."):
    return VideoData(video_id=video_id, transcript=build_transcript(video_id, [(1000, 4000, text)]),
                     track=build_track(video_id, lambda ts: 0))


def predict_all(videos, cfg, label):
    predictions = []
    for video in videos:
        for segment in segment_video(video.track, video.transcript, cfg.segmenter):
            text = segment_text(segment, video.transcript)
            predictions.append(Prediction(segment=segment, text=text, label=label,
                                          probabilities=tuple(float(l is label) for l in LABEL_ORDER)))
    return predictions


def test_manifest_paths_resolve_against_its_directory(dataset):
    manifest = load_manifest(dataset)
    assert [v.video_id for v in manifest.videos] == ["alpha", "beta", "gamma"]
    assert manifest.videos[0].subtitles == dataset.parent / "alpha.srt"
    assert manifest.labels == dataset.parent / "labels.csv"


@pytest.mark.parametrize("change", [
    lambda data: data["videos"].append(dict(data["videos"][0])),
    lambda data: data.update(schema_version=2),
    lambda data: data["videos"][0].update(colour="red"),
])
def test_invalid_manifests_are_data_errors(dataset, change):
    data = json.loads(dataset.read_text())
    change(data)
    dataset.write_text(json.dumps(data))
    with pytest.raises(DataFormatError):
        load_manifest(dataset)


def test_missing_input_fails_the_ingest_stage(dataset):
    manifest = load_manifest(dataset)
    entry = manifest.videos[0].model_copy(update={"frames": dataset.parent / "absent.csv"})
    with pytest.raises(StageError) as info:
        ingest_video(entry)
    assert info.value.stage == "ingest"
    assert info.value.video_id == "alpha"
    assert info.value.exit_code == 2


def test_stage_keeps_cause_and_exit_code():
    with pytest.raises(StageError) as info:
        with stage("segment", "v"):
            raise ValueError("bad cut")
    assert isinstance(info.value.cause, ValueError)
    assert "segment" in str(info.value)
    assert info.value.exit_code == 2


def test_run_is_deterministic_and_conserves_segments(dataset, run_config):
    manifest = load_manifest(dataset)
    first = run_pipeline(manifest, run_config)
    second = run_pipeline(manifest, run_config)
    assert hierarchy_json(first.hierarchy) == hierarchy_json(second.hierarchy)
    assert first.report["hierarchy_sha256"] == second.report["hierarchy_sha256"]
    hierarchy = first.hierarchy
    hierarchy.check_conservation()
    assert hierarchy.n_segments == len(first.predictions) == 9
    assert first.report["counts"]["videos"] == 3
    assert [t["stage"] for t in first.report["timings"]] == ["ingest", "segment", "train", "classify", "group",
                                                             "cluster"]


def test_worker_count_does_not_change_the_result(dataset, run_config):
    manifest = load_manifest(dataset)
    parallel = run_config.model_copy(update={"pipeline": run_config.pipeline.model_copy(update={"workers": 2})})
    serial_result = run_pipeline(manifest, run_config)
    parallel_result = run_pipeline(manifest, parallel)
    assert hierarchy_json(serial_result.hierarchy) == hierarchy_json(parallel_result.hierarchy)


def test_run_without_model_or_labels_fails(dataset, run_config):
    manifest = load_manifest(dataset).model_copy(update={"labels": None})
    with pytest.raises(StageError):
        run_pipeline(manifest, run_config)


def test_all_non_informative_gives_empty_hierarchy(dataset, run_config, monkeypatch):
    def quiet(model, videos, segments):
        return predict_all(videos, run_config, IssueLabel.NON_INFORMATIVE)

    monkeypatch.setattr(pipeline, "classify_segments", quiet)
    result = run_pipeline(load_manifest(dataset), run_config)
    assert result.hierarchy.to_dict()["contexts"] == []
    assert result.report["counts"]["informative"] == 0
    assert result.report["notes"] == ["all segments classified non-informative; hierarchy is empty"]


def test_identical_videos_share_one_context_and_cluster(run_config):
    videos = [single_scene_video("dup-a"), single_scene_video("dup-b")]
    hierarchy = build_hierarchy(predict_all(videos, run_config, IssueLabel.LOGIC), videos, run_config)
    assert len(hierarchy.contexts) == 1
    context = hierarchy.contexts[0]
    assert context.context_id == "ctx-0000"
    assert [c.label for c in context.categories] == [IssueLabel.LOGIC]
    clusters = context.categories[0].clusters
    assert len(clusters) == 1
    assert clusters[0].medoid == "dup-a-0000"
    assert [m.segment_id for m in clusters[0].members] == ["dup-a-0000", "dup-b-0000"]
    hierarchy.check_conservation()


def test_hierarchy_separates_categories_within_a_context(run_config):
    videos = [single_scene_video("dup-a"), single_scene_video("dup-b", "the menu text overlaps the map.")]
    predictions = predict_all(videos, run_config, IssueLabel.LOGIC)
    predictions[1] = Prediction(predictions[1].segment, predictions[1].text, IssueLabel.PRESENTATION,
                                predictions[1].probabilities)
    hierarchy = build_hierarchy(predictions, videos, run_config)
    assert [c.label for c in hierarchy.contexts[0].categories] == [IssueLabel.LOGIC, IssueLabel.PRESENTATION]
    summary = hierarchy.contexts[0].to_dict()["summary"]
    assert summary == {"segments": 2, "duration_ms": 120000, "labels": {"Logic": 1, "Presentation": 1}}


def test_hierarchy_rejects_contexts_of_other_segments(run_config):
    videos = [single_scene_video("dup-a")]
    predictions = predict_all(videos, run_config, IssueLabel.BALANCE)
    wrong = ClusterAssignment(ids=("other",), labels=np.zeros(1, dtype=np.int64), algorithm="dbscan")
    with pytest.raises(InvariantViolation):
        build_hierarchy(predictions, videos, run_config, wrong)


def test_conservation_check_catches_lost_segments():
    with pytest.raises(InvariantViolation):
        IssueHierarchy(n_segments=3, n_non_informative=1).check_conservation()


def test_hierarchy_reloads_from_its_json(run_config):
    videos = [single_scene_video("dup-a"), single_scene_video("dup-b")]
    hierarchy = build_hierarchy(predict_all(videos, run_config, IssueLabel.LOGIC), videos, run_config)
    again = IssueHierarchy.from_dict(json.loads(hierarchy_json(hierarchy)))
    assert hierarchy_json(again) == hierarchy_json(hierarchy)


def test_predictions_reload_against_segments(run_config):
    videos = [single_scene_video("dup-a"), single_scene_video("dup-b")]
    predictions = predict_all(videos, run_config, IssueLabel.PERFORMANCE)
    data = json.loads(json.dumps(predictions_to_json(predictions)))
    by_id = {v.video_id: v for v in videos}
    again = predictions_from_json(data, [p.segment for p in predictions], by_id)
    assert [(p.segment, p.label, p.text) for p in again] == [(p.segment, p.label, p.text) for p in predictions]
    data["predictions"].pop()
    with pytest.raises(DataFormatError):
        predictions_from_json(data, [p.segment for p in predictions], by_id)


def test_split_is_stratified_and_seeded():
    labels = [LABEL_ORDER[i % 5] for i in range(100)]
    evaluation, test = split_dataset(list(range(100)), labels, (0.1, 0.9), seed=4)
    assert (len(evaluation), len(test)) == (10, 90)
    assert sorted(evaluation + test) == list(range(100))
    assert sorted(labels[i].value for i in evaluation) == sorted([label.value for label in LABEL_ORDER] * 2)
    assert split_dataset(list(range(100)), labels, (0.1, 0.9), seed=4) == (evaluation, test)


def test_split_hands_spare_items_to_largest_remainder():
    evaluation, test = split_dataset(list("abcdefg"), list("xxxxyyy"), (0.5, 0.5), seed=0)
    assert len(evaluation) == 4
    assert sum(1 for item in evaluation if item in "abcd") == 2
    with pytest.raises(ValueError):
        split_dataset([1], ["x"], (0.5, 0.6))


def test_annotator_disagreements_are_discarded(tmp_path):
    table = pd.DataFrame({
        "video_id": ["alpha"] * 3, "start_ms": [0, 20000, 40000], "end_ms": [20000, 40000, 60000],
        "annotator_1": ["Logic", "Balance", "Logic"], "annotator_2": ["Logic", "Logic", "Logic"],
    })
    consolidation = consolidate_annotations(table)
    assert consolidation.discarded == 1
    assert consolidation.rows["label"].tolist() == ["Logic", "Logic"]
    path = tmp_path / "labels.csv"
    table.to_csv(path, index=False)
    assert load_label_table(path)["label"].tolist() == ["Logic", "Logic"]


def test_unknown_training_label_is_rejected(tmp_path):
    path = tmp_path / "labels.csv"
    pd.DataFrame({"video_id": ["alpha"], "start_ms": [0], "end_ms": [1000], "label": ["Crash"]}).to_csv(path,
                                                                                                      index=False)
    with pytest.raises(DataFormatError):
        load_label_table(path)


def test_labeled_segments_follow_the_table(dataset, run_config):
    manifest = load_manifest(dataset)
    by_id = {v.video_id: v for v in ingest_videos(manifest, run_config)}
    labeled = labeled_segments(load_label_table(manifest.labels), by_id, run_config)
    assert len(labeled) == 9
    first = labeled[0]
    assert first.segment.segment_id == "alpha-L0000"
    assert first.label is IssueLabel.NON_INFORMATIVE
    assert first.text.startswith("what a lovely view")


def test_context_grid_recovers_scenes(dataset, run_config, tmp_path):
    manifest = load_manifest(dataset)
    by_id = {v.video_id: v for v in ingest_videos(manifest, run_config)}
    rows = [
        {"video_id": vid, "start_ms": r * 20000, "end_ms": (r + 1) * 20000, "context": f"scene{(r + offset) % 3}"}
        for vid, offset in OFFSETS.items() for r in range(3)
    ]
    path = tmp_path / "truth.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    segments, truth = truth_segments(load_truth_table(path), by_id, run_config)
    assert segments[0].segment_id == "alpha-T0000"
    grid = evaluate_context_grid(segments, by_id, truth, run_config.context)
    assert [row["algorithm"] for row in grid] == ["dbscan", "optics", "mean_shift"]
    assert all(row["mojofm"] == 100.0 for row in grid)
    assert all(row["clusters"] == 3 for row in grid)


def test_model_grid_covers_every_kind_and_variant(dataset, run_config):
    manifest = load_manifest(dataset)
    by_id = {v.video_id: v for v in ingest_videos(manifest, run_config)}
    labeled = labeled_segments(load_label_table(manifest.labels), by_id, run_config)
    rows = evaluate_model_grid(labeled, labeled, by_id, run_config)
    assert len(rows) == 9
    assert {(row["model"], row["features"]) for row in rows} == {
        (kind, variant) for kind in ("LogisticRegression", "RandomForest", "FeedForwardNet")
        for variant in ("text", "video", "all")
    }
    assert all(row["n"] == 9 for row in rows)


def test_segment_videos_keeps_manifest_order(dataset, run_config):
    manifest = load_manifest(dataset)
    videos = ingest_videos(manifest, run_config)
    segments = segment_videos(videos, run_config)
    assert list(segments) == list(REGIONS)
    assert all(len(s) == 3 for s in segments.values())


def test_video_without_frames_fails_the_segment_stage(dataset, run_config):
    (dataset.parent / "empty").mkdir()
    data = json.loads(dataset.read_text())
    data["videos"][0]["frames"] = "empty"
    dataset.write_text(json.dumps(data))
    with pytest.raises(StageError) as info:
        run_pipeline(load_manifest(dataset), run_config)
    assert info.value.stage == "segment"
    assert info.value.video_id == "alpha"
    assert isinstance(info.value.cause, DataFormatError)
    assert info.value.exit_code == 2


def test_bounded_segments_detect_shots_once_per_video(dataset, run_config, monkeypatch):
    manifest = load_manifest(dataset)
    by_id = {v.video_id: v for v in ingest_videos(manifest, run_config)}
    calls = []
    detect = pipeline.detect_shot_transitions

    def counting(track, cfg):
        calls.append(track.video_id)
        return detect(track, cfg)

    monkeypatch.setattr(pipeline, "detect_shot_transitions", counting)
    labeled = labeled_segments(load_label_table(manifest.labels), by_id, run_config)
    assert len(labeled) == 9
    assert calls == ["alpha", "beta", "gamma"]
    assert labeled[1].segment.keyframe_timestamps == (20000,)
