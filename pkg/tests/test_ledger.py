from ledger import list_runs, record_classifier, record_run

COUNTS = {"videos": 3, "segments": 9, "informative": 6, "contexts": 3}


def test_runs_are_listed_newest_first(tmp_path):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    first = record_run(url, 7, "a" * 64, [("ingest", 0.5, 3), ("segment", 0.25, 9)], COUNTS, "b" * 64)
    second = record_run(url, 8, "c" * 64, [], {}, error="stage 'ingest' failed")
    assert second > first
    runs = list_runs(url)
    assert [run["id"] for run in runs] == [second, first]
    newest, oldest = runs
    assert newest["succeeded"] is False
    assert newest["error"] == "stage 'ingest' failed"
    assert oldest["succeeded"] is True
    assert oldest["segments"] == 9
    assert oldest["timings"] == [{"stage": "ingest", "seconds": 0.5, "items": 3},
                                 {"stage": "segment", "seconds": 0.25, "items": 9}]
    assert len(list_runs(url, limit=1)) == 1


def test_full_width_seed_is_kept_exactly(tmp_path):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    record_run(url, 2**64 - 1, "d" * 64, [], COUNTS)
    assert list_runs(url)[0]["seed"] == str(2**64 - 1)


def test_no_ledger_url_records_nothing():
    assert record_run("", 1, "e" * 64, [], COUNTS) is None
    assert record_classifier(None, "RandomForest", "model.json", 10, 1.0, {}) is None


def test_classifier_artifacts_are_recorded(tmp_path):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    assert record_classifier(url, "RandomForest", "model.json", 42, 0.9, {"n_trees": 15}) is not None


def test_unreachable_ledger_does_not_raise(tmp_path):
    url = f"sqlite:///{tmp_path / 'missing' / 'dir' / 'runs.db'}"
    assert record_run(url, 1, "f" * 64, [], COUNTS) is None
