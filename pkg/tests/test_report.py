import json

import pytest

from classifiers import IssueLabel
from pipeline import CategoryNode, ContextNode, IssueCluster, IssueHierarchy, SegmentRef
from report import export_report, render_html, render_json


def two_context_hierarchy(video_id="alpha"):
    first = IssueCluster(cluster_id=0, medoid=f"{video_id}-0001", members=[
        SegmentRef(f"{video_id}-0001", video_id, 20000, 40000),
        SegmentRef(f"{video_id}-0000", video_id, 0, 20000),
    ])
    second = IssueCluster(cluster_id=0, medoid="beta-0002", members=[
        SegmentRef("beta-0002", "beta", 3_725_500, 3_730_000),
    ])
    return IssueHierarchy(
        contexts=[
            ContextNode("ctx-0000", [CategoryNode(IssueLabel.LOGIC, [first])]),
            ContextNode("ctx-0001", [CategoryNode(IssueLabel.PERFORMANCE, [second])]),
        ],
        n_segments=5,
        n_non_informative=2,
    )


def test_html_lists_every_context_with_its_medoid():
    page = render_html(two_context_hierarchy())
    assert page.count('<section class="context"') == 2
    assert 'id="ctx-0001"' in page
    assert page.count('class="medoid"') == 2
    assert "01:02:05.500" in page
    assert page.index("alpha-0001") < page.index("alpha-0000")


def test_renders_are_byte_identical():
    hierarchy = two_context_hierarchy()
    assert render_html(hierarchy) == render_html(hierarchy)
    assert render_json(hierarchy) == render_json(two_context_hierarchy())


def test_empty_hierarchy_is_stated_plainly():
    empty = IssueHierarchy(n_segments=4, n_non_informative=4)
    assert "No informative segments were found." in render_html(empty)
    assert json.loads(render_json(empty))["contexts"] == []


def test_html_escapes_video_ids():
    page = render_html(two_context_hierarchy("<b>clip"))
    assert "<b>clip" not in page
    assert "&lt;b&gt;clip" in page


def test_export_writes_requested_format(tmp_path):
    hierarchy = two_context_hierarchy()
    written = export_report(hierarchy, "json", tmp_path / "hierarchy.json")
    assert json.loads(written.read_text())["summary"]["contexts"] == 2
    export_report(hierarchy, "html", tmp_path / "report.html")
    assert (tmp_path / "report.html").read_text().startswith("<!DOCTYPE html>")
    with pytest.raises(ValueError):
        export_report(hierarchy, "pdf", tmp_path / "report.pdf")
