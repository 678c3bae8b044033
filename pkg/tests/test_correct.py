import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphfix.correct import modal_label, relabel, relabel_labels, write_correction_log
from glyphfix.model import Detection


def _dets(labels):
    return [Detection("L", (4 * i, 0, 3, 5), lab) for i, lab in enumerate(labels)]


def test_super_majority_wins():
    out, recs = relabel(_dets("eeoee"), [[0, 1, 2, 3, 4]], 0.6)
    assert "".join(d.label for d in out) == "eeeee"
    assert [(r.index, r.old_label, r.new_label) for r in recs] == [(2, "o", "e")]
    assert recs[0].frequency == pytest.approx(0.8)
    assert out[2].source == "corrected" and out[0].source == "base_ocr"


def test_below_threshold_unchanged():
    out, recs = relabel(_dets("aabbc"), [[0, 1, 2, 3, 4]], 0.6)
    assert "".join(d.label for d in out) == "aabbc" and recs == []


def test_tie_unchanged():
    out, recs = relabel(_dets("xxyy"), [[0, 1, 2, 3]], 0.6)
    assert "".join(d.label for d in out) == "xxyy" and recs == []


def test_threshold_is_strict():
    # f = 0.6 exactly does not override
    out, recs = relabel(_dets("aaabb"), [[0, 1, 2, 3, 4]], 0.6)
    assert recs == []


def test_modal_tie_break_by_code_point():
    assert modal_label(list("yxxy")) == ("x", 0.5)
    _, recs = relabel(_dets("yxxy"), [[0, 1, 2, 3]], 0.4)
    assert {r.new_label for r in recs} == {"x"}


def test_overlapping_clusters_rejected():
    with pytest.raises(ValueError):
        relabel(_dets("aaa"), [[0, 1], [1, 2]], 0.6)


def test_log_file(tmp_path):
    _, recs = relabel(_dets("eeoee"), [[0, 1, 2, 3, 4]], 0.6)
    write_correction_log(recs, tmp_path / "log.tsv", ["L"] * 5)
    rows = (tmp_path / "log.tsv").read_text(encoding="utf-8").splitlines()
    assert rows[0].split("\t") == ["index", "line_id", "old", "new", "cluster", "frequency"]
    assert rows[1].split("\t") == ["2", "L", "o", "e", "0", "0.8000"]


@st.composite
def labelled_clusters(draw):
    n = draw(st.integers(0, 40))
    labels = draw(st.lists(st.sampled_from("abcd"), min_size=n, max_size=n))
    perm = np.random.default_rng(draw(st.integers(0, 1000))).permutation(n)
    cuts = sorted(draw(st.lists(st.integers(0, n), max_size=5)))
    parts = np.split(perm, cuts)
    kept = [p.tolist() for p in parts if len(p) and draw(st.booleans())]
    f_thr = draw(st.sampled_from([0.3, 0.5, 0.6, 0.8]))
    return labels, kept, f_thr


@settings(max_examples=150, deadline=None)
@given(labelled_clusters())
def test_relabel_properties(case):
    labels, clusters, f_thr = case
    new, recs = relabel_labels(labels, clusters, f_thr)
    again, recs2 = relabel_labels(new, clusters, f_thr)
    assert again == new and recs2 == []
    inside = {i for c in clusters for i in c}
    assert all(new[i] == labels[i] for i in range(len(labels)) if i not in inside)
    expected = 0
    for c in clusters:
        lab, f = modal_label([labels[i] for i in c])
        if f > f_thr:
            expected += len(c) - round(f * len(c))
    assert len(recs) == expected == sum(a != b for a, b in zip(labels, new))
    assert all(r.frequency > f_thr for r in recs)
