import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphfix.metrics import (
    EditCounts,
    EvalReport,
    bootstrap_ci,
    correction_accuracy,
    edit_counts,
    normalize_text,
    reconstruct_string,
    score_line,
    summarize,
    true_false_corrections,
)
from glyphfix.model import Detection
from oracles import bootstrap_exact, edit_distance_exponential, edit_distance_recursive


def _det(cx, label, w=2):
    return Detection("L", (cx - w // 2, 0, w, 4), label)


def test_reconstruct_by_center():
    assert reconstruct_string([_det(10, "b"), _det(5, "a"), _det(20, "c")]) == "abc"
    assert reconstruct_string([]) == ""
    assert reconstruct_string([_det(10, "y"), _det(10, "x")]) == "yx"


def test_normalize_examples():
    assert normalize_text("é") == "é"
    assert normalize_text("—") == "-"
    assert normalize_text("a b") == "ab"
    assert normalize_text("“it’s” − 1") == "\"it's\"-1"


def test_edit_examples():
    assert edit_counts("abc", "abc") == EditCounts(0, 0, 0, 3)
    r = edit_counts("abc", "abd")
    assert (r.I, r.D, r.S) == (0, 0, 1) and r.cer == pytest.approx(1 / 3)
    assert edit_counts("abc", "ac") == EditCounts(0, 1, 0, 3)
    assert edit_counts("ac", "abc") == EditCounts(1, 0, 0, 2)
    assert edit_counts("ab", "") == EditCounts(0, 2, 0, 2)
    with pytest.raises(ValueError):
        edit_counts("", "a")


def test_edit_matches_memoized_oracle_on_long_strings():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = "".join(rng.choice(list("abcde"), rng.integers(1, 60)))
        b = "".join(rng.choice(list("abcde"), rng.integers(0, 60)))
        assert edit_counts(a, b).distance == edit_distance_recursive(a, b)


short = st.text(alphabet="abcde", max_size=7)


@settings(max_examples=200, deadline=None)
@given(short.filter(bool), short)
def test_edit_matches_exponential_oracle(a, b):
    assert edit_counts(a, b).distance == edit_distance_exponential(a, b)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcd", min_size=1, max_size=15), st.text(alphabet="abcd", min_size=1, max_size=15),
       st.text(alphabet="abcd", max_size=15))
def test_edit_metric_properties(a, b, c):
    assert edit_counts(a, a).distance == 0
    r = edit_counts(a, c)
    assert abs(len(a) - len(c)) <= r.distance <= max(len(a), len(c))
    assert r.I - r.D == len(c) - len(a)
    assert r.distance <= edit_counts(a, b).distance + edit_counts(b, c).distance


def test_accuracy_examples():
    assert correction_accuracy(0.0, 10, 100) == 0.5
    assert correction_accuracy(-0.1, 10, 100) == 1.0
    assert correction_accuracy(0.1, 10, 100) == 0.0
    assert correction_accuracy(-0.5, 10, 100) == 1.0  # clipped
    with pytest.raises(ValueError):
        correction_accuracy(0.0, 0, 100)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(1, 5000), st.floats(-1, 1))
def test_true_false_identity(n_corr, n, frac):
    delta = frac * n_corr / n
    t, f = true_false_corrections(delta, n_corr, n)
    assert t + f == pytest.approx(n_corr)
    assert t / n_corr == pytest.approx(correction_accuracy(delta, n_corr, n))


def test_bootstrap_identical_lines():
    lo, hi = bootstrap_ci([(2, 10)] * 7, resamples=500)
    assert lo == pytest.approx(0.2) and hi == pytest.approx(0.2)


def exact_interval(stats):
    # every ordered resample is equally likely; quantiles of that discrete law
    vals = bootstrap_exact(stats)
    return tuple(np.percentile(vals, [2.5, 97.5], method="inverted_cdf"))


def test_bootstrap_matches_exact_enumeration():
    stats = [(1, 10), (6, 12)]
    assert set(np.round(bootstrap_exact(stats), 12)) == {0.1, 0.5, round(7 / 22, 12)}
    assert exact_interval(stats) == (0.1, 0.5)
    assert bootstrap_ci(stats, resamples=20000, seed=3) == pytest.approx((0.1, 0.5), abs=1e-12)


def test_bootstrap_three_lines_distribution():
    stats = [(0, 5), (2, 8), (5, 9)]
    lo_x, hi_x = exact_interval(stats)
    lo, hi = bootstrap_ci(stats, resamples=30000, seed=1)
    assert lo == pytest.approx(lo_x, abs=0.01) and hi == pytest.approx(hi_x, abs=0.01)


def test_bootstrap_deterministic():
    stats = [(1, 10), (3, 11), (0, 7), (2, 9)]
    assert bootstrap_ci(stats, 2000, seed=5) == bootstrap_ci(stats, 2000, seed=5)
    assert bootstrap_ci(stats, 2000, seed=5, chunk=333) == bootstrap_ci(stats, 2000, seed=5, chunk=333)


def _line(lid, gt, base, corr):
    mk = lambda s: [Detection(lid, (4 * i, 0, 3, 5), c) for i, c in enumerate(s)]  # noqa: E731
    return score_line(lid, gt, mk(base), mk(corr))


def test_summarize_weights_by_length():
    scores = [_line("a", "abcd", "abcx", "abcd"), _line("b", "ab", "xy", "xb")]
    r = summarize("sc", scores, resamples=200)
    assert r.n_chars == 6 and r.n_corr == 2
    assert r.base_cer == pytest.approx(3 / 6) and r.corrected_cer == pytest.approx(1 / 6)
    assert r.delta_cer == pytest.approx(-2 / 6)
    assert r.accuracy == 1.0
    assert r.n_true + r.n_false == pytest.approx(r.n_corr)


def test_summarize_without_corrections():
    r = summarize("sc", [_line("a", "ab", "ab", "ab")], resamples=50)
    assert r.accuracy is None and r.delta_cer == 0


def test_aggregate_is_unweighted_mean(tmp_path):
    a = summarize("a", [_line("a", "abcdefghij", "abcdefghiX", "abcdefghij")], resamples=50)
    b = summarize("b", [_line("b", "ab", "XY", "XY")], resamples=50)
    rep = EvalReport([a, b])
    agg = rep.aggregate()
    assert agg["base_cer"] == pytest.approx((0.1 + 1.0) / 2)
    assert agg["accuracy"] == pytest.approx(1.0)  # only sub-collection a has corrections
    rep.to_json(tmp_path / "r.json")
    assert "mean" in rep.to_text().splitlines()[0]
