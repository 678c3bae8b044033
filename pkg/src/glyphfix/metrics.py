"""Evaluation: string reconstruction, CER, correction accuracy, bootstrap intervals."""

from __future__ import annotations

import json
import unicodedata
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import Detection

HYPHENS = "­‐‑‒–—―⁃−﹘﹣－"
SINGLE_QUOTES = "‘’‚‛′‵‹›＇"
DOUBLE_QUOTES = "“”„‟″‶«»＂"
_TABLE = str.maketrans(
    {**{c: "-" for c in HYPHENS}, **{c: "'" for c in SINGLE_QUOTES}, **{c: '"' for c in DOUBLE_QUOTES}}
)


def reconstruct_string(detections: Sequence[Detection]) -> str:
    """Labels ordered by box center x; equal centers keep detection order."""
    order = sorted(range(len(detections)), key=lambda i: (detections[i].center_x, i))
    return "".join(detections[i].label for i in order)


def normalize_text(s: str) -> str:
    """NFC, hyphen and quotation variants folded to ASCII, whitespace removed."""
    s = unicodedata.normalize("NFC", s).translate(_TABLE)
    return "".join(s.split())


@dataclass(frozen=True)
class EditCounts:
    I: int
    D: int
    S: int
    gt_len: int

    @property
    def distance(self) -> int:
        return self.I + self.D + self.S

    @property
    def cer(self) -> float:
        return self.distance / self.gt_len


def edit_counts(gt: str, pred: str) -> EditCounts:
    """Unit-cost Levenshtein alignment of ``pred`` against ``gt``.

    The traceback prefers substitution (or match), then deletion (a ``gt``
    symbol missing from ``pred``), then insertion.
    """
    n, m = len(gt), len(pred)
    if n == 0:
        raise ValueError("CER is undefined for an empty ground truth")
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    p = np.array([ord(c) for c in pred], dtype=np.int64)
    for i in range(1, n + 1):
        sub = dp[i - 1, :-1] + (p != ord(gt[i - 1]))
        row = np.minimum(sub, dp[i - 1, 1:] + 1)
        # insertions propagate along the row
        out = np.empty(m + 1, dtype=np.int64)
        out[0] = i
        for j in range(1, m + 1):
            out[j] = min(row[j - 1], out[j - 1] + 1)
        dp[i] = out
    i, j, I, D, S = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = int(gt[i - 1] != pred[j - 1])
            if dp[i, j] == dp[i - 1, j - 1] + cost:
                S += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return EditCounts(I, D, S, n)


def correction_accuracy(delta_cer: float, n_corr: int, n: int) -> float:
    """Heuristic share of true corrections among the ``n_corr`` label changes."""
    if n_corr <= 0:
        raise ValueError("accuracy is undefined without corrections")
    acc = 0.5 * (1.0 - delta_cer / (n_corr / n))
    return float(min(max(acc, 0.0), 1.0))


def true_false_corrections(delta_cer: float, n_corr: int, n: int) -> tuple[float, float]:
    """``(N_true, N_false)`` implied by a CER change over ``n`` characters."""
    return (n_corr - delta_cer * n) / 2.0, (n_corr + delta_cer * n) / 2.0


def bootstrap_ci(
    per_line_stats,
    resamples: int = 10_000,
    seed: int = 0,
    level: float = 0.95,
    chunk: int = 1000,
) -> tuple[float, float]:
    """Percentile interval of ``sum(errors) / sum(lengths)`` over resampled lines.

    ``per_line_stats`` is a sequence of ``(errors, length)`` pairs; errors may
    be negative (CER differences).
    """
    stats = np.asarray(per_line_stats, dtype=np.float64).reshape(-1, 2)
    n = len(stats)
    if n == 0:
        raise ValueError("no lines to resample")
    rng = np.random.default_rng(seed)
    values = np.empty(resamples)
    for start in range(0, resamples, chunk):
        stop = min(start + chunk, resamples)
        idx = rng.integers(0, n, size=(stop - start, n))
        picked = stats[idx]
        values[start:stop] = picked[..., 0].sum(axis=1) / picked[..., 1].sum(axis=1)
    alpha = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [alpha, 100.0 - alpha])
    return float(lo), float(hi)


# ---------------------------------------------------------------- reports


@dataclass
class LineScore:
    line_id: str
    gt_len: int
    base: EditCounts
    corrected: EditCounts
    n_changed: int


def score_line(line_id: str, ground_truth: str, base: Sequence[Detection], corrected: Sequence[Detection]) -> LineScore:
    if len(base) != len(corrected):
        raise ValueError(f"{line_id}: base and corrected detection counts differ")
    gt = normalize_text(ground_truth)
    b = edit_counts(gt, normalize_text(reconstruct_string(base)))
    c = edit_counts(gt, normalize_text(reconstruct_string(corrected)))
    changed = sum(x.label != y.label for x, y in zip(base, corrected))
    return LineScore(line_id, len(gt), b, c, changed)


@dataclass
class SubCollectionReport:
    name: str
    n_lines: int
    n_chars: int
    n_corr: int
    base_cer: float
    corrected_cer: float
    delta_cer: float
    accuracy: float | None
    n_true: float
    n_false: float
    base_ids: tuple[int, int, int]
    corrected_ids: tuple[int, int, int]
    base_ci: tuple[float, float]
    corrected_ci: tuple[float, float]
    delta_ci: tuple[float, float]


def summarize(name: str, scores: Sequence[LineScore], resamples: int = 10_000, seed: int = 0) -> SubCollectionReport:
    """Length-weighted CERs of one sub-collection with bootstrap intervals."""
    scores = [s for s in scores if s.gt_len > 0]
    if not scores:
        raise ValueError(f"{name}: no line with ground truth")
    N = sum(s.gt_len for s in scores)
    eb = np.array([s.base.distance for s in scores], dtype=np.float64)
    ec = np.array([s.corrected.distance for s in scores], dtype=np.float64)
    ln = np.array([s.gt_len for s in scores], dtype=np.float64)
    base_cer, corr_cer = eb.sum() / N, ec.sum() / N
    delta = corr_cer - base_cer
    n_corr = sum(s.n_changed for s in scores)
    acc = correction_accuracy(delta, n_corr, N) if n_corr else None
    n_true, n_false = true_false_corrections(delta, n_corr, N)
    ids = lambda key: tuple(int(sum(getattr(getattr(s, key), a) for s in scores)) for a in "IDS")  # noqa: E731
    return SubCollectionReport(
        name,
        len(scores),
        N,
        n_corr,
        float(base_cer),
        float(corr_cer),
        float(delta),
        acc,
        n_true,
        n_false,
        ids("base"),
        ids("corrected"),
        bootstrap_ci(np.column_stack([eb, ln]), resamples, seed),
        bootstrap_ci(np.column_stack([ec, ln]), resamples, seed),
        bootstrap_ci(np.column_stack([ec - eb, ln]), resamples, seed),
    )


@dataclass
class EvalReport:
    sub_collections: list[SubCollectionReport] = field(default_factory=list)

    def aggregate(self) -> dict[str, float | None]:
        """Unweighted means over sub-collections."""
        out: dict[str, float | None] = {}
        for key in ("base_cer", "corrected_cer", "delta_cer"):
            out[key] = float(np.mean([getattr(r, key) for r in self.sub_collections]))
        accs = [r.accuracy for r in self.sub_collections if r.accuracy is not None]
        out["accuracy"] = float(np.mean(accs)) if accs else None
        return out

    def to_dict(self) -> dict:
        return {"sub_collections": [asdict(r) for r in self.sub_collections], "aggregate": self.aggregate()}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, ensure_ascii=False)

    def to_text(self) -> str:
        """Table with one column per sub-collection and an aggregate column (values in %)."""
        names = [r.name for r in self.sub_collections] + ["mean"]
        agg = self.aggregate()

        def pct(v):
            return "n/a" if v is None else f"{100 * v:.2f}"

        def ci(v):
            return f"[{100 * v[0]:.2f}, {100 * v[1]:.2f}]"

        rows = [
            ("base CER", [pct(r.base_cer) for r in self.sub_collections] + [pct(agg["base_cer"])]),
            ("  95% CI", [ci(r.base_ci) for r in self.sub_collections] + [""]),
            ("corrected CER", [pct(r.corrected_cer) for r in self.sub_collections] + [pct(agg["corrected_cer"])]),
            ("delta CER", [pct(r.delta_cer) for r in self.sub_collections] + [pct(agg["delta_cer"])]),
            ("  95% CI", [ci(r.delta_ci) for r in self.sub_collections] + [""]),
            ("accuracy", [pct(r.accuracy) for r in self.sub_collections] + [pct(agg["accuracy"])]),
            ("N chars", [str(r.n_chars) for r in self.sub_collections] + [""]),
            ("N corr", [str(r.n_corr) for r in self.sub_collections] + [""]),
        ]
        width = max(14, *(len(n) for n in names), *(len(c) for _, cells in rows for c in cells)) + 2
        lines = ["".ljust(16) + "".join(n.rjust(width) for n in names)]
        lines += [label.ljust(16) + "".join(c.rjust(width) for c in cells) for label, cells in rows]
        return "\n".join(lines)
