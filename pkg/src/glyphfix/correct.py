"""Super-majority relabeling of clustered detections."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .model import Detection


@dataclass(frozen=True)
class CorrectionRecord:
    index: int
    old_label: str
    new_label: str
    cluster_id: int
    frequency: float


def modal_label(labels: Sequence[str]) -> tuple[str, float]:
    """Most frequent label and its frequency; ties go to the smallest code-point sequence."""
    if not labels:
        raise ValueError("no labels")
    counts = Counter(labels)
    best = max(counts.values())
    label = min(lab for lab, c in counts.items() if c == best)
    return label, best / len(labels)


def relabel_labels(labels: Sequence[str], clusters, f_thr: float = 0.6):
    """Label-level relabeling; returns ``(new_labels, records)``.

    Records are emitted for every member whose label changes.
    """
    new = list(labels)
    records: list[CorrectionRecord] = []
    seen: set[int] = set()
    for cid, members in enumerate(clusters):
        members = [int(i) for i in members]
        if not members:
            continue
        if seen.intersection(members):
            raise ValueError(f"cluster {cid} overlaps an earlier cluster")
        seen.update(members)
        label, f = modal_label([labels[i] for i in members])
        if f > f_thr:
            for i in members:
                if labels[i] != label:
                    records.append(CorrectionRecord(i, labels[i], label, cid, f))
                new[i] = label
    return new, records


def relabel(detections: Sequence[Detection], clusters, f_thr: float = 0.6):
    """Relabel detections by cluster super-majority.

    ``clusters`` are disjoint lists of detection indices. A cluster whose
    modal label reaches a frequency strictly above ``f_thr`` imposes that
    label on all its members; other detections are left untouched.
    Returns ``(corrected_detections, records)``.
    """
    labels = [d.label for d in detections]
    new, records = relabel_labels(labels, clusters, f_thr)
    changed = {r.index for r in records}
    out = [d.relabeled(new[i]) if i in changed else d for i, d in enumerate(detections)]
    return out, records


def write_correction_log(records: Sequence[CorrectionRecord], path, line_ids: Sequence[str] | None = None) -> None:
    """Tab-separated log, one row per changed detection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["index", "line_id", "old", "new", "cluster", "frequency"])
        for r in records:
            lid = line_ids[r.index] if line_ids is not None else ""
            w.writerow([r.index, lid, r.old_label, r.new_label, r.cluster_id, f"{r.frequency:.4f}"])
