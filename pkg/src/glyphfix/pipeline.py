"""End-to-end orchestration with content-addressed stage caching."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import __version__
from .cluster import fit_gmm, fit_pca
from .correct import CorrectionRecord, modal_label, relabel, write_correction_log
from .geometry import char_masks
from .metrics import EvalReport, LineScore, score_line, summarize
from .model import Detection, PipelineConfig, SubCollection, load_manifest, read_detections, write_detections
from .radiometry import standardize_line
from .refine import NodeStatus, RefineResult, refine_all
from .standardize import standardize_char

log = logging.getLogger(__name__)

MAX_FAILED_LINES = 0.10
PREPROCESS_KEYS = ("H", "W", "s", "lambda_h", "lambda_v0", "delta_lambda_v", "max_lambda_iters", "dilation_rounds")
CLUSTER_KEYS = ("q_variance", "K", "rng_seed")
REFINE_KEYS = ("n_min", "p_thr", "k", "rng_seed")


class PipelineError(RuntimeError):
    pass


def stream_seed(seed: int, name: str) -> int:
    """Independent seed for the named random stream of a run."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def _digest(*parts) -> str:
    # the package version is part of every key so upgrades never reuse stale stages
    h = hashlib.sha256(__version__.encode())
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()[:24]


def safe_name(text: str) -> str:
    return re.sub(r"[^\w.-]+", "_", text)


# ---------------------------------------------------------------- preprocess


@dataclass
class PreparedChars:
    """Standardized characters of one sub-collection, in detection order."""

    images: np.ndarray  # (n_ok, H, W)
    det_index: np.ndarray  # position of each image in the flat detection list
    n_detections: int
    failed_lines: list[str] = field(default_factory=list)


def prepare_line(image: np.ndarray, boxes, config: PipelineConfig) -> np.ndarray:
    """Standardized crops (n, H, W) of every box of one line image."""
    clean = standardize_line(image, config)
    masks = char_masks(clean, boxes, config)
    return np.stack([standardize_char(clean, m.mask, config, m.index).pixels for m in masks])


def preprocess(sc: SubCollection, config: PipelineConfig) -> PreparedChars:
    chunks, index, failed = [], [], []
    offset = 0
    for line in sc.lines:
        n = len(line.detections)
        if n:
            try:
                chunks.append(prepare_line(line.load_image(), [d.box for d in line.detections], config))
                index.append(np.arange(offset, offset + n))
            except Exception as exc:  # noqa: BLE001 - reported and counted
                log.warning("%s / %s: preprocessing failed: %s", sc.name, line.line_id, exc)
                failed.append(line.line_id)
        offset += n
    if len(failed) > MAX_FAILED_LINES * len(sc.lines):
        raise PipelineError(f"{sc.name}: {len(failed)} of {len(sc.lines)} lines failed ({', '.join(failed[:5])})")
    H, W = config.H, config.W
    images = np.concatenate(chunks) if chunks else np.empty((0, H, W))
    det_index = np.concatenate(index) if index else np.empty(0, dtype=np.int64)
    return PreparedChars(images, det_index, offset, failed)


# ---------------------------------------------------------------- caching


class StageCache:
    """``.npz`` files named by a digest of inputs and the relevant config."""

    def __init__(self, root: Path | None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, stage: str, key: str) -> Path | None:
        return None if self.root is None else self.root / f"{stage}-{key}.npz"

    def load(self, stage: str, key: str) -> dict | None:
        p = self._path(stage, key)
        if p is None or not p.exists():
            return None
        with np.load(p, allow_pickle=False) as data:
            return {k: data[k] for k in data.files}

    def save(self, stage: str, key: str, **arrays) -> None:
        p = self._path(stage, key)
        if p is None:
            return
        tmp = p.with_suffix(".tmp.npz")
        np.savez_compressed(tmp, **arrays)
        tmp.replace(p)


def _input_digest(sc: SubCollection) -> str:
    h = hashlib.sha256(sc.name.encode())
    for line in sc.lines:
        h.update(line.line_id.encode())
        h.update(Path(line.image_path).read_bytes())
        for d in line.detections:
            h.update(repr((d.box, d.label)).encode())
    return h.hexdigest()[:24]


def _subset(config: PipelineConfig, keys: Sequence[str]) -> dict:
    return {k: getattr(config, k) for k in keys}


# ---------------------------------------------------------------- stages


@dataclass
class SubCollectionRun:
    name: str
    prepared: PreparedChars
    gmm_clusters: list[np.ndarray] | None = None  # indices into prepared.images
    refined: RefineResult | None = None
    keys: dict = field(default_factory=dict)
    pca_dim: int = 0

    def to_detection_index(self, clusters: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [self.prepared.det_index[c] for c in clusters]


class Pipeline:
    def __init__(self, config: PipelineConfig, cache_dir: Path | None = None):
        self.config = config
        self.cache = StageCache(cache_dir)

    def prepare(self, sc: SubCollection) -> SubCollectionRun:
        key = _digest(_input_digest(sc), _subset(self.config, PREPROCESS_KEYS))
        cached = self.cache.load("chars", key)
        if cached is not None:
            prepared = PreparedChars(
                cached["images"], cached["det_index"], int(cached["n_detections"]), list(cached["failed"])
            )
        else:
            prepared = preprocess(sc, self.config)
            self.cache.save(
                "chars",
                key,
                images=prepared.images,
                det_index=prepared.det_index,
                n_detections=np.int64(prepared.n_detections),
                failed=np.array(prepared.failed_lines, dtype=str),
            )
        return SubCollectionRun(sc.name, prepared, keys={"chars": key})

    def cluster(self, run: SubCollectionRun, config: PipelineConfig | None = None) -> SubCollectionRun:
        config = config or self.config
        key = _digest(run.keys["chars"], _subset(config, CLUSTER_KEYS))
        cached = self.cache.load("gmm", key)
        if cached is None:
            X = run.prepared.images.reshape(len(run.prepared.images), -1)
            pca = fit_pca(X, config.q_variance)
            state = fit_gmm(pca.project(X), config.K, stream_seed(config.rng_seed, "gmm"))
            labels = state.assignment
            self.cache.save("gmm", key, labels=labels, dim=np.int64(pca.D))
        else:
            labels = cached["labels"]
        run.gmm_clusters = [np.flatnonzero(labels == c) for c in np.unique(labels)]
        run.keys["gmm"] = key
        run.pca_dim = int(cached["dim"]) if cached is not None else pca.D
        return run

    def refine(self, run: SubCollectionRun, config: PipelineConfig | None = None) -> SubCollectionRun:
        config = config or self.config
        if run.gmm_clusters is None:
            self.cluster(run, config)
        key = _digest(run.keys["gmm"], _subset(config, REFINE_KEYS))
        cached = self.cache.load("tree", key)
        if cached is None:
            result = refine_all(run.gmm_clusters, run.prepared.images, config, stream_seed(config.rng_seed, "refine"))
            nodes = result.leaves + result.discarded
            self.cache.save(
                "tree",
                key,
                members=np.concatenate([nd.members for nd in nodes]) if nodes else np.empty(0, np.int64),
                sizes=np.array([nd.size for nd in nodes], dtype=np.int64),
                accepted=np.array([nd.status is NodeStatus.ACCEPTED for nd in nodes], dtype=bool),
                paths=np.array([nd.path for nd in nodes], dtype=str),
                roots=np.array([nd.root for nd in nodes], dtype=np.int64),
            )
        else:
            result = _result_from_cache(cached, run.prepared.images)
        run.refined = result
        run.keys["tree"] = key
        return run


def _result_from_cache(data: dict, images: np.ndarray) -> RefineResult:
    from .refine import ClusterNode

    leaves, discarded = [], []
    bounds = np.concatenate([[0], np.cumsum(data["sizes"])])
    for i, acc in enumerate(data["accepted"]):
        members = data["members"][bounds[i] : bounds[i + 1]]
        mean = images[members].mean(axis=0) if len(members) else None
        status = NodeStatus.ACCEPTED if acc else NodeStatus.DISCARDED
        node = ClusterNode(members, mean, str(data["paths"][i]), status, root=int(data["roots"][i]))
        (leaves if acc else discarded).append(node)
    return RefineResult(leaves, discarded, len(images))


# ---------------------------------------------------------------- outputs


def cluster_mosaic(
    images: np.ndarray,
    clusters: Sequence[np.ndarray],
    labels: Sequence[str] | None = None,
    columns: int = 30,
    purity: float = 0.9,
) -> Image.Image:
    """Cluster means tiled by increasing total variance; pure clusters tinted green."""
    if not clusters:
        return Image.new("RGB", (1, 1), "white")
    H, W = images.shape[1:]
    spread = [float(images[c].reshape(len(c), -1).var(axis=0).sum()) for c in clusters]
    order = np.argsort(spread, kind="stable")
    rows = int(np.ceil(len(clusters) / columns))
    canvas = np.ones((rows * (H + 2), min(columns, len(clusters)) * (W + 2), 3))
    for slot, ci in enumerate(order):
        members = clusters[ci]
        tile = np.repeat(images[members].mean(axis=0)[..., None], 3, axis=2)
        if labels is not None and modal_label([labels[i] for i in members])[1] >= purity:
            tile[..., 0] *= 0.55
            tile[..., 2] *= 0.55
        r, c = divmod(slot, columns)
        canvas[r * (H + 2) + 1 : r * (H + 2) + 1 + H, c * (W + 2) + 1 : c * (W + 2) + 1 + W] = tile
    return Image.fromarray(np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8), "RGB")


def leaf_report(run: SubCollectionRun, labels: Sequence[str]) -> str:
    lines = ["leaf\troot\tpath\tsize\tlabels"]
    for i, leaf in enumerate(run.refined.leaves):
        hist: dict[str, int] = {}
        for m in leaf.members:
            lab = labels[run.prepared.det_index[m]]
            hist[lab] = hist.get(lab, 0) + 1
        text = " ".join(f"{k}:{v}" for k, v in sorted(hist.items(), key=lambda kv: (-kv[1], kv[0])))
        lines.append(f"{i}\t{leaf.root}\t{leaf.path or '-'}\t{leaf.size}\t{text}")
    return "\n".join(lines) + "\n"


@dataclass
class CorrectionOutcome:
    name: str
    detections: list[Detection]
    corrected: list[Detection]
    records: list[CorrectionRecord]


def correct_subcollection(sc: SubCollection, run: SubCollectionRun, clusters: Sequence[np.ndarray], f_thr: float):
    dets = sc.detections
    corrected, records = relabel(dets, run.to_detection_index(clusters), f_thr)
    return CorrectionOutcome(sc.name, dets, corrected, records)


def evaluate_lines(sc: SubCollection, corrected: Sequence[Detection], resamples: int = 10_000, seed: int = 0):
    scores: list[LineScore] = []
    pos = 0
    for line in sc.lines:
        n = len(line.detections)
        if line.ground_truth:
            scores.append(score_line(line.line_id, line.ground_truth, line.detections, corrected[pos : pos + n]))
        pos += n
    return summarize(sc.name, scores, resamples, seed)


def write_corrected_files(sc: SubCollection, corrected: Sequence[Detection], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    pos = 0
    for line in sc.lines:
        n = len(line.detections)
        write_detections(corrected[pos : pos + n], out_dir / f"{safe_name(line.line_id)}.txt")
        pos += n


def read_corrected_files(sc: SubCollection, in_dir: Path) -> list[Detection]:
    out: list[Detection] = []
    for line in sc.lines:
        with Image.open(line.image_path) as img:
            size = img.size
        dets = read_detections(Path(in_dir) / f"{safe_name(line.line_id)}.txt", image_size=size)
        if len(dets) != len(line.detections):
            raise PipelineError(f"{line.line_id}: corrected file has {len(dets)} detections, expected {len(line.detections)}")
        out.extend(dets)
    return out


# ---------------------------------------------------------------- runs


@dataclass
class RunConfig:
    config: PipelineConfig
    manifest: Path
    output_dir: Path
    mode: str = "full"
    debug_dir: Path | None = None
    jobs: int = 1
    resamples: int = 10_000
    corrected_dir: Path | None = None
    k_values: tuple[int, ...] = (200, 500, 700)

    MODES = ("preprocess", "cluster", "refine", "correct", "evaluate", "full", "ablate", "synth")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.manifest = Path(self.manifest)
        self.output_dir = Path(self.output_dir)


@dataclass
class FullResult:
    report: EvalReport | None
    runs: dict[str, SubCollectionRun]
    outcomes: dict[str, CorrectionOutcome]


def debug_overlay(image: np.ndarray, boxes, config: PipelineConfig) -> Image.Image:
    """Standardized line with each character mask tinted and each box outlined."""
    clean = standardize_line(image, config)
    rgb = np.repeat(clean[..., None], 3, axis=2)
    palette = np.array([[1.0, 0.45, 0.45], [0.45, 0.6, 1.0], [0.45, 0.9, 0.45]])
    for m in char_masks(clean, boxes, config):
        rgb[m.mask] *= palette[m.index % len(palette)]
    for x, y, w, h in boxes:
        rgb[y, x : x + w] = rgb[y + h - 1, x : x + w] = (1.0, 0.0, 0.0)
        rgb[y : y + h, x] = rgb[y : y + h, x + w - 1] = (1.0, 0.0, 0.0)
    return Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB")


def _write_debug(sc: SubCollection, run: SubCollectionRun, rc: "RunConfig") -> None:
    out = Path(rc.debug_dir) / safe_name(sc.name)
    out.mkdir(parents=True, exist_ok=True)
    for line in sc.lines:
        if line.detections and line.line_id not in run.prepared.failed_lines:
            boxes = [d.box for d in line.detections]
            debug_overlay(line.load_image(), boxes, rc.config).save(out / f"{safe_name(line.line_id)}.png")
    chars = run.prepared.images
    if len(chars):
        cols = 40
        rows = int(np.ceil(len(chars) / cols))
        sheet = np.ones((rows * chars.shape[1], cols * chars.shape[2]))
        for i, c in enumerate(chars):
            r, k = divmod(i, cols)
            sheet[r * c.shape[0] : (r + 1) * c.shape[0], k * c.shape[1] : (k + 1) * c.shape[1]] = c
        Image.fromarray(np.round(sheet * 255).astype(np.uint8), "L").save(out / "characters.png")


def _process_one(args) -> tuple[SubCollectionRun, CorrectionOutcome | None]:
    sc, rc = args
    pipe = Pipeline(rc.config, rc.output_dir / "cache")
    run = pipe.prepare(sc)
    if rc.debug_dir is not None:
        _write_debug(sc, run, rc)
    if rc.mode == "preprocess":
        return run, None
    pipe.cluster(run)
    labels = [d.label for d in sc.detections]
    mosaics = rc.output_dir / "mosaics"
    mosaics.mkdir(parents=True, exist_ok=True)
    lab_ok = [labels[i] for i in run.prepared.det_index]
    cluster_mosaic(run.prepared.images, run.gmm_clusters, lab_ok).save(mosaics / f"{safe_name(sc.name)}-gmm.png")
    if rc.mode == "cluster":
        return run, None
    pipe.refine(run)
    cluster_mosaic(run.prepared.images, run.refined.clusters, lab_ok).save(mosaics / f"{safe_name(sc.name)}-leaves.png")
    (rc.output_dir / f"leaves-{safe_name(sc.name)}.tsv").write_text(leaf_report(run, labels), encoding="utf-8")
    if rc.mode == "refine":
        return run, None
    return run, correct_subcollection(sc, run, run.refined.clusters, rc.config.f_thr)


def run_full(rc: RunConfig) -> FullResult:
    """Run the stages required by ``rc.mode`` on every sub-collection of the manifest."""
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    subs = load_manifest(rc.manifest)
    runs: dict[str, SubCollectionRun] = {}
    outcomes: dict[str, CorrectionOutcome] = {}

    if rc.mode == "evaluate":
        report = EvalReport()
        for sc in subs:
            corrected = read_corrected_files(sc, rc.corrected_dir) if rc.corrected_dir else list(sc.detections)
            report.sub_collections.append(evaluate_lines(sc, corrected, rc.resamples, stream_seed(rc.config.rng_seed, "bootstrap")))
        _write_report(report, rc.output_dir)
        return FullResult(report, runs, outcomes)

    jobs = [(sc, rc) for sc in subs]
    if rc.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=rc.jobs) as pool:
            results = list(pool.map(_process_one, jobs))
    else:
        results = [_process_one(j) for j in jobs]
    for sc, (run, outcome) in zip(subs, results):
        runs[sc.name] = run
        if outcome is not None:
            outcomes[sc.name] = outcome
    if rc.mode in ("preprocess", "cluster", "refine"):
        return FullResult(None, runs, outcomes)

    records, line_ids = [], []
    offset = 0
    for sc in subs:
        out = outcomes[sc.name]
        write_corrected_files(sc, out.corrected, rc.output_dir / "corrected")
        ids = [d.line_id for d in out.detections]
        for r in out.records:
            records.append(CorrectionRecord(r.index + offset, r.old_label, r.new_label, r.cluster_id, r.frequency))
        line_ids.extend(ids)
        offset += len(ids)
    write_correction_log(records, rc.output_dir / "corrections.tsv", line_ids)
    if rc.mode == "correct":
        return FullResult(None, runs, outcomes)

    report = EvalReport()
    for sc in subs:
        if any(line.ground_truth for line in sc.lines):
            report.sub_collections.append(
                evaluate_lines(sc, outcomes[sc.name].corrected, rc.resamples, stream_seed(rc.config.rng_seed, "bootstrap"))
            )
    if report.sub_collections:
        _write_report(report, rc.output_dir)
    return FullResult(report, runs, outcomes)


def _write_report(report: EvalReport, out_dir: Path) -> None:
    (out_dir / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    report.to_json(out_dir / "report.json")


# ---------------------------------------------------------------- ablation

VARIANTS = ("gmm", "gmm_discard_small", "binary_trees")


@dataclass
class AblationRow:
    K: int
    variant: str
    n_clusters: int
    retained: float
    n_corr: int
    delta_cer: float
    n_true: float
    n_false: float


def ablation_sweep(
    subs: Sequence[SubCollection],
    k_values: Sequence[int],
    config: PipelineConfig,
    cache_dir: Path | None = None,
    variants: Sequence[str] = VARIANTS,
) -> list[AblationRow]:
    """Correction counts, cluster counts and retained share per K and clustering variant.

    Counts are summed over sub-collections; ``retained`` and ``delta_cer``
    are unweighted means over sub-collections.
    """
    pipe = Pipeline(config, cache_dir)
    prepared = [(sc, pipe.prepare(sc)) for sc in subs]
    rows = []
    for K in k_values:
        cfg = config.replace(K=int(K))
        acc: dict[str, list] = {v: [] for v in variants}
        for sc, base_run in prepared:
            run = SubCollectionRun(sc.name, base_run.prepared, keys=dict(base_run.keys))
            pipe.cluster(run, cfg)
            if "binary_trees" in variants:
                pipe.refine(run, cfg)
            n = len(run.prepared.images)
            for v in variants:
                if v == "gmm":
                    clusters = run.gmm_clusters
                elif v == "gmm_discard_small":
                    clusters = [c for c in run.gmm_clusters if len(c) >= cfg.n_min]
                elif v == "binary_trees":
                    clusters = run.refined.clusters
                else:
                    raise ValueError(f"unknown variant {v!r}")
                out = correct_subcollection(sc, run, clusters, cfg.f_thr)
                rep = evaluate_lines(sc, out.corrected, resamples=1)
                retained = sum(len(c) for c in clusters) / n if n else 0.0
                acc[v].append((len(clusters), retained, rep))
        for v in variants:
            reps = [r for _, _, r in acc[v]]
            n_corr = sum(r.n_corr for r in reps)
            nt = sum(r.n_true for r in reps)
            nf = sum(r.n_false for r in reps)
            rows.append(
                AblationRow(
                    int(K),
                    v,
                    sum(c for c, _, _ in acc[v]),
                    float(np.mean([x for _, x, _ in acc[v]])),
                    n_corr,
                    float(np.mean([r.delta_cer for r in reps])),
                    nt,
                    nf,
                )
            )
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    ks = sorted({r.K for r in rows})
    variants = list(dict.fromkeys(r.variant for r in rows))
    get = {(r.K, r.variant): r for r in rows}
    out = []
    for title, fmt in (
        ("clusters", lambda r: str(r.n_clusters)),
        ("retained %", lambda r: f"{100 * r.retained:.1f}"),
        ("N_true", lambda r: f"{r.n_true:.1f}"),
        ("N_false", lambda r: f"{r.n_false:.1f}"),
    ):
        out.append(title.ljust(20) + "".join(f"K={k}".rjust(10) for k in ks))
        for v in variants:
            out.append(("  " + v).ljust(20) + "".join(fmt(get[(k, v)]).rjust(10) for k in ks))
    return "\n".join(out)
