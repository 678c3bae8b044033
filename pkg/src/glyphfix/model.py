"""Domain types and file I/O shared by every stage.

Detection files are UTF-8 text. A block starts with a ``# line_id: <id>``
header, optionally followed by ``# source: <base_ocr|corrected>``, and then
holds one ``x y w h label`` record per detection, in that field order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import regex
from PIL import Image

SOURCES = ("base_ocr", "corrected")

_GRAPHEME = regex.compile(r"\X")


class ManifestError(ValueError):
    """A manifest or detection record could not be loaded."""

    def __init__(self, message: str, line_id: str | None = None):
        self.line_id = line_id
        if line_id is not None:
            message = f"[{line_id}] {message}"
        super().__init__(message)


def is_single_grapheme(label: str) -> bool:
    if not label or label.isspace() or any(ch.isspace() for ch in label):
        return False
    return len(_GRAPHEME.findall(label)) == 1


@dataclass(frozen=True)
class Detection:
    line_id: str
    box: tuple[int, int, int, int]
    label: str
    source: str = "base_ocr"

    def __post_init__(self):
        x, y, w, h = self.box
        if w <= 0 or h <= 0:
            raise ValueError(f"non-positive box size {self.box}")
        if not is_single_grapheme(self.label):
            raise ValueError(f"label {self.label!r} is not a single non-space symbol")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def center_x(self) -> float:
        return self.box[0] + self.box[2] / 2.0

    def relabeled(self, label: str) -> "Detection":
        return Detection(self.line_id, self.box, label, "corrected")


@dataclass(frozen=True)
class LineRecord:
    line_id: str
    image_path: Path
    detections: tuple[Detection, ...]
    ground_truth: str | None = None

    def load_image(self) -> np.ndarray:
        return load_gray(self.image_path)


@dataclass(frozen=True)
class SubCollection:
    name: str
    lines: tuple[LineRecord, ...]

    @property
    def detections(self) -> list[Detection]:
        return [d for line in self.lines for d in line.detections]


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline.

    Defaults are the values used on the historical collections: 48x32 crops,
    scale base 1.2, 90% PCA variance, K=700, n_min=20, p_thr=P(|N(0,1)|>2),
    9 tested components and a 0.6 super-majority.
    """

    H: int = 48
    W: int = 32
    s: float = 1.2
    q_variance: float = 0.9
    K: int = 700
    n_min: int = 20
    p_thr: float = math.erfc(2.0 / math.sqrt(2.0))
    k: int = 9
    f_thr: float = 0.6
    lambda_h: float = 0.1
    lambda_v0: float = 0.05
    delta_lambda_v: float = 0.15
    max_lambda_iters: int = 8
    dilation_rounds: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "rng_seed":
                if value < 0:
                    raise ValueError("rng_seed must be non-negative")
            elif value <= 0:
                raise ValueError(f"{f.name} must be positive, got {value}")
        for name in ("f_thr", "p_thr"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0 < self.q_variance <= 1:
            raise ValueError("q_variance must lie in (0, 1]")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.s <= 1:
            raise ValueError("scale base s must exceed 1")

    def replace(self, **changes) -> "PipelineConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return PipelineConfig(**values)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_gray(path: str | Path) -> np.ndarray:
    """Load an image as float grayscale in [0, 1]; color channels are averaged."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64)
            return np.clip(arr / (65535.0 if arr.max() > 255 else 255.0), 0.0, 1.0)
        if img.mode == "F":
            return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        if img.mode in ("L", "1", "P", "LA"):
            arr = np.asarray(img.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64).mean(axis=2)
    return arr / 255.0


def save_gray(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def clamp_box(box: Sequence[float], width: int, height: int) -> tuple[int, int, int, int] | None:
    """Clip ``(x, y, w, h)`` to the image; None when nothing is left."""
    x, y, w, h = (int(round(v)) for v in box)
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, width), min(y + h, height)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _parse_record(text: str, lineno: int, line_id: str | None):
    parts = text.split(" ", 4)
    if len(parts) != 5:
        raise ManifestError(f"line {lineno}: expected 'x y w h label', got {text!r}", line_id)
    try:
        box = tuple(float(v) for v in parts[:4])
    except ValueError as exc:
        raise ManifestError(f"line {lineno}: bad coordinate ({exc})", line_id) from None
    return box, parts[4]


def read_detections(
    path: str | Path, image_size: tuple[int, int] | None = None
) -> list[Detection]:
    """Parse a detection file.

    With ``image_size=(width, height)`` boxes are clamped to the image, and a
    box entirely outside it raises :class:`ManifestError`.
    """
    detections: list[Detection] = []
    line_id: str | None = None
    source = "base_ocr"
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, 1):
            text = raw.rstrip("\n").rstrip("\r")
            if not text.strip():
                continue
            if text.startswith("#"):
                key, _, value = text[1:].partition(":")
                key, value = key.strip(), value.strip()
                if key == "line_id":
                    line_id, source = value, "base_ocr"
                elif key == "source":
                    if value not in SOURCES:
                        raise ManifestError(f"line {lineno}: unknown source {value!r}", line_id)
                    source = value
                continue
            if line_id is None:
                raise ManifestError(f"line {lineno}: record before any '# line_id:' header")
            box, label = _parse_record(text, lineno, line_id)
            if image_size is not None:
                clamped = clamp_box(box, *image_size)
                if clamped is None:
                    raise ManifestError(f"line {lineno}: box {box} lies outside the image", line_id)
                box = clamped
            else:
                box = tuple(int(round(v)) for v in box)
            try:
                detections.append(Detection(line_id, box, label, source))
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}", line_id) from None
    return detections


def write_detections(detections: Iterable[Detection], path: str | Path) -> None:
    """Write detections grouped in consecutive blocks of equal line_id and source."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = []
    current = None
    for det in detections:
        if (det.line_id, det.source) != current:
            current = (det.line_id, det.source)
            out.append(f"# line_id: {det.line_id}\n# source: {det.source}\n")
        x, y, w, h = det.box
        out.append(f"{x} {y} {w} {h} {det.label}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(out)


write_corrected = write_detections


def load_manifest(path: str | Path) -> list[SubCollection]:
    """Load a JSON manifest.

    The schema is ``{"sub_collections": [{"name": ..., "lines": [{"line_id":
    ..., "image": ..., "detections": ..., "ground_truth": ...}]}]}``; relative
    paths are resolved against the manifest's directory.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("sub_collections", []), list):
        raise ManifestError("manifest must be an object with a 'sub_collections' list")
    base = path.parent
    result = []
    for sc in doc.get("sub_collections", []):
        name = sc.get("name")
        entries = sc.get("lines") or []
        if not name or not entries:
            raise ManifestError(f"sub-collection {name!r} needs a name and at least one line")
        lines = [_load_line(entry, base) for entry in entries]
        result.append(SubCollection(name, tuple(lines)))
    return result


def _load_line(entry: dict, base: Path) -> LineRecord:
    line_id = entry.get("line_id")
    if not line_id:
        raise ManifestError(f"line entry without line_id: {entry!r}")
    try:
        image_path = base / entry["image"]
        det_path = base / entry["detections"]
    except KeyError as exc:
        raise ManifestError(f"missing field {exc}", line_id) from None
    for p in (image_path, det_path):
        if not p.exists():
            raise ManifestError(f"missing file {p}", line_id)
    with Image.open(image_path) as img:
        size = img.size
    dets = read_detections(det_path, image_size=size)
    foreign = {d.line_id for d in dets} - {line_id}
    if foreign:
        raise ManifestError(f"detection file mentions other lines {sorted(foreign)}", line_id)
    return LineRecord(line_id, image_path, tuple(dets), entry.get("ground_truth"))


def write_manifest(
    sub_collections: dict[str, list[dict]], path: str | Path
) -> None:
    doc = {
        "sub_collections": [
            {"name": name, "lines": lines} for name, lines in sub_collections.items()
        ]
    }
    Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=1), encoding="utf-8")
