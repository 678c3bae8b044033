"""Synthetic line corpus with known ground truth.

Lines are composed from per-font glyph atlases rendered with FreeType,
degraded (gray uneven paper, ink-strength jitter, blur, sensor noise,
faint show-through) and paired with exact character boxes. A fraction of the
box labels is then replaced uniformly at random to mimic a base OCR's
substitution errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from .model import Detection, save_gray, write_detections

FONT_DIRS = (
    Path("/usr/share/fonts/truetype/dejavu"),
    Path("/usr/share/fonts/dejavu"),
)

# relative frequencies of lowercase letters in running English text
ENGLISH_FREQ = {
    "e": 12.7, "t": 9.1, "a": 8.2, "o": 7.5, "i": 7.0, "n": 6.7, "s": 6.3,
    "h": 6.1, "r": 6.0, "d": 4.3, "l": 4.0, "c": 2.8, "u": 2.8, "m": 2.4,
    "w": 2.4, "f": 2.2, "g": 2.0, "y": 2.0, "p": 1.9, "b": 1.5, "v": 1.0,
    "k": 0.8, "j": 0.15, "x": 0.15, "q": 0.1, "z": 0.07,
}


def default_fonts() -> list[Path]:
    """Two visually distinct faces (sans and serif) found on this system."""
    names = ("DejaVuSans.ttf", "DejaVuSerif.ttf")
    dirs = list(FONT_DIRS)
    try:
        import matplotlib

        dirs.append(Path(matplotlib.get_data_path()) / "fonts" / "ttf")
    except ImportError:
        pass
    found = []
    for name in names:
        for d in dirs:
            if (d / name).exists():
                found.append(d / name)
                break
    if len(found) < 2:
        raise FileNotFoundError("could not locate DejaVu Sans/Serif; pass font paths explicitly")
    return found


@dataclass
class Glyph:
    coverage: np.ndarray  # ink coverage in [0, 1], tight to the ink
    top: int  # row of the first ink row relative to the baseline
    left: int  # column offset of the ink relative to the pen position
    advance: int


@lru_cache(maxsize=16)
def glyph_atlas(font_path: str, size: int, symbols: str) -> dict[str, Glyph]:
    font = ImageFont.truetype(font_path, size)
    atlas = {}
    canvas = 4 * size
    for ch in symbols:
        img = Image.new("L", (canvas, canvas), 0)
        ImageDraw.Draw(img).text((size, 2 * size), ch, fill=255, font=font, anchor="ls")
        arr = np.asarray(img, dtype=np.float64) / 255.0
        rows = np.flatnonzero(arr.max(axis=1) > 0)
        cols = np.flatnonzero(arr.max(axis=0) > 0)
        if rows.size == 0:
            raise ValueError(f"symbol {ch!r} has no ink in {font_path}")
        cov = arr[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
        advance = int(round(font.getlength(ch)))
        atlas[ch] = Glyph(cov, int(rows[0] - 2 * size), int(cols[0] - size), advance)
    return atlas


@dataclass
class RenderedLine:
    image: np.ndarray
    boxes: list[tuple[int, int, int, int]]
    symbols: list[str]
    ink: np.ndarray  # exact ink mask (coverage >= 0.5)
    glyph_ink: list[np.ndarray] = field(default_factory=list)
    clean: np.ndarray | None = None


def render_line(
    text: str,
    font_path: str | Path,
    size: int = 26,
    rng: np.random.Generator | None = None,
    noise: float = 0.03,
    gap: int = 3,
    space: int = 10,
    margin: int = 6,
    background: float | None = None,
    show_through: float = 0.0,
    ink_jitter: float = 0.15,
    blur: float = 0.6,
) -> RenderedLine:
    """Render ``text`` (spaces become blank gaps) as a degraded grayscale line.

    Boxes are the tight ink boxes of each non-space symbol. ``clean`` holds
    the same line on pure white with full-strength ink and no noise.
    """
    rng = rng or np.random.default_rng(0)
    symbols = "".join(sorted(set(text) - {" "}))
    atlas = glyph_atlas(str(font_path), size, symbols)
    ascent = max(-g.top for g in atlas.values())
    descent = max(g.top + g.coverage.shape[0] for g in atlas.values())
    height = ascent + descent + 2 * margin
    baseline = margin + ascent
    placements = []
    x = margin
    for ch in text:
        if ch == " ":
            x += space
            continue
        g = atlas[ch]
        gx = x + max(g.left, 0)
        placements.append((ch, gx, baseline + g.top, g))
        x = gx + g.coverage.shape[1] + gap + int(rng.integers(0, 2))
    width = x + margin

    coverage = np.zeros((height, width))
    full = np.zeros((height, width))
    ink = np.zeros((height, width), dtype=bool)
    boxes, syms, glyph_ink = [], [], []
    for ch, gx, gy, g in placements:
        h, w = g.coverage.shape
        strength = 1.0 - ink_jitter * rng.random()
        coverage[gy : gy + h, gx : gx + w] = np.maximum(
            coverage[gy : gy + h, gx : gx + w], g.coverage * strength
        )
        full[gy : gy + h, gx : gx + w] = np.maximum(full[gy : gy + h, gx : gx + w], g.coverage)
        gi = np.zeros((height, width), dtype=bool)
        gi[gy : gy + h, gx : gx + w] = g.coverage >= 0.5
        ink |= gi
        glyph_ink.append(gi)
        boxes.append((gx, gy, w, h))
        syms.append(ch)

    clean = 1.0 - full
    if background is None:
        background = float(rng.uniform(0.75, 0.92))
    yy, xx = np.mgrid[0:height, 0:width]
    paper = background + 0.04 * np.sin(xx / (37.0 + 20 * rng.random()) + rng.random() * 6) * np.cos(
        yy / 23.0
    )
    ink_level = float(rng.uniform(0.05, 0.2))
    img = paper * (1.0 - coverage) + ink_level * coverage
    if show_through > 0:
        ghost = np.roll(coverage[:, ::-1], int(rng.integers(0, width)), axis=1)
        ghost = ndimage.gaussian_filter(ghost, 1.5)
        img = img - show_through * ghost * (1.0 - coverage)
    if blur > 0:
        img = ndimage.gaussian_filter(img, blur)
    img = img + noise * rng.standard_normal(img.shape)
    return RenderedLine(np.clip(img, 0.0, 1.0), boxes, syms, ink, glyph_ink, clean)


def random_text(n_symbols: int, rng: np.random.Generator, freq: dict[str, float] | None = None,
                word_len: tuple[int, int] = (2, 8)) -> str:
    """Pseudo-words drawn from letter frequencies; ``n_symbols`` excludes spaces."""
    freq = freq or ENGLISH_FREQ
    letters = np.array(list(freq))
    p = np.array(list(freq.values()), dtype=np.float64)
    p /= p.sum()
    chars = rng.choice(letters, size=n_symbols, p=p)
    out, i = [], 0
    while i < n_symbols:
        n = int(rng.integers(word_len[0], word_len[1] + 1))
        out.append("".join(chars[i : i + n]))
        i += n
    return " ".join(out)


def perturb_labels(
    symbols: list[str], alphabet: list[str], error_rate: float, rng: np.random.Generator
) -> list[str]:
    """Replace each label with probability ``error_rate`` by a different random symbol."""
    out = []
    for s in symbols:
        if rng.random() < error_rate:
            choices = [a for a in alphabet if a != s]
            out.append(str(choices[int(rng.integers(len(choices)))]))
        else:
            out.append(s)
    return out


def synth_corpus(
    out_dir: str | Path,
    n_chars: int = 5000,
    error_rate: float = 0.1,
    noise: float = 0.03,
    seed: int = 0,
    fonts: list[str | Path] | None = None,
    chars_per_line: int = 40,
    size: int = 26,
    n_sub_collections: int = 1,
    show_through: float = 0.15,
    freq: dict[str, float] | None = None,
) -> Path:
    """Write line images, detection files and a manifest; returns the manifest path.

    Lines alternate between the fonts; every sub-collection mixes all fonts.
    """
    out_dir = Path(out_dir)
    (out_dir / "lines").mkdir(parents=True, exist_ok=True)
    fonts = [Path(f) for f in (fonts or default_fonts())]
    freq = freq or ENGLISH_FREQ
    alphabet = list(freq)
    rng = np.random.default_rng(seed)
    per_sc = int(np.ceil(n_chars / n_sub_collections))
    manifest: dict[str, list[dict]] = {}
    made = 0
    for sc in range(n_sub_collections):
        name = f"synthetic-{sc:02d}"
        entries = []
        budget = min(per_sc, n_chars - made)
        li = 0
        while budget > 0:
            n = min(chars_per_line, budget)
            text = random_text(n, rng, freq)
            font = fonts[li % len(fonts)]
            line = render_line(text, font, size, rng, noise=noise, show_through=show_through)
            line_id = f"{name}-{li:04d}"
            labels = perturb_labels(line.symbols, alphabet, error_rate, rng)
            dets = [Detection(line_id, tuple(int(v) for v in b), lab) for b, lab in zip(line.boxes, labels)]
            img_rel = f"lines/{line_id}.png"
            det_rel = f"lines/{line_id}.txt"
            save_gray(line.image, out_dir / img_rel)
            write_detections(dets, out_dir / det_rel)
            entries.append(
                {
                    "line_id": line_id,
                    "image": img_rel,
                    "detections": det_rel,
                    "ground_truth": text,
                    "font": font.stem,
                }
            )
            budget -= n
            made += n
            li += 1
        manifest[name] = entries
    path = out_dir / "manifest.json"
    doc = {"sub_collections": [{"name": k, "lines": v} for k, v in manifest.items()]}
    path.write_text(json.dumps(doc, ensure_ascii=False, indent=1), encoding="utf-8")
    return path
