import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from glyphfix.model import PipelineConfig  # noqa: E402
from glyphfix.synth import default_fonts, render_line  # noqa: E402


@pytest.fixture(scope="session")
def fonts():
    return default_fonts()


@pytest.fixture(scope="session")
def serif_line(fonts):
    return render_line("the quick brown fox", fonts[1], rng=np.random.default_rng(5), noise=0.02)


@pytest.fixture(scope="session")
def noisy_pair(fonts):
    """Same text rendered with show-through and sensor noise, plus its clean twin."""
    line = render_line(
        "shadows behind the page", fonts[0], rng=np.random.default_rng(11), noise=0.03, show_through=0.2
    )
    return line


@pytest.fixture
def config():
    return PipelineConfig()


def glyph_images(letter: str, n: int, font, rng, noise: float = 0.05, config=None) -> np.ndarray:
    """``n`` standardized renders of one letter with random ink jitter and pixel noise."""
    from glyphfix.standardize import standardize_char

    config = config or PipelineConfig()
    base = render_line(letter, font, rng=rng, noise=0.0, background=1.0, blur=0.5, ink_jitter=0.0)
    clean = base.clean
    mask = np.zeros(clean.shape, dtype=bool)
    x, y, w, h = base.boxes[0]
    mask[y : y + h, x : x + w] = True
    centered = standardize_char(clean, mask, config).pixels
    out = np.clip(centered[None] + noise * rng.standard_normal((n,) + centered.shape), 0, 1)
    return out


def smooth_glyph(letter: str, font, sigma: float = 1.5, config=None) -> np.ndarray:
    """A standardized letter blurred enough for gradient-based registration."""
    from scipy import ndimage

    rng = np.random.default_rng(0)
    img = glyph_images(letter, 1, font, rng, noise=0.0, config=config)[0]
    return 1.0 - ndimage.gaussian_filter(1.0 - img, sigma)


@pytest.fixture(scope="session")
def corpus_factory(tmp_path_factory):
    """Memoized synthetic corpora keyed by (seed, n_chars, error_rate); returns manifest paths."""
    from glyphfix.synth import synth_corpus

    root = tmp_path_factory.mktemp("corpora")
    made = {}

    def make(seed: int, n_chars: int = 5000, error_rate: float = 0.1):
        key = (seed, n_chars, error_rate)
        if key not in made:
            made[key] = synth_corpus(root / f"s{seed}-n{n_chars}-e{error_rate}", n_chars, error_rate, seed=seed)
        return made[key]

    return make


@pytest.fixture(scope="session")
def stage_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("stage-cache")


def end_to_end(manifest, config, cache_dir, resamples: int = 200):
    """Cluster, refine, relabel and score every sub-collection; returns (report, run) pairs."""
    from glyphfix.model import load_manifest
    from glyphfix.pipeline import Pipeline, correct_subcollection, evaluate_lines

    pipe = Pipeline(config, cache_dir)
    out = []
    for sc in load_manifest(manifest):
        run = pipe.refine(pipe.prepare(sc))
        outcome = correct_subcollection(sc, run, run.refined.clusters, config.f_thr)
        out.append((evaluate_lines(sc, outcome.corrected, resamples, 0), run))
    return out
