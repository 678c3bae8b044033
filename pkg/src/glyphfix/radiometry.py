"""Line-image standardization: white background, consistent black level.

Foreground is found by Otsu thresholding plus dilation, then the image is
re-integrated from its own gradients inside the foreground with the
background pinned to white (a Poisson problem on the 4-connected pixel
graph), and finally its contrast is stretched so the first decile of the
non-white values lands at 0.1.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as splinalg

from .model import PipelineConfig

N_BINS = 256


class PoissonSolveError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[..., :3].mean(axis=2)
    return image


def otsu_threshold(image: np.ndarray, bins: int = N_BINS) -> float:
    """Otsu threshold over ``bins`` uniform bins of [0, 1].

    Returns the bin edge that maximizes the between-class variance, so that
    ``image <= t`` selects the dark class. A constant image returns its value.
    """
    values = np.asarray(image, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty image")
    lo, hi = values.min(), values.max()
    if lo == hi:
        return float(lo)
    counts, edges = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = counts / counts.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centers)[:-1]
    mt = m0[-1] + p[-1] * centers[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between[(w0 <= 1e-12) | (w1 <= 1e-12)] = -1.0
    if between.max() < 0:
        return float(lo)
    k = int(np.argmax(between))
    return float(edges[k + 1])


def otsu_thresholds_per_column(image: np.ndarray, bins: int = N_BINS) -> np.ndarray:
    """Column-wise :func:`otsu_threshold`, vectorized over columns."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rows, cols = v.shape
    idx = np.minimum((v * bins).astype(np.int64), bins - 1)
    counts = np.bincount((idx * cols + np.arange(cols)).ravel(), minlength=bins * cols)
    p = counts.reshape(bins, cols) / rows
    edges = np.linspace(0.0, 1.0, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p, axis=0)[:-1]
    m0 = np.cumsum(p * centers[:, None], axis=0)[:-1]
    mt = m0[-1] + p[-1] * centers[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between[(w0 <= 1e-12) | (w1 <= 1e-12)] = -1.0
    out = edges[np.argmax(between, axis=0) + 1]
    lo, hi = v.min(axis=0), v.max(axis=0)
    degenerate = (between.max(axis=0) < 0) | (lo == hi)
    out[degenerate] = lo[degenerate]
    return out


def foreground_mask(image: np.ndarray, dilation_rounds: int = 5) -> np.ndarray:
    """Dark pixels (``<=`` Otsu threshold) grown by 3x3 dilations."""
    if dilation_rounds < 0:
        raise ValueError("dilation_rounds must be >= 0")
    image = to_gray(image)
    if image.size == 0 or image.min() == image.max():
        return np.zeros(image.shape, dtype=bool)
    mask = image <= otsu_threshold(image)
    if dilation_rounds:
        mask = ndimage.binary_dilation(
            mask, structure=np.ones((3, 3), dtype=bool), iterations=dilation_rounds
        )
    return mask


def poisson_system(image: np.ndarray, mask: np.ndarray):
    """Linear system ``A v = b`` for the unknown pixels of ``mask``.

    Row ``a`` reads ``deg(a) v_a - sum_{w in mask} v_w = #{w not in mask} +
    sum_{w in mask} (u_a - u_w)`` over the in-image 4-neighbours ``w``; missing
    neighbours at the image border contribute nothing (Neumann).
    Returns ``(A, b, flat_indices)``.
    """
    u = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    rows, cols = u.shape
    index = -np.ones(u.shape, dtype=np.int64)
    flat = np.flatnonzero(mask)
    index.ravel()[flat] = np.arange(flat.size)
    n = flat.size

    diag = np.zeros(n)
    b = np.zeros(n)
    off_i, off_j = [], []
    # horizontal edges (r, c) -> (r, c+1), vertical edges (r, c) -> (r+1, c)
    for sl_a, sl_b in (
        ((slice(None), slice(0, cols - 1)), (slice(None), slice(1, cols))),
        ((slice(0, rows - 1), slice(None)), (slice(1, rows), slice(None))),
    ):
        ia, ib = index[sl_a].ravel(), index[sl_b].ravel()
        ua, ub = u[sl_a].ravel(), u[sl_b].ravel()
        in_a, in_b = ia >= 0, ib >= 0
        # every in-image edge touching an unknown raises its degree
        np.add.at(diag, ia[in_a], 1.0)
        np.add.at(diag, ib[in_b], 1.0)
        both = in_a & in_b
        off_i.append(ia[both])
        off_j.append(ib[both])
        grad = ub[both] - ua[both]
        np.add.at(b, ia[both], -grad)
        np.add.at(b, ib[both], grad)
        # Dirichlet neighbours fixed at 1
        np.add.at(b, ia[in_a & ~in_b], 1.0)
        np.add.at(b, ib[in_b & ~in_a], 1.0)
    oi, oj = np.concatenate(off_i), np.concatenate(off_j)
    A = sparse.coo_matrix(
        (
            np.concatenate([diag, -np.ones(oi.size), -np.ones(oi.size)]),
            (np.concatenate([np.arange(n), oi, oj]), np.concatenate([np.arange(n), oj, oi])),
        ),
        shape=(n, n),
    ).tocsr()
    return A, b, flat


def poisson_edit(
    image: np.ndarray,
    mask: np.ndarray,
    rtol: float = 1e-8,
    maxiter: int | None = None,
    method: str = "cg",
) -> np.ndarray:
    """Blend the masked foreground onto a white background.

    Inside the mask the output has the input's gradients on every edge
    between two masked pixels; outside it is exactly 1. ``method`` is
    ``"cg"`` (Jacobi-preconditioned conjugate gradient, capped at
    ``10 * sqrt(|mask|)`` iterations unless ``maxiter`` is given) or
    ``"direct"``.
    """
    u = to_gray(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != u.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {u.shape}")
    out = np.ones_like(u)
    if not mask.any():
        return out
    if mask.all():
        # no Dirichlet pixel: solution is u up to a constant, anchored so the
        # brightest pixel is white
        return u - u.max() + 1.0

    A, b, flat = poisson_system(u, mask)
    if method == "direct":
        x = splinalg.spsolve(A.tocsc(), b)
    elif method == "cg":
        if maxiter is None:
            maxiter = max(int(np.ceil(10.0 * np.sqrt(flat.size))), 20)
        outside = u[~mask]
        x0 = u.ravel()[flat] + (1.0 - outside.mean())
        precond = sparse.diags(1.0 / A.diagonal())
        x, info = splinalg.cg(A, b, x0=x0, rtol=rtol, atol=0.0, maxiter=maxiter, M=precond)
        if info != 0:
            res = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
            raise PoissonSolveError(f"CG did not converge in {maxiter} iterations", res)
    else:
        raise ValueError(f"unknown method {method!r}")
    out.ravel()[flat] = x
    return out


def poisson_residual(image: np.ndarray, mask: np.ndarray, edited: np.ndarray) -> float:
    """Max-norm residual of the Poisson equations at the masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        return 0.0
    A, b, flat = poisson_system(to_gray(image), mask)
    return float(np.abs(A @ edited.ravel()[flat] - b).max())


def contrast_normalize(image: np.ndarray) -> np.ndarray:
    """Linear map fixing white and sending the first decile of non-white values to 0.1."""
    v = np.asarray(image, dtype=np.float64)
    dark = v[v < 1.0]
    if dark.size == 0:
        return v.copy()
    q = float(np.quantile(dark, 0.1))
    return np.clip(1.0 - 0.9 * (1.0 - v) / (1.0 - q), 0.0, 1.0)


def standardize_line(image: np.ndarray, config: PipelineConfig | None = None) -> np.ndarray:
    config = config or PipelineConfig()
    u = np.clip(to_gray(image), 0.0, 1.0)
    mask = foreground_mask(u, config.dilation_rounds)
    return contrast_normalize(poisson_edit(u, mask))
