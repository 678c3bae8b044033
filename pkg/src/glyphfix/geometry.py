"""Character segmentation masks from base-OCR boxes.

Boxes are grouped into proto-lines (connected components of a horizontally
blurred, column-wise binarized line image). For each proto-line an upper
and a lower boundary are traced as minimal-cost paths guided towards the
box edges, then every box gets a left and a right minimal-cost separator
running between the two boundaries. A character mask is the set of pixels
strictly inside its four paths.

Coordinates are ``(row, col)``; boxes are ``(x, y, w, h)`` with ``x`` a
column and ``y`` a row.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .model import PipelineConfig
from .radiometry import otsu_thresholds_per_column

PAD = 2


class NoPathError(ValueError):
    pass


@numba.njit(cache=True)
def _dijkstra(cost, sr, sc, er, ec):
    rows, cols = cost.shape
    dist = np.full((rows, cols), np.inf)
    prev = np.full((rows, cols), -1, dtype=np.int64)
    done = np.zeros((rows, cols), dtype=np.bool_)
    dist[sr, sc] = cost[sr, sc]
    heap = [(cost[sr, sc], sr, sc)]
    while len(heap) > 0:
        d, r, c = heapq.heappop(heap)
        if done[r, c]:
            continue
        done[r, c] = True
        if r == er and c == ec:
            break
        for dr in range(-1, 2):
            nr = r + dr
            if nr < 0 or nr >= rows:
                continue
            for dc in range(-1, 2):
                nc = c + dc
                if (dr == 0 and dc == 0) or nc < 0 or nc >= cols:
                    continue
                step = cost[nr, nc]
                if done[nr, nc] or np.isinf(step):
                    continue
                nd = d + step
                if nd < dist[nr, nc]:
                    dist[nr, nc] = nd
                    prev[nr, nc] = r * cols + c
                    heapq.heappush(heap, (nd, nr, nc))
                elif nd == dist[nr, nc] and (dr == 0 or dc == 0):
                    # equal cost: an axis-aligned step beats a diagonal one
                    p = prev[nr, nc]
                    if p // cols != nr and p % cols != nc:
                        prev[nr, nc] = r * cols + c
    return dist[er, ec], prev


def min_cost_path(
    cost: np.ndarray, start: tuple[int, int], end: tuple[int, int]
) -> tuple[list[tuple[int, int]], float]:
    """Minimal-cost 8-connected path from ``start`` to ``end``.

    The cost of a path is the sum of the costs of all its pixels, endpoints
    included. ``inf`` marks impassable pixels. Ties are resolved by expanding
    pixels in (cost, row, col) order, and a pixel reachable at equal cost
    through a diagonal and an axis-aligned step keeps the axis-aligned one.
    Returns ``(path, total_cost)``.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if np.any(cost < 0):
        raise ValueError("costs must be non-negative")
    rows, cols = cost.shape
    (sr, sc), (er, ec) = (int(v) for v in start), (int(v) for v in end)
    for r, c in ((sr, sc), (er, ec)):
        if not (0 <= r < rows and 0 <= c < cols):
            raise ValueError(f"pixel {(r, c)} outside a {cost.shape} grid")
    if np.isinf(cost[sr, sc]) or np.isinf(cost[er, ec]):
        raise NoPathError("endpoint lies on an impassable pixel")
    total, prev = _dijkstra(cost, sr, sc, er, ec)
    if not np.isfinite(total):
        raise NoPathError(f"no finite path from {start} to {end}")
    path = [(er, ec)]
    node = er * cols + ec
    target = sr * cols + sc
    while node != target:
        node = int(prev[node // cols, node % cols])
        path.append((node // cols, node % cols))
    path.reverse()
    return path, float(total)


@dataclass
class ProtoLine:
    component_mask: np.ndarray
    members: list[int]
    crop_bounds: tuple[int, int]
    fallback: bool = False


@dataclass
class CharMask:
    index: int
    mask: np.ndarray
    accepted: bool = True
    iterations: int = 0


@dataclass
class Separators:
    left: np.ndarray  # column of the left path per row of ``rows``
    right: np.ndarray
    rows: tuple[int, int]
    accepted: bool
    iterations: int
    lambda_v: float
    box_edges: tuple[int, int] = field(default=(0, 0))


def lambda_v_schedule(config: PipelineConfig) -> np.ndarray:
    i = np.arange(config.max_lambda_iters)
    return config.lambda_v0 + i * config.delta_lambda_v


def _boxes_array(boxes) -> np.ndarray:
    return np.asarray([tuple(b) for b in boxes], dtype=np.int64).reshape(-1, 4)


def build_protolines(image: np.ndarray, boxes, sigma: float | None = None) -> list[ProtoLine]:
    """Group boxes into proto-lines.

    The image is blurred along rows (``sigma`` defaults to a quarter of the
    median box height), each column is Otsu-binarized on its own, and every
    box joins the 8-connected component it overlaps most. Boxes overlapping
    no component become singleton proto-lines.
    """
    image = np.asarray(image, dtype=np.float64)
    boxes = _boxes_array(boxes)
    if len(boxes) == 0:
        return []
    if sigma is None:
        sigma = max(float(np.median(boxes[:, 3])) / 4.0, 0.5)
    blurred = ndimage.gaussian_filter1d(image, sigma, axis=1, mode="nearest")
    flat = np.ptp(blurred, axis=0) <= 1e-6
    binary = (blurred <= otsu_thresholds_per_column(blurred)) & ~flat
    labels, n_comp = ndimage.label(binary, structure=np.ones((3, 3), dtype=bool))

    groups: dict[int, list[int]] = {}
    singles = []
    for i, (x, y, w, h) in enumerate(boxes):
        patch = labels[y : y + h, x : x + w].ravel()
        patch = patch[patch > 0]
        if patch.size == 0:
            singles.append(i)
            continue
        counts = np.bincount(patch, minlength=n_comp + 1)
        groups.setdefault(int(np.argmax(counts)), []).append(i)

    result = []
    for lab in sorted(groups):
        members = groups[lab]
        x0 = int(boxes[members, 0].min())
        x1 = int((boxes[members, 0] + boxes[members, 2]).max())
        result.append(ProtoLine(labels == lab, members, (x0, x1)))
    for i in singles:
        x, y, w, h = boxes[i]
        comp = np.zeros(image.shape, dtype=bool)
        comp[y : y + h, x : x + w] = True
        result.append(ProtoLine(comp, [i], (int(x), int(x + w)), fallback=True))
    return result


def _edge_profiles(boxes: np.ndarray, c0: int, width: int):
    """Per-column top/bottom edge rows for columns ``c0 .. c0+width-1``.

    Edge rows sit just outside the box (``y-1`` and ``y+h``). Covered columns
    take the envelope of the covering boxes; gaps are linearly interpolated.
    """
    top = np.full(width, np.inf)
    bottom = np.full(width, -np.inf)
    for x, y, w, h in boxes:
        a, b = x - c0, x + w - c0
        top[max(a, 0) : b] = np.minimum(top[max(a, 0) : b], y - 1)
        bottom[max(a, 0) : b] = np.maximum(bottom[max(a, 0) : b], y + h)
    covered = np.isfinite(top)
    cols = np.arange(width)
    top = np.interp(cols, cols[covered], top[covered])
    bottom = np.interp(cols, cols[covered], bottom[covered])
    return top, bottom


def guidance_map(shape: tuple[int, int], top: np.ndarray, bottom: np.ndarray, lambda_h: float):
    """Piecewise-linear guidance: 0 on box edges, ``lambda_h`` at the image
    top/bottom, ``3*lambda_h`` at the box midline."""
    rows = np.arange(shape[0], dtype=np.float64)[:, None]
    top, bottom = top[None, :], bottom[None, :]
    mid = 0.5 * (top + bottom)
    last = shape[0] - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        above = lambda_h * (top - rows) / top
        upper_in = 3 * lambda_h * (rows - top) / (mid - top)
        lower_in = 3 * lambda_h * (bottom - rows) / (bottom - mid)
        below = lambda_h * (rows - bottom) / (last - bottom)
    g = np.where(
        rows <= top,
        np.where(top > 0, above, 0.0),
        np.where(
            rows <= mid,
            np.where(mid > top, upper_in, 0.0),
            np.where(rows < bottom, np.where(bottom > mid, lower_in, 0.0), np.where(last > bottom, below, 0.0)),
        ),
    )
    return np.nan_to_num(g, nan=0.0)


def _midline_barrier(shape, top, bottom) -> np.ndarray:
    mid = np.round(0.5 * (top + bottom)).astype(np.int64)
    mid = np.clip(mid, 0, shape[0] - 1)
    barrier = np.zeros(shape, dtype=bool)
    for c in range(shape[1]):
        lo, hi = mid[c], mid[c]
        # join with the next column so diagonal steps cannot slip through
        if c + 1 < shape[1]:
            lo, hi = min(lo, mid[c + 1]), max(hi, mid[c + 1])
        barrier[lo : hi + 1, c] = True
    return barrier


def _path_by_column(path, c0: int, width: int, take_max: bool) -> np.ndarray:
    out = np.full(width, -1 if take_max else np.iinfo(np.int64).max, dtype=np.int64)
    for r, c in path:
        j = c - c0
        if 0 <= j < width:
            out[j] = max(out[j], r) if take_max else min(out[j], r)
    return out


def horizontal_boundaries(
    image: np.ndarray, boxes, lambda_h: float = 0.1, crop_bounds: tuple[int, int] | None = None
) -> tuple[np.ndarray, np.ndarray, int]:
    """Upper and lower text boundaries of a proto-line.

    ``image`` should carry at least one white pixel of margin around the
    boxes. Returns ``(upper, lower, c0)`` where ``upper[j]`` (``lower[j]``)
    is the lowest (highest) boundary row at column ``c0 + j``; the text lies
    strictly between them.
    """
    image = np.asarray(image, dtype=np.float64)
    boxes = _boxes_array(boxes)
    if crop_bounds is None:
        crop_bounds = (int(boxes[:, 0].min()), int((boxes[:, 0] + boxes[:, 2]).max()))
    c0 = max(crop_bounds[0] - 1, 0)
    c1 = min(crop_bounds[1] + 1, image.shape[1])
    crop = image[:, c0:c1]
    top, bottom = _edge_profiles(boxes, c0, crop.shape[1])
    top = np.clip(top, 0, crop.shape[0] - 1)
    bottom = np.clip(bottom, 0, crop.shape[0] - 1)
    base = np.clip(1.0 - crop, 0.0, None) + guidance_map(crop.shape, top, bottom, lambda_h)
    barrier = _midline_barrier(crop.shape, top, bottom)
    cost = np.where(barrier, np.inf, base)

    order = np.lexsort((boxes[:, 1], boxes[:, 0]))
    first = boxes[order[0]]
    right_edges = boxes[:, 0] + boxes[:, 2]
    order_r = np.lexsort((boxes[:, 1], -right_edges))
    last = boxes[order_r[0]]
    cl = int(np.clip(first[0] - 1 - c0, 0, crop.shape[1] - 1))
    cr = int(np.clip(last[0] + last[2] - c0, 0, crop.shape[1] - 1))

    def endpoint(row_profile, col):
        r = int(row_profile[col])
        return (r, col) if not barrier[r, col] else (max(r - 1, 0), col)

    up_start, up_end = endpoint(top, cl), endpoint(top, cr)
    upper_path, _ = min_cost_path(cost, up_start, up_end)
    lo_start = (int(bottom[cl]), cl) if not barrier[int(bottom[cl]), cl] else (int(bottom[cl]) + 1, cl)
    lo_end = (int(bottom[cr]), cr) if not barrier[int(bottom[cr]), cr] else (int(bottom[cr]) + 1, cr)
    lower_path, _ = min_cost_path(cost, lo_start, lo_end)

    width = crop.shape[1]
    upper = _path_by_column([(r, c + c0) for r, c in upper_path], c0, width, take_max=True)
    lower = _path_by_column([(r, c + c0) for r, c in lower_path], c0, width, take_max=False)
    # columns outside the traced span keep the edge profile
    miss_u, miss_l = upper < 0, lower == np.iinfo(np.int64).max
    upper[miss_u] = top[miss_u].astype(np.int64)
    lower[miss_l] = bottom[miss_l].astype(np.int64)
    return upper, lower, c0


def _rows_by_path(path, r0: int, n_rows: int, take_max: bool) -> np.ndarray:
    out = np.full(n_rows, -1 if take_max else np.iinfo(np.int64).max, dtype=np.int64)
    for r, c in path:
        i = r - r0
        if 0 <= i < n_rows:
            out[i] = max(out[i], c) if take_max else min(out[i], c)
    return out


def separators_acceptable(left: np.ndarray, right: np.ndarray, width: float) -> bool:
    """Mean gap within 10% of ``width`` and worst deviation within a third of it."""
    ok = (left >= 0) & (right < np.iinfo(np.int64).max)
    if not ok.any():
        return False
    gap = right[ok] - left[ok] - 1
    return bool(
        abs(gap.mean() - width) <= 0.1 * width + 1e-9
        and np.abs(gap - width).max() <= width / 3.0 + 1e-9
    )


def _shift_toward(edge: int, targets, step: int = 2) -> int:
    if len(targets) == 0:
        return edge
    targets = np.asarray(targets)
    nearest = int(targets[np.argmin(np.abs(targets - edge))])
    delta = int(np.clip(nearest - edge, -step, step))
    return edge + delta


def vertical_separators(
    image: np.ndarray,
    box,
    upper: np.ndarray,
    lower: np.ndarray,
    c0: int,
    config: PipelineConfig,
    neighbours=(),
) -> Separators:
    """Left and right separator paths for one box.

    ``upper``/``lower`` are boundary rows for columns starting at ``c0``.
    Iteration ``i`` uses a uniform regularizer ``lambda_v0 + i*delta_lambda_v``;
    after a failed iteration the box edges move two pixels towards the
    nearest edge of a neighbouring box. The last attempt is returned flagged
    ``accepted=False`` when the budget runs out.
    """
    image = np.asarray(image, dtype=np.float64)
    x, y, w, h = (int(v) for v in box)
    nb = _boxes_array(neighbours)
    left_edge, right_edge = x, x + w
    inv = np.clip(1.0 - image, 0.0, None)
    n_cols = len(upper)
    last = None
    for it, lam in enumerate(lambda_v_schedule(config)):
        width = right_edge - left_edge
        lc = int(np.clip(left_edge - 1, c0, c0 + n_cols - 1))
        rc = int(np.clip(right_edge, c0, c0 + n_cols - 1))
        span = max(width, 4)
        wc0 = max(lc - span, c0)
        wc1 = min(rc + span + 1, c0 + n_cols)
        u = upper[wc0 - c0 : wc1 - c0]
        lo = lower[wc0 - c0 : wc1 - c0]
        r0, r1 = int(u.min()), int(lo.max()) + 1
        rows = np.arange(r0, r1)[:, None]
        inside = (rows >= u[None, :]) & (rows <= lo[None, :])
        cost = np.where(inside, inv[r0:r1, wc0:wc1] + lam, np.inf)
        try:
            lpath, _ = min_cost_path(
                cost, (upper[lc - c0] - r0, lc - wc0), (lower[lc - c0] - r0, lc - wc0)
            )
            rpath, _ = min_cost_path(
                cost, (upper[rc - c0] - r0, rc - wc0), (lower[rc - c0] - r0, rc - wc0)
            )
        except NoPathError:
            lpath = rpath = None
        if lpath is not None:
            left = _rows_by_path([(r + r0, c + wc0) for r, c in lpath], r0, r1 - r0, True)
            right = _rows_by_path([(r + r0, c + wc0) for r, c in rpath], r0, r1 - r0, False)
            last = Separators(left, right, (r0, r1), False, it + 1, float(lam), (left_edge, right_edge))
            if separators_acceptable(left, right, width):
                last.accepted = True
                return last
        if len(nb):
            others = nb[~((nb[:, 0] == x) & (nb[:, 2] == w) & (nb[:, 1] == y) & (nb[:, 3] == h))]
            prev_right = (others[:, 0] + others[:, 2])[others[:, 0] <= left_edge]
            next_left = others[:, 0][others[:, 0] + others[:, 2] >= right_edge]
            left_edge = _shift_toward(left_edge, prev_right)
            right_edge = _shift_toward(right_edge, next_left)
            if right_edge - left_edge < 1:
                right_edge = left_edge + 1
    if last is None:
        n = 1
        last = Separators(
            np.full(n, x - 1), np.full(n, x + w), (y, y + 1), False, config.max_lambda_iters, float(lam), (x, x + w)
        )
    return last


def _fill_between(shape, upper, lower, c0, sep: Separators | None, box) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    rows = np.arange(shape[0])[:, None]
    cols = np.arange(shape[1])[None, :]
    up = np.full(shape[1], shape[0], dtype=np.int64)
    lo = np.full(shape[1], -1, dtype=np.int64)
    up[c0 : c0 + len(upper)] = upper
    lo[c0 : c0 + len(lower)] = lower
    vertical = (rows > up[None, :]) & (rows < lo[None, :])
    if sep is None:
        x, y, w, h = box
        horizontal = (cols >= x) & (cols < x + w)
        return vertical & horizontal
    r0, r1 = sep.rows
    left = np.full(shape[0], 0, dtype=np.int64)
    right = np.full(shape[0], 0, dtype=np.int64)
    lvals, rvals = sep.left.copy(), sep.right.copy()
    valid = (lvals >= 0) & (rvals < np.iinfo(np.int64).max)
    idx = np.flatnonzero(valid)
    lvals = np.interp(np.arange(len(lvals)), idx, lvals[idx])
    rvals = np.interp(np.arange(len(rvals)), idx, rvals[idx])
    left[:] = int(round(lvals[0]))
    right[:] = int(round(rvals[0]))
    left[r0:r1] = np.round(lvals).astype(np.int64)
    right[r0:r1] = np.round(rvals).astype(np.int64)
    left[r1:] = int(round(lvals[-1]))
    right[r1:] = int(round(rvals[-1]))
    horizontal = (cols > left[:, None]) & (cols < right[:, None])
    mask[:] = vertical & horizontal
    return mask


def char_masks(image: np.ndarray, boxes, config: PipelineConfig | None = None) -> list[CharMask]:
    """One segmentation mask per box, in the coordinates of ``image``.

    Masks of one proto-line have disjoint interiors; a pixel claimed by two
    separators goes to the box whose center is horizontally closest. Boxes
    whose separators were never accepted fall back to the raw box columns
    clipped by the horizontal boundaries.
    """
    config = config or PipelineConfig()
    image = np.asarray(image, dtype=np.float64)
    boxes = _boxes_array(boxes)
    if len(boxes) == 0:
        return []
    padded = np.pad(image, PAD, mode="constant", constant_values=1.0)
    pboxes = boxes + np.array([PAD, PAD, 0, 0])
    out: list[CharMask | None] = [None] * len(boxes)
    for pl in build_protolines(padded, pboxes):
        members = pl.members
        mboxes = pboxes[members]
        upper, lower, c0 = horizontal_boundaries(padded, mboxes, config.lambda_h, pl.crop_bounds)
        masks, flags = [], []
        for i in members:
            sep = vertical_separators(padded, pboxes[i], upper, lower, c0, config, mboxes)
            mask = _fill_between(padded.shape, upper, lower, c0, sep if sep.accepted else None, pboxes[i])
            if not mask.any():
                mask = _fill_between(padded.shape, upper, lower, c0, None, pboxes[i])
            if not mask.any():
                x, y, w, h = pboxes[i]
                mask[y : y + h, x : x + w] = True
            masks.append(mask)
            flags.append((sep.accepted, sep.iterations))
        masks = _resolve_overlaps(masks, mboxes)
        for i, mask, (acc, its) in zip(members, masks, flags):
            out[i] = CharMask(int(i), mask[PAD:-PAD, PAD:-PAD], acc, its)
    return out


def _resolve_overlaps(masks: list[np.ndarray], boxes: np.ndarray) -> list[np.ndarray]:
    if len(masks) < 2:
        return masks
    stack = np.stack(masks)
    claimed = stack.sum(axis=0)
    if claimed.max() <= 1:
        return masks
    centers = boxes[:, 0] + boxes[:, 2] / 2.0
    rr, cc = np.nonzero(claimed > 1)
    for r, c in zip(rr, cc):
        owners = np.flatnonzero(stack[:, r, c])
        keep = owners[np.argmin(np.abs(centers[owners] - (c + 0.5)))]
        stack[owners, r, c] = False
        stack[keep, r, c] = True
    # a mask emptied by the resolution keeps its own pixels
    return [m if m.any() else masks[j] for j, m in enumerate(stack)]
