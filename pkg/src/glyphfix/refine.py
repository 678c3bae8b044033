"""Binary-tree refinement of GMM clusters.

Each node registers its members to their mean with an inverse-compositional
Lucas-Kanade loop over homotheties (translation plus uniform scale), tests
the first principal projections for normality with Anderson-Darling, and
splits with a two-component GMM when any test fails.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cluster import fit_gmm, principal_directions
from .model import PipelineConfig

MAX_SHIFT = 8.0
SCALE_RANGE = (0.8, 1.25)
STEP_TOL = 1e-4
MAX_ICA_ITERS = 50


# ---------------------------------------------------------------- registration


@dataclass
class RegistrationResult:
    warped: np.ndarray
    params: np.ndarray  # (tx, ty, sigma)
    residual: float
    initial_residual: float
    iterations: int
    singular: bool = False

    @property
    def tx(self) -> float:
        return float(self.params[0])

    @property
    def ty(self) -> float:
        return float(self.params[1])

    @property
    def sigma(self) -> float:
        return float(self.params[2])


def _interp_matrices(n_out: int, coords: np.ndarray) -> np.ndarray:
    """Linear-interpolation weights, shape (batch, n_out, n_src) with n_src == n_out.

    ``coords[b, i]`` is the source coordinate sampled by output ``i``; taps
    falling outside the source get no weight.
    """
    b = coords.shape[0]
    lo = np.floor(coords)
    frac = coords - lo
    lo = lo.astype(np.int64)
    M = np.zeros((b, n_out, n_out))
    bi, ii = np.meshgrid(np.arange(b), np.arange(n_out), indexing="ij")
    for tap, w in ((lo, 1.0 - frac), (lo + 1, frac)):
        ok = (tap >= 0) & (tap < n_out) & (w > 0)
        M[bi[ok], ii[ok], tap[ok]] += w[ok]
    return M


def warp_homothety(images: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Sample ``images`` at ``W(x) = sigma (x - c) + c + t`` with bilinear interpolation.

    ``images`` is (n, H, W) or (H, W); ``params`` rows are ``(tx, ty, sigma)``
    with x the column axis. Outside the source the background value 1 is used.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images, params = images[None], np.asarray(params, dtype=np.float64)[None]
    n, H, W = images.shape
    params = np.asarray(params, dtype=np.float64).reshape(n, 3)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    sig = params[:, 2:3]
    ys = sig * (np.arange(H)[None] - cy) + cy + params[:, 1:2]
    xs = sig * (np.arange(W)[None] - cx) + cx + params[:, 0:1]
    Ry = _interp_matrices(H, ys)
    Rx = _interp_matrices(W, xs)
    # homotheties are separable: out = Ry (I - 1) Rx^T + 1
    out = np.matmul(np.matmul(Ry, images - 1.0), Rx.transpose(0, 2, 1)) + 1.0
    return out[0] if single else out


def _compose_inverse(params: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Parameters of ``W(.; p) o W(.; delta)^-1``; ``delta[:, 2]`` is sigma - 1."""
    sd = 1.0 + delta[:, 2]
    sig = params[:, 2] / sd
    t = params[:, :2] - params[:, 2:3] * delta[:, :2] / sd[:, None]
    return np.column_stack([t, sig])


def _clip_params(params: np.ndarray) -> np.ndarray:
    out = params.copy()
    out[:, :2] = np.clip(out[:, :2], -MAX_SHIFT, MAX_SHIFT)
    out[:, 2] = np.clip(out[:, 2], *SCALE_RANGE)
    return out


def ica_register_batch(
    images: np.ndarray,
    reference: np.ndarray,
    max_iter: int = MAX_ICA_ITERS,
    step_tol: float = STEP_TOL,
):
    """Register every image of the batch to one reference.

    Returns ``(warped, params, residuals, initial_residuals, iterations,
    singular)``. The reference drives the steepest-descent images and the
    Hessian, which are therefore shared by the whole batch. A sample whose
    final residual exceeds its unwarped residual falls back to identity.
    """
    imgs = np.asarray(images, dtype=np.float64)
    T = np.asarray(reference, dtype=np.float64)
    n, H, W = imgs.shape
    if T.shape != (H, W):
        raise ValueError(f"reference shape {T.shape} != image shape {(H, W)}")
    identity = np.tile([0.0, 0.0, 1.0], (n, 1))
    init_res = ((imgs - T) ** 2).sum(axis=(1, 2))

    gy, gx = np.gradient(T)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sd = np.stack([gx, gy, gx * (xx - (W - 1) / 2.0) + gy * (yy - (H - 1) / 2.0)]).reshape(3, -1)
    hess = sd @ sd.T
    if np.linalg.cond(hess) > 1e12 or not np.isfinite(hess).all():
        return imgs.copy(), identity, init_res, init_res, np.zeros(n, dtype=int), True
    hess_inv = np.linalg.inv(hess)

    params = identity.copy()
    iters = np.zeros(n, dtype=int)
    active = np.arange(n)
    for _ in range(max_iter):
        if active.size == 0:
            break
        warped = warp_homothety(imgs[active], params[active])
        err = (warped - T).reshape(active.size, -1)
        delta = (err @ sd.T) @ hess_inv
        params[active] = _clip_params(_compose_inverse(params[active], delta))
        iters[active] += 1
        active = active[np.linalg.norm(delta, axis=1) >= step_tol]

    warped = warp_homothety(imgs, params)
    res = ((warped - T) ** 2).sum(axis=(1, 2))
    worse = res > init_res
    if worse.any():
        params[worse] = identity[worse]
        warped[worse] = imgs[worse]
        res[worse] = init_res[worse]
    return warped, params, res, init_res, iters, False


def ica_register(image: np.ndarray, reference: np.ndarray, **kwargs) -> RegistrationResult:
    """Homothety that best maps ``image`` onto ``reference`` in the least-squares sense.

    The result satisfies ``warped(x) = image(W(x))`` with
    ``W(x) = sigma (x - c) + c + t`` about the image center ``c``.
    """
    warped, params, res, init, iters, singular = ica_register_batch(
        np.asarray(image, dtype=np.float64)[None], reference, **kwargs
    )
    return RegistrationResult(warped[0], params[0], float(res[0]), float(init[0]), int(iters[0]), singular)


# ---------------------------------------------------------------- normality


@dataclass
class NormalityResult:
    statistic: float  # A^2
    corrected: float  # small-sample corrected A^2
    p_value: float
    degenerate: bool = False


# exponent of the top branch stops decreasing here; hold it constant beyond
_A_VERTEX = 5.709 / (2 * 0.0186)


def _ad_pvalue(a: float) -> float:
    if a >= 0.6:
        a = min(a, _A_VERTEX)
        return float(np.exp(1.2937 - 5.709 * a + 0.0186 * a * a))
    if a >= 0.34:
        return float(np.exp(0.9177 - 4.279 * a - 1.38 * a * a))
    if a >= 0.2:
        return float(1.0 - np.exp(-8.318 + 42.796 * a - 59.938 * a * a))
    return float(min(1.0, 1.0 - np.exp(-13.436 + 101.14 * a - 223.73 * a * a)))


def anderson_darling(values: np.ndarray) -> NormalityResult:
    """Anderson-Darling normality test with mean and variance estimated from the data."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.size
    if n < 8:
        raise ValueError("the Anderson-Darling approximation needs at least 8 values")
    sd = x.std(ddof=1)
    if not sd > 1e-12 * max(np.abs(x).max(), 1.0):
        return NormalityResult(np.inf, np.inf, 0.0, degenerate=True)
    z = (x - x.mean()) / sd
    i = np.arange(1, n + 1)
    s = np.sum((2 * i - 1) * (stats.norm.logcdf(z) + stats.norm.logsf(z[::-1])))
    a2 = -n - s / n
    a2c = a2 * (1.0 + 0.75 / n + 2.25 / n**2)
    return NormalityResult(float(a2), float(a2c), _ad_pvalue(a2c))


def anderson_darling_p(values: np.ndarray) -> float:
    return anderson_darling(values).p_value


# ---------------------------------------------------------------- trees


class NodeStatus(enum.Enum):
    INTERNAL = "internal"
    ACCEPTED = "leaf_accepted"
    DISCARDED = "leaf_discarded"


@dataclass
class ClusterNode:
    members: np.ndarray
    mean: np.ndarray | None
    path: str
    status: NodeStatus
    p_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    root: int = -1

    @property
    def size(self) -> int:
        return len(self.members)


def node_seed(seed: int, root: int, path: str) -> int:
    """Seed of a tree node, derived from the run seed, root id and split path."""
    key = [int(seed), int(root) + 1, len(path), int(path, 2) if path else 0]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def node_normality(images: np.ndarray, k: int):
    """Register ``images`` to their mean and AD-test their first ``k`` principal projections.

    Returns ``(registered, projections, p_values)``.
    """
    images = np.asarray(images, dtype=np.float64)
    registered = ica_register_batch(images, images.mean(axis=0))[0]
    X = registered.reshape(len(registered), -1)
    dirs, _ = principal_directions(X, k)
    proj = (X - X.mean(axis=0)) @ dirs.T
    return registered, proj, np.array([anderson_darling_p(proj[:, j]) for j in range(proj.shape[1])])


def grow_tree(
    images: np.ndarray,
    members: np.ndarray,
    config: PipelineConfig | None = None,
    seed: int | None = None,
    root: int = -1,
) -> list[ClusterNode]:
    """Every terminal node of the refinement tree, in left-to-right order.

    Nodes smaller than ``n_min`` come back as DISCARDED, all others as
    ACCEPTED. Children receive their parent's registered images.
    """
    config = config or PipelineConfig()
    seed = config.rng_seed if seed is None else seed
    out: list[ClusterNode] = []
    members = np.asarray(members, dtype=np.int64)
    images = np.asarray(images, dtype=np.float64)
    if len(members) != len(images):
        raise ValueError("members must label the given images one to one")
    stack = [(members, images, "")]
    while stack:
        idx, imgs, path = stack.pop()
        n = len(idx)
        if n < config.n_min:
            out.append(ClusterNode(idx, imgs.mean(axis=0) if n else None, path, NodeStatus.DISCARDED, root=root))
            continue
        registered, proj, pvals = node_normality(imgs, config.k)
        leaf = ClusterNode(idx, registered.mean(axis=0), path, NodeStatus.ACCEPTED, pvals, root)
        if pvals.min() >= config.p_thr:
            out.append(leaf)
            continue
        split = fit_gmm(proj, 2, node_seed(seed, root, path)).assignment
        left = split == split[0]
        if left.all():
            out.append(leaf)
            continue
        # push right first so the left subtree is emitted first
        stack.append((idx[~left], registered[~left], path + "1"))
        stack.append((idx[left], registered[left], path + "0"))
    return out


def refine_cluster(
    images: np.ndarray,
    config: PipelineConfig | None = None,
    members: np.ndarray | None = None,
    seed: int | None = None,
    root: int = -1,
) -> list[ClusterNode]:
    """Accepted leaves of the refinement tree of one cluster of images."""
    images = np.asarray(images, dtype=np.float64)
    if members is None:
        members = np.arange(len(images))
    nodes = grow_tree(images, members, config, seed, root)
    return [nd for nd in nodes if nd.status is NodeStatus.ACCEPTED]


@dataclass
class RefineResult:
    leaves: list[ClusterNode]
    discarded: list[ClusterNode]
    n_samples: int

    @property
    def clusters(self) -> list[np.ndarray]:
        return [leaf.members for leaf in self.leaves]

    @property
    def n_retained(self) -> int:
        return int(sum(leaf.size for leaf in self.leaves))

    @property
    def retained_proportion(self) -> float:
        return self.n_retained / self.n_samples if self.n_samples else 0.0


def refine_all(
    clusters: list[np.ndarray] | np.ndarray,
    images: np.ndarray,
    config: PipelineConfig | None = None,
    seed: int | None = None,
) -> RefineResult:
    """Refine every GMM cluster; ``clusters`` is a list of index arrays or a label vector."""
    config = config or PipelineConfig()
    images = np.asarray(images, dtype=np.float64)
    if isinstance(clusters, np.ndarray) and clusters.ndim == 1 and clusters.dtype.kind in "iu":
        labels = clusters
        clusters = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    leaves, discarded = [], []
    for r, members in enumerate(clusters):
        members = np.asarray(members, dtype=np.int64)
        for node in grow_tree(images[members], members, config, seed, r):
            (leaves if node.status is NodeStatus.ACCEPTED else discarded).append(node)
    return RefineResult(leaves, discarded, len(images))
