"""PCA projection and Gaussian-mixture EM with shrunk covariances."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

LOG_2PI = np.log(2.0 * np.pi)


class DegenerateDataError(ValueError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (D, F), orthonormal rows
    eigenvalues: np.ndarray  # (D,), non-increasing
    total_variance: float

    @property
    def D(self) -> int:
        return self.basis.shape[0]

    @property
    def explained(self) -> float:
        return float(self.eigenvalues.sum() / self.total_variance)

    def project(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.basis.T

    def reconstruct(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.basis + self.mean


def _spectrum(X: np.ndarray, n_keep: int | None = None):
    """Eigenvalues (descending) and eigenvectors (rows) of the sample covariance."""
    N, F = X.shape
    Xc = X - X.mean(axis=0)
    if N <= F:
        _, s, vt = linalg.svd(Xc, full_matrices=False, check_finite=False)
        vals, vecs = s**2 / (N - 1), vt
    else:
        cov = Xc.T @ Xc / (N - 1)
        vals, vecs = linalg.eigh(cov, check_finite=False)
        vals, vecs = vals[::-1], vecs[:, ::-1].T
    vals = np.clip(vals, 0.0, None)
    # deterministic sign: largest-magnitude coordinate positive
    idx = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(len(vecs)), idx])
    signs[signs == 0] = 1.0
    vecs = vecs * signs[:, None]
    if n_keep is not None:
        vals, vecs = vals[:n_keep], vecs[:n_keep]
    return vals, vecs


def principal_directions(X: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``k`` principal directions (rows) and their variances."""
    vals, vecs = _spectrum(np.asarray(X, dtype=np.float64), k)
    return vecs, vals


def fit_pca(samples: np.ndarray, q_variance: float = 0.9) -> PcaModel:
    """Keep the fewest components whose variance reaches ``q_variance`` of the total."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two samples")
    if not 0 < q_variance <= 1:
        raise ValueError("q_variance must lie in (0, 1]")
    vals, vecs = _spectrum(X)
    total = float(vals.sum())
    if total <= 0 or vals[0] <= 1e-12 * max(np.abs(X).max(), 1.0) ** 2:
        raise DegenerateDataError("all samples are identical; no variance to keep")
    rank = int(np.sum(vals > vals[0] * 1e-10))
    frac = np.cumsum(vals) / total
    D = int(np.searchsorted(frac, q_variance - 1e-12) + 1)
    D = min(D, rank)
    return PcaModel(X.mean(axis=0), vecs[:D], vals[:D], total)


def oas_shrinkage(emp_cov: np.ndarray, n: float) -> float:
    """OAS coefficient for a maximum-likelihood covariance from ``n`` samples.

    ``((1 - 2/p) tr(S^2) + tr(S)^2) / ((n + 1 - 2/p) (tr(S^2) - tr(S)^2 / p))``
    clipped to [0, 1]; 1 when the denominator vanishes.
    """
    p = emp_cov.shape[0]
    tr = np.trace(emp_cov)
    tr2 = float(np.sum(emp_cov * emp_cov))  # tr(S^2) for symmetric S
    num = (1.0 - 2.0 / p) * tr2 + tr**2
    den = (n + 1.0 - 2.0 / p) * (tr2 - tr**2 / p)
    if den <= 0:
        return 1.0
    return float(min(max(num / den, 0.0), 1.0))


def shrink(emp_cov: np.ndarray, rho: float) -> np.ndarray:
    p = emp_cov.shape[0]
    mu = np.trace(emp_cov) / p
    out = (1.0 - rho) * emp_cov
    out.flat[:: p + 1] += rho * mu
    return out


def _ensure_pd(cov: np.ndarray, floor: float) -> np.ndarray:
    p = cov.shape[0]
    eps = 1e-9 * np.trace(cov) / p
    if eps <= 0:
        eps = floor
    try:
        linalg.cholesky(cov, lower=True, check_finite=False)
        return cov
    except linalg.LinAlgError:
        out = cov.copy()
        out.flat[:: p + 1] += eps
        return out


def _weighted_scatter(X: np.ndarray, weights: np.ndarray | None):
    if weights is None:
        n = X.shape[0]
        if n < 2:
            raise ValueError("OAS needs at least two samples")
        mu = X.mean(axis=0)
        Xc = X - mu
        S = Xc.T @ Xc / n
    else:
        w = np.asarray(weights, dtype=np.float64)
        n = float(w.sum())
        if n <= 0:
            raise ValueError("weights sum to zero")
        mu = w @ X / n
        Xc = X - mu
        S = (Xc * w[:, None]).T @ Xc / n
    return mu, 0.5 * (S + S.T), n


def oas_covariance(samples: np.ndarray, weights: np.ndarray | None = None, floor: float = 1e-9) -> np.ndarray:
    """Oracle-approximating-shrinkage covariance of ``samples`` (n x D).

    With ``weights`` the empirical covariance is the weighted one and the
    sample count is the weight total.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    _, S, n = _weighted_scatter(X, weights)
    return _ensure_pd(shrink(S, oas_shrinkage(S, n)), floor)


def _expected_loglik(cov: np.ndarray, S: np.ndarray) -> float:
    """``-(log det cov + tr(cov^-1 S))``: the covariance part of one component's
    expected complete-data log-likelihood, up to constants and the factor n/2."""
    try:
        L = linalg.cholesky(cov, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return -np.inf
    logdet = 2.0 * np.log(np.diag(L)).sum()
    Linv = linalg.solve_triangular(L, np.eye(len(cov)), lower=True, check_finite=False)
    return -(logdet + float(np.sum((Linv @ S) * Linv)))


def safeguarded_oas(S: np.ndarray, n: float, previous: np.ndarray | None, floor: float, halvings: int = 30):
    """OAS estimate whose shrinkage is backed off until it does not lower the
    expected log-likelihood below that of ``previous``.

    With ``rho = 0`` the estimate is the maximum-likelihood one, so backing
    off always terminates and every EM step stays a generalized EM step.
    Returns the covariance and the coefficient actually used.
    """
    rho = oas_shrinkage(S, n)
    cov = _ensure_pd(shrink(S, rho), floor)
    if previous is None:
        return cov, rho
    target = _expected_loglik(previous, S)
    for _ in range(halvings):
        if _expected_loglik(cov, S) >= target or rho == 0.0:
            return cov, rho
        rho *= 0.5
        cov = _ensure_pd(shrink(S, rho), floor)
    return _ensure_pd(S.copy(), floor), 0.0


@dataclass
class GmmState:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    responsibilities: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)
    pruned_at: list[int] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def assignment(self) -> np.ndarray:
        return np.argmax(self.responsibilities, axis=1)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def clusters(self) -> list[np.ndarray]:
        """Member indices of every non-empty component, in component order."""
        a = self.assignment
        return [np.flatnonzero(a == c) for c in range(self.n_components) if np.any(a == c)]


def _log_gaussians(X: np.ndarray, means, covs) -> np.ndarray:
    N, D = X.shape
    out = np.empty((N, len(means)))
    for c, (mu, cov) in enumerate(zip(means, covs)):
        L = linalg.cholesky(cov, lower=True, check_finite=False)
        y = linalg.solve_triangular(L, (X - mu).T, lower=True, check_finite=False)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, c] = -0.5 * (np.einsum("ij,ij->j", y, y) + D * LOG_2PI + logdet)
    return out


def _m_step(X: np.ndarray, resp: np.ndarray, floor: float, previous=None, cutoff: float = 1e-12):
    N, D = X.shape
    nk = resp.sum(axis=0)
    weights = nk / N
    means = np.empty((resp.shape[1], D))
    covs = np.empty((resp.shape[1], D, D))
    for c in range(resp.shape[1]):
        # negligible responsibilities contribute nothing measurable
        idx = np.flatnonzero(resp[:, c] > cutoff)
        means[c], S, n = _weighted_scatter(X[idx], resp[idx, c])
        covs[c], _ = safeguarded_oas(S, n, None if previous is None else previous[c], floor)
    return weights, means, covs


def _e_step(X, weights, means, covs):
    logp = _log_gaussians(X, means, covs) + np.log(weights)
    norm = logsumexp(logp, axis=1)
    return np.exp(logp - norm[:, None]), float(norm.sum())


def kmeans_labels(X: np.ndarray, K: int, seed: int) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=K, init="k-means++", n_init=1, random_state=seed)
        return km.fit(X).labels_


def fit_gmm(
    projected: np.ndarray,
    K: int,
    rng_seed: int = 0,
    tol: float = 1e-5,
    max_iter: int = 200,
) -> GmmState:
    """Full-covariance GMM fitted by EM, started from seeded k-means++.

    Every M step estimates covariances with OAS, then drops the components
    that hold at most one sample under hard assignment. Stops when the
    per-sample log-likelihood gains less than ``tol``.
    """
    X = np.asarray(projected, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    N = X.shape[0]
    if N < 2:
        raise ValueError("need at least two samples")
    if K < 2:
        raise ValueError("K must be at least 2")
    K = min(K, N)
    scale = float(np.var(X, axis=0).sum()) / X.shape[1]
    floor = 1e-9 * scale if scale > 0 else 1e-12

    labels = kmeans_labels(X, K, rng_seed)
    counts = np.bincount(labels, minlength=K)
    keep = np.flatnonzero(counts > 1)
    if keep.size == 0:
        keep = np.array([int(np.argmax(counts))])
    remap = -np.ones(K, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    resp = np.zeros((N, keep.size))
    rows = np.flatnonzero(remap[labels] >= 0)
    resp[rows, remap[labels[rows]]] = 1.0
    orphans = np.flatnonzero(remap[labels] < 0)
    weights, means, covs = _m_step(X[rows], resp[rows], floor)
    if orphans.size:
        resp[orphans], _ = _e_step(X[orphans], weights, means, covs)
        weights, means, covs = _m_step(X, resp, floor)

    state = GmmState(weights, means, covs, resp)
    prev = -np.inf
    for it in range(1, max_iter + 1):
        resp, ll = _e_step(X, weights, means, covs)
        state.log_likelihoods.append(ll)
        state.n_iter = it
        if it > 1 and (ll - prev) / N < tol:
            state.converged = True
            break
        prev = ll
        hard = np.bincount(np.argmax(resp, axis=1), minlength=resp.shape[1])
        alive = hard > 1
        if not alive.all():
            if not alive.any():
                alive[np.argmax(hard)] = True
            # responsibilities of the survivors, recomputed rather than
            # renormalized so samples owned by a dropped component find a home
            w = weights[alive] / weights[alive].sum()
            covs = covs[alive]
            resp, _ = _e_step(X, w, means[alive], covs)
            state.pruned_at.append(it)
        weights, means, covs = _m_step(X, resp, floor, covs)

    state.weights, state.means, state.covariances = weights, means, covs
    state.responsibilities, _ = _e_step(X, weights, means, covs)
    return state
