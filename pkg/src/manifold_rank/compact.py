"""Per-item region compaction: spherical GMM means, renormalized to unit length."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import DescriptorSet, InputError


@dataclass(frozen=True)
class GmmSpec:
    components: int = 5
    max_em_iters: int = 50
    tol: float = 1e-5
    seed: int = 0
    var_floor: float = 1e-6

    def __post_init__(self):
        if self.components < 1:
            raise InputError("GMM needs at least one component")
        if self.max_em_iters < 1:
            raise InputError("max_em_iters must be >= 1")
        if self.tol <= 0:
            raise InputError("tol must be positive")


@dataclass
class GmmFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    log_likelihoods: list = field(default_factory=list)


def unique_rows(X: np.ndarray) -> np.ndarray:
    """Distinct rows in order of first appearance."""
    _, first = np.unique(X, axis=0, return_index=True)
    return X[np.sort(first)]


def kmeans_plus_plus(X: np.ndarray, G: int, rng: np.random.Generator) -> np.ndarray:
    m = X.shape[0]
    chosen = [int(rng.integers(m))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, G):
        total = d2.sum()
        nxt = int(rng.choice(m, p=d2 / total)) if total > 0 else int(rng.integers(m))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _log_densities(X, means, variances, log_weights):
    d = X.shape[1]
    sq = (X**2).sum(1)[:, None] - 2 * X @ means.T + (means**2).sum(1)[None, :]
    sq = np.maximum(sq, 0.0)
    return log_weights[None, :] - 0.5 * d * np.log(2 * np.pi * variances)[None, :] - sq / (2 * variances[None, :])


def fit_spherical_gmm(X: np.ndarray, spec: GmmSpec) -> GmmFit:
    """EM for a mixture of isotropic Gaussians (one scalar variance per component)."""
    X = np.asarray(X, dtype=np.float64)
    m, d = X.shape
    G = spec.components
    rng = np.random.default_rng(spec.seed)
    means = kmeans_plus_plus(X, G, rng)
    sq = ((X[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    init_var = max(sq.min(axis=1).mean() / d, spec.var_floor)
    variances = np.full(G, init_var)
    weights = np.full(G, 1.0 / G)
    history: list[float] = []
    for _ in range(spec.max_em_iters):
        with np.errstate(divide="ignore"):
            log_p = _log_densities(X, means, variances, np.log(weights))
        norm = logsumexp(log_p, axis=1)
        ll = float(norm.sum())
        if history and abs(ll - history[-1]) <= spec.tol * abs(history[-1]):
            history.append(ll)
            break
        history.append(ll)
        resp = np.exp(log_p - norm[:, None])
        nk = resp.sum(axis=0)
        live = nk > 1e-12
        means[live] = (resp[:, live].T @ X) / nk[live, None]
        sq = ((X[:, None, :] - means[None, :, :]) ** 2).sum(-1)
        variances[live] = np.maximum((resp[:, live] * sq[:, live]).sum(0) / (d * nk[live]), spec.var_floor)
        weights = nk / m
    return GmmFit(means, variances, weights, history)


def compact_item(regions, spec: GmmSpec = GmmSpec()) -> np.ndarray:
    """Replace an item's regions by at most `components` unit-norm GMM means."""
    X = np.atleast_2d(np.asarray(regions, dtype=np.float64))
    if X.shape[0] == 0 or X.size == 0:
        raise InputError("empty region set")
    distinct = unique_rows(X)
    if distinct.shape[0] <= spec.components:
        return distinct
    fit = fit_spherical_gmm(X, spec)
    means = fit.means[fit.weights > 0]
    norms = np.linalg.norm(means, axis=1)
    out = means[norms > 0] / norms[norms > 0, None]
    if out.shape[0] == 0:
        return distinct[:1]
    return out


def compact_dataset(ds: DescriptorSet, spec: GmmSpec = GmmSpec()) -> DescriptorSet:
    rows, items = [], []
    for item in ds.items:
        reduced = compact_item(ds.regions(item), spec)
        rows.append(reduced)
        items.extend([item] * reduced.shape[0])
    data = np.vstack(rows)
    item_of = np.asarray(items, dtype=np.int64)
    region_of = np.concatenate([np.arange(r.shape[0]) for r in rows])
    return DescriptorSet.from_rows(data, item_of, region_of)
