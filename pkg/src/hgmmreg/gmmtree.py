"""Gaussian mixture models of a reference cloud: the 8-ary GMM-tree and a flat J-component GMM.

The tree is built top-down. Every split fits an 8-component mixture with a few
weighted EM iterations to the points of its parent (soft partition, weighted by
the parent's responsibilities), seeded by weighted k-means++ drawn from a
generator keyed on (seed, parent id). After the whole tree is built,
each internal node's mean/covariance is reset to the moments of its children's
mixture, so parents and children agree exactly in the first two moments.

Nodes are stored breadth-first: siblings are contiguous and every child index
is larger than its parent's, which the association kernels rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import EigenDecomp3, eig_sym3_batch

LOG_2PI = math.log(2.0 * math.pi)
BRANCHING = 8
# a point whose soft-partition weight falls below this is dropped from a split job
_MIN_DATA_WEIGHT = 1e-3
# dense evaluation block: rows * components
_BLOCK = 1 << 20


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    em_iterations_per_node: int = 8
    min_points_per_node: float = 32.0
    cov_regularization_epsilon: float = 1e-4
    rng_seed: int = 0
    max_level: int = 3

    def __post_init__(self):
        if self.em_iterations_per_node < 1:
            raise ModelError("em_iterations_per_node must be >= 1")
        if self.min_points_per_node <= 0:
            raise ModelError("min_points_per_node must be positive")
        if self.cov_regularization_epsilon <= 0:
            raise ModelError("cov_regularization_epsilon must be positive")
        if self.max_level < 1:
            raise ModelError("max_level must be >= 1")


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray
    eig: EigenDecomp3
    complexity: float


def node_complexity(eig) -> float:
    """Fraction of variance along the weakest axis, ``l3 / (l1 + l2 + l3)``, in [0, 1/3]."""
    lambdas = eig.lambdas if isinstance(eig, EigenDecomp3) else np.asarray(eig, dtype=float)
    return float(node_complexity_batch(lambdas[None])[0])


def node_complexity_batch(lambdas: np.ndarray) -> np.ndarray:
    lambdas = np.asarray(lambdas, dtype=float)
    total = lambdas.sum(axis=-1)
    if np.any(total <= 0) or np.any(lambdas < 0):
        raise ModelError("complexity needs non-negative eigenvalues that are not all zero")
    return np.minimum(lambdas.min(axis=-1) / total, 1.0 / 3.0)


class Mixture:
    """Array form of a set of Gaussian components with cached eigen/precision data."""

    def __init__(self, weights, means, covs):
        self.weights = np.ascontiguousarray(weights, dtype=float)
        self.means = np.ascontiguousarray(means, dtype=float).reshape(-1, 3)
        self.covs = np.ascontiguousarray(covs, dtype=float).reshape(-1, 3, 3)
        k = len(self.weights)
        if self.means.shape[0] != k or self.covs.shape[0] != k:
            raise ModelError("weights, means and covs disagree in length")
        self.lambdas, self.axes = eig_sym3_batch(self.covs)
        if np.any(self.lambdas[:, 2] <= 0):
            raise ModelError("covariance is singular; regularize before use")
        self.complexity = node_complexity_batch(self.lambdas)
        self.icov = np.einsum("kli,kl,klj->kij", self.axes, 1.0 / self.lambdas, self.axes)
        self.icov = 0.5 * (self.icov + np.swapaxes(self.icov, 1, 2))
        self.logdet = np.log(self.lambdas).sum(axis=1)
        self.white = whitening(self.lambdas, self.axes)

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def from_components(cls, components) -> Mixture:
        return cls(
            [c.weight for c in components],
            np.array([c.mean for c in components]),
            np.array([c.cov for c in components]),
        )

    def log_norm(self, weights=None) -> np.ndarray:
        w = self.weights if weights is None else weights
        with np.errstate(divide="ignore"):
            return np.log(w) - 0.5 * self.logdet - 1.5 * LOG_2PI

    def component(self, j: int, weight: float | None = None) -> GaussianComponent:
        return GaussianComponent(
            weight=float(self.weights[j] if weight is None else weight),
            mean=self.means[j].copy(),
            cov=self.covs[j].copy(),
            eig=EigenDecomp3(self.lambdas[j].copy(), self.axes[j].copy()),
            complexity=float(self.complexity[j]),
        )

    def components(self) -> list[GaussianComponent]:
        return [self.component(j) for j in range(len(self))]

    def log_weighted_density(self, x: np.ndarray, log_norm=None) -> np.ndarray:
        """``log(pi_j N(x_i | mu_j, Sigma_j))`` as an ``(N, K)`` array."""
        ln = self.log_norm() if log_norm is None else log_norm
        return log_gauss(x, self.means, self.icov, ln, self.white)


def whitening(lambdas: np.ndarray, axes: np.ndarray) -> np.ndarray:
    """Per-component ``W`` with ``W^T W = Sigma^-1``, stacked as ``(K, 3, 3)``."""
    return axes / np.sqrt(lambdas)[:, :, None]


def log_gauss(x, means, icov, log_norm, white=None) -> np.ndarray:
    """``log_norm_k - 0.5 (x - mu_k)^T Sigma_k^-1 (x - mu_k)`` for every point/component pair."""
    x = np.asarray(x, dtype=float)
    n, k = len(x), len(means)
    if white is None:
        lam, axes = eig_sym3_batch(np.linalg.inv(icov))
        white = whitening(lam, axes)
    wt = white.reshape(3 * k, 3).T  # (3, 3K)
    mw = np.einsum("kij,kj->ki", white, means).reshape(1, 3 * k)
    out = np.empty((n, k))
    step = max(1, _BLOCK // max(k, 1))
    for s in range(0, n, step):
        y = x[s:s + step] @ wt - mw
        y *= y
        out[s:s + step] = log_norm - 0.5 * y.reshape(len(y), k, 3).sum(axis=2)
    return out


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(under="ignore"):
        return safe + np.log(np.exp(a - safe[:, None]).sum(axis=1))


def _weighted_stats(x, w):
    total = w.sum()
    mu = w @ x / total
    d = x - mu
    cov = (d * w[:, None]).T @ d / total
    return total, mu, 0.5 * (cov + cov.T)


def _clip_cov(cov: np.ndarray, floor: float) -> np.ndarray:
    """Constrained ML covariance: eigenvalues raised to ``floor``."""
    lam, vec = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    lam = np.maximum(lam, floor)
    out = np.einsum("...il,...l,...jl->...ij", vec, lam, vec)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


@dataclass
class EMFit:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    resp: np.ndarray
    loglik: list


def fit_weighted_gmm(x, w, means, covs, weights, iterations: int, floor: float) -> EMFit:
    """Weighted EM for a small full-covariance mixture.

    Covariance eigenvalues are clipped at ``floor`` in every M-step, which is the
    exact constrained maximizer, so the weighted log-likelihood never decreases.
    ``loglik`` holds the value before each M-step plus one after the last.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    means = np.array(means, dtype=float)
    covs = np.array(covs, dtype=float)
    weights = np.array(weights, dtype=float)
    total = w.sum()
    trace = []

    def e_step():
        mix = Mixture(np.ones(len(weights)), means, covs)
        lp = mix.log_weighted_density(x, mix.log_norm(weights))
        lse = logsumexp_rows(lp)
        trace.append(float(w @ lse))
        with np.errstate(under="ignore", invalid="ignore"):
            r = np.exp(lp - lse[:, None])
        return np.nan_to_num(r)

    # second moments are taken about the data centroid to limit cancellation
    center = w @ x / total
    xc = x - center
    outer = (xc[:, :, None] * xc[:, None, :]).reshape(len(x), 9)
    for _ in range(iterations):
        r = e_step()
        wr = r * w[:, None]
        nk = wr.sum(axis=0)
        alive = nk > 1e-12 * total
        weights = nk / total
        safe = np.where(alive, nk, 1.0)
        mu_c = (wr.T @ xc) / safe[:, None]
        m2 = (wr.T @ outer).reshape(-1, 3, 3) / safe[:, None, None]
        cov = m2 - mu_c[:, :, None] * mu_c[:, None, :]
        means[alive] = mu_c[alive] + center
        covs[alive] = _clip_cov(0.5 * (cov[alive] + np.swapaxes(cov[alive], 1, 2)), floor)
    r = e_step()
    return EMFit(weights, means, covs, r, trace)


def _seeded_init(x, w, floor, rng):
    """Weighted k-means++ centers, nearest-center covariances, equal weights."""
    centers = _kmeanspp(x, BRANCHING, rng, w)
    d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    covs = np.empty((BRANCHING, 3, 3))
    _, _, cov_all = _weighted_stats(x, w)
    for k in range(BRANCHING):
        sel = labels == k
        if w[sel].sum() > 0 and sel.sum() > 1:
            covs[k] = _weighted_stats(x[sel], w[sel])[2]
        else:
            covs[k] = cov_all / 4.0
    return centers, _clip_cov(covs, floor), np.full(BRANCHING, 1.0 / BRANCHING)


def _abs_floor(points: np.ndarray) -> float:
    return 1e-12 * (1.0 + float(np.max(np.abs(points))) ** 2)


def _as_points(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ModelError(f"expected an (N, 3) point array, got shape {pts.shape}")
    if len(pts) == 0:
        raise ModelError("empty cloud")
    if not np.all(np.isfinite(pts)):
        raise ModelError("cloud has non-finite coordinates")
    return pts


class GmmTree:
    """Flat node arrays of an 8-ary GMM hierarchy.

    ``weights`` are conditional on the parent (they sum to one within a sibling
    group). Level-0 nodes occupy indices ``0 .. root_count - 1``.
    """

    def __init__(self, weights, means, covs, level, parent, max_level: int):
        self.mixture = Mixture(weights, means, covs)
        self.level = np.ascontiguousarray(level, dtype=np.int32)
        self.parent = np.ascontiguousarray(parent, dtype=np.int32)
        self.max_level = int(max_level)
        k = len(self.mixture)
        if len(self.level) != k or len(self.parent) != k:
            raise ModelError("node arrays disagree in length")
        self.first_child = np.full(k, -1, dtype=np.int32)
        self.n_children = np.zeros(k, dtype=np.int32)
        for i in range(k):
            p = self.parent[i]
            if p < 0:
                continue
            if p >= i:
                raise ModelError("nodes must be stored parents-first")
            if self.n_children[p] == 0:
                self.first_child[p] = i
            elif self.first_child[p] + self.n_children[p] != i:
                raise ModelError("siblings must be contiguous")
            self.n_children[p] += 1
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) == 0 or roots[-1] != len(roots) - 1:
            raise ModelError("level-0 nodes must come first")
        self.root_count = len(roots)

    # convenience views
    @property
    def weights(self) -> np.ndarray:
        return self.mixture.weights

    @property
    def means(self) -> np.ndarray:
        return self.mixture.means

    @property
    def covs(self) -> np.ndarray:
        return self.mixture.covs

    @property
    def complexity(self) -> np.ndarray:
        return self.mixture.complexity

    def __len__(self) -> int:
        return len(self.mixture)

    @property
    def depth(self) -> int:
        return int(self.level.max()) + 1

    def children(self, i: int) -> range:
        if i < 0:
            return range(0, self.root_count)
        f = int(self.first_child[i])
        return range(f, f + int(self.n_children[i])) if f >= 0 else range(0)

    def is_leaf(self, i: int) -> bool:
        return self.n_children[i] == 0

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.n_children == 0)

    def absolute_weights(self) -> np.ndarray:
        out = self.weights.copy()
        for i in range(len(self)):
            if self.parent[i] >= 0:
                out[i] *= out[self.parent[i]]
        return out

    def nodes(self) -> list[GaussianComponent]:
        return self.mixture.components()

    def root_components(self) -> list[GaussianComponent]:
        return [self.mixture.component(j) for j in range(self.root_count)]

    def level_mixture(self, lvl: int) -> Mixture:
        """Nodes of one level as an ordinary mixture with absolute weights."""
        idx = np.flatnonzero(self.level == lvl)
        return Mixture(self.absolute_weights()[idx], self.means[idx], self.covs[idx])

    def child_table(self) -> np.ndarray:
        """``(K + 1, 8)`` child indices, ``-1`` padded; the last row lists the level-0 nodes."""
        k = len(self)
        table = np.full((k + 1, BRANCHING), -1, dtype=np.int64)
        for i in range(k):
            c = self.children(i)
            table[i, :len(c)] = list(c)
        table[k, :self.root_count] = np.arange(self.root_count)
        return table

    # serialization
    def to_dict(self) -> dict:
        return {
            "format": "hgmmreg-gmmtree",
            "version": 1,
            "max_level": self.max_level,
            "nodes": [
                {
                    "level": int(self.level[i]),
                    "parent": int(self.parent[i]),
                    "weight": float(self.weights[i]),
                    "mean": self.means[i].tolist(),
                    "cov": self.covs[i].tolist(),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> GmmTree:
        if d.get("format") != "hgmmreg-gmmtree":
            raise ModelError("not a serialized GMM tree")
        if d.get("version") != 1:
            raise ModelError(f"unsupported tree version {d.get('version')}")
        nodes = d["nodes"]
        if not nodes:
            raise ModelError("tree has no nodes")
        return cls(
            [n["weight"] for n in nodes],
            np.array([n["mean"] for n in nodes], dtype=float),
            np.array([n["cov"] for n in nodes], dtype=float),
            [n["level"] for n in nodes],
            [n["parent"] for n in nodes],
            d["max_level"],
        )


def save_tree(tree: GmmTree, path) -> None:
    Path(path).write_text(json.dumps(tree.to_dict()))


def load_tree(path) -> GmmTree:
    return GmmTree.from_dict(json.loads(Path(path).read_text()))


def build_tree(cloud, config: ModelConfig = ModelConfig()) -> GmmTree:
    """Build a GMM-tree of at most ``config.max_level`` levels over ``cloud``."""
    pts = _as_points(cloud)
    n = len(pts)
    if n < BRANCHING:
        raise ModelError(f"need at least {BRANCHING} points to build a tree, got {n}")
    eps = config.cov_regularization_epsilon
    abs_floor = _abs_floor(pts)
    min_pts = float(config.min_points_per_node)

    weights, means, covs, levels, parents = [], [], [], [], []
    # job: (parent node id, level of the children, point indices, point weights)
    jobs = [(-1, 0, np.arange(n), np.ones(n))]
    head = 0
    while head < len(jobs):
        parent, lvl, idx, w = jobs[head]
        head += 1
        x = pts[idx]
        mass, _, cov_data = _weighted_stats(x, w)
        floor = max(eps * np.trace(cov_data) / 3.0, abs_floor)
        rng = np.random.default_rng([config.rng_seed, parent + 1])
        m_init, c_init, w_init = _seeded_init(x, w, floor, rng)
        fit = fit_weighted_gmm(x, w, m_init, c_init, w_init, config.em_iterations_per_node, floor)
        child_mass = fit.weights * mass
        prune_below = min(min_pts, n / (2.0 * BRANCHING)) if parent < 0 else min_pts
        keep = np.flatnonzero(child_mass >= prune_below)
        if parent < 0 and len(keep) == 0:
            keep = np.arange(BRANCHING)
        if parent >= 0 and len(keep) < 2:
            continue
        resp = fit.resp[:, keep]
        if len(keep) < BRANCHING:
            # renormalize responsibilities over the survivors
            mix = Mixture(fit.weights[keep], fit.means[keep], fit.covs[keep])
            lp = mix.log_weighted_density(x)
            resp = np.exp(lp - logsumexp_rows(lp)[:, None])
        wk = fit.weights[keep] / fit.weights[keep].sum()
        for c, k in enumerate(keep):
            node = len(weights)
            weights.append(wk[c])
            means.append(fit.means[k])
            covs.append(fit.covs[k])
            levels.append(lvl)
            parents.append(parent)
            cw = w * resp[:, c]
            if lvl + 1 < config.max_level and cw.sum() >= 2.0 * min_pts:
                sel = cw > _MIN_DATA_WEIGHT
                jobs.append((node, lvl + 1, idx[sel], cw[sel]))

    weights = np.array(weights)
    means = np.array(means)
    covs = np.array(covs)
    parents = np.array(parents)
    _moment_match(weights, means, covs, parents)
    return GmmTree(weights, means, covs, levels, parents, config.max_level)


def _moment_match(weights, means, covs, parents) -> None:
    """Reset internal nodes to their children's mixture moments, deepest first."""
    k = len(weights)
    for p in range(k - 1, -1, -1):
        ch = np.flatnonzero(parents == p)
        if len(ch) == 0:
            continue
        pi = weights[ch]
        mu = pi @ means[ch]
        d = means[ch] - mu
        cov = np.einsum("c,cij->ij", pi, covs[ch]) + (d * pi[:, None]).T @ d
        means[p] = mu
        covs[p] = 0.5 * (cov + cov.T)


def check_moment_matching(tree: GmmTree, rel_tol: float = 1e-6) -> list[str]:
    """Return a description of every internal node violating the mixture-moment identity."""
    failures = []
    scale = max(1.0, float(np.abs(tree.means).max()))
    for p in range(len(tree)):
        ch = tree.children(p)
        if len(ch) == 0:
            continue
        ch = np.arange(ch.start, ch.stop)
        pi = tree.weights[ch]
        if abs(pi.sum() - 1.0) > 1e-9:
            failures.append(f"node {p}: child weights sum to {pi.sum():.12g}")
            continue
        mu = pi @ tree.means[ch]
        if np.abs(mu - tree.means[p]).max() > 1e-7 * scale:
            failures.append(f"node {p}: mixture mean mismatch")
            continue
        d = tree.means[ch] - tree.means[p]
        cov = np.einsum("c,cij->ij", pi, tree.covs[ch]) + (d * pi[:, None]).T @ d
        ref = np.linalg.norm(tree.covs[p])
        if np.linalg.norm(cov - tree.covs[p]) > rel_tol * ref:
            failures.append(f"node {p}: mixture covariance mismatch")
    return failures


def _kmeanspp(pts: np.ndarray, j: int, rng: np.random.Generator, w=None) -> np.ndarray:
    n = len(pts)
    w = np.ones(n) if w is None else w
    chosen = [int(rng.choice(n, p=w / w.sum()))]
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, j):
        score = w * d2
        total = score.sum()
        if total <= 0:
            # all remaining points coincide with a center; take unused indices in order
            used = set(chosen)
            nxt = next(i for i in range(n) if i not in used)
        else:
            nxt = int(rng.choice(n, p=score / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return pts[chosen]


def fit_flat_mixture(cloud, j: int, config: ModelConfig = ModelConfig()) -> tuple[Mixture, list]:
    """Flat GMM plus its EM log-likelihood trace (see :func:`build_flat_gmm`)."""
    pts = _as_points(cloud)
    n = len(pts)
    if j <= 0 or j > n:
        raise ModelError(f"component count must be in [1, {n}], got {j}")
    rng = np.random.default_rng(config.rng_seed)
    _, _, cov_all = _weighted_stats(pts, np.ones(n))
    floor = max(config.cov_regularization_epsilon * np.trace(cov_all) / 3.0, _abs_floor(pts))
    centers = _kmeanspp(pts, j, rng)
    # hard nearest-center partition seeds the covariances
    labels = np.empty(n, dtype=np.int64)
    step = max(1, _BLOCK // j)
    for s in range(0, n, step):
        d2 = ((pts[s:s + step, None, :] - centers[None]) ** 2).sum(axis=2)
        labels[s:s + step] = d2.argmin(axis=1)
    counts = np.bincount(labels, minlength=j).astype(float)
    covs = np.empty((j, 3, 3))
    for k in range(j):
        members = pts[labels == k]
        if len(members) > 1:
            d = members - centers[k]
            covs[k] = d.T @ d / len(members)
        else:
            covs[k] = cov_all / max(j, 1) ** (2.0 / 3.0)
    covs = _clip_cov(covs, floor)
    weights = np.maximum(counts, 1.0) / np.maximum(counts, 1.0).sum()
    iters = config.em_iterations_per_node * config.max_level
    fit = fit_weighted_gmm(pts, np.ones(n), centers, covs, weights, iters, floor)
    w = np.maximum(fit.weights, 1e-12)
    return Mixture(w / w.sum(), fit.means, fit.covs), fit.loglik


def build_flat_gmm(cloud, j: int, config: ModelConfig = ModelConfig()) -> list[GaussianComponent]:
    """Single-level J-component GMM: k-means++ seeding then a fixed number of EM iterations.

    Runs ``em_iterations_per_node * max_level`` iterations, deterministic for a fixed
    ``rng_seed``. Weights are absolute.
    """
    mix, _ = fit_flat_mixture(cloud, j, config)
    return mix.components()
