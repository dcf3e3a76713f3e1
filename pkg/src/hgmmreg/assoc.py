"""E-step: expected correspondences of a (transformed) cloud to a mixture model.

Two routes produce the same :class:`MomentSet` type:

* :func:`responsibilities_dense` evaluates every point against every component
  and deposits full posterior responsibilities.
* :func:`associate_adaptive` walks the GMM-tree along the most likely child at
  each level and stops early on planar nodes, depositing each point once, into
  the node it stopped at, with weight equal to the product of the
  sibling-normalized responsibilities along its path.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _assoc_py
from .geom import RigidTransform
from .gmmtree import GmmTree, Mixture, logsumexp_rows

try:
    if os.environ.get("HGMMREG_PURE_PYTHON"):
        raise ImportError("compiled kernel disabled by HGMMREG_PURE_PYTHON")
    from . import _assoc_core
except ImportError:
    _assoc_core = None

BACKENDS = {"python": _assoc_py.descend}
if _assoc_core is not None:
    BACKENDS["cython"] = _assoc_core.descend
BACKEND = "cython" if _assoc_core is not None else "python"

# points per work unit; fixed so results do not depend on the worker count
CHUNK = 4096


class AssociationError(ValueError):
    pass


@dataclass
class MomentSet:
    """Per-component zeroth, first and second moments, indexed by component/node id."""

    m0: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    total_points: int = 0
    outliers: int = 0
    evaluations: int = 0

    @classmethod
    def empty(cls, k: int) -> MomentSet:
        return cls(np.zeros(k), np.zeros((k, 3)), np.zeros((k, 3, 3)))

    @property
    def total_mass(self) -> float:
        return float(self.m0.sum())

    def contributing(self) -> np.ndarray:
        return np.flatnonzero(self.m0 > 0)

    def merge(self, other: MomentSet) -> MomentSet:
        return MomentSet(
            self.m0 + other.m0,
            self.m1 + other.m1,
            self.m2 + other.m2,
            self.total_points + other.total_points,
            self.outliers + other.outliers,
            self.evaluations + other.evaluations,
        )


def accumulate(m: MomentSet, j: int, gamma: float, z) -> MomentSet:
    """Add one weighted point to component ``j`` in place; returns ``m``."""
    if not 0 <= j < len(m.m0):
        raise AssociationError(f"unknown component id {j}")
    if not 0.0 <= gamma <= 1.0:
        raise AssociationError("gamma must lie in [0, 1]")
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise AssociationError("non-finite point")
    if gamma == 0.0:
        return m
    m.m0[j] += gamma
    m.m1[j] += gamma * z
    m.m2[j] += gamma * np.outer(z, z)
    return m


_PAIRS = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def _deposit(k: int, node: np.ndarray, mass: np.ndarray, z: np.ndarray) -> MomentSet:
    """Bulk version of :func:`accumulate` (one entry per point, fixed summation order)."""
    ok = node >= 0
    node, mass, z = node[ok], mass[ok], z[ok]
    out = MomentSet.empty(k)
    out.m0 = np.bincount(node, weights=mass, minlength=k)
    for a in range(3):
        out.m1[:, a] = np.bincount(node, weights=mass * z[:, a], minlength=k)
    for a, b in _PAIRS:
        col = np.bincount(node, weights=mass * z[:, a] * z[:, b], minlength=k)
        out.m2[:, a, b] = col
        out.m2[:, b, a] = col
    return out


@dataclass(frozen=True)
class AssocConfig:
    lambda_c: float = 0.01
    max_level: int | None = None
    outlier_floor: float = 1e-300
    deterministic: bool = True
    workers: int = 1
    backend: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.lambda_c <= 1.0 / 3.0:
            raise AssociationError("lambda_c must lie in [0, 1/3]")
        if self.max_level is not None and self.max_level < 1:
            raise AssociationError("max_level must be >= 1")
        if not self.outlier_floor > 0:
            raise AssociationError("outlier_floor must be positive")
        if self.workers < 1:
            raise AssociationError("workers must be >= 1")


def _points(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise AssociationError("expected a non-empty (N, 3) cloud")
    return pts


def _as_mixture(components) -> Mixture:
    if isinstance(components, Mixture):
        mix = components
    else:
        components = list(components)
        if not components:
            raise AssociationError("empty component list")
        mix = Mixture.from_components(components)
    if len(mix) == 0:
        raise AssociationError("empty component list")
    return mix


def responsibilities_dense(cloud, components, t: RigidTransform | None = None,
                           outlier_floor: float = 1e-300) -> MomentSet:
    """Full posterior responsibilities of every transformed point to every component."""
    pts = _points(cloud)
    mix = _as_mixture(components)
    z = pts if t is None else t.apply(pts)
    k = len(mix)
    lp = mix.log_weighted_density(z)
    best = lp.max(axis=1)
    ok = best >= math.log(outlier_floor)
    lse = logsumexp_rows(lp[ok])
    with np.errstate(under="ignore"):
        gamma = np.exp(lp[ok] - lse[:, None])
    zk = z[ok]
    out = MomentSet(
        gamma.sum(axis=0),
        gamma.T @ zk,
        (gamma.T @ (zk[:, :, None] * zk[:, None, :]).reshape(-1, 9)).reshape(k, 3, 3),
        total_points=len(pts),
        outliers=int((~ok).sum()),
        evaluations=len(pts) * k,
    )
    return out


@dataclass
class AdaptiveTrace:
    """Per-point outcome of one adaptive pass (exposed for tests and benchmarks)."""

    node: np.ndarray
    mass: np.ndarray
    evals: np.ndarray
    backend: str = field(default="")


def _kernel_inputs(tree: GmmTree):
    mix = tree.mixture
    return (
        np.ascontiguousarray(mix.means),
        np.ascontiguousarray(mix.white),
        np.ascontiguousarray(mix.log_norm()),
        np.ascontiguousarray(mix.complexity),
        np.ascontiguousarray(tree.first_child, dtype=np.int32),
        np.ascontiguousarray(tree.n_children, dtype=np.int32),
    )


def descend_points(z: np.ndarray, tree: GmmTree, config: AssocConfig = AssocConfig()) -> AdaptiveTrace:
    """Run the tree search for already-transformed points ``z``."""
    backend = config.backend or BACKEND
    if backend not in BACKENDS:
        raise AssociationError(f"backend {backend!r} unavailable (have {sorted(BACKENDS)})")
    kernel = BACKENDS[backend]
    max_level = tree.max_level if config.max_level is None else config.max_level
    if max_level > tree.max_level:
        raise AssociationError(f"max_level {max_level} exceeds tree depth {tree.max_level}")
    args = _kernel_inputs(tree)
    log_floor = math.log(config.outlier_floor)
    z = np.ascontiguousarray(z, dtype=float)

    def run(lo):
        return kernel(z[lo:lo + CHUNK], *args, tree.root_count, max_level, config.lambda_c, log_floor)

    starts = range(0, len(z), CHUNK)
    if config.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    node = np.concatenate([p[0] for p in parts])
    mass = np.concatenate([p[1] for p in parts])
    evals = np.concatenate([p[2] for p in parts])
    return AdaptiveTrace(node, mass, evals, backend)


def associate_adaptive(cloud, tree: GmmTree, t: RigidTransform | None = None,
                       config: AssocConfig = AssocConfig()) -> MomentSet:
    """Logarithmic-time E-step over a GMM-tree.

    Each point visits at most ``8 * max_level`` components. Moments are keyed by
    node id so points stopping at different depths can share one set.
    """
    pts = _points(cloud)
    z = pts if t is None else t.apply(pts)
    tr = descend_points(z, tree, config)
    out = _deposit(len(tree), tr.node, tr.mass, z)
    out.total_points = len(pts)
    out.outliers = int((tr.node < 0).sum())
    out.evaluations = int(tr.evals.sum())
    return out
