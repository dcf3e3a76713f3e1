"""M-step: Mahalanobis criterion over virtual points and its weighted point-to-plane solve.

Each contributing component j yields one virtual point ``mu*_j`` (the mean of
the points attributed to it) with weight ``pi*_j``. The criterion

    sum_j pi*_j (T(mu*_j) - mu_j)^T Sigma_j^-1 (T(mu*_j) - mu_j)

is evaluated through the eigenvectors of each covariance as three weighted
point-to-plane terms per component, which turns the small-angle linearization
into an ordinary 3J x 6 weighted least-squares problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .assoc import MomentSet
from .geom import RigidTransform, rotation_log, small_angle_rotation
from .gmmtree import GmmTree, Mixture

MASS_FLOOR = 1e-8
EIG_FLOOR = 1e-6
MAX_CONDITION = 1e12


class DegenerateGeometryError(ArithmeticError):
    pass


@dataclass(frozen=True)
class VirtualPointSet:
    ids: np.ndarray
    pi_star: np.ndarray
    mu_star: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    lambdas: np.ndarray
    axes: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_moments(cls, moments: MomentSet, model, anchors=None) -> VirtualPointSet:
        """Virtual points of the contributing components.

        ``anchors`` optionally replaces the component means as the targets of the
        virtual points (same indexing as the model).
        """
        mix = model.mixture if isinstance(model, GmmTree) else model
        if not isinstance(mix, Mixture):
            mix = Mixture.from_components(model)
        n = moments.total_points
        if n <= 0:
            raise ValueError("moment set has no points")
        ids = np.flatnonzero(moments.m0 > MASS_FLOOR * n)
        m0 = moments.m0[ids]
        return cls(
            ids=ids,
            pi_star=m0 / n,
            mu_star=moments.m1[ids] / m0[:, None],
            means=(mix.means if anchors is None else np.asarray(anchors))[ids],
            covs=mix.covs[ids],
            lambdas=mix.lambdas[ids],
            axes=mix.axes[ids],
        )

    @classmethod
    def from_arrays(cls, pi_star, mu_star, means, covs) -> VirtualPointSet:
        mix = Mixture(np.ones(len(pi_star)), means, covs)
        return cls(np.arange(len(pi_star)), np.asarray(pi_star, float), np.asarray(mu_star, float).reshape(-1, 3),
                   mix.means, mix.covs, mix.lambdas, mix.axes)

    def scaled(self, s: float) -> VirtualPointSet:
        return VirtualPointSet(self.ids, self.pi_star, s * self.mu_star, s * self.means,
                               s * s * self.covs, s * s * self.lambdas, self.axes)


def _plane_terms(vps: VirtualPointSet, t: RigidTransform | None, lambdas) -> np.ndarray:
    p = vps.mu_star if t is None else t.apply(vps.mu_star)
    proj = np.einsum("jli,ji->jl", vps.axes, p - vps.means)
    return vps.pi_star[:, None] * proj**2 / lambdas


def criterion(vps: VirtualPointSet, t: RigidTransform | None = None) -> float:
    """Weighted sum of squared Mahalanobis distances, via the eigen expansion."""
    if len(vps) == 0:
        return 0.0
    if np.any(vps.lambdas <= 0):
        raise DegenerateGeometryError("zero covariance eigenvalue")
    return float(_plane_terms(vps, t, vps.lambdas).sum())


def _floored(vps: VirtualPointSet) -> np.ndarray:
    return np.maximum(vps.lambdas, EIG_FLOOR * vps.lambdas[:, :1])


def linearized_system(vps: VirtualPointSet, t: RigidTransform | None = None, center=None):
    """Rows ``w [ (p - c) x n, n ]`` and right side ``w n^T (mu - p)`` at ``p = T(mu*)``.

    Unknowns are a rotation vector about ``center`` followed by a translation.
    """
    p = vps.mu_star if t is None else t.apply(vps.mu_star)
    if center is None:
        center = vps.pi_star @ p / vps.pi_star.sum()
    w = np.sqrt(vps.pi_star[:, None] / _floored(vps))  # (J, 3)
    n = vps.axes  # (J, 3 axes, 3)
    q = np.broadcast_to((p - center)[:, None, :], n.shape)
    a = np.concatenate([np.cross(q, n), n], axis=2) * w[:, :, None]
    b = w * np.einsum("jli,ji->jl", n, vps.means - p)
    return a.reshape(-1, 6), b.reshape(-1), center


@dataclass(frozen=True)
class MStepSolution:
    omega: np.ndarray
    translation: np.ndarray
    delta: RigidTransform
    criterion_before: float
    criterion_after: float
    condition_estimate: float
    iterations: int = 1


def _solve_normal(a: np.ndarray, b: np.ndarray):
    h = a.T @ a
    g = a.T @ b
    diag = np.diag(h)
    if np.any(diag <= 0) or not np.all(np.isfinite(h)):
        raise DegenerateGeometryError("unobservable degree of freedom")
    s = 1.0 / np.sqrt(diag)
    hs = h * s[:, None] * s[None, :]
    ev = np.linalg.eigvalsh(hs)
    cond = float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
    if not cond <= MAX_CONDITION:
        raise DegenerateGeometryError(f"normal equations ill-conditioned (cond ~ {cond:.3g})")
    x = s * cho_solve(cho_factor(hs), s * g)
    return x, cond


def _step_transform(x: np.ndarray, center: np.ndarray) -> RigidTransform:
    r = small_angle_rotation(x[:3])
    return RigidTransform(r, center - r @ center + x[3:])


def solve_mstep(vps: VirtualPointSet, max_iterations: int = 10, tol: float = 1e-12) -> MStepSolution:
    """Minimize the criterion over a rigid correction ``delta`` (applied after the current pose).

    The first iteration is the single weighted point-to-plane linear solve under
    the small-angle linearization. Further iterations re-linearize at the updated
    estimate (Gauss-Newton) until the step falls below ``tol``; steps that would
    increase the objective are halved. ``max_iterations=1`` gives the plain
    one-shot solve.
    """
    if len(vps) < 3:
        raise DegenerateGeometryError(f"need at least 3 contributing components, got {len(vps)}")
    lam = _floored(vps)
    scale = max(float(np.abs(vps.mu_star).max()), float(np.sqrt(vps.lambdas[:, 0].max())), 1e-300)

    def objective(t):
        return float(_plane_terms(vps, t, lam).sum())

    before = criterion(vps)
    delta = RigidTransform.identity()
    current = objective(delta)
    cond = np.nan
    it = 0
    for it in range(1, max_iterations + 1):
        a, b, center = linearized_system(vps, delta)
        x, cond = _solve_normal(a, b)
        if np.linalg.norm(x[:3]) < tol and np.linalg.norm(x[3:]) < tol * scale:
            break
        for _ in range(30):
            cand = _step_transform(x, center).compose(delta)
            value = objective(cand)
            if value <= current:
                break
            x = 0.5 * x
        else:
            break
        delta, current = cand, value
    return MStepSolution(
        omega=rotation_log(delta.rotation),
        translation=delta.translation.copy(),
        delta=delta,
        criterion_before=before,
        criterion_after=criterion(vps, delta),
        condition_estimate=cond,
        iterations=it,
    )
