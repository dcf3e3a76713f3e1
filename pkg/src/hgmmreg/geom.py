"""Small 3D math layer: symmetric eigendecomposition, rigid transforms, rotation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SO3_TOL = 1e-10


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class EigenDecomp3:
    """Eigenvalues sorted descending and matching unit axes (rows of ``axes``)."""

    lambdas: np.ndarray
    axes: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.axes.T * self.lambdas) @ self.axes


def _check_sym(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise GeometryError(f"expected (..., 3, 3) matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise GeometryError("non-finite matrix entry")
    scale = np.linalg.norm(m, axis=(-2, -1))
    asym = np.linalg.norm(m - np.swapaxes(m, -1, -2), axis=(-2, -1))
    if np.any(asym > 1e-6 * np.maximum(scale, np.finfo(float).tiny)):
        raise GeometryError("matrix is not symmetric")
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def eig_sym3_batch(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`eig_sym3` over a stack of matrices.

    Returns ``(lambdas, axes)`` with shapes ``(K, 3)`` and ``(K, 3, 3)``; ``axes[k, l]``
    is the unit eigenvector for ``lambdas[k, l]``. Axes form a right-handed basis.
    """
    m = _check_sym(m)
    w, v = np.linalg.eigh(m)
    w = w[..., ::-1]
    axes = np.swapaxes(v[..., ::-1], -1, -2).copy()
    axes[..., 2, :] = np.cross(axes[..., 0, :], axes[..., 1, :])
    fro = np.linalg.norm(m, axis=(-2, -1))
    floor = -1e-10 * fro
    if np.any(w < floor[..., None]):
        raise GeometryError("matrix has a significantly negative eigenvalue")
    # Rayleigh quotients in extended precision: eigh's eigenvalues carry an
    # absolute error of ~eps*||m||, which is large relative to a tiny lambda_3,
    # while the quotient's error is quadratic in the (small) axis error
    ld = np.longdouble
    a = axes.astype(ld)
    rq = np.einsum("...li,...ij,...lj->...l", a, m.astype(ld), a).astype(float)
    w = np.where(np.abs(rq - w) <= 1e-6 * fro[..., None], rq, w)
    order = np.argsort(-w, axis=-1, kind="stable")
    if np.any(order != np.arange(3)):
        w = np.take_along_axis(w, order, axis=-1)
        axes = np.take_along_axis(axes, order[..., :, None], axis=-2)
        axes[..., 2, :] = np.cross(axes[..., 0, :], axes[..., 1, :])
    w = np.maximum(w, 0.0)
    return w, axes


def eig_sym3(m) -> EigenDecomp3:
    """Eigendecomposition of a symmetric 3x3 matrix.

    Small negative eigenvalues (above ``-1e-10 * ||m||_F``) are clamped to zero;
    anything more negative means a corrupted covariance and raises.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise GeometryError(f"expected a 3x3 matrix, got {m.shape}")
    w, axes = eig_sym3_batch(m[None])
    return EigenDecomp3(w[0], axes[0])


def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def small_angle_rotation(omega) -> np.ndarray:
    """Rotation matrix for the rotation vector ``omega`` (exponential map).

    Agrees with ``I + [omega]_x`` to first order and is always a proper rotation.
    """
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    if theta == 0.0:
        return np.eye(3)
    k = hat(omega / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rotation_log(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`small_angle_rotation` (rotation vector of ``r``)."""
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    axial = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-6:
        return 0.5 * axial
    if np.pi - theta < 1e-6:
        # near pi: take the dominant column of (R + I) / 2 = n n^T
        b = 0.5 * (r + np.eye(3))
        k = int(np.argmax(np.diag(b)))
        n = b[:, k] / np.sqrt(b[k, k])
        return theta * n
    return theta / (2.0 * np.sin(theta)) * axial


def rotation_angle(r: np.ndarray) -> float:
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_xyz_to_matrix(angles) -> np.ndarray:
    """Intrinsic X-Y-Z Euler angles (radians) to ``Rx @ Ry @ Rz``."""
    a, b, c = angles
    return rot_x(a) @ rot_y(b) @ rot_z(c)


def matrix_to_euler_xyz(r: np.ndarray) -> np.ndarray:
    """Intrinsic X-Y-Z Euler angles (radians) of ``r = Rx(a) Ry(b) Rz(c)``."""
    sb = np.clip(r[0, 2], -1.0, 1.0)
    b = np.arcsin(sb)
    if abs(abs(b) - np.pi / 2) < 1e-9:
        # gimbal lock: only a +/- c is observable, put it all in a
        a = np.arctan2(r[1, 0], r[1, 1])
        c = 0.0
    else:
        a = np.arctan2(-r[1, 2], r[2, 2])
        c = np.arctan2(-r[0, 1], r[0, 0])
    return np.array([a, b, c])


def rotation_error_deg(est: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute intrinsic X-Y-Z Euler angle of ``gt^T est``, in degrees."""
    r_rel = np.asarray(gt).T @ np.asarray(est)
    return float(np.degrees(np.mean(np.abs(matrix_to_euler_xyz(r_rel)))))


def _check_rotation(r: np.ndarray) -> None:
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise GeometryError("rotation must be a finite 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > SO3_TOL or abs(np.linalg.det(r) - 1.0) > SO3_TOL:
        raise GeometryError("rotation is not in SO(3)")


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        _check_rotation(r)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, omega, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(small_angle_rotation(omega), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform a single point or an ``(N, 3)`` array."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        r = self.rotation @ other.rotation
        return RigidTransform(_reorthonormalize(r), self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # products of many rotations drift off SO(3); project back with an SVD
    if np.abs(r.T @ r - np.eye(3)).max() < 1e-13:
        return r
    u, _, vt = np.linalg.svd(r)
    q = u @ vt
    if np.linalg.det(q) < 0:
        u[:, -1] *= -1
        q = u @ vt
    return q


def se3_apply(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)
