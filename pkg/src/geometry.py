"""SE3 / Sim3 arithmetic and trajectory alignment.

Frames and units
----------------
Rotations are stored as unit quaternions in scipy's (x, y, z, w) order and
translations in meters. Tangent vectors are ordered (rotation, translation) and
every perturbation is applied on the right: ``T <- T * exp(delta)``.

Numerical stability notes
-------------------------
exp/log switch to their first-order series below ``SMALL_ANGLE``. The Jacobian
coefficients lose digits to cancellation much earlier, so they switch to a
Taylor series below ``SERIES_ANGLE``.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from src.utils.errors import DegenerateGeometry, TooFewPoses, ZeroVariance

logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-8
SERIES_ANGLE = 1e-2
RANK_TOLERANCE = 1e-12

ArrayLike = Union[np.ndarray, Sequence[float]]


def hat(v: ArrayLike) -> np.ndarray:
    """Skew-symmetric matrix with hat(a) @ b == cross(a, b)."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def hat_batch(v: np.ndarray) -> np.ndarray:
    """hat() over the last axis of an (..., 3) array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _so3_coefficients(theta: float) -> Tuple[float, float, float]:
    """(a, b, c) with J = I + a*W + b*W^2 and J^-1 = I - W/2 + c*W^2, W = hat(phi)."""
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        return a, b, c
    s, co = np.sin(theta), np.cos(theta)
    a = (1.0 - co) / theta ** 2
    b = (theta - s) / theta ** 3
    c = (1.0 - theta * s / (2.0 * (1.0 - co))) / theta ** 2
    return a, b, c


def so3_left_jacobian(phi: ArrayLike) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    a, b, _ = _so3_coefficients(float(np.linalg.norm(phi)))
    w = hat(phi)
    return np.eye(3) + a * w + b * (w @ w)


def so3_left_jacobian_inverse(phi: ArrayLike) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    _, _, c = _so3_coefficients(float(np.linalg.norm(phi)))
    w = hat(phi)
    return np.eye(3) - 0.5 * w + c * (w @ w)


def _coupling_block(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Translation/rotation coupling block of the SE3 left Jacobian."""
    theta = float(np.linalg.norm(phi))
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        a = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        b = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, co = np.sin(theta), np.cos(theta)
        a = (theta - s) / theta ** 3
        b = (theta ** 2 + 2.0 * co - 2.0) / (2.0 * theta ** 4)
        c = (2.0 * theta - 3.0 * s + theta * co) / (2.0 * theta ** 5)
    p = hat(phi)
    r = hat(rho)
    pr = p @ r
    rp = r @ p
    prp = pr @ p
    return (0.5 * r
            + a * (pr + rp + prp)
            + b * (p @ pr + rp @ p - 3.0 * prp)
            + c * (prp @ p + p @ prp))


@dataclass(frozen=True, eq=False)
class Twist:
    """Element of se(3): rotation part (rad) and translation part (m)."""
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3).copy())
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3).copy())

    @classmethod
    def from_vector(cls, vector: ArrayLike) -> "Twist":
        v = np.asarray(vector, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3) mapping p to R p + t."""
    quaternion: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError(f"Invalid quaternion: {q}")
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"Invalid translation: {t}")
        object.__setattr__(self, "quaternion", q / norm)
        object.__setattr__(self, "translation", t.copy())

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_rotation(cls, rotation: Rotation, translation: ArrayLike = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation.as_quat(), translation)

    @classmethod
    def from_matrix(cls, rotation_matrix: np.ndarray, translation: ArrayLike = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_matrix(rotation_matrix).as_quat(), translation)

    @classmethod
    def from_translation(cls, translation: ArrayLike) -> "RigidTransform":
        return cls(translation=translation)

    @cached_property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.quaternion)

    @cached_property
    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        return float(np.linalg.norm(self.rotation.as_rotvec()))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def apply(self, points: ArrayLike) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation_matrix.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        rotation = self.rotation * other.rotation
        return RigidTransform(rotation.as_quat(), self.rotation_matrix @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rotation = self.rotation.inv()
        return RigidTransform(rotation.as_quat(), -(self.rotation_matrix.T @ self.translation))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def with_translation(self, translation: ArrayLike) -> "RigidTransform":
        return RigidTransform(self.quaternion, translation)

    def __repr__(self) -> str:
        return f"RigidTransform(quaternion={np.round(self.quaternion, 6)}, translation={np.round(self.translation, 6)})"


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """Element of Sim(3) mapping p to s R p + t."""
    scale: float
    rigid: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0.0:
            raise ValueError(f"Similarity scale must be positive, got {self.scale}")

    def apply(self, points: ArrayLike) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.rigid.rotation_matrix.T) + self.rigid.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b: compose(a, b)(p) == a(b(p))."""
    return a.compose(b)


def inverse(transform: RigidTransform) -> RigidTransform:
    return transform.inverse()


def se3_exp(xi: Union[Twist, ArrayLike]) -> RigidTransform:
    v = xi.vector if isinstance(xi, Twist) else np.asarray(xi, dtype=float).reshape(6)
    omega, rho = v[:3], v[3:]
    if not np.all(np.isfinite(v)):
        raise ValueError(f"Non-finite twist: {v}")
    theta = float(np.linalg.norm(omega))
    if theta < SMALL_ANGLE:
        rotation = Rotation.from_quat(np.append(0.5 * omega, 1.0))
        jacobian = np.eye(3) + 0.5 * hat(omega)
    else:
        rotation = Rotation.from_rotvec(omega)
        jacobian = so3_left_jacobian(omega)
    return RigidTransform(rotation.as_quat(), jacobian @ rho)


def se3_log(transform: RigidTransform) -> Twist:
    omega = transform.rotation.as_rotvec()
    theta = float(np.linalg.norm(omega))
    if theta < SMALL_ANGLE:
        jacobian_inv = np.eye(3) - 0.5 * hat(omega)
    else:
        jacobian_inv = so3_left_jacobian_inverse(omega)
    return Twist(omega, jacobian_inv @ transform.translation)


def se3_adjoint(transform: RigidTransform) -> np.ndarray:
    """Ad_T with T exp(xi) T^-1 == exp(Ad_T xi)."""
    r = transform.rotation_matrix
    adj = np.zeros((6, 6))
    adj[:3, :3] = r
    adj[3:, 3:] = r
    adj[3:, :3] = hat(transform.translation) @ r
    return adj


def se3_left_jacobian(xi: ArrayLike) -> np.ndarray:
    v = np.asarray(xi, dtype=float).reshape(6)
    j = so3_left_jacobian(v[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[3:, :3] = _coupling_block(v[3:], v[:3])
    return out


def se3_left_jacobian_inverse(xi: ArrayLike) -> np.ndarray:
    v = np.asarray(xi, dtype=float).reshape(6)
    j_inv = so3_left_jacobian_inverse(v[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = j_inv
    out[3:, 3:] = j_inv
    out[3:, :3] = -j_inv @ _coupling_block(v[3:], v[:3]) @ j_inv
    return out


def se3_right_jacobian_inverse(xi: ArrayLike) -> np.ndarray:
    """log(exp(xi) exp(d)) ~= xi + Jr^-1(xi) d."""
    return se3_left_jacobian_inverse(-np.asarray(xi, dtype=float).reshape(6))


def _so3_coefficients_batch(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """_so3_coefficients over an array of angles."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, co = np.sin(t), np.cos(t)
    a = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - co) / t ** 2)
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - s) / t ** 3)
    c = np.where(small, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
                 (1.0 - t * s / (2.0 * (1.0 - co))) / t ** 2)
    return a, b, c


def _coupling_block_batch(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, co = np.sin(t), np.cos(t)
    a = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - s) / t ** 3)
    b = np.where(small, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0, (t ** 2 + 2.0 * co - 2.0) / (2.0 * t ** 4))
    c = np.where(small, 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
                 (2.0 * t - 3.0 * s + t * co) / (2.0 * t ** 5))
    a, b, c = a[:, None, None], b[:, None, None], c[:, None, None]
    p = hat_batch(phi)
    r = hat_batch(rho)
    pr = p @ r
    rp = r @ p
    prp = pr @ p
    return (0.5 * r
            + a * (pr + rp + prp)
            + b * (p @ pr + rp @ p - 3.0 * prp)
            + c * (prp @ p + p @ prp))


def se3_log_batch(rotations: Rotation, translations: np.ndarray) -> np.ndarray:
    """(n, 6) tangent vectors of n transforms given as a stacked Rotation and (n, 3) translations."""
    omega = np.atleast_2d(rotations.as_rotvec())
    _, _, c = _so3_coefficients_batch(np.linalg.norm(omega, axis=1))
    w = hat_batch(omega)
    jacobian_inv = np.eye(3) - 0.5 * w + c[:, None, None] * (w @ w)
    rho = np.einsum("nij,nj->ni", jacobian_inv, np.atleast_2d(translations))
    return np.concatenate([omega, rho], axis=1)


def se3_left_jacobian_inverse_batch(xi: np.ndarray) -> np.ndarray:
    """(n, 6, 6) stack of se3_left_jacobian_inverse."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    phi, rho = xi[:, :3], xi[:, 3:]
    _, _, c = _so3_coefficients_batch(np.linalg.norm(phi, axis=1))
    w = hat_batch(phi)
    j_inv = np.eye(3) - 0.5 * w + c[:, None, None] * (w @ w)
    out = np.zeros((len(xi), 6, 6))
    out[:, :3, :3] = j_inv
    out[:, 3:, 3:] = j_inv
    out[:, 3:, :3] = -j_inv @ _coupling_block_batch(rho, phi) @ j_inv
    return out


def se3_adjoint_batch(rotations: np.ndarray, translations: np.ndarray) -> np.ndarray:
    """(n, 6, 6) adjoints from (n, 3, 3) rotation matrices and (n, 3) translations."""
    adj = np.zeros((len(rotations), 6, 6))
    adj[:, :3, :3] = rotations
    adj[:, 3:, 3:] = rotations
    adj[:, 3:, :3] = hat_batch(translations) @ rotations
    return adj


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def rotation_error(a: RigidTransform, b: RigidTransform) -> float:
    return a.inverse().compose(b).angle


def _as_positions(poses: Union[np.ndarray, Iterable]) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses.reshape(-1, 3).astype(float)
    items = list(poses)
    if items and isinstance(items[0], RigidTransform):
        return np.array([p.translation for p in items], dtype=float)
    return np.asarray(items, dtype=float).reshape(-1, 3)


def _umeyama(estimate, reference, with_scale: bool) -> Tuple[float, np.ndarray, np.ndarray]:
    x = _as_positions(estimate)
    y = _as_positions(reference)
    if len(x) != len(y):
        raise ValueError(f"Sequences differ in length: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise TooFewPoses(f"Alignment needs at least 3 poses, got {len(x)}")

    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    var_x = float(np.mean(np.sum(xc ** 2, axis=1)))
    if with_scale and var_x < 1e-18:
        raise ZeroVariance("Estimate points are coincident")

    sigma = yc.T @ xc / len(x)
    u, d, vt = np.linalg.svd(sigma)
    if d[0] <= 0.0 or d[1] <= RANK_TOLERANCE * d[0]:
        raise DegenerateGeometry(f"Point covariance is rank-deficient (singular values {d})")

    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s) / var_x) if with_scale else 1.0
    translation = mu_y - scale * rotation @ mu_x
    return scale, rotation, translation


def align_se3(estimate, reference) -> RigidTransform:
    """Rigid transform T minimizing sum |reference_i - T(estimate_i)|^2."""
    _, rotation, translation = _umeyama(estimate, reference, with_scale=False)
    return RigidTransform.from_matrix(rotation, translation)


def align_sim3(estimate, reference) -> SimilarityTransform:
    """Similarity S minimizing sum |reference_i - S(estimate_i)|^2, uniform weights."""
    scale, rotation, translation = _umeyama(estimate, reference, with_scale=True)
    return SimilarityTransform(scale, RigidTransform.from_matrix(rotation, translation))


def associate(estimate_times: ArrayLike, reference_times: ArrayLike,
              max_dt: float = 0.02) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour timestamp association; unmatched poses are dropped."""
    est = np.asarray(estimate_times, dtype=float)
    ref = np.asarray(reference_times, dtype=float)
    if len(est) == 0 or len(ref) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)

    right = np.clip(np.searchsorted(ref, est), 0, len(ref) - 1)
    left = np.clip(right - 1, 0, len(ref) - 1)
    pick_left = np.abs(ref[left] - est) <= np.abs(ref[right] - est)
    nearest = np.where(pick_left, left, right)
    keep = np.abs(ref[nearest] - est) <= max_dt

    est_idx = np.nonzero(keep)[0]
    ref_idx = nearest[keep]
    _, first = np.unique(ref_idx, return_index=True)
    first.sort()
    dropped = len(est) - len(first)
    if dropped:
        logger.debug(f"Association dropped {dropped} of {len(est)} poses")
    return est_idx[first], ref_idx[first]
