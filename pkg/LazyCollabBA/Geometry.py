import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

DEPTH_EPS: float = 1e-8
SMALL_ANGLE: float = 1e-4

Point3 = np.ndarray
"""A shared map point, a 3-vector in meters."""


@dataclass(frozen=True)
class Pose:
    """
    Rigid transform mapping world coordinates into the camera frame,
    `p_cam = R @ y + t`.

    Attributes:
        rotation (np.ndarray): Unit quaternion, scalar first `(w, x, y, z)`.
        translation (np.ndarray): Translation in meters.
    """
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotationMatrix(self) -> np.ndarray:
        return quaternionsToMatrices(self.rotation[None])[0]

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, `-R^T t`."""
        return -self.rotationMatrix().T @ self.translation


@dataclass(frozen=True)
class PoseTangent:
    omega: np.ndarray
    vee: np.ndarray

    def asVector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.vee])

    @classmethod
    def fromVector(cls, xi: np.ndarray) -> 'PoseTangent':
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3].copy(), xi[3:6].copy())


@dataclass(frozen=True)
class CameraIntrinsics:
    """
    Pinhole intrinsics with a fixed two-term radial distortion.  Never
    optimized.
    """
    fx: float
    fy: float
    cx: float = 0.0
    cy: float = 0.0
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(
                f'Focal lengths must be positive, got fx={self.fx}, '
                f'fy={self.fy}.')

    def asArray(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy,
                         self.k1, self.k2])

    @classmethod
    def fromArray(cls, values: np.ndarray) -> 'CameraIntrinsics':
        return cls(*map(float, values))


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices for a stack of 3-vectors, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quaternionsToMatrices(quaternions: np.ndarray) -> np.ndarray:
    quaternions = np.asarray(quaternions, dtype=float).reshape(-1, 4)
    if len(quaternions) == 0:
        return np.zeros((0, 3, 3))
    return Rotation.from_quat(quaternions, scalar_first=True).as_matrix()


def matricesToQuaternions(matrices: np.ndarray) -> np.ndarray:
    matrices = np.asarray(matrices, dtype=float).reshape(-1, 3, 3)
    if len(matrices) == 0:
        return np.zeros((0, 4))
    return Rotation.from_matrix(matrices).as_quat(scalar_first=True)


def so3LeftJacobian(omega: np.ndarray) -> np.ndarray:
    """
    The `V(omega)` block of the SE(3) exponential,
    `I + (1 - cos θ)/θ² [ω]× + (θ - sin θ)/θ³ [ω]×²`, with series
    coefficients below `SMALL_ANGLE`.
    """
    omega = np.asarray(omega, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(omega, axis=1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    theta2 = theta * theta
    a = np.where(small, 0.5 - theta2 / 24.0,
                 (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0,
                 (safe - np.sin(safe)) / (safe * safe * safe))
    omegaHat = skew(omega)
    return (np.eye(3) + a[:, None, None] * omegaHat
            + b[:, None, None] * (omegaHat @ omegaHat))


def se3RetractBatch(quaternions: np.ndarray, translations: np.ndarray,
                    xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Right-perturbation exponential retraction `T ∘ exp(xi)` for a stack of
    poses.

    Args:
        quaternions (np.ndarray): (n, 4) scalar-first unit quaternions.
        translations (np.ndarray): (n, 3) translations.
        xi (np.ndarray): (n, 6) tangents ordered `(omega, vee)`.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Retracted quaternions (renormalized)
            and translations.  Rows with an exactly zero tangent are
            returned untouched.
    """
    quaternions = np.asarray(quaternions, dtype=float).reshape(-1, 4)
    translations = np.asarray(translations, dtype=float).reshape(-1, 3)
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    if len(xi) == 0:
        return quaternions.copy(), translations.copy()

    omega, vee = xi[:, :3], xi[:, 3:]
    base = Rotation.from_quat(quaternions, scalar_first=True)
    newQuaternions = (base * Rotation.from_rotvec(omega)).as_quat(
        scalar_first=True)
    newQuaternions /= np.linalg.norm(newQuaternions, axis=1, keepdims=True)

    stepTranslation = np.einsum('nij,nj->ni', so3LeftJacobian(omega), vee)
    newTranslations = translations + base.apply(stepTranslation)

    still = ~np.any(xi != 0.0, axis=1)
    newQuaternions[still] = quaternions[still]
    newTranslations[still] = translations[still]
    return newQuaternions, newTranslations


def se3Retract(pose: Pose, xi: PoseTangent) -> Pose:
    vector = xi.asVector()
    if not np.all(np.isfinite(vector)):
        raise ValueError(f'Tangent must be finite, got {vector}.')
    quaternions, translations = se3RetractBatch(
        pose.rotation[None], pose.translation[None], vector[None])
    return Pose(quaternions[0], translations[0])


def _normalizedCoordinates(cameraPoints: np.ndarray) -> \
        Tuple[np.ndarray, np.ndarray]:
    depth = cameraPoints[:, 2]
    valid = depth > DEPTH_EPS
    safeDepth = np.where(valid, depth, 1.0)
    return cameraPoints[:, :2] / safeDepth[:, None], valid


def projectBatch(rotations: np.ndarray, translations: np.ndarray,
                 intrinsics: np.ndarray, points: np.ndarray) -> \
        Tuple[np.ndarray, np.ndarray]:
    """
    Pinhole projection with radial distortion for stacked observations.

    Args:
        rotations (np.ndarray): (n, 3, 3) world-to-camera rotations.
        translations (np.ndarray): (n, 3) translations.
        intrinsics (np.ndarray): (n, 6) rows of `fx, fy, cx, cy, k1, k2`.
        points (np.ndarray): (n, 3) world points.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (n, 2) pixels and the (n,) validity
            flags; invalid rows (depth at or below `DEPTH_EPS`) hold zeros.
    """
    cameraPoints = np.einsum('nij,nj->ni', rotations, points) + translations
    normalized, valid = _normalizedCoordinates(cameraPoints)
    r2 = np.sum(normalized * normalized, axis=1)
    distortion = 1.0 + intrinsics[:, 4] * r2 + intrinsics[:, 5] * r2 * r2
    pixels = np.stack([
        intrinsics[:, 0] * distortion * normalized[:, 0] + intrinsics[:, 2],
        intrinsics[:, 1] * distortion * normalized[:, 1] + intrinsics[:, 3],
    ], axis=1)
    pixels[~valid] = 0.0
    return pixels, valid


def projectJacobiansBatch(rotations: np.ndarray, translations: np.ndarray,
                          intrinsics: np.ndarray, points: np.ndarray) -> \
        Tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of the residual `r = q - π(T, y)` with respect to the pose
    tangent `(omega, vee)` under `se3RetractBatch` and the point
    coordinates.  Rows for invalid projections are zero.
    """
    cameraPoints = np.einsum('nij,nj->ni', rotations, points) + translations
    normalized, valid = _normalizedCoordinates(cameraPoints)
    depth = np.where(valid, cameraPoints[:, 2], 1.0)
    xn, yn = normalized[:, 0], normalized[:, 1]
    fx, fy, k1, k2 = (intrinsics[:, 0], intrinsics[:, 1],
                      intrinsics[:, 4], intrinsics[:, 5])

    r2 = xn * xn + yn * yn
    distortion = 1.0 + k1 * r2 + k2 * r2 * r2
    distortionSlope = 2.0 * (k1 + 2.0 * k2 * r2)

    # d(pixel)/d(normalized)
    jDistort = np.empty((len(points), 2, 2))
    jDistort[:, 0, 0] = fx * (distortion + xn * distortionSlope * xn)
    jDistort[:, 0, 1] = fx * xn * distortionSlope * yn
    jDistort[:, 1, 0] = fy * yn * distortionSlope * xn
    jDistort[:, 1, 1] = fy * (distortion + yn * distortionSlope * yn)

    # d(normalized)/d(camera point)
    jNormalize = np.zeros((len(points), 2, 3))
    jNormalize[:, 0, 0] = 1.0 / depth
    jNormalize[:, 0, 2] = -xn / depth
    jNormalize[:, 1, 1] = 1.0 / depth
    jNormalize[:, 1, 2] = -yn / depth

    jProjection = jDistort @ jNormalize

    # d(camera point)/d(omega, vee) = [-R [y]x, R]
    jCamera = np.concatenate([-rotations @ skew(points), rotations], axis=2)

    jPose = -(jProjection @ jCamera)
    jPoint = -(jProjection @ rotations)
    jPose[~valid] = 0.0
    jPoint[~valid] = 0.0
    return jPose, jPoint


def project(pose: Pose, intr: CameraIntrinsics, point: Point3) -> \
        Tuple[np.ndarray, bool]:
    pixels, valid = projectBatch(
        pose.rotationMatrix()[None], pose.translation[None],
        intr.asArray()[None], np.asarray(point, dtype=float)[None])
    return pixels[0], bool(valid[0])


def projectJacobians(pose: Pose, intr: CameraIntrinsics, point: Point3) -> \
        Tuple[np.ndarray, np.ndarray]:
    """
    Single-observation form of `projectJacobiansBatch`.  Callers must gate
    on the validity flag of `project`; for a behind-camera point the result
    is meaningless.
    """
    jPose, jPoint = projectJacobiansBatch(
        pose.rotationMatrix()[None], pose.translation[None],
        intr.asArray()[None], np.asarray(point, dtype=float)[None])
    return jPose[0], jPoint[0]


def pointResidualJacobiansBatch(rotations: np.ndarray,
                                measurements: np.ndarray) -> \
        Tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of the point-cloud residual `y - R q - t`: `R [q]x` for the
    rotation part, `-R` for translation and the identity for the point.
    """
    jPose = np.concatenate([rotations @ skew(measurements), -rotations],
                           axis=2)
    jPoint = np.broadcast_to(np.eye(3), (len(measurements), 3, 3)).copy()
    return jPose, jPoint
