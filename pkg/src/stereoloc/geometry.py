"""Stereo camera model, SE(3) transforms, and the planar pose parameterization.

Conventions: image coordinates are (u, v) with u along columns and v along
rows; disparity is u_left - u_right in pixels; 3D points are in the camera
frame with z pointing into the scene (metres).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDepth, InvalidDisparity

# Disparities at or below this are treated as invalid rather than producing
# astronomically deep points.
MIN_DISPARITY = 1e-6

ORTHONORMALITY_TOL = 1e-9


def _frozen_array(a, shape) -> np.ndarray:
    out = np.array(a, dtype=float)
    if out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    """Rectified stereo rig: focal lengths and principal point in pixels,
    baseline in metres."""

    fu: float
    fv: float
    cu: float
    cv: float
    b: float

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError("focal lengths must be positive")
        if not self.b > 0:
            raise ValueError("baseline must be positive")


@dataclass(frozen=True)
class StereoObservation:
    """Left-image pixel coordinates plus disparity."""

    u_l: float
    v_l: float
    d: float

    @property
    def valid(self) -> bool:
        return self.d > MIN_DISPARITY


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: p_out = C @ p_in + r."""

    C: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "C", _frozen_array(self.C, (3, 3)))
        object.__setattr__(self, "r", _frozen_array(self.r, (3,)))
        err = np.abs(self.C @ self.C.T - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise ValueError(f"rotation not orthonormal (max error {err:.2e})")
        det = np.linalg.det(self.C)
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError(f"rotation determinant {det} != +1")

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        T = np.eye(4)
        T[:3, :3] = self.C
        T[:3, 3] = self.r
        return T


def wrap_angle(gamma: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    g = math.remainder(float(gamma), 2.0 * math.pi)
    if g <= -math.pi:
        g += 2.0 * math.pi
    return g


@dataclass(frozen=True)
class PlanarPose:
    """3-DOF planar motion: longitudinal alpha, lateral beta (metres),
    heading gamma (radians, normalized to (-pi, pi])."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", wrap_angle(self.gamma))

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])


def rot_z(gamma: float) -> np.ndarray:
    c, s = math.cos(gamma), math.sin(gamma)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def planar_to_se3(pp: PlanarPose) -> SE3Pose:
    """Embed a planar pose as a z-axis rotation plus in-plane translation."""
    return SE3Pose(rot_z(pp.gamma), np.array([pp.alpha, pp.beta, 0.0]))


def se3_to_planar(T: SE3Pose) -> PlanarPose:
    """Extract (x, y, yaw) from a transform; drops any out-of-plane motion."""
    return PlanarPose(T.r[0], T.r[1], math.atan2(T.C[1, 0], T.C[0, 0]))


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """a after b: (a*b)(p) = a(b(p))."""
    return SE3Pose(a.C @ b.C, a.C @ b.r + a.r)


def inverse(T: SE3Pose) -> SE3Pose:
    return SE3Pose(T.C.T, -T.C.T @ T.r)


def apply(T: SE3Pose, p: np.ndarray) -> np.ndarray:
    """Transform a 3-vector or an (N, 3) stack of points."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return T.C @ p + T.r
    return p @ T.C.T + T.r


def project(p, K: CameraIntrinsics) -> StereoObservation:
    """Map a camera-frame 3D point to left-image pixel plus disparity."""
    x, y, z = np.asarray(p, dtype=float)
    if z <= 0:
        raise DegenerateDepth(f"point depth {z} is not positive")
    return StereoObservation(
        K.fu * x / z + K.cu,
        K.fv * y / z + K.cv,
        K.fu * K.b / z,
    )


def project_points(P: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Vectorized project: (N, 3) points -> (N, 3) array of (u_l, v_l, d)."""
    P = np.asarray(P, dtype=float)
    z = P[:, 2]
    if np.any(z <= 0):
        raise DegenerateDepth("all point depths must be positive")
    return np.stack(
        [K.fu * P[:, 0] / z + K.cu, K.fv * P[:, 1] / z + K.cv, K.fu * K.b / z],
        axis=1,
    )


def backproject(y, K: CameraIntrinsics) -> np.ndarray:
    """Inverse stereo model: (u_l, v_l, d) -> camera-frame 3D point."""
    if isinstance(y, StereoObservation):
        u, v, d = y.u_l, y.v_l, y.d
    else:
        u, v, d = (float(c) for c in y)
    if d <= MIN_DISPARITY:
        raise InvalidDisparity(f"disparity {d} <= {MIN_DISPARITY}")
    s = K.b / d
    return np.array([s * (u - K.cu), s * (K.fu / K.fv) * (v - K.cv), s * K.fu])


def backproject_points(Y: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Vectorized backproject: (N, 3) observations -> (N, 3) points."""
    Y = np.asarray(Y, dtype=float)
    d = Y[:, 2]
    if np.any(d <= MIN_DISPARITY):
        raise InvalidDisparity("all disparities must exceed the validity floor")
    s = K.b / d
    return np.stack(
        [s * (Y[:, 0] - K.cu), s * (K.fu / K.fv) * (Y[:, 1] - K.cv), s * K.fu],
        axis=1,
    )


def backproject_jacobian(y, K: CameraIntrinsics) -> np.ndarray:
    """Analytic 3x3 Jacobian of backproject w.r.t. (u_l, v_l, d)."""
    if isinstance(y, StereoObservation):
        u, v, d = y.u_l, y.v_l, y.d
    else:
        u, v, d = (float(c) for c in y)
    if d <= MIN_DISPARITY:
        raise InvalidDisparity(f"disparity {d} <= {MIN_DISPARITY}")
    p = backproject((u, v, d), K)
    J = np.zeros((3, 3))
    J[0, 0] = K.b / d
    J[1, 1] = K.b * K.fu / (K.fv * d)
    J[:, 2] = -p / d
    return J
