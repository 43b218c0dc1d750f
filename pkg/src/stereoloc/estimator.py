"""Weighted rigid alignment of matched 3D point pairs, with ground-truth
outlier gating for training and RANSAC for inference.

The alignment minimizes sum_i w_i * ||C @ p_s_i + r - p_t_i||^2 via the
closed form: weighted centroid subtraction, SVD of the weighted
cross-covariance, and the determinant sign correction that forces a proper
rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, InsufficientMatches, LocalizationFailure
from .geometry import PlanarPose, SE3Pose, planar_to_se3

# Second singular value of the cross-covariance below this fraction of the
# first means the points are effectively collinear.
COLLINEARITY_TOL = 1e-9


@dataclass(frozen=True)
class AlignmentProblem:
    """Matched source/target 3D points with per-pair weights in [0, 1]."""

    p_s: np.ndarray
    p_t: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        p_s = np.asarray(self.p_s, dtype=float)
        p_t = np.asarray(self.p_t, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if not (p_s.shape == p_t.shape and p_s.ndim == 2 and p_s.shape[1] == 3):
            raise ValueError("point sets must both be (N, 3)")
        if w.shape != (p_s.shape[0],):
            raise ValueError("weights must be (N,)")
        if w.sum() <= 0:
            raise ValueError("weights must have positive sum")
        if int((w > 0).sum()) < 3:
            raise ValueError("need at least 3 positively weighted pairs")
        object.__setattr__(self, "p_s", p_s)
        object.__setattr__(self, "p_t", p_t)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 200
    inlier_threshold: float = 0.1
    min_inliers: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")


@dataclass(frozen=True)
class _AlignAux:
    U: np.ndarray
    s: np.ndarray
    Vt: np.ndarray
    D: np.ndarray


def align_core(p_s: np.ndarray, p_t: np.ndarray, w: np.ndarray):
    """Closed-form weighted alignment; returns (C, r, svd factors).

    Weights are normalized internally, so the solution is invariant to a
    uniform rescaling of w. Zero-weight pairs are dropped up front, which
    makes the solution bitwise independent of their presence.
    """
    p_s = np.asarray(p_s, dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    w = np.asarray(w, dtype=float)
    active = w > 0
    if not active.all():
        p_s, p_t, w = p_s[active], p_t[active], w[active]
    if len(w) < 3 or w.sum() <= 0:
        raise DegenerateGeometry("fewer than 3 positively weighted pairs")
    wn = w / w.sum()
    mu_s = wn @ p_s
    mu_t = wn @ p_t
    a = p_s - mu_s
    b = p_t - mu_t
    W = (b * wn[:, None]).T @ a
    U, s, Vt = np.linalg.svd(W)
    if s[1] <= COLLINEARITY_TOL * max(s[0], 1e-300):
        raise DegenerateGeometry(f"weighted points nearly collinear (spectrum {s})")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U) * np.linalg.det(Vt))])
    C = U @ D @ Vt
    r = mu_t - C @ mu_s
    return C, r, _AlignAux(U, s, Vt, D)


def weighted_alignment(prob: AlignmentProblem) -> SE3Pose:
    """Pose minimizing the weighted squared alignment cost."""
    C, r, _ = align_core(prob.p_s, prob.p_t, prob.w)
    return SE3Pose(C, r)


def alignment_cost(p_s, p_t, w, C, r) -> float:
    """The weighted squared-residual objective at a candidate pose."""
    res = p_s @ C.T + r - p_t
    return float((w * (res * res).sum(axis=1)).sum())


def ransac_pose(
    p_s: np.ndarray,
    p_t: np.ndarray,
    w: np.ndarray,
    params: RansacParams,
) -> tuple[SE3Pose, np.ndarray]:
    """Hypothesize-and-verify pose estimation with 3-point minimal sets.

    Returns the final pose (weighted alignment on the largest consensus set)
    and the boolean inlier mask. Inliers are pairs whose 3D residual under
    the hypothesis falls below the threshold.
    """
    p_s = np.asarray(p_s, dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    w = np.asarray(w, dtype=float)
    n = p_s.shape[0]
    if n < 3:
        raise InsufficientMatches(f"{n} matches < 3-point minimal set")

    rng = np.random.default_rng(params.seed)
    ones = np.ones(3)
    best_count = 0
    best_mask = np.zeros(n, dtype=bool)
    for _ in range(params.iterations):
        idx = rng.choice(n, size=3, replace=False)
        try:
            C, r, _ = align_core(p_s[idx], p_t[idx], ones)
        except DegenerateGeometry:
            continue
        res = np.linalg.norm(p_s @ C.T + r - p_t, axis=1)
        mask = res < params.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask

    if best_count < max(params.min_inliers, 3):
        raise LocalizationFailure(
            f"consensus {best_count} below minimum {params.min_inliers}"
        )

    w_in = w[best_mask]
    if w_in.sum() <= 0 or int((w_in > 0).sum()) < 3:
        w_in = np.ones(best_count)
    pose = weighted_alignment(AlignmentProblem(p_s[best_mask], p_t[best_mask], w_in))
    return pose, best_mask


def gt_outlier_gate(
    p_s: np.ndarray,
    p_t_hat: np.ndarray,
    T_gt: SE3Pose | PlanarPose,
    threshold: float,
) -> np.ndarray:
    """Boolean mask keeping pairs whose planar (x, y) error under the
    ground-truth transform stays within the threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    T = planar_to_se3(T_gt) if isinstance(T_gt, PlanarPose) else T_gt
    pred = np.asarray(p_s, dtype=float) @ T.C.T + T.r
    err = np.linalg.norm(pred[:, :2] - np.asarray(p_t_hat, dtype=float)[:, :2], axis=1)
    return err <= threshold
