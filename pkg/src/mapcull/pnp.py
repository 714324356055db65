"""Camera pose from 2D-3D matches: RANSAC over 6-point DLT, then LM refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

MIN_MATCHES = 6


@dataclass
class PnPResult:
    success: bool
    rotation: np.ndarray | None = None  # world -> camera
    translation: np.ndarray | None = None
    inliers: np.ndarray | None = None

    @property
    def n_inliers(self) -> int:
        return 0 if self.inliers is None else int(self.inliers.sum())


def _normalize3d(X):
    c = X.mean(axis=0)
    s = np.sqrt(3.0) / max(np.mean(np.linalg.norm(X - c, axis=1)), 1e-12)
    T = np.eye(4)
    T[:3, :3] *= s
    T[:3, 3] = -s * c
    return T


def dlt_batch(rays: np.ndarray, X: np.ndarray):
    """Projection matrices from normalized image rays.

    rays: (B, n, 2) calibrated coordinates K^-1 x, X: (B, n, 3), n >= 6.
    Returns (R, t, ok) with R (B, 3, 3), t (B, 3).
    """
    B, n, _ = X.shape
    Xh = np.concatenate([X, np.ones((B, n, 1))], axis=2)
    A = np.zeros((B, 2 * n, 12))
    A[:, 0::2, 0:4] = Xh
    A[:, 0::2, 8:12] = -rays[:, :, 0:1] * Xh
    A[:, 1::2, 4:8] = Xh
    A[:, 1::2, 8:12] = -rays[:, :, 1:2] * Xh
    _, S, Vt = np.linalg.svd(A)
    P = Vt[:, -1].reshape(B, 3, 4)
    M = P[:, :, :3]
    det = np.linalg.det(M)
    sign = np.where(det < 0, -1.0, 1.0)
    P = P * sign[:, None, None]
    U, s, Vt2 = np.linalg.svd(P[:, :, :3])
    R = U @ Vt2
    scale = s.mean(axis=1)
    t = P[:, :, 3] / np.maximum(scale, 1e-300)[:, None]
    # The nullspace must be well separated from the next singular direction.
    ok = (S[:, -2] > 1e-9 * S[:, 0]) & (np.abs(det) > 1e-12 * scale ** 3) & (s[:, 2] > 1e-6 * s[:, 0])
    return R, t, ok


def _reproj_errors(R, t, X, pixels, K):
    """Pixel errors (B, n) for a batch of poses; points behind the camera get inf."""
    cam = np.einsum("bij,nj->bni", R, X) + t[:, None, :]
    z = cam[:, :, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * cam[:, :, 0] / z + K[0, 2]
        v = K[1, 1] * cam[:, :, 1] / z + K[1, 2]
    err = np.hypot(u - pixels[None, :, 0], v - pixels[None, :, 1])
    return np.where(z > 0, err, np.inf)


def refine_pose(R, t, X, pixels, K):
    """Levenberg-Marquardt on reprojection error over a rotation vector and translation."""
    x0 = np.concatenate([Rotation.from_matrix(R).as_rotvec(), t])

    def resid(p):
        Rm = Rotation.from_rotvec(p[:3]).as_matrix()
        cam = X @ Rm.T + p[3:]
        u = K[0, 0] * cam[:, 0] / cam[:, 2] + K[0, 2]
        v = K[1, 1] * cam[:, 1] / cam[:, 2] + K[1, 2]
        return np.concatenate([u - pixels[:, 0], v - pixels[:, 1]])

    if len(X) * 2 < 6:
        return R, t
    sol = least_squares(resid, x0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=200)
    return Rotation.from_rotvec(sol.x[:3]).as_matrix(), sol.x[3:]


def solve_pnp(pixels, points3d, K, seed: int = 0, iterations: int = 200,
              threshold: float = 4.0) -> PnPResult:
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    n = len(X)
    if n < MIN_MATCHES:
        return PnPResult(False)
    rng = np.random.default_rng(seed)
    Kinv = np.linalg.inv(K)
    rays = (np.c_[pixels, np.ones(n)] @ Kinv.T)[:, :2]
    samples = np.array([rng.choice(n, MIN_MATCHES, replace=False) for _ in range(iterations)])
    T3 = _normalize3d(X)
    Xn = X @ T3[:3, :3].T + T3[:3, 3]
    R, t, ok = dlt_batch(rays[samples], Xn[samples])
    if not ok.any():
        return PnPResult(False)
    # Undo the 3D normalization: x_cam = R (s X + c) + t.
    s, c = T3[0, 0], T3[:3, 3]
    t = (t + np.einsum("bij,j->bi", R, c)) / s
    err = _reproj_errors(R, t, X, pixels, K)
    counts = np.where(ok, (err < threshold).sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < MIN_MATCHES:
        return PnPResult(False)
    Rb, tb = R[best], t[best]
    inl = err[best] < threshold
    for _ in range(2):
        Rb, tb = refine_pose(Rb, tb, X[inl], pixels[inl], K)
        inl = _reproj_errors(Rb[None], tb[None], X, pixels, K)[0] < threshold
        if inl.sum() < MIN_MATCHES:
            return PnPResult(False)
    return PnPResult(True, Rb, tb, inl)


def pose_error(R_est, t_est, R_gt, t_gt):
    """(position error in meters, rotation error in degrees)."""
    c_est = -R_est.T @ t_est
    c_gt = -R_gt.T @ t_gt
    angle = Rotation.from_matrix(R_est @ R_gt.T).magnitude()
    return float(np.linalg.norm(c_est - c_gt)), float(np.degrees(angle))
