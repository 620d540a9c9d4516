"""Pinhole camera, table keypoints, calibration from table corners, reprojection metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .ballistics import WorldGeometry
from .errors import DegenerateCorners, DegenerateView, NoConvergence, NoPairedSamples
from .trajectory import Trajectory

KEYPOINT_NAMES = (
    "corner_near_left", "corner_near_right", "corner_far_right", "corner_far_left",
    "net_base_left", "net_base_right", "net_top_left", "net_top_right", "net_top_center",
    "end_mid_near", "end_mid_far", "half_center_near", "half_center_far",
)

# Maps the reference pose frame (z down, y along the table) to the world frame.
_POSE_FRAME = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
POSE_MODES_DEG = ((-55.0, 15.0, -30.0), (-37.0, 32.0, -42.0))


@dataclass(frozen=True, eq=False)
class CameraModel:
    f: float
    principal_point: np.ndarray
    R: np.ndarray
    T: np.ndarray
    image_size: Tuple[int, int] = (1920, 1080)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "f", float(self.f))
        set_(self, "principal_point", np.array(self.principal_point, dtype=float).reshape(2))
        set_(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        set_(self, "T", np.array(self.T, dtype=float).reshape(3))
        set_(self, "image_size", tuple(int(v) for v in self.image_size))
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if (np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(self.R) - 1.0) > 1e-9):
            raise ValueError("R must be a proper rotation")

    @property
    def K(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.f, 0.0, cx], [0.0, self.f, cy], [0.0, 0.0, 1.0]])

    @property
    def P(self) -> np.ndarray:
        return self.K @ np.c_[self.R, self.T]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    def to_record(self) -> dict:
        return {"f": self.f, "cx": float(self.principal_point[0]),
                "cy": float(self.principal_point[1]),
                "R": self.R.reshape(-1).tolist(), "T": self.T.tolist(),
                "image_size": list(self.image_size)}

    @classmethod
    def from_record(cls, rec: dict) -> "CameraModel":
        return cls(rec["f"], (rec["cx"], rec["cy"]), np.reshape(rec["R"], (3, 3)),
                   rec["T"], tuple(rec["image_size"]))


def project(cam: CameraModel, p_world) -> Optional[np.ndarray]:
    """Pixel coordinates of a world point, or None when it is not in front of the camera."""
    pc = cam.R @ np.asarray(p_world, dtype=float) + cam.T
    if pc[2] <= 0:
        return None
    return np.array([cam.f * pc[0] / pc[2] + cam.principal_point[0],
                     cam.f * pc[1] / pc[2] + cam.principal_point[1]])


def project_points(cam: CameraModel, pts) -> np.ndarray:
    """Vectorised :func:`project`; rows behind the camera (or NaN input) become NaN."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    pc = pts @ cam.R.T + cam.T
    out = np.full((len(pts), 2), np.nan)
    ok = pc[:, 2] > 0
    out[ok] = cam.f * pc[ok, :2] / pc[ok, 2:3] + cam.principal_point
    return out


def table_keypoints(world: WorldGeometry = WorldGeometry()) -> np.ndarray:
    """The 13 reference points of the table and net, ordered as KEYPOINT_NAMES.

    Net posts stand 15.25 cm outside the side lines, as on a regulation table.
    """
    hl, hw, h = world.half_length, world.half_width, world.table_height
    post = hw + 0.1525
    top = world.net_top
    return np.array([
        [-hl, hw, h], [-hl, -hw, h], [hl, -hw, h], [hl, hw, h],
        [0.0, post, h], [0.0, -post, h],
        [0.0, post, top], [0.0, -post, top], [0.0, 0.0, top],
        [-hl, 0.0, h], [hl, 0.0, h],
        [-0.5 * hl, 0.0, h], [0.5 * hl, 0.0, h],
    ])


def project_keypoints(cam: CameraModel, world: WorldGeometry = WorldGeometry()):
    """Pixel keypoints and a validity flag (False if any keypoint is behind the camera)."""
    px = project_points(cam, table_keypoints(world))
    return px, bool(np.all(np.isfinite(px)))


def table_diagonal_px(cam: CameraModel, world: WorldGeometry = WorldGeometry()) -> float:
    """Longer of the two projected table diagonals, in pixels."""
    c = project_points(cam, world.corners())
    d = max(np.linalg.norm(c[0] - c[2]), np.linalg.norm(c[1] - c[3]))
    if not np.isfinite(d):
        raise DegenerateView("table corners not in front of the camera")
    return float(d)


def reprojection_error(traj: Trajectory, cam: CameraModel,
                       world: WorldGeometry = WorldGeometry()):
    """Per-sample pixel error and its maximum normalised by the table diagonal.

    Errors are NaN where a sample lacks either the 3D or the 2D position.
    """
    paired = traj.valid3d & traj.valid2d
    if not paired.any():
        raise NoPairedSamples("no sample carries both 3D and 2D positions")
    err = np.full(len(traj), np.nan)
    proj = project_points(cam, traj.p3d[paired])
    e = np.linalg.norm(proj - traj.p2d[paired], axis=1)
    e[~np.isfinite(e)] = np.inf
    err[paired] = e
    return err, float(np.max(e) / table_diagonal_px(cam, world))


def ground_homography(cam: CameraModel, world: Optional[WorldGeometry] = None) -> np.ndarray:
    """Homography taking homogeneous pixels to (x, y, 1) on the floor plane z = 0."""
    G = cam.K @ np.c_[cam.R[:, 0], cam.R[:, 1], cam.T]
    if abs(np.linalg.det(G)) < 1e-12 * np.linalg.norm(G) ** 3:
        raise DegenerateView("camera sees the floor plane edge-on")
    H = np.linalg.inv(G)
    return H / H[2, 2] if abs(H[2, 2]) > 1e-15 else H


def apply_homography(H, px) -> np.ndarray:
    px = np.atleast_2d(np.asarray(px, dtype=float))
    q = np.c_[px, np.ones(len(px))] @ H.T
    return q[:, :2] / q[:, 2:3]


# ---------------------------------------------------------------------------
# calibration


def _homography_dlt(src, dst) -> np.ndarray:
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows, dtype=float))
    H = vt[-1].reshape(3, 3)
    return H / np.linalg.norm(H)


def _orthonormalize(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def _focal_from_homography(Hc) -> Optional[float]:
    """Closed-form focal length from a centred plane homography (square pixels)."""
    h1, h2 = Hc[:, 0], Hc[:, 1]
    # rows: orthogonal columns, equal column norms; unknown is 1/f^2
    a = np.array([h1[0] * h2[0] + h1[1] * h2[1], h1[0] ** 2 + h1[1] ** 2 - h2[0] ** 2 - h2[1] ** 2])
    b = -np.array([h1[2] * h2[2], h1[2] ** 2 - h2[2] ** 2])
    denom = a @ a
    if denom <= 0:
        return None
    inv_f2 = (a @ b) / denom
    if not inv_f2 > 0:
        return None
    return float(1.0 / math.sqrt(inv_f2))


def _pose_from_homography(Hc, f: float, table_height: float):
    """R, T from a centred homography of the table plane for a given focal length."""
    M = np.diag([1.0 / f, 1.0 / f, 1.0]) @ Hc
    lam = 2.0 / (np.linalg.norm(M[:, 0]) + np.linalg.norm(M[:, 1]))
    M = M * lam
    if M[2, 2] < 0:
        M = -M
    r1, r2, t = M[:, 0], M[:, 1], M[:, 2]
    R = _orthonormalize(np.c_[r1, r2, np.cross(r1, r2)])
    T = t - table_height * R[:, 2]
    return R, T


def _check_corners(px: np.ndarray):
    scale = max(np.ptp(px[:, 0]), np.ptp(px[:, 1]), 1.0)
    for i in range(4):
        a, b, c = (px[j] for j in range(4) if j != i)
        area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area < 1e-6 * scale * scale:
            raise DegenerateCorners("three table corners are collinear in the image")


def calibrate_from_corners(corner_px, image_size=(1920, 1080),
                           world: WorldGeometry = WorldGeometry(),
                           focal_grid: Sequence[float] = tuple(np.geomspace(500, 5000, 20))):
    """Camera pose and focal length from the four table corners.

    ``corner_px`` is ordered near-left, near-right, far-right, far-left (see
    :meth:`WorldGeometry.corners`). The principal point is the image centre.
    Each focal-length seed (the grid plus the closed-form estimate from the
    plane homography) initialises a pose, which is then refined jointly with
    the focal length by Levenberg-Marquardt on the corner reprojection error.

    Returns (camera, rms_residual_px).
    """
    px = np.asarray(corner_px, dtype=float).reshape(4, 2)
    _check_corners(px)
    c = np.array([image_size[0] / 2.0, image_size[1] / 2.0])
    X = world.corners()
    Hc = _homography_dlt(X[:, :2], px - c)
    seeds = list(focal_grid)
    f_cf = _focal_from_homography(Hc)
    if f_cf is not None and 50 < f_cf < 1e5:
        seeds.append(f_cf)

    def residual(x):
        R = Rotation.from_rotvec(x[:3]).as_matrix()
        pc = X @ R.T + x[3:6]
        z = np.where(np.abs(pc[:, 2]) < 1e-9, 1e-9, pc[:, 2])
        return (x[6] * pc[:, :2] / z[:, None] + c - px).reshape(-1)

    best = None
    for f0 in seeds:
        R0, T0 = _pose_from_homography(Hc, f0, world.table_height)
        x0 = np.r_[Rotation.from_matrix(R0).as_rotvec(), T0, f0]
        try:
            sol = least_squares(residual, x0, method="lm", xtol=1e-15, ftol=1e-15,
                                gtol=1e-15, max_nfev=2000)
        except Exception:
            continue
        if not (sol.x[6] > 0 and np.all(np.isfinite(sol.fun))):
            continue
        R = Rotation.from_rotvec(sol.x[:3]).as_matrix()
        if np.any(X @ R.T @ np.eye(3)[:, 2] + sol.x[5] <= 0):
            continue
        cost = float(np.sum(sol.fun ** 2))
        if best is None or cost < best[0]:
            best = (cost, sol.x)
    if best is None:
        raise NoConvergence("no focal-length seed produced a valid camera")
    x = best[1]
    R = _orthonormalize(Rotation.from_rotvec(x[:3]).as_matrix())
    cam = CameraModel(x[6], c, R, x[3:6], image_size)
    rms = float(np.sqrt(best[0] / 4.0))
    return cam, rms


def rotation_from_pose_angles(angles_deg) -> np.ndarray:
    """World-to-camera rotation from extrinsic x-y-z Euler angles in the reference pose frame.

    The reference frame has y along the table and z pointing down; this is
    the convention under which the two common broadcast poses
    (-55, 15, -30) and (-37, 32, -42) view the table from above.
    """
    R = Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix() @ _POSE_FRAME
    return _orthonormalize(R)


def look_at_camera(R: np.ndarray, f: float, target, distance: float,
                   image_size=(1920, 1080)) -> CameraModel:
    """Camera with rotation R placed ``distance`` metres back along its optical axis from target."""
    axis = R[2]
    C = np.asarray(target, dtype=float) - distance * axis
    return CameraModel(f, (image_size[0] / 2.0, image_size[1] / 2.0), R, -R @ C, image_size)


def broadcast_camera(rng: np.random.Generator, world: WorldGeometry = WorldGeometry(),
                     mode: Optional[int] = None, f_range=(800.0, 3000.0),
                     angle_jitter_deg: float = 5.0, image_size=(1920, 1080)) -> CameraModel:
    """Random camera around one of the two common broadcast poses.

    The table runs roughly along the image vertical, so the distance is chosen
    from the focal length to make the table length span 50-80% of the image
    height.
    """
    if mode is None:
        mode = int(rng.integers(2))
    size = np.asarray(image_size, dtype=float)
    while True:
        angles = np.asarray(POSE_MODES_DEG[mode]) + rng.uniform(-angle_jitter_deg, angle_jitter_deg, 3)
        f = float(rng.uniform(*f_range))
        frac = rng.uniform(0.5, 0.8)
        distance = f * world.table_length / (frac * image_size[1])
        target = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), world.table_height])
        cam = look_at_camera(rotation_from_pose_angles(angles), f, target, distance, image_size)
        px, ok = project_keypoints(cam, world)
        # keep only cameras that see every keypoint
        if ok and np.all((px >= 0) & (px <= size)):
            return cam


def rotation_angle_deg(Ra, Rb) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
