"""Domain model: cameras, points, observations, projection and robust loss.

Conventions used throughout the package:

* quaternions are stored (w, x, y, z) and map world to camera coordinates,
* camera pose is (rotation, center) with camera-frame point p = R(q) (X - t),
* the ``bal_radial`` model follows the BAL convention of negating the
  perspective division before applying radial distortion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateProjection, DuplicateObservation

PINHOLE = "pinhole"
BAL_RADIAL = "bal_radial"

# Camera-frame depth magnitudes below this are degenerate projections.
DEPTH_EPS = 1e-12


# ---------------------------------------------------------------------------
# Quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def axis_angle_to_quat_many(rvecs: np.ndarray) -> np.ndarray:
    """Batched axis-angle (n, 3) to quaternion (n, 4)."""
    rvecs = np.asarray(rvecs, dtype=np.float64)
    angles = np.linalg.norm(rvecs, axis=1)
    half = 0.5 * angles
    q = np.empty((len(rvecs), 4))
    q[:, 0] = np.cos(half)
    # sin(a/2)/a -> 1/2 as a -> 0
    small = angles < 1e-12
    scale = np.empty_like(angles)
    scale[~small] = np.sin(half[~small]) / angles[~small]
    scale[small] = 0.5
    q[:, 1:] = rvecs * scale[:, None]
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (normalized first)."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_angle_rad(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation angle between the rotations encoded by two quaternions."""
    w = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * np.arccos(min(w, 1.0))


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply R(q) to a 3-vector; q is normalized defensively."""
    q = quat_normalize(q)
    w, u = q[0], q[1:]
    v = np.asarray(v, dtype=np.float64)
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def rotate_many(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise rotation: q (n, 4) applied to v (n, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, u = q[:, :1], q[:, 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix_many(q: np.ndarray) -> np.ndarray:
    """Row-wise quaternion-to-matrix map, (n, 4) -> (n, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((len(q), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def drotate_dq_many(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise derivative of R(q/|q|) v with respect to q, shape (n, 3, 4).

    Includes the normalization projector (I - q_hat q_hat^T) / |q|, so the
    result is the exact derivative of the defensively-normalized rotation.
    """
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / norms
    w, u = qh[:, 0], qh[:, 1:]
    n = len(q)

    d = np.empty((n, 3, 4))
    uv = np.cross(u, v)
    d[:, :, 0] = 2.0 * uv
    udotv = np.einsum("ni,ni->n", u, v)
    # -w [v]_x + (u.v) I + u v^T - 2 v u^T, all times 2
    vx = np.zeros((n, 3, 3))
    vx[:, 0, 1] = -v[:, 2]
    vx[:, 0, 2] = v[:, 1]
    vx[:, 1, 0] = v[:, 2]
    vx[:, 1, 2] = -v[:, 0]
    vx[:, 2, 0] = -v[:, 1]
    vx[:, 2, 1] = v[:, 0]
    du = -w[:, None, None] * vx
    du += udotv[:, None, None] * np.eye(3)
    du += np.einsum("ni,nj->nij", u, v)
    du -= 2.0 * np.einsum("ni,nj->nij", v, u)
    d[:, :, 1:] = 2.0 * du

    proj = np.eye(4) - np.einsum("ni,nj->nij", qh, qh)
    return np.einsum("nij,njk->nik", d, proj) / norms[:, :, None]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Camera:
    rotation: np.ndarray              # unit quaternion (w, x, y, z), world -> camera
    center: np.ndarray                # position in world units
    focal: float                      # pixels per unit
    principal_point: np.ndarray = field(default_factory=lambda: np.zeros(2))
    model_tag: str = PINHOLE
    bal_distortion: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass(slots=True)
class Point3D:
    position: np.ndarray


@dataclass(slots=True)
class Observation:
    camera_id: int
    point_id: int
    pixel: np.ndarray
    depth: float | None = None


@dataclass(slots=True)
class Scene:
    cameras: list[Camera]
    points: list[Point3D]
    observations: list[Observation]

    @property
    def num_cameras(self) -> int:
        return len(self.cameras)

    @property
    def num_points(self) -> int:
        return len(self.points)

    @property
    def num_observations(self) -> int:
        return len(self.observations)


@dataclass(slots=True)
class RobustLoss:
    kind: str = "trivial"             # "trivial" | "huber"
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("trivial", "huber"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")


TRIVIAL_LOSS = RobustLoss("trivial")


def validate_scene(scene: Scene) -> None:
    """Raise if indices are stale or (camera, point) pairs repeat."""
    c, p = scene.num_cameras, scene.num_points
    seen = set()
    for obs in scene.observations:
        if not (0 <= obs.camera_id < c) or not (0 <= obs.point_id < p):
            raise IndexError(
                f"observation references ({obs.camera_id}, {obs.point_id}) "
                f"outside ({c} cameras, {p} points)")
        key = (obs.camera_id, obs.point_id)
        if key in seen:
            raise DuplicateObservation(f"duplicate observation {key}")
        seen.add(key)
        if obs.depth is not None and not obs.depth > 0:
            raise ValueError(f"non-positive depth on observation {key}")


# ---------------------------------------------------------------------------
# Struct-of-arrays view used by the solvers
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class SceneArrays:
    quats: np.ndarray        # (C, 4)
    centers: np.ndarray      # (C, 3)
    focals: np.ndarray       # (C,)
    pps: np.ndarray          # (C, 2)
    dists: np.ndarray        # (C, 2) bal radial (k1, k2)
    model_tag: str
    points: np.ndarray       # (P, 3)
    cam_idx: np.ndarray      # (N,)
    pt_idx: np.ndarray       # (N,)
    pixels: np.ndarray       # (N, 2)
    depths: np.ndarray | None


def scene_to_arrays(scene: Scene) -> SceneArrays:
    c = scene.num_cameras
    quats = np.array([cam.rotation for cam in scene.cameras], dtype=np.float64).reshape(c, 4)
    centers = np.array([cam.center for cam in scene.cameras], dtype=np.float64).reshape(c, 3)
    focals = np.array([cam.focal for cam in scene.cameras], dtype=np.float64)
    pps = np.array([cam.principal_point for cam in scene.cameras], dtype=np.float64).reshape(c, 2)
    dists = np.array([cam.bal_distortion for cam in scene.cameras], dtype=np.float64).reshape(c, 2)
    model = scene.cameras[0].model_tag if scene.cameras else PINHOLE
    points = np.array([p.position for p in scene.points], dtype=np.float64).reshape(scene.num_points, 3)
    cam_idx = np.array([o.camera_id for o in scene.observations], dtype=np.int64)
    pt_idx = np.array([o.point_id for o in scene.observations], dtype=np.int64)
    pixels = np.array([o.pixel for o in scene.observations], dtype=np.float64).reshape(scene.num_observations, 2)
    depths = None
    if scene.observations and scene.observations[0].depth is not None:
        depths = np.array([o.depth for o in scene.observations], dtype=np.float64)
    return SceneArrays(quats, centers, focals, pps, dists, model,
                       points, cam_idx, pt_idx, pixels, depths)


def arrays_to_scene(arr: SceneArrays) -> Scene:
    cameras = [Camera(arr.quats[i].copy(), arr.centers[i].copy(), float(arr.focals[i]),
                      arr.pps[i].copy(), arr.model_tag, arr.dists[i].copy())
               for i in range(len(arr.quats))]
    points = [Point3D(arr.points[j].copy()) for j in range(len(arr.points))]
    observations = []
    for k in range(len(arr.cam_idx)):
        depth = float(arr.depths[k]) if arr.depths is not None else None
        observations.append(Observation(int(arr.cam_idx[k]), int(arr.pt_idx[k]),
                                        arr.pixels[k].copy(), depth))
    return Scene(cameras, points, observations)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project(camera: Camera, point: Point3D | np.ndarray) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Raises DegenerateProjection when the camera-frame depth magnitude is
    below DEPTH_EPS.
    """
    x = point.position if isinstance(point, Point3D) else np.asarray(point, dtype=np.float64)
    p = rotate(camera.rotation, x - np.asarray(camera.center, dtype=np.float64))
    if abs(p[2]) < DEPTH_EPS:
        raise DegenerateProjection(f"camera-frame depth {p[2]!r} below {DEPTH_EPS}")
    if camera.model_tag == BAL_RADIAL:
        nrm = -p[:2] / p[2]
        r2 = nrm @ nrm
        k1, k2 = camera.bal_distortion
        scale = 1.0 + k1 * r2 + k2 * r2 * r2
        return camera.focal * scale * nrm + camera.principal_point
    return camera.focal * (p[:2] / p[2]) + camera.principal_point


def project_many(arr: SceneArrays) -> tuple[np.ndarray, np.ndarray]:
    """Project every observation of a SceneArrays view.

    Returns (pixels (N, 2), camera-frame z (N,)). No masking is applied;
    callers decide what to do with non-positive or tiny depths. The
    arithmetic follows the bundle-adjustment residual path exactly, so
    observations generated from this function evaluate to bit-zero
    residuals on the same scene.
    """
    q = arr.quats[arr.cam_idx]
    f = arr.focals[arr.cam_idx]
    pp = arr.pps[arr.cam_idx]
    rot = quat_to_matrix_many(q)
    p = np.einsum("nij,nj->ni",
                  rot, arr.points[arr.pt_idx] - arr.centers[arr.cam_idx])
    z = p[:, 2]
    safe_z = np.where(np.abs(z) < DEPTH_EPS, 1.0, z)
    if arr.model_tag == BAL_RADIAL:
        n = -p[:, :2] / safe_z[:, None]
        r2 = np.einsum("ni,ni->n", n, n)
        k1 = arr.dists[arr.cam_idx, 0]
        k2 = arr.dists[arr.cam_idx, 1]
        scale = 1.0 + k1 * r2 + k2 * r2 * r2
        uv = f[:, None] * scale[:, None] * n + pp
    else:
        uv = f[:, None] * (p[:, :2] / safe_z[:, None]) + pp
    return uv, z


def front_mask(model_tag: str, z: np.ndarray) -> np.ndarray:
    """True where an observation is usable (in front of the camera).

    Pinhole cameras look down +z; the BAL convention looks down -z.
    """
    if model_tag == BAL_RADIAL:
        return z < -DEPTH_EPS
    return z > DEPTH_EPS


# ---------------------------------------------------------------------------
# Robust loss
# ---------------------------------------------------------------------------

def robust_weight(loss: RobustLoss, squared_norm: float) -> tuple[float, float]:
    """Robustified cost and IRLS weight for one residual block.

    The weight is applied as sqrt(weight) scaling on the residual and
    Jacobian rows; the cost is the value of the robustifier itself.
    """
    s = float(squared_norm)
    if loss.kind == "trivial":
        return s, 1.0
    d2 = loss.delta * loss.delta
    if s <= d2:
        return s, 1.0
    root = np.sqrt(s)
    return 2.0 * loss.delta * root - d2, loss.delta / root


def robust_weight_many(loss: RobustLoss, squared_norms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized robust_weight over an array of squared block norms."""
    s = np.asarray(squared_norms, dtype=np.float64)
    if loss.kind == "trivial":
        return s.copy(), np.ones_like(s)
    d2 = loss.delta * loss.delta
    out_mask = s > d2
    root = np.sqrt(np.where(out_mask, s, 1.0))
    costs = np.where(out_mask, 2.0 * loss.delta * root - d2, s)
    weights = np.where(out_mask, loss.delta / root, 1.0)
    return costs, weights
