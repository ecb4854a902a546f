"""Synthetic ground-truth scenes, perturbation, alignment and pose metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfig, EmptyProblem, InsufficientCameras
from .scene import (Camera, Observation, Point3D, Scene, project_many,
                    front_mask, quat_from_axis_angle, quat_from_matrix,
                    quat_multiply, quat_normalize, quat_to_matrix,
                    scene_to_arrays)


@dataclass(slots=True)
class SynthConfig:
    num_cameras: int = 10
    num_points: int = 200
    rig: str = "ring"                  # "ring" | "sphere"
    radius: float = 10.0
    focal: float = 500.0
    pixel_noise_sigma: float = 0.0
    visibility_fraction: float = 1.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def validate(self):
        if self.num_cameras < 2:
            raise DegenerateConfig("need at least 2 cameras")
        if self.num_points < 3:
            raise DegenerateConfig("need at least 3 points")
        if self.rig not in ("ring", "sphere"):
            raise DegenerateConfig(f"unknown rig {self.rig!r}")
        if not 0.0 < self.visibility_fraction <= 1.0:
            raise DegenerateConfig("visibility_fraction must be in (0, 1]")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise DegenerateConfig("outlier_fraction must be in [0, 1)")
        if self.radius <= 0 or self.focal <= 0 or self.pixel_noise_sigma < 0:
            raise DegenerateConfig("radius/focal/sigma out of range")


def _look_at_origin(center: np.ndarray) -> np.ndarray:
    """World-to-camera quaternion for a camera at `center` looking at the
    origin (camera +z is the viewing direction)."""
    fwd = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return quat_from_matrix(np.stack([right, down, fwd]))


def _rig_centers(config: SynthConfig) -> np.ndarray:
    c = config.num_cameras
    if config.rig == "ring":
        ang = 2.0 * np.pi * np.arange(c) / c
        return config.radius * np.stack(
            [np.cos(ang), np.sin(ang), np.zeros(c)], axis=1)
    # Fibonacci sphere
    k = np.arange(c) + 0.5
    phi = np.arccos(1.0 - 2.0 * k / c)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * k
    return config.radius * np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)],
        axis=1)


def generate(config: SynthConfig) -> tuple[Scene, Scene]:
    """Ground-truth scene plus an observed copy with noisy pixels.

    Points are uniform in a ball of radius/2; cameras sit on the rig looking
    at the origin; every observation of the observed scene carries the true
    camera-frame depth so depth-mode solvers can be tested at metric scale.
    All draws come from one seeded generator, so equal configs give
    bit-identical scenes.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    c, p = config.num_cameras, config.num_points

    dirs = rng.normal(size=(p, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = 0.5 * config.radius * rng.uniform(size=p) ** (1.0 / 3.0)
    points = dirs * radii[:, None]

    centers = _rig_centers(config)
    quats = np.stack([_look_at_origin(t) for t in centers])

    k = min(c, max(2, int(round(config.visibility_fraction * c))))
    cam_sel = np.stack([rng.choice(c, size=k, replace=False) for _ in range(p)])
    cam_sel.sort(axis=1)

    pt_of_obs = np.repeat(np.arange(p), k)
    cam_of_obs = cam_sel.ravel()
    order = np.lexsort((pt_of_obs, cam_of_obs))
    cam_of_obs = cam_of_obs[order]
    pt_of_obs = pt_of_obs[order]

    # exact projections and depths of the true geometry, computed on the
    # solver's own arithmetic path so residuals on the truth are bit-zero
    proto = Scene([Camera(quats[i].copy(), centers[i].copy(), config.focal)
                   for i in range(c)],
                  [Point3D(points[j].copy()) for j in range(p)],
                  [Observation(int(cam_of_obs[m]), int(pt_of_obs[m]), np.zeros(2))
                   for m in range(len(cam_of_obs))])
    exact, z = project_many(scene_to_arrays(proto))
    if (z <= 0).any():
        raise DegenerateConfig("rig places a point behind a camera")

    pixels = exact.copy()
    if config.pixel_noise_sigma > 0:
        pixels += rng.normal(0.0, config.pixel_noise_sigma, size=pixels.shape)
    n_obs = len(pixels)
    if config.outlier_fraction > 0:
        n_out = int(round(config.outlier_fraction * n_obs))
        out_idx = rng.choice(n_obs, size=n_out, replace=False)
        half = 0.5 * config.focal
        pixels[out_idx] = rng.uniform(-half, half, size=(n_out, 2))

    def build(px):
        obs = [Observation(int(cam_of_obs[m]), int(pt_of_obs[m]),
                           px[m].copy(), float(z[m]))
               for m in range(n_obs)]
        return Scene([Camera(quats[i].copy(), centers[i].copy(), config.focal)
                      for i in range(c)],
                     [Point3D(points[j].copy()) for j in range(p)], obs)

    truth = build(exact)
    observed = build(pixels)
    return truth, observed


def outlier_mask(truth: Scene, observed: Scene, sigma: float) -> np.ndarray:
    """Observations whose pixel strays far from the exact projection.

    Synthetic outliers are uniform over the image window, so thresholding at
    max(6 sigma, 1) px recovers the injected set essentially exactly.
    """
    t = np.array([o.pixel for o in truth.observations])
    o = np.array([o.pixel for o in observed.observations])
    err = np.linalg.norm(t - o, axis=1)
    return err > max(6.0 * sigma, 1.0)


def scene_diameter(scene: Scene) -> float:
    """Bounding-box diagonal over camera centers and points."""
    pts = [np.asarray(c.center, dtype=float) for c in scene.cameras]
    pts += [np.asarray(p.position, dtype=float) for p in scene.points]
    stack = np.stack(pts)
    return float(np.linalg.norm(stack.max(axis=0) - stack.min(axis=0)))


def perturb(scene: Scene, rot_deg: float = 0.0, center_frac: float = 0.0,
            focal_frac: float = 0.0, point_frac: float = 0.0,
            seed: int = 0) -> Scene:
    """Jitter rotations, centers, focals and points by fixed magnitudes.

    Rotations are composed with random-axis rotations of exactly rot_deg;
    centers and points move by exactly frac * scene diameter along random
    directions; focals scale by (1 +- focal_frac) with a random sign.
    """
    rng = np.random.default_rng(seed)
    diam = scene_diameter(scene)
    c, p = scene.num_cameras, scene.num_points

    axes = rng.normal(size=(c, 3))
    signs = rng.choice([-1.0, 1.0], size=c)
    cdirs = rng.normal(size=(c, 3))
    cdirs /= np.linalg.norm(cdirs, axis=1, keepdims=True)
    pdirs = rng.normal(size=(p, 3))
    pdirs /= np.linalg.norm(pdirs, axis=1, keepdims=True)

    cameras = []
    for i, cam in enumerate(scene.cameras):
        dq = quat_from_axis_angle(axes[i], np.deg2rad(rot_deg))
        q = quat_normalize(quat_multiply(dq, np.asarray(cam.rotation, dtype=float)))
        center = np.asarray(cam.center, dtype=float) + center_frac * diam * cdirs[i]
        focal = cam.focal * (1.0 + signs[i] * focal_frac)
        cameras.append(Camera(q, center, focal,
                              np.asarray(cam.principal_point, dtype=float).copy(),
                              cam.model_tag,
                              np.asarray(cam.bal_distortion, dtype=float).copy()))
    points = [Point3D(np.asarray(pt.position, dtype=float)
                      + point_frac * diam * pdirs[j])
              for j, pt in enumerate(scene.points)]
    observations = [Observation(o.camera_id, o.point_id,
                                np.asarray(o.pixel, dtype=float).copy(), o.depth)
                    for o in scene.observations]
    return Scene(cameras, points, observations)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Alignment:
    kind: str                 # "sim3" | "se3"
    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)
    scale: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * (x @ self.rotation.T) + self.translation


def align(estimate: Scene, truth: Scene, kind: str = "sim3") -> tuple[Alignment, Scene]:
    """Closed-form least-squares registration of camera centers.

    Returns the transform (y ~ s R x + t) and the transformed estimate.
    """
    if kind not in ("sim3", "se3"):
        raise ValueError(f"unknown alignment kind {kind!r}")
    n = estimate.num_cameras
    if n != truth.num_cameras:
        raise InsufficientCameras("camera counts differ")
    if kind == "sim3" and n < 3:
        raise InsufficientCameras("sim3 alignment needs at least 3 cameras")
    if n < 2:
        raise InsufficientCameras("alignment needs at least 2 cameras")

    x = np.stack([np.asarray(c.center, dtype=float) for c in estimate.cameras])
    y = np.stack([np.asarray(c.center, dtype=float) for c in truth.cameras])
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    s3 = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s3[2] = -1.0
    rot = u @ np.diag(s3) @ vt
    if kind == "sim3":
        var_x = float((xc * xc).sum()) / n
        scale = float((d * s3).sum()) / var_x
        if scale <= 0:
            raise InsufficientCameras("degenerate similarity (non-positive scale)")
    else:
        scale = 1.0
    t = my - scale * rot @ mx
    alignment = Alignment(kind, rot, t, scale)

    rq = quat_from_matrix(rot)
    rq_conj = np.array([rq[0], -rq[1], -rq[2], -rq[3]])
    cameras = [Camera(quat_normalize(quat_multiply(np.asarray(c.rotation, dtype=float), rq_conj)),
                      alignment.apply(np.asarray(c.center, dtype=float)),
                      c.focal, np.asarray(c.principal_point, dtype=float).copy(),
                      c.model_tag, np.asarray(c.bal_distortion, dtype=float).copy())
               for c in estimate.cameras]
    points = [Point3D(alignment.apply(np.asarray(p.position, dtype=float)))
              for p in estimate.points]
    observations = [Observation(o.camera_id, o.point_id,
                                np.asarray(o.pixel, dtype=float).copy(), o.depth)
                    for o in estimate.observations]
    return alignment, Scene(cameras, points, observations)


def center_rmse(estimate: Scene, truth: Scene) -> float:
    a = np.stack([np.asarray(c.center, dtype=float) for c in estimate.cameras])
    b = np.stack([np.asarray(c.center, dtype=float) for c in truth.cameras])
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def camera_rotation_errors_deg(estimate: Scene, truth: Scene) -> np.ndarray:
    """Per-camera absolute rotation error in degrees."""
    out = np.empty(estimate.num_cameras)
    for i, (ce, ct) in enumerate(zip(estimate.cameras, truth.cameras)):
        qe = quat_normalize(np.asarray(ce.rotation, dtype=float))
        qt = quat_normalize(np.asarray(ct.rotation, dtype=float))
        w = min(abs(float(qe @ qt)), 1.0)
        out[i] = np.rad2deg(2.0 * np.arccos(w))
    return out


# ---------------------------------------------------------------------------
# Accuracy metrics
# ---------------------------------------------------------------------------

def rotation_auc(estimate: Scene, truth: Scene, thresholds_deg) -> dict[float, float]:
    """Pairwise relative-rotation AUC on a 0-100 scale.

    For every unordered camera pair the error is the angle of
    R_est_rel R_true_rel^T; AUC@tau is the mean of max(0, 1 - err/tau) * 100.
    """
    c = estimate.num_cameras
    if c < 2 or c != truth.num_cameras:
        raise InsufficientCameras("need two scenes with >= 2 matching cameras")
    qe = np.stack([quat_normalize(np.asarray(cam.rotation, dtype=float))
                   for cam in estimate.cameras])
    qt = np.stack([quat_normalize(np.asarray(cam.rotation, dtype=float))
                   for cam in truth.cameras])
    ii, jj = np.triu_indices(c, k=1)

    def rel(q, a, b):
        # q_a * conj(q_b), batched
        aw, av = q[a, 0], q[a, 1:]
        bw, bv = q[b, 0], -q[b, 1:]
        w = aw * bw - np.einsum("ni,ni->n", av, bv)
        v = aw[:, None] * bv + bw[:, None] * av + np.cross(av, bv)
        return np.concatenate([w[:, None], v], axis=1)

    re = rel(qe, ii, jj)
    rt = rel(qt, ii, jj)
    dots = np.clip(np.abs(np.einsum("ni,ni->n", re, rt)), 0.0, 1.0)
    err = np.rad2deg(2.0 * np.arccos(dots))
    return {float(tau): float(np.mean(np.maximum(0.0, 1.0 - err / tau)) * 100.0)
            for tau in thresholds_deg}


def reproj_rmse(scene: Scene) -> float:
    """Root-mean-square reprojection error in pixels, unweighted.

    Observations behind the camera (or at degenerate depth) are excluded.
    """
    if scene.num_observations == 0:
        raise EmptyProblem("no observations to evaluate")
    arr = scene_to_arrays(scene)
    uv, z = project_many(arr)
    mask = front_mask(arr.model_tag, z)
    if not mask.any():
        raise EmptyProblem("every observation is behind its camera")
    diff = uv[mask] - arr.pixels[mask]
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
