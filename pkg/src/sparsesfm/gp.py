"""Global positioning: camera centers, points and per-observation scales.

With rotations held fixed, the residual for observation (i, j) is

    u_ij = sqrt(w_ij) * (v_ij - d_ij (X_j - t_i))

where v_ij is the unit pixel ray in world coordinates. In depth mode the
scale is pinned to d_ij = 1 / depth_ij and drops out of the parameter vector,
which anchors the reconstruction at metric scale.

The objective is invariant under global translation (and global rescaling
when scales are free); fix_gauge holds camera 0's center constant by masking
its Jacobian columns and renormalizes the mean scale to one after every
accepted step, compensating points and centers so the cost is untouched.
"""

from __future__ import annotations

import numpy as np

from .errors import MissingDepth
from .lm import LMConfig, SolveReport, Workspace, lm_solve
from .scene import (Camera, Point3D, RobustLoss, Scene, quat_conjugate,
                    robust_weight_many, rotate_many, scene_to_arrays)
from .sparse_block import BlockLayout, BlockSparseJacobian

SCALE_FLOOR = 1e-6


class GPProblem:
    """Residual/Jacobian provider for the ray-scale objective."""

    def __init__(self, rays, fixed_rotations, cam_idx, pt_idx, num_points,
                 loss: RobustLoss | None = None, depth_mode: bool = False,
                 depths=None, seed: int = 0):
        self.rays = np.asarray(rays, dtype=np.float64)
        self.fixed_rotations = np.asarray(fixed_rotations, dtype=np.float64)
        self.cam_idx = np.asarray(cam_idx, dtype=np.int64)
        self.pt_idx = np.asarray(pt_idx, dtype=np.int64)
        self.loss = loss or RobustLoss("trivial")
        self.depth_mode = depth_mode
        self.depths = None if depths is None else np.asarray(depths, dtype=np.float64)
        self.gauge_fixed = False
        self.seed = seed

        c = len(self.fixed_rotations)
        n = len(self.cam_idx)
        self.num_cameras, self.num_points, self.num_obs = c, num_points, n
        if depth_mode:
            if self.depths is None or len(self.depths) != n:
                raise MissingDepth("depth mode requires a depth per observation")
            kinds = ["gp_center"] * c + ["gp_point"] * num_points
            per_obs = 2
        else:
            kinds = ["gp_center"] * c + ["gp_point"] * num_points + ["gp_scale"] * n
            per_obs = 3
        self.layout = BlockLayout(kinds, [3] * n)

        res_ids = np.repeat(np.arange(n, dtype=np.int32), per_obs)
        param_ids = np.empty((n, per_obs), dtype=np.int32)
        param_ids[:, 0] = self.cam_idx
        param_ids[:, 1] = c + self.pt_idx
        if not depth_mode:
            param_ids[:, 2] = c + num_points + np.arange(n)
        self.jac = BlockSparseJacobian.allocate(self.layout, res_ids, param_ids.ravel())
        self._row = self.jac.data.reshape(n, 9 + 9 + 3 * (0 if depth_mode else 1))
        self._residuals = np.zeros(3 * n)

    # -- theta packing ------------------------------------------------------

    def initial_theta(self) -> np.ndarray:
        """Random unit-cube centers and points, unit scales, seeded."""
        rng = np.random.default_rng(self.seed)
        theta = np.empty(self.layout.total_params)
        c, p = self.num_cameras, self.num_points
        theta[:3 * c] = rng.uniform(0.0, 1.0, 3 * c)
        theta[3 * c:3 * (c + p)] = rng.uniform(0.0, 1.0, 3 * p)
        if not self.depth_mode:
            theta[3 * (c + p):] = 1.0
        return theta

    def views(self, theta: np.ndarray):
        c, p = self.num_cameras, self.num_points
        centers = theta[:3 * c].reshape(c, 3)
        points = theta[3 * c:3 * (c + p)].reshape(p, 3)
        scales = None if self.depth_mode else theta[3 * (c + p):]
        return centers, points, scales

    def _obs_scales(self, scales):
        if self.depth_mode:
            return 1.0 / self.depths
        return scales

    # -- evaluation ---------------------------------------------------------

    def _blocks(self, theta: np.ndarray):
        centers, points, scales = self.views(theta)
        d = self._obs_scales(scales)
        span = points[self.pt_idx] - centers[self.cam_idx]
        block = self.rays - d[:, None] * span
        return block, span, d

    def cost(self, theta: np.ndarray) -> float:
        block, _, _ = self._blocks(theta)
        s = np.einsum("ni,ni->n", block, block)
        costs, _ = robust_weight_many(self.loss, s)
        return float(costs.sum())

    def linearize(self, theta: np.ndarray):
        block, span, d = self._blocks(theta)
        n = self.num_obs
        s = np.einsum("ni,ni->n", block, block)
        _, weights = robust_weight_many(self.loss, s)
        sw = np.sqrt(weights)

        row = self._row
        eye = np.eye(3)
        center_block = row[:, 0:9].reshape(n, 3, 3)
        center_block[:] = (d * sw)[:, None, None] * eye
        if self.gauge_fixed:
            center_block[self.cam_idx == 0] = 0.0
        row[:, 9:18].reshape(n, 3, 3)[:] = (-d * sw)[:, None, None] * eye
        if not self.depth_mode:
            row[:, 18:21] = -span * sw[:, None]

        res = self._residuals.reshape(n, 3)
        res[:] = block * sw[:, None]
        return self._residuals, self.jac

    def post_step(self, theta: np.ndarray) -> np.ndarray:
        if self.depth_mode:
            return theta
        out = theta.copy()
        centers, points, scales = self.views(out)
        if self.gauge_fixed:
            m = float(scales.mean())
            if m > 0 and np.isfinite(m):
                # gauge transform d -> d/m, x -> m x + (1 - m) t0 keeps the
                # residuals unchanged and camera 0's center in place
                t0 = centers[0].copy()
                scales /= m
                centers *= m
                centers += (1.0 - m) * t0
                points *= m
                points += (1.0 - m) * t0
        np.maximum(scales, SCALE_FLOOR, out=scales)
        return out


def make_rays(scene: Scene, depth_mode: bool = False,
              loss: RobustLoss | None = None, seed: int = 0) -> GPProblem:
    """Build a GPProblem from a scene's observations.

    Rays are unit world-frame directions through each pixel,
    v = normalize(R(q)^T ((u - cx)/f, (v - cy)/f, 1)); rotations and focals
    are taken from the scene and held fixed.

    Observation depths follow the depth-map convention (camera-frame z) and
    are converted to distances along the unit ray, z * |(px/f, py/f, 1)|, so
    that 1/depth is the exact inverse scale of the ray residual at the true
    geometry.
    """
    arr = scene_to_arrays(scene)
    if depth_mode and arr.depths is None:
        raise MissingDepth("depth mode requires observations with depth")
    dirs = np.empty((scene.num_observations, 3))
    f = arr.focals[arr.cam_idx]
    dirs[:, :2] = (arr.pixels - arr.pps[arr.cam_idx]) / f[:, None]
    dirs[:, 2] = 1.0
    norms = np.linalg.norm(dirs, axis=1)
    q_inv = np.stack([quat_conjugate(q) for q in arr.quats]) \
        if len(arr.quats) else np.zeros((0, 4))
    world = rotate_many(q_inv[arr.cam_idx], dirs)
    rays = world / np.linalg.norm(world, axis=1, keepdims=True)
    ray_depths = arr.depths * norms if (depth_mode and arr.depths is not None) else arr.depths
    return GPProblem(rays, arr.quats, arr.cam_idx, arr.pt_idx,
                     scene.num_points, loss, depth_mode, ray_depths, seed)


def gp_residuals(problem: GPProblem, theta: np.ndarray) -> np.ndarray:
    """Weighted ray residual vector (length 3 * observations)."""
    r, _ = problem.linearize(theta)
    return r.copy()


def gp_jacobian(problem: GPProblem, theta: np.ndarray) -> BlockSparseJacobian:
    """Analytic block Jacobian: +d I for centers, -d I for points, -(X - t)
    for scales (absent in depth mode)."""
    _, j = problem.linearize(theta)
    return j


def fix_gauge(problem: GPProblem) -> GPProblem:
    """Anchor the translation gauge (and the scale gauge in non-depth mode).

    Camera 0's center is held constant by zeroing its Jacobian blocks, which
    the solver treats as a masked parameter; the scale-mean renormalization
    happens in post_step.
    """
    problem.gauge_fixed = True
    return problem


def run_gp(scene: Scene, depth_mode: bool = False,
           loss: RobustLoss | None = None, config: LMConfig | None = None,
           seed: int = 0, workspace: Workspace | None = None) -> tuple[Scene, SolveReport]:
    """Solve global positioning and write centers/points back into a copy of
    the scene; rotations and focals are untouched."""
    problem = fix_gauge(make_rays(scene, depth_mode, loss, seed))
    theta, report = lm_solve(problem, problem.initial_theta(), config, workspace)
    centers, points, _ = problem.views(theta)
    cameras = [Camera(cam.rotation.copy(), centers[i].copy(), cam.focal,
                      np.asarray(cam.principal_point, dtype=np.float64).copy(),
                      cam.model_tag, np.asarray(cam.bal_distortion, dtype=np.float64).copy())
               for i, cam in enumerate(scene.cameras)]
    pts = [Point3D(points[j].copy()) for j in range(scene.num_points)]
    out = Scene(cameras, pts, list(scene.observations))
    return out, report
