"""Bundle adjustment: residuals, analytic Jacobian blocks, pruning.

The reprojection residual for observation (i, j) is

    r_ij = sqrt(w_ij) * (project(camera_i, X_j) - x_ij)

with w_ij the IRLS weight of the robust loss evaluated on the unweighted
squared block norm and frozen within the iteration. Observations behind the
camera are masked: residual and all Jacobian blocks are zeroed for the
current linearization, so they contribute neither cost nor gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyProblem
from .lm import LMConfig, SolveReport, Workspace, lm_solve, renormalize
from .scene import (BAL_RADIAL, DEPTH_EPS, Camera, Observation, Point3D,
                    RobustLoss, Scene, SceneArrays, drotate_dq_many, front_mask,
                    quat_to_matrix_many, robust_weight_many, scene_to_arrays)
from .sparse_block import BlockLayout, BlockSparseJacobian


class BAProblem:
    """Residual/Jacobian provider for Eq.-style reprojection minimization.

    Parameter vector layout: per camera a 7-wide pose block (quaternion then
    center), then one 3-wide block per point, then the focal blocks (one per
    camera, or a single shared block).
    """

    def __init__(self, scene: Scene, loss: RobustLoss | None = None,
                 optimize_focal: bool = True, shared_focal: bool = False):
        if scene.num_observations == 0:
            raise EmptyProblem("scene has no observations")
        self.loss = loss or RobustLoss("trivial")
        self.optimize_focal = optimize_focal
        self.shared_focal = shared_focal
        self.arr: SceneArrays = scene_to_arrays(scene)

        c, p, n = scene.num_cameras, scene.num_points, scene.num_observations
        self.num_cameras, self.num_points, self.num_obs = c, p, n

        kinds = ["camera_pose"] * c + ["point"] * p
        if optimize_focal:
            kinds += ["focal"] if shared_focal else ["focal"] * c
        self.layout = BlockLayout(kinds, [2] * n)

        cam = self.arr.cam_idx
        pose_ids = cam
        point_ids = c + self.arr.pt_idx
        per_obs = 2 + int(optimize_focal)
        res_ids = np.repeat(np.arange(n, dtype=np.int32), per_obs)
        param_ids = np.empty((n, per_obs), dtype=np.int32)
        param_ids[:, 0] = pose_ids
        param_ids[:, 1] = point_ids
        if optimize_focal:
            param_ids[:, 2] = c + p if shared_focal else c + p + cam
        self.jac = BlockSparseJacobian.allocate(self.layout, res_ids, param_ids.ravel())
        self._row = self.jac.data.reshape(n, 14 + 6 + 2 * int(optimize_focal))
        self._residuals = np.zeros(2 * n)

    # -- theta packing ------------------------------------------------------

    def encode(self) -> np.ndarray:
        c = self.num_cameras
        theta = np.empty(self.layout.total_params)
        pose = theta[:7 * c].reshape(c, 7)
        pose[:, :4] = self.arr.quats
        pose[:, 4:] = self.arr.centers
        theta[7 * c:7 * c + 3 * self.num_points] = self.arr.points.ravel()
        if self.optimize_focal:
            off = 7 * c + 3 * self.num_points
            if self.shared_focal:
                theta[off] = self.arr.focals[0]
            else:
                theta[off:off + c] = self.arr.focals
        return theta

    def _views(self, theta: np.ndarray):
        c, p = self.num_cameras, self.num_points
        pose = theta[:7 * c].reshape(c, 7)
        points = theta[7 * c:7 * c + 3 * p].reshape(p, 3)
        if self.optimize_focal:
            off = 7 * c + 3 * p
            focals = np.full(c, theta[off]) if self.shared_focal \
                else theta[off:off + c]
        else:
            focals = self.arr.focals
        return pose[:, :4], pose[:, 4:], points, focals

    def decode(self, theta: np.ndarray) -> Scene:
        quats, centers, points, focals = self._views(theta)
        cameras = [Camera(quats[i] / np.linalg.norm(quats[i]), centers[i].copy(),
                          float(focals[i]), self.arr.pps[i].copy(),
                          self.arr.model_tag, self.arr.dists[i].copy())
                   for i in range(self.num_cameras)]
        pts = [Point3D(points[j].copy()) for j in range(self.num_points)]
        obs = []
        for k in range(self.num_obs):
            depth = float(self.arr.depths[k]) if self.arr.depths is not None else None
            obs.append(Observation(int(self.arr.cam_idx[k]), int(self.arr.pt_idx[k]),
                                   self.arr.pixels[k].copy(), depth))
        return Scene(cameras, pts, obs)

    # -- evaluation ---------------------------------------------------------

    def _project(self, theta: np.ndarray):
        quats, centers, points, focals = self._views(theta)
        cam, pt = self.arr.cam_idx, self.arr.pt_idx
        q = quats[cam]
        v = points[pt] - centers[cam]
        rot = quat_to_matrix_many(q)
        pcam = np.einsum("nij,nj->ni", rot, v)
        z = pcam[:, 2]
        mask = front_mask(self.arr.model_tag, z)
        safe_z = np.where(np.abs(z) < DEPTH_EPS, 1.0, z)
        f = focals[cam]
        if self.arr.model_tag == BAL_RADIAL:
            k1 = self.arr.dists[cam, 0]
            k2 = self.arr.dists[cam, 1]
            nrm = -pcam[:, :2] / safe_z[:, None]
            r2 = np.einsum("ni,ni->n", nrm, nrm)
            scale = 1.0 + k1 * r2 + k2 * r2 * r2
            uv = f[:, None] * scale[:, None] * nrm + self.arr.pps[cam]
        else:
            uv = f[:, None] * (pcam[:, :2] / safe_z[:, None]) + self.arr.pps[cam]
        return quats, centers, points, focals, q, v, rot, pcam, safe_z, mask, uv

    def cost(self, theta: np.ndarray) -> float:
        *_, mask, uv = self._project(theta)
        diff = uv - self.arr.pixels
        s = np.einsum("ni,ni->n", diff, diff)
        costs, _ = robust_weight_many(self.loss, s)
        return float(np.sum(costs[mask]))

    def linearize(self, theta: np.ndarray):
        (quats, centers, points, focals, q, v, rot, pcam, safe_z,
         mask, uv) = self._project(theta)
        cam = self.arr.cam_idx
        n = self.num_obs
        f = focals[cam]
        z = safe_z

        diff = uv - self.arr.pixels
        s = np.einsum("ni,ni->n", diff, diff)
        _, weights = robust_weight_many(self.loss, s)
        sw = np.where(mask, np.sqrt(weights), 0.0)

        # du/dp (2x3) through the perspective division (and distortion for BAL)
        du_dp = np.zeros((n, 2, 3))
        inv_z = 1.0 / z
        if self.arr.model_tag == BAL_RADIAL:
            k1 = self.arr.dists[cam, 0]
            k2 = self.arr.dists[cam, 1]
            nrm = -pcam[:, :2] * inv_z[:, None]
            r2 = np.einsum("ni,ni->n", nrm, nrm)
            scale = 1.0 + k1 * r2 + k2 * r2 * r2
            dn_dp = np.zeros((n, 2, 3))
            dn_dp[:, 0, 0] = -inv_z
            dn_dp[:, 1, 1] = -inv_z
            dn_dp[:, 0, 2] = pcam[:, 0] * inv_z * inv_z
            dn_dp[:, 1, 2] = pcam[:, 1] * inv_z * inv_z
            du_dn = (f * scale)[:, None, None] * np.eye(2)[None, :, :]
            du_dn += (2.0 * f * (k1 + 2.0 * k2 * r2))[:, None, None] \
                * np.einsum("ni,nj->nij", nrm, nrm)
            du_dp = np.einsum("nij,njk->nik", du_dn, dn_dp)
            du_df = scale[:, None] * nrm
        else:
            du_dp[:, 0, 0] = f * inv_z
            du_dp[:, 1, 1] = f * inv_z
            du_dp[:, 0, 2] = -f * pcam[:, 0] * inv_z * inv_z
            du_dp[:, 1, 2] = -f * pcam[:, 1] * inv_z * inv_z
            du_df = pcam[:, :2] * inv_z[:, None]

        dp_dq = drotate_dq_many(q, v)
        pose_q = np.einsum("nij,njk->nik", du_dp, dp_dq)
        du_dx = np.einsum("nij,njk->nik", du_dp, rot)

        swc = sw[:, None]
        row = self._row
        pose_block = row[:, 0:14].reshape(n, 2, 7)
        pose_block[:, :, :4] = pose_q * sw[:, None, None]
        pose_block[:, :, 4:] = -du_dx * sw[:, None, None]
        row[:, 14:20].reshape(n, 2, 3)[:] = du_dx * sw[:, None, None]
        if self.optimize_focal:
            row[:, 20:22] = du_df * swc

        res = self._residuals.reshape(n, 2)
        res[:] = diff * swc
        return self._residuals, self.jac

    def post_step(self, theta: np.ndarray) -> np.ndarray:
        return renormalize(theta, self.layout)


def ba_residuals(problem: BAProblem, theta: np.ndarray) -> np.ndarray:
    """Weighted, masked reprojection residual vector (length 2 * observations)."""
    r, _ = problem.linearize(theta)
    return r.copy()


def ba_jacobian(problem: BAProblem, theta: np.ndarray) -> BlockSparseJacobian:
    """Analytic block Jacobian at theta, scaled like the residuals."""
    _, j = problem.linearize(theta)
    return j


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class PruneRemap:
    camera_map: np.ndarray   # old index -> new index, -1 when removed
    point_map: np.ndarray
    observation_mask: np.ndarray


def prune(scene: Scene) -> tuple[Scene, PruneRemap]:
    """Drop points seen by fewer than two cameras and cameras left with no
    observations, repeating until a fixed point."""
    c, p = scene.num_cameras, scene.num_points
    cam_idx = np.array([o.camera_id for o in scene.observations], dtype=np.int64)
    pt_idx = np.array([o.point_id for o in scene.observations], dtype=np.int64)
    cam_alive = np.ones(c, dtype=bool)
    pt_alive = np.ones(p, dtype=bool)

    while True:
        obs_alive = cam_alive[cam_idx] & pt_alive[pt_idx] \
            if len(cam_idx) else np.zeros(0, dtype=bool)
        pt_views = np.bincount(pt_idx[obs_alive], minlength=p)
        drop_pt = pt_alive & (pt_views < 2)
        cam_views = np.bincount(cam_idx[obs_alive], minlength=c)
        drop_cam = cam_alive & (cam_views == 0)
        if not drop_pt.any() and not drop_cam.any():
            break
        pt_alive &= ~drop_pt
        cam_alive &= ~drop_cam

    if not obs_alive.any():
        raise EmptyProblem("pruning removed every observation")

    camera_map = np.full(c, -1, dtype=np.int64)
    camera_map[cam_alive] = np.arange(int(cam_alive.sum()))
    point_map = np.full(p, -1, dtype=np.int64)
    point_map[pt_alive] = np.arange(int(pt_alive.sum()))

    cameras = [scene.cameras[i] for i in range(c) if cam_alive[i]]
    points = [scene.points[j] for j in range(p) if pt_alive[j]]
    observations = []
    for k, o in enumerate(scene.observations):
        if obs_alive[k]:
            observations.append(Observation(int(camera_map[o.camera_id]),
                                            int(point_map[o.point_id]),
                                            o.pixel, o.depth))
    return Scene(cameras, points, observations), \
        PruneRemap(camera_map, point_map, obs_alive)


def run_ba(scene: Scene, loss: RobustLoss | None = None,
           config: LMConfig | None = None, optimize_focal: bool = True,
           shared_focal: bool = False,
           workspace: Workspace | None = None) -> tuple[Scene, SolveReport]:
    """Encode, optimize and decode a (pruned) scene."""
    problem = BAProblem(scene, loss, optimize_focal, shared_focal)
    theta, report = lm_solve(problem, problem.encode(), config, workspace)
    return problem.decode(theta), report
