import numpy as np
import pytest

from sparsesfm.errors import MissingDepth
from sparsesfm.gp import (GPProblem, fix_gauge, gp_jacobian, gp_residuals,
                          make_rays, run_gp)
from sparsesfm.lm import LMConfig, lm_solve
from sparsesfm.scene import (Camera, Observation, Point3D, RobustLoss, Scene,
                             quat_from_axis_angle)
from sparsesfm.synth_metrics import (SynthConfig, align, center_rmse, generate,
                                     scene_diameter)
from .test_ba import dense_from_sparse, fd_jacobian


def ray_scene(pixels, f=1.0, q=None):
    q = np.array([1.0, 0, 0, 0]) if q is None else q
    cams = [Camera(q.copy(), np.zeros(3), f)]
    pts = [Point3D(np.array([0.0, 0.0, float(j + 1)])) for j in range(len(pixels))]
    obs = [Observation(0, j, np.asarray(px, dtype=float)) for j, px in enumerate(pixels)]
    return Scene(cams, pts, obs)


class TestMakeRays:
    def test_optical_axis(self):
        p = make_rays(ray_scene([(0.0, 0.0)]))
        assert np.allclose(p.rays[0], [0, 0, 1])

    def test_off_axis_normalized(self):
        p = make_rays(ray_scene([(1.0, 0.0)]))
        assert np.allclose(p.rays[0], np.array([1.0, 0, 1.0]) / np.sqrt(2))

    def test_rotation_about_z_keeps_axis(self):
        q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        p = make_rays(ray_scene([(0.0, 0.0)], q=q))
        assert np.allclose(p.rays[0], [0, 0, 1], atol=1e-15)

    def test_principal_point_and_focal(self):
        scene = ray_scene([(10.0, 4.0)], f=2.0)
        scene.cameras[0].principal_point = np.array([10.0, 2.0])
        p = make_rays(scene)
        expect = np.array([0.0, 1.0, 1.0]) / np.sqrt(2)
        assert np.allclose(p.rays[0], expect)

    def test_depth_mode_requires_depths(self):
        with pytest.raises(MissingDepth):
            make_rays(ray_scene([(0.0, 0.0)]), depth_mode=True)


def manual_theta(problem, centers, points, scales=None):
    parts = [np.asarray(centers, dtype=float).ravel(),
             np.asarray(points, dtype=float).ravel()]
    if not problem.depth_mode:
        parts.append(np.asarray(scales, dtype=float).ravel())
    return np.concatenate(parts)


class TestGpResiduals:
    def test_consistent_triple_is_zero(self):
        p = make_rays(ray_scene([(0.0, 0.0)]))
        theta = manual_theta(p, [[0, 0, 0]], [[0, 0, 2]], [0.5])
        assert np.allclose(gp_residuals(p, theta), 0.0)

    def test_depth_mode_exact_depth_is_zero(self):
        scene = ray_scene([(0.0, 0.0)])
        scene.observations[0].depth = 2.0
        p = make_rays(scene, depth_mode=True)
        theta = manual_theta(p, [[0, 0, 0]], [[0, 0, 2]])
        assert np.allclose(gp_residuals(p, theta), 0.0)

    def test_direct_substitution(self):
        p = make_rays(ray_scene([(0.0, 0.0)]))
        theta = manual_theta(p, [[0, 0, 0]], [[1, 0, 1]], [1.0])
        # v - d (X - t) = (0,0,1) - (1,0,1)
        assert np.allclose(gp_residuals(p, theta), [-1.0, 0.0, 0.0])


class TestGpJacobian:
    @pytest.mark.parametrize("depth_mode", [False, True])
    def test_matches_finite_differences(self, depth_mode):
        rng = np.random.default_rng(4)
        _, observed = generate(SynthConfig(num_cameras=4, num_points=12,
                                           radius=6.0, focal=150.0, seed=8))
        p = make_rays(observed, depth_mode=depth_mode)
        theta = p.initial_theta() + 0.1 * rng.normal(
            size=p.layout.total_params)
        if not depth_mode:
            theta[3 * (p.num_cameras + p.num_points):] = rng.uniform(
                0.5, 2.0, p.num_obs)
        analytic = dense_from_sparse(gp_jacobian(p, theta))
        fd = fd_jacobian(p, theta)
        assert (np.abs(analytic - fd) / (1.0 + np.abs(fd))).max() < 1e-6

    def test_analytic_block_values(self):
        p = make_rays(ray_scene([(0.0, 0.0)]))
        theta = manual_theta(p, [[0.5, 0, 0]], [[0, 0, 2]], [0.7])
        jac = gp_jacobian(p, theta)
        span = np.array([-0.5, 0, 2.0])
        assert np.allclose(jac.entry_block(0), 0.7 * np.eye(3))
        assert np.allclose(jac.entry_block(1), -0.7 * np.eye(3))
        assert np.allclose(jac.entry_block(2), -span.reshape(3, 1))

    def test_zero_scale_leaves_only_scale_column(self):
        p = make_rays(ray_scene([(0.0, 0.0)]))
        theta = manual_theta(p, [[0.5, 0, 0]], [[0, 0, 2]], [0.0])
        jac = gp_jacobian(p, theta)
        assert np.all(jac.entry_block(0) == 0.0)
        assert np.all(jac.entry_block(1) == 0.0)
        assert np.allclose(jac.entry_block(2), -np.array([-0.5, 0, 2.0]).reshape(3, 1))

    def test_depth_mode_has_two_entries_per_residual(self):
        scene = ray_scene([(0.0, 0.0), (1.0, 0.0)])
        for o in scene.observations:
            o.depth = 1.5
        p = make_rays(scene, depth_mode=True)
        assert p.jac.num_entries == 2 * scene.num_observations


class TestGauge:
    def _problem(self):
        _, observed = generate(SynthConfig(num_cameras=4, num_points=10,
                                           radius=5.0, focal=100.0, seed=1))
        return make_rays(observed)

    def test_translation_leaves_residuals_bit_unchanged(self):
        p = self._problem()
        rng = np.random.default_rng(0)
        # grid-snapped values keep the translated sums exactly representable
        c = np.round(rng.uniform(0, 1, (p.num_cameras, 3)) * 1024) / 1024
        x = np.round(rng.uniform(0, 1, (p.num_points, 3)) * 1024) / 1024
        d = rng.uniform(0.5, 2.0, p.num_obs)
        r1 = gp_residuals(p, manual_theta(p, c, x, d))
        r2 = gp_residuals(p, manual_theta(p, c + 5.0, x + 5.0, d))
        assert np.array_equal(r1, r2)

    def test_scale_gauge_invariance(self):
        p = self._problem()
        rng = np.random.default_rng(2)
        c = rng.uniform(0, 1, (p.num_cameras, 3))
        x = rng.uniform(0, 1, (p.num_points, 3))
        d = rng.uniform(0.5, 2.0, p.num_obs)
        c1 = p.cost(manual_theta(p, c, x, d))
        c2 = p.cost(manual_theta(p, 2.0 * c, 2.0 * x, 0.5 * d))
        assert c1 == c2

    def test_depth_mode_breaks_scale_invariance(self):
        _, observed = generate(SynthConfig(num_cameras=4, num_points=10,
                                           radius=5.0, focal=100.0, seed=1))
        p = make_rays(observed, depth_mode=True)
        rng = np.random.default_rng(3)
        c = rng.uniform(0, 1, (p.num_cameras, 3))
        x = rng.uniform(0, 1, (p.num_points, 3))
        c1 = p.cost(manual_theta(p, c, x))
        c2 = p.cost(manual_theta(p, 2.0 * c, 2.0 * x))
        assert abs(c1 - c2) > 1e-6

    def test_post_step_renormalizes_scale_mean_and_keeps_cost(self):
        p = fix_gauge(self._problem())
        rng = np.random.default_rng(5)
        theta = p.initial_theta()
        scales = theta[3 * (p.num_cameras + p.num_points):]
        scales[:] = rng.uniform(0.5, 3.0, p.num_obs)
        cost_before = p.cost(theta)
        out = p.post_step(theta)
        new_scales = out[3 * (p.num_cameras + p.num_points):]
        assert abs(new_scales.mean() - 1.0) < 1e-12
        assert abs(p.cost(out) - cost_before) < 1e-9 * max(cost_before, 1.0)
        # camera 0 center held (up to roundoff of the gauge transform)
        assert np.allclose(out[:3], theta[:3], atol=1e-12)


class TestRunGp:
    def test_consistent_single_camera_converges_immediately(self):
        scene = ray_scene([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])
        p = fix_gauge(make_rays(scene))
        centers = [[0, 0, 0]]
        # points on the rays at d = 1 (unit distance along each unit ray)
        points = p.rays.copy()
        theta0 = manual_theta(p, centers, points, np.ones(3))
        theta, report = lm_solve(p, theta0, LMConfig())
        assert report.termination == "converged_grad"
        assert report.num_accepted == 0
        assert p.cost(theta) == 0.0

    def test_exact_rays_recover_geometry(self):
        truth, observed = generate(SynthConfig(num_cameras=6, num_points=80,
                                               radius=8.0, focal=400.0, seed=11))
        result, report = run_gp(observed, loss=RobustLoss("trivial"),
                                config=LMConfig(max_iterations=200), seed=0)
        assert report.termination in ("converged_cost", "converged_grad")
        _, aligned = align(result, truth, "sim3")
        rmse = center_rmse(aligned, truth)
        assert rmse < 1e-3 * scene_diameter(truth)
        # rotations and focals untouched
        for a, b in zip(result.cameras, observed.cameras):
            assert np.array_equal(a.rotation, b.rotation)
            assert a.focal == b.focal

    def test_depth_mode_recovers_metric_scale(self):
        truth, observed = generate(SynthConfig(num_cameras=6, num_points=80,
                                               radius=8.0, focal=400.0, seed=13))
        result, _ = run_gp(observed, depth_mode=True,
                           loss=RobustLoss("trivial"),
                           config=LMConfig(max_iterations=200), seed=0)
        _, aligned = align(result, truth, "se3")
        assert center_rmse(aligned, truth) < 1e-3 * scene_diameter(truth)

        # doubling every depth doubles the reconstruction
        doubled = Scene(list(observed.cameras), list(observed.points),
                        [Observation(o.camera_id, o.point_id, o.pixel,
                                     2.0 * o.depth)
                         for o in observed.observations])
        result2, _ = run_gp(doubled, depth_mode=True,
                            loss=RobustLoss("trivial"),
                            config=LMConfig(max_iterations=200), seed=0)
        c1 = np.stack([c.center for c in result.cameras])
        c2 = np.stack([c.center for c in result2.cameras])
        d1 = np.linalg.norm(c1 - c1.mean(0), axis=1).mean()
        d2 = np.linalg.norm(c2 - c2.mean(0), axis=1).mean()
        assert abs(d2 / d1 - 2.0) < 0.02
