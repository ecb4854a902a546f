import numpy as np
import pytest

from sparsesfm.errors import DimensionMismatch, LayoutMismatch
from sparsesfm.sparse_block import (BlockLayout, BlockSparseJacobian,
                                    apply_damping, diag_scalars, jtj, jtr)

# ---------------------------------------------------------------------------
# Independent dense oracle: assemble J as a dense matrix by direct placement
# and compute the products with plain numpy. Shares nothing with the kernels.
# ---------------------------------------------------------------------------

def dense_jacobian(layout, blocks):
    j = np.zeros((layout.total_residuals, layout.total_params))
    for r, p, arr in blocks:
        r0 = layout.residual_offsets[r]
        p0 = layout.param_offsets[p]
        arr = np.asarray(arr)
        j[r0:r0 + arr.shape[0], p0:p0 + arr.shape[1]] = arr
    return j


def system_to_dense(sys):
    n = sys.layout.total_params
    a = np.zeros((n, n))
    offs = sys.layout.param_offsets
    for k in range(sys.layout.num_param_blocks):
        w = sys.layout.widths[k]
        a[offs[k]:offs[k] + w, offs[k]:offs[k] + w] = sys.diag_block(k)
    for i in range(sys.num_off_blocks):
        pa, pb = sys.off_keys[i]
        blk = sys.off_block(i)
        a[offs[pa]:offs[pa] + blk.shape[0], offs[pb]:offs[pb] + blk.shape[1]] = blk
        a[offs[pb]:offs[pb] + blk.shape[1], offs[pa]:offs[pa] + blk.shape[0]] = blk.T
    return a


def random_ba_blocks(rng, num_cams, num_pts, visibility=1.0):
    """Random BA-patterned blocks: per observation a 2x7 pose, 2x3 point and
    2x1 focal block."""
    kinds = ["camera_pose"] * num_cams + ["point"] * num_pts + ["focal"] * num_cams
    obs = []
    for j in range(num_pts):
        cams = [i for i in range(num_cams) if rng.uniform() < visibility]
        if len(cams) < 2:
            cams = list(rng.choice(num_cams, size=2, replace=False))
        obs.extend((i, j) for i in cams)
    layout = BlockLayout(kinds, [2] * len(obs))
    blocks = []
    for r, (i, j) in enumerate(obs):
        blocks.append((r, i, rng.normal(size=(2, 7))))
        blocks.append((r, num_cams + j, rng.normal(size=(2, 3))))
        blocks.append((r, num_cams + num_pts + i, rng.normal(size=(2, 1))))
    return layout, blocks


class TestJtj:
    def test_empty_jacobian_gives_zero_diagonals(self):
        layout = BlockLayout(["camera_pose", "point"], [])
        j = BlockSparseJacobian.allocate(layout, [], [])
        sys = jtj(j)
        assert np.allclose(sys.diag_block(0), 0.0)
        assert np.allclose(sys.diag_block(1), 0.0)
        assert sys.num_off_blocks == 0

    def test_single_entry_diagonal_is_btb(self):
        layout = BlockLayout(["point"], [2])
        b = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        j = BlockSparseJacobian.from_blocks(layout, [(0, 0, b)])
        sys = jtj(j)
        assert np.allclose(sys.diag_block(0), b.T @ b, rtol=0, atol=0)

    def test_full_visibility_matches_dense_oracle(self):
        rng = np.random.default_rng(42)
        layout, blocks = random_ba_blocks(rng, 3, 8, visibility=1.0)
        j = BlockSparseJacobian.from_blocks(layout, blocks)
        sys = jtj(j)
        jd = dense_jacobian(layout, blocks)
        ref = jd.T @ jd
        got = system_to_dense(sys)
        # absent blocks must be exactly zero: compare everywhere
        err = np.linalg.norm(got - ref) / np.linalg.norm(ref)
        assert err < 1e-10

    def test_absent_blocks_are_exactly_zero(self):
        rng = np.random.default_rng(0)
        layout, blocks = random_ba_blocks(rng, 4, 6, visibility=0.5)
        j = BlockSparseJacobian.from_blocks(layout, blocks)
        sys = jtj(j)
        jd = dense_jacobian(layout, blocks)
        ref = jd.T @ jd
        keys = {tuple(k) for k in sys.off_keys}
        for a in range(layout.num_param_blocks):
            for b in range(a + 1, layout.num_param_blocks):
                if (a, b) not in keys:
                    oa, ob = layout.param_offsets[a], layout.param_offsets[b]
                    wa, wb = layout.widths[a], layout.widths[b]
                    assert np.all(ref[oa:oa + wa, ob:ob + wb] == 0.0)

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        layout, blocks = random_ba_blocks(rng, 3, 5)
        sys = jtj(BlockSparseJacobian.from_blocks(layout, blocks))
        a = system_to_dense(sys)
        assert np.abs(a - a.T).max() < 1e-12
        for k in range(layout.num_param_blocks):
            d = sys.diag_block(k)
            assert np.abs(d - d.T).max() < 1e-12

    def test_shape_mismatch_rejected(self):
        layout = BlockLayout(["point"], [2])
        with pytest.raises(LayoutMismatch):
            BlockSparseJacobian.from_blocks(layout, [(0, 0, np.zeros((2, 7)))])


class TestJtr:
    def test_zero_residuals(self):
        rng = np.random.default_rng(1)
        layout, blocks = random_ba_blocks(rng, 2, 4)
        j = BlockSparseJacobian.from_blocks(layout, blocks)
        assert np.all(jtr(j, np.zeros(layout.total_residuals)) == 0.0)

    def test_single_entry_picks_first_row(self):
        layout = BlockLayout(["camera_pose"], [2])
        b = np.arange(14, dtype=float).reshape(2, 7)
        j = BlockSparseJacobian.from_blocks(layout, [(0, 0, b)])
        out = jtr(j, np.array([1.0, 0.0]))
        assert np.allclose(out, b[0])

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(8)
        layout, blocks = random_ba_blocks(rng, 4, 9, visibility=0.7)
        j = BlockSparseJacobian.from_blocks(layout, blocks)
        r = rng.normal(size=layout.total_residuals)
        jd = dense_jacobian(layout, blocks)
        err = np.linalg.norm(jtr(j, r) - jd.T @ r) / np.linalg.norm(jd.T @ r)
        assert err < 1e-10

    def test_dimension_mismatch(self):
        layout = BlockLayout(["point"], [2])
        j = BlockSparseJacobian.from_blocks(layout, [(0, 0, np.ones((2, 3)))])
        with pytest.raises(DimensionMismatch):
            jtr(j, np.zeros(5))


class TestApplyDamping:
    def test_lambda_zero_is_identity(self):
        rng = np.random.default_rng(2)
        layout, blocks = random_ba_blocks(rng, 2, 4)
        sys = jtj(BlockSparseJacobian.from_blocks(layout, blocks))
        damped = apply_damping(sys, 0.0)
        assert np.array_equal(damped.data, sys.data)

    def test_doubles_diagonal(self):
        layout = BlockLayout(["point"], [2])
        b = np.array([[np.sqrt(2.0), 0, 0], [0, 1, 0]])
        sys = jtj(BlockSparseJacobian.from_blocks(layout, [(0, 0, b)]))
        assert np.isclose(sys.diag_block(0)[0, 0], 2.0)
        damped = apply_damping(sys, 1.0)
        assert np.isclose(damped.diag_block(0)[0, 0], 4.0)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        layout, blocks = random_ba_blocks(rng, 3, 6)
        sys = jtj(BlockSparseJacobian.from_blocks(layout, blocks))
        jd = dense_jacobian(layout, blocks)
        a = jd.T @ jd
        ref = a + 0.5 * np.diag(np.diag(a))
        got = system_to_dense(apply_damping(sys, 0.5))
        assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-12

    def test_zero_diagonal_stays_zero(self):
        layout = BlockLayout(["point"], [2])
        b = np.array([[1.0, 0, 0], [0, 0, 0]])  # third column all zero
        sys = jtj(BlockSparseJacobian.from_blocks(layout, [(0, 0, b)]))
        damped = apply_damping(sys, 10.0)
        assert damped.diag_block(0)[2, 2] == 0.0


class TestMemoryAccounting:
    def test_ba_entry_count_is_three_per_observation(self):
        rng = np.random.default_rng(4)
        layout, blocks = random_ba_blocks(rng, 5, 11, visibility=0.6)
        j = BlockSparseJacobian.from_blocks(layout, blocks)
        assert j.num_entries == 3 * layout.num_residual_blocks

    def test_storage_linear_in_entries(self):
        rng = np.random.default_rng(5)
        layout, blocks = random_ba_blocks(rng, 4, 10)
        j = BlockSparseJacobian.from_blocks(layout, blocks)
        per_obs = 2 * (7 + 3 + 1)
        assert j.data.size == per_obs * layout.num_residual_blocks


class TestBackendParity:
    def test_jtj_jtr_agree_across_backends(self, monkeypatch):
        from sparsesfm import _kernels
        if not _kernels._HAVE_CYTHON:
            pytest.skip("compiled backend unavailable")
        rng = np.random.default_rng(6)
        layout, blocks = random_ba_blocks(rng, 4, 12, visibility=0.8)
        r = rng.normal(size=layout.total_residuals)

        monkeypatch.setenv("SPARSESFM_BACKEND", "cython")
        j1 = BlockSparseJacobian.from_blocks(layout, blocks)
        s1 = jtj(j1)
        g1 = jtr(j1, r)
        monkeypatch.setenv("SPARSESFM_BACKEND", "numpy")
        j2 = BlockSparseJacobian.from_blocks(layout, blocks)
        s2 = jtj(j2)
        g2 = jtr(j2, r)
        np.testing.assert_allclose(s1.data, s2.data, rtol=1e-14, atol=1e-300)
        np.testing.assert_allclose(g1, g2, rtol=1e-14, atol=1e-300)

    def test_deterministic_across_worker_counts(self, monkeypatch):
        rng = np.random.default_rng(7)
        layout, blocks = random_ba_blocks(rng, 5, 15, visibility=0.9)
        r = rng.normal(size=layout.total_residuals)
        outs = []
        for workers in ("1", "4"):
            monkeypatch.setenv("SPARSESFM_WORKERS", workers)
            j = BlockSparseJacobian.from_blocks(layout, blocks)
            outs.append((jtj(j).data.copy(), jtr(j, r).copy()))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])
