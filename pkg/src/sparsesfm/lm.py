"""Levenberg-Marquardt driver and the damped normal-equation solvers.

Per iteration the driver solves (JtJ + lambda diag(JtJ)) dtheta = -Jt r and
applies classic accept/reject damping control. Two linear solvers are
provided: ``schur_pcg`` eliminates point-like blocks (and per-observation
scale blocks first, which couple to points) and runs preconditioned conjugate
gradient on the reduced camera system; ``dense`` materializes the full damped
matrix and factorizes it.

Exactly-zero diagonal scalars are treated as masked parameters: they are
pinned so the corresponding update components stay zero, mirroring the
automatic removal of parameters that produce no gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import CGStall, SingularBlock, SolverFailure, ZeroQuaternion
from .sparse_block import (KIND_CODE, BlockLayout, BlockNormalSystem,
                           BlockSparseJacobian, apply_damping, diag_scalars,
                           jtj, jtr)

_POSE = KIND_CODE["camera_pose"]
_SCALE = KIND_CODE["gp_scale"]
_POINT_CODES = (KIND_CODE["point"], KIND_CODE["gp_point"])

_TINY = 1e-300


@dataclass(slots=True)
class LMConfig:
    max_iterations: int = 100
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 2.0
    lambda_min: float = 1e-10
    lambda_max: float = 1e10
    rel_cost_tol: float = 1e-6
    grad_tol: float = 1e-10
    cg_max_iters: int = 500
    cg_tol: float = 1e-8
    solver: str = "schur_pcg"          # "schur_pcg" | "dense"

    def __post_init__(self):
        for name in ("lambda0", "lambda_up", "lambda_down", "lambda_min",
                     "lambda_max", "rel_cost_tol", "grad_tol", "cg_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (self.lambda_min < self.lambda0 < self.lambda_max):
            raise ValueError("need lambda_min < lambda0 < lambda_max")
        if self.solver not in ("schur_pcg", "dense"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(slots=True)
class IterationRecord:
    iteration: int
    cost_before: float
    cost_after: float
    lam: float
    step_accepted: bool
    cg_iters: int
    wall_time_ns: int


@dataclass(slots=True)
class SolveReport:
    iterations: list[IterationRecord] = field(default_factory=list)
    termination: str = "max_iter"

    @property
    def accepted_costs(self) -> list[float]:
        return [it.cost_after for it in self.iterations if it.step_accepted]

    @property
    def num_accepted(self) -> int:
        return sum(1 for it in self.iterations if it.step_accepted)


class Workspace:
    """Grow-only scratch arena shared across iterations and solver stages."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self.caches: dict = {}

    def take(self, name: str, shape, dtype=np.float64) -> np.ndarray:
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        size = int(np.prod(shape, dtype=np.int64))
        arr = self._arrays.get(name)
        if arr is None or arr.size < size or arr.dtype != np.dtype(dtype):
            arr = np.empty(max(size, 1), dtype=dtype)
            self._arrays[name] = arr
        return arr[:size].reshape(shape)


def renormalize(theta: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Rescale the quaternion segment of every camera_pose block to unit norm."""
    out = np.array(theta, dtype=np.float64, copy=True)
    pose_ids = np.nonzero(layout.kind_codes == _POSE)[0]
    if len(pose_ids) == 0:
        return out
    offs = layout.param_offsets[pose_ids]
    idx = offs[:, None] + np.arange(4, dtype=np.int64)
    quats = out[idx]
    norms = np.linalg.norm(quats, axis=1)
    if (norms < 1e-12).any():
        raise ZeroQuaternion("quaternion norm below 1e-12 during renormalization")
    out[idx] = quats / norms[:, None]
    return out


# ---------------------------------------------------------------------------
# Dense solver path
# ---------------------------------------------------------------------------

class _DensePlan:
    """Flat scatter indices that place every block into the dense matrix."""

    __slots__ = ("n", "diag_idx", "diag_src", "off_idx", "off_idx_t", "off_src",
                 "diag_scalar_idx", "diag_scalar_rows")

    def __init__(self, sys: BlockNormalSystem):
        lay = sys.layout
        n = lay.total_params
        self.n = n
        widths = lay.widths.astype(np.int64)
        offs = lay.param_offsets

        parts_idx, parts_src = [], []
        for w in np.unique(widths):
            ids = np.nonzero(widths == w)[0]
            base = offs[ids]
            rr = (base[:, None] + np.arange(w))[:, :, None] * n
            cc = (base[:, None] + np.arange(w))[:, None, :]
            parts_idx.append((rr + cc).reshape(len(ids), -1))
            parts_src.append(sys.diag_off[ids][:, None] + np.arange(w * w))
        self.diag_idx = np.concatenate([p.ravel() for p in parts_idx]) if parts_idx else np.zeros(0, np.int64)
        self.diag_src = np.concatenate([p.ravel() for p in parts_src]) if parts_src else np.zeros(0, np.int64)

        oi, oit, osrc = [], [], []
        if sys.num_off_blocks:
            wa_all = widths[sys.off_keys[:, 0]]
            wb_all = widths[sys.off_keys[:, 1]]
            shape = wa_all * 8 + wb_all
            for code in np.unique(shape):
                sel = np.nonzero(shape == code)[0]
                wa, wb = int(code // 8), int(code % 8)
                ra = offs[sys.off_keys[sel, 0]]
                cb = offs[sys.off_keys[sel, 1]]
                rows = (ra[:, None] + np.arange(wa))[:, :, None]
                cols = (cb[:, None] + np.arange(wb))[:, None, :]
                oi.append((rows * n + cols).reshape(len(sel), -1).ravel())
                oit.append((cols * n + rows).reshape(len(sel), -1).ravel())
                osrc.append((sys.off_off[sel][:, None] + np.arange(wa * wb)).ravel())
        self.off_idx = np.concatenate(oi) if oi else np.zeros(0, np.int64)
        self.off_idx_t = np.concatenate(oit) if oit else np.zeros(0, np.int64)
        self.off_src = np.concatenate(osrc) if osrc else np.zeros(0, np.int64)

        # positions of the matrix diagonal, for pinning masked parameters
        rows = np.arange(n, dtype=np.int64)
        self.diag_scalar_idx = rows * n + rows
        self.diag_scalar_rows = rows


def materialize_dense(sys: BlockNormalSystem, workspace: Workspace | None = None) -> np.ndarray:
    """Assemble the full damped matrix from the block storage."""
    ws = workspace or Workspace()
    key = ("dense_plan", id(sys.off_keys), id(sys.layout))
    plan = ws.caches.get(key)
    if plan is None or plan.n != sys.layout.total_params:
        plan = _DensePlan(sys)
        ws.caches[key] = plan
    n = plan.n
    a = ws.take("dense_A", (n, n))
    flat = a.reshape(-1)
    flat[:] = 0.0
    flat[plan.diag_idx] = sys.data[plan.diag_src]
    if len(plan.off_idx):
        vals = sys.data[plan.off_src]
        flat[plan.off_idx] = vals
        flat[plan.off_idx_t] = vals
    return a


def _solve_dense(sys: BlockNormalSystem, config: LMConfig, ws: Workspace,
                 info: dict) -> np.ndarray:
    a = materialize_dense(sys, ws)
    n = a.shape[0]
    b = sys.gradient.copy()
    d = np.diagonal(a).copy()
    zero = d == 0.0
    if zero.any():
        if np.abs(b[zero]).max(initial=0.0) != 0.0:
            raise SingularBlock("zero diagonal with non-zero gradient")
        a[zero, zero] = 1.0
        d[zero] = 1.0
    if (d < 0).any():
        raise SingularBlock("negative diagonal in damped system")
    # Jacobi equilibration keeps the factorization residual small when block
    # scales differ by many orders of magnitude.
    s = 1.0 / np.sqrt(d)
    a *= s[None, :]
    a *= s[:, None]
    try:
        # a.T is Fortran-contiguous, so LAPACK factors in place without a copy.
        cf = scipy.linalg.cho_factor(a.T, lower=True, overwrite_a=True,
                                     check_finite=False)
        y = scipy.linalg.cho_solve(cf, s * b, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularBlock(f"dense factorization failed: {exc}") from exc
    info["cg_iters"] = 0
    return s * y


# ---------------------------------------------------------------------------
# Schur + PCG solver path
# ---------------------------------------------------------------------------

def _block_gather_idx(src_off, w, h, transpose):
    """Flat source indices that read a (h0, w0) block as (w, h) row-major."""
    if transpose:
        inner = (np.arange(h)[None, :] * w + np.arange(w)[:, None]).ravel()
    else:
        inner = np.arange(w * h)
    return src_off[:, None] + inner[None, :]


class _SchurPlan:
    """Index schedule for eliminating scale and point blocks.

    Built once per sparsity pattern; every per-iteration operation is then a
    gather, a batched einsum, or a kernel call over these arrays.
    """

    __slots__ = (
        "n_ret", "ret_ids", "ret_widths", "ret_s_off", "ret_rows", "theta_rows_ret",
        "pt_ids", "n_pt", "pt_diag_idx", "pt_theta_rows",
        "u_ret_local", "u_pt_local", "u_w", "u_off", "u_gather",
        "u_ret_rows", "u_src_ids",
        "contrib_ua", "contrib_ub", "contrib_e", "contrib_row", "contrib_col",
        "slot_seg_start", "slot_row", "slot_col", "slot_wa", "slot_wb", "groups",
        "s_diag_idx", "s_diag_src", "s_off_idx", "s_off_idx_t", "s_off_src",
        "sc_ids", "n_sc", "sc_diag_off", "sc_theta_rows", "sc_uc_gather",
        "sc_up_gather", "sc_c_local", "sc_p_local", "sc_u_entry",
        "precond_gather", "precond_widths",
    )

    def __init__(self, sys: BlockNormalSystem):
        lay = sys.layout
        codes = lay.kind_codes
        widths = lay.widths.astype(np.int64)
        p_off = lay.param_offsets

        is_scale = codes == _SCALE
        is_point = np.isin(codes, _POINT_CODES)
        is_ret = ~(is_scale | is_point)

        self.ret_ids = np.nonzero(is_ret)[0]
        self.pt_ids = np.nonzero(is_point)[0]
        self.sc_ids = np.nonzero(is_scale)[0]
        self.n_pt = len(self.pt_ids)
        self.n_sc = len(self.sc_ids)

        self.ret_widths = widths[self.ret_ids]
        self.ret_s_off = np.concatenate([[0], np.cumsum(self.ret_widths)])
        self.n_ret = int(self.ret_s_off[-1])

        # block id -> local indices
        ret_local = np.full(lay.num_param_blocks, -1, dtype=np.int64)
        ret_local[self.ret_ids] = np.arange(len(self.ret_ids))
        pt_local = np.full(lay.num_param_blocks, -1, dtype=np.int64)
        pt_local[self.pt_ids] = np.arange(self.n_pt)
        sc_local = np.full(lay.num_param_blocks, -1, dtype=np.int64)
        sc_local[self.sc_ids] = np.arange(self.n_sc)

        # theta rows of retained blocks, grouped per block for scatter
        self.theta_rows_ret = np.concatenate(
            [p_off[b] + np.arange(widths[b]) for b in self.ret_ids]) \
            if len(self.ret_ids) else np.zeros(0, np.int64)
        self.ret_rows = self.ret_s_off[:-1]

        self.pt_diag_idx = (sys.diag_off[self.pt_ids][:, None]
                            + np.arange(9, dtype=np.int64)) \
            if self.n_pt else np.zeros((0, 9), np.int64)
        self.pt_theta_rows = (p_off[self.pt_ids][:, None]
                              + np.arange(3, dtype=np.int64)) \
            if self.n_pt else np.zeros((0, 3), np.int64)

        # classify off-diagonal blocks
        ka, kb = sys.off_keys[:, 0].astype(np.int64), sys.off_keys[:, 1].astype(np.int64)
        cat_a = np.where(is_scale[ka], 2, np.where(is_point[ka], 1, 0))
        cat_b = np.where(is_scale[kb], 2, np.where(is_point[kb], 1, 0))

        rr_mask = (cat_a == 0) & (cat_b == 0)
        u3_mask = ((cat_a == 0) & (cat_b == 1)) | ((cat_a == 1) & (cat_b == 0))
        cs_mask = (cat_a == 0) & (cat_b == 2)
        ps_mask = (cat_a == 1) & (cat_b == 2)
        bad = ~(rr_mask | u3_mask | cs_mask | ps_mask)
        if bad.any():
            i = int(np.nonzero(bad)[0][0])
            raise SingularBlock(
                f"unsupported coupling between blocks {tuple(sys.off_keys[i])}")

        # --- U blocks (retained x point), stored as (w_ret, 3) in a scratch buffer
        u_sel = np.nonzero(u3_mask)[0]
        a_is_ret = cat_a[u_sel] == 0
        u_ret_blk = np.where(a_is_ret, ka[u_sel], kb[u_sel])
        u_pt_blk = np.where(a_is_ret, kb[u_sel], ka[u_sel])
        self.u_ret_local = ret_local[u_ret_blk]
        self.u_pt_local = pt_local[u_pt_blk]
        self.u_w = widths[u_ret_blk].astype(np.int32)
        sizes = self.u_w.astype(np.int64) * 3
        self.u_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.u_src_ids = u_sel
        # gather indices, grouped by (width, transposed) and scattered back
        # into entry order so they align with u_off
        self.u_gather = np.zeros(int(self.u_off[-1]), dtype=np.int64)
        for w in np.unique(self.u_w) if len(u_sel) else []:
            for transposed in (False, True):
                sel = np.nonzero((self.u_w == w) & (a_is_ret != transposed))[0]
                if not len(sel):
                    continue
                g = _block_gather_idx(sys.off_off[u_sel[sel]], int(w), 3,
                                      transpose=transposed)
                tgt = self.u_off[sel][:, None] + np.arange(int(w) * 3, dtype=np.int64)
                self.u_gather[tgt.ravel()] = g.ravel()
        self.u_ret_rows = self.ret_s_off[self.u_ret_local] \
            if len(u_sel) else np.zeros(0, np.int64)

        # --- contributions to the reduced system, one slot per retained pair
        if len(u_sel):
            order = np.lexsort((np.arange(len(u_sel)), self.u_ret_local, self.u_pt_local))
            counts = np.bincount(self.u_pt_local[order], minlength=self.n_pt)
            seg_begin = np.concatenate([[0], np.cumsum(counts)])[:-1]
            pa_list, pb_list = [], []
            for m in np.unique(counts):
                if m == 0:
                    continue
                pts = np.nonzero(counts == m)[0]
                ti, tj = np.triu_indices(int(m))
                base = seg_begin[pts]
                pa_list.append((base[:, None] + ti[None, :]).ravel())
                pb_list.append((base[:, None] + tj[None, :]).ravel())
            ca = np.concatenate(pa_list)
            cb = np.concatenate(pb_list)
            ua = order[ca]
            ub = order[cb]
            e_of = self.u_pt_local[ua]
            ra, rb = self.u_ret_local[ua], self.u_ret_local[ub]
            wa, wb = self.u_w[ua].astype(np.int64), self.u_w[ub].astype(np.int64)
            slot_code = ra * len(self.ret_ids) + rb
            shape_code = wa * 8 + wb
            c_order = np.lexsort((np.arange(len(ua)), slot_code, shape_code))
            ua, ub, e_of = ua[c_order], ub[c_order], e_of[c_order]
            slot_code = slot_code[c_order]
            shape_sorted = shape_code[c_order]
            self.contrib_ua = ua.astype(np.int32)
            self.contrib_ub = ub.astype(np.int32)
            self.contrib_e = e_of.astype(np.int32)
            self.contrib_row = self.ret_s_off[self.u_ret_local[ua]]
            self.contrib_col = self.ret_s_off[self.u_ret_local[ub]]
            change = np.nonzero(np.diff(slot_code) != 0)[0] + 1
            starts = np.concatenate([[0], change, [len(slot_code)]]).astype(np.int64)
            self.slot_seg_start = starts
            first = starts[:-1]
            self.slot_row = self.contrib_row[first]
            self.slot_col = self.contrib_col[first]
            self.slot_wa = self.u_w[ua[first]].astype(np.int32)
            self.slot_wb = self.u_w[ub[first]].astype(np.int32)
            self.groups = []
            gchange = np.nonzero(np.diff(shape_sorted) != 0)[0] + 1
            gstarts = np.concatenate([[0], gchange, [len(shape_sorted)]])
            for gi in range(len(gstarts) - 1):
                c0, c1 = int(gstarts[gi]), int(gstarts[gi + 1])
                gwa, gwb = divmod(int(shape_sorted[c0]), 8)
                self.groups.append((c0, c1, gwa, gwb))
        else:
            self.contrib_ua = np.zeros(0, np.int32)
            self.contrib_ub = np.zeros(0, np.int32)
            self.contrib_e = np.zeros(0, np.int32)
            self.contrib_row = np.zeros(0, np.int64)
            self.contrib_col = np.zeros(0, np.int64)
            self.slot_seg_start = np.zeros(1, np.int64)
            self.slot_row = np.zeros(0, np.int64)
            self.slot_col = np.zeros(0, np.int64)
            self.slot_wa = np.zeros(0, np.int32)
            self.slot_wb = np.zeros(0, np.int32)
            self.groups = []

        # --- direct part of S: retained diagonal and retained-retained blocks
        di, ds = [], []
        for w in np.unique(self.ret_widths) if len(self.ret_ids) else []:
            sel = np.nonzero(self.ret_widths == w)[0]
            base = self.ret_s_off[sel]
            rows = (base[:, None] + np.arange(w))[:, :, None] * self.n_ret
            cols = (base[:, None] + np.arange(w))[:, None, :]
            di.append((rows + cols).reshape(len(sel), -1).ravel())
            ds.append((sys.diag_off[self.ret_ids[sel]][:, None]
                       + np.arange(w * w)).ravel())
        self.s_diag_idx = np.concatenate(di) if di else np.zeros(0, np.int64)
        self.s_diag_src = np.concatenate(ds) if ds else np.zeros(0, np.int64)

        oi, oit, osrc = [], [], []
        rr_sel = np.nonzero(rr_mask)[0]
        if len(rr_sel):
            wa_all = widths[ka[rr_sel]]
            wb_all = widths[kb[rr_sel]]
            shape = wa_all * 8 + wb_all
            for code in np.unique(shape):
                sel = rr_sel[shape == code]
                wa, wb = int(code // 8), int(code % 8)
                rbase = self.ret_s_off[ret_local[ka[sel]]]
                cbase = self.ret_s_off[ret_local[kb[sel]]]
                rows = (rbase[:, None] + np.arange(wa))[:, :, None]
                cols = (cbase[:, None] + np.arange(wb))[:, None, :]
                oi.append((rows * self.n_ret + cols).reshape(len(sel), -1).ravel())
                oit.append((cols * self.n_ret + rows).reshape(len(sel), -1).ravel())
                osrc.append((sys.off_off[sel][:, None] + np.arange(wa * wb)).ravel())
        self.s_off_idx = np.concatenate(oi) if oi else np.zeros(0, np.int64)
        self.s_off_idx_t = np.concatenate(oit) if oit else np.zeros(0, np.int64)
        self.s_off_src = np.concatenate(osrc) if osrc else np.zeros(0, np.int64)

        # --- scale elimination schedule (gp problems)
        if self.n_sc:
            cs_sel = np.nonzero(cs_mask)[0]
            ps_sel = np.nonzero(ps_mask)[0]
            if len(cs_sel) != self.n_sc or len(ps_sel) != self.n_sc:
                raise SingularBlock("every scale block must couple one retained "
                                    "and one point block")
            cs_scale = sc_local[kb[cs_sel]]
            ps_scale = sc_local[kb[ps_sel]]
            cs_by_scale = cs_sel[np.argsort(cs_scale, kind="stable")]
            ps_by_scale = ps_sel[np.argsort(ps_scale, kind="stable")]
            if (widths[ka[cs_by_scale]] != 3).any():
                raise SingularBlock("scale blocks may only couple width-3 "
                                    "retained blocks")
            self.sc_diag_off = sys.diag_off[self.sc_ids]
            self.sc_theta_rows = p_off[self.sc_ids]
            # (3,1) blocks read as 3-vectors
            self.sc_uc_gather = (sys.off_off[cs_by_scale][:, None]
                                 + np.arange(3, dtype=np.int64))
            self.sc_up_gather = (sys.off_off[ps_by_scale][:, None]
                                 + np.arange(3, dtype=np.int64))
            self.sc_c_local = ret_local[ka[cs_by_scale]]
            self.sc_p_local = pt_local[ka[ps_by_scale]]
            # U entry joining this scale's (retained, point) pair
            u_code = self.u_ret_local * (self.n_pt + 1) + self.u_pt_local
            u_sorted = np.argsort(u_code, kind="stable")
            want = self.sc_c_local * (self.n_pt + 1) + self.sc_p_local
            pos = np.searchsorted(u_code[u_sorted], want)
            if (pos >= len(u_sorted)).any() or \
                    (u_code[u_sorted[np.minimum(pos, len(u_sorted) - 1)]] != want).any():
                raise SingularBlock("scale block without matching camera-point "
                                    "coupling")
            self.sc_u_entry = u_sorted[pos]
        else:
            self.sc_diag_off = np.zeros(0, np.int64)
            self.sc_theta_rows = np.zeros(0, np.int64)
            self.sc_uc_gather = np.zeros((0, 3), np.int64)
            self.sc_up_gather = np.zeros((0, 3), np.int64)
            self.sc_c_local = np.zeros(0, np.int64)
            self.sc_p_local = np.zeros(0, np.int64)
            self.sc_u_entry = np.zeros(0, np.int64)

        # --- block-Jacobi preconditioner gather (rows of S diag sub-blocks)
        pg, pw = [], []
        for w in np.unique(self.ret_widths) if len(self.ret_ids) else []:
            sel = np.nonzero(self.ret_widths == w)[0]
            base = self.ret_s_off[sel]
            rows = (base[:, None] + np.arange(w))[:, :, None] * self.n_ret
            cols = (base[:, None] + np.arange(w))[:, None, :]
            pg.append((rows + cols).reshape(len(sel), w, w))
            pw.append((int(w), sel))
        self.precond_gather = pg
        self.precond_widths = pw


def _get_schur_plan(sys: BlockNormalSystem, ws: Workspace) -> _SchurPlan:
    key = ("schur_plan", id(sys.off_keys), id(sys.layout))
    plan = ws.caches.get(key)
    if plan is None:
        plan = _SchurPlan(sys)
        ws.caches[key] = plan
    return plan


def _invert_elim_blocks(blocks: np.ndarray, grad_seg: np.ndarray) -> np.ndarray:
    """Invert damped 3x3 blocks; exactly-zero diagonal scalars are pinned.

    A pinned direction requires a zero gradient component, otherwise the
    system is inconsistent and SingularBlock is raised.
    """
    d = np.einsum("nii->ni", blocks).copy()
    zero = d == 0.0
    if zero.any():
        if np.abs(grad_seg[zero]).max(initial=0.0) != 0.0:
            raise SingularBlock("masked point direction with non-zero gradient")
        idx = np.nonzero(zero)
        blocks[idx[0], idx[1], idx[1]] = 1.0
    det = np.linalg.det(blocks)
    if not (det > 0).all() or not np.isfinite(det).all():
        bad = int(np.nonzero(~(det > 0) | ~np.isfinite(det))[0][0])
        raise SingularBlock(f"eliminable block {bad} singular after damping "
                            f"(det {det[bad]!r})")
    return np.linalg.inv(blocks)


def _precond_factors(plan: _SchurPlan, s_flat: np.ndarray) -> list:
    factors = []
    for (w, sel), gather in zip(plan.precond_widths, plan.precond_gather):
        blocks = s_flat[gather]
        try:
            inv = np.linalg.inv(blocks)
        except np.linalg.LinAlgError as exc:
            raise SingularBlock(f"singular preconditioner block: {exc}") from exc
        if not np.isfinite(inv).all():
            raise SingularBlock("non-finite preconditioner block")
        factors.append((w, sel, inv))
    return factors


def _apply_precond(plan: _SchurPlan, factors, r: np.ndarray, out: np.ndarray) -> None:
    for (w, sel, inv) in factors:
        base = plan.ret_s_off[sel]
        rows = base[:, None] + np.arange(w, dtype=np.int64)
        out[rows] = np.einsum("nij,nj->ni", inv, r[rows])


def _solve_schur(sys: BlockNormalSystem, config: LMConfig, ws: Workspace,
                 info: dict) -> np.ndarray:
    plan = _get_schur_plan(sys, ws)
    lay = sys.layout
    n_ret = plan.n_ret

    g_work = ws.take("schur_g", lay.total_params)
    g_work[:] = sys.gradient

    # U blocks and point diagonals, working copies (scale elimination updates them)
    u_data = ws.take("schur_u", int(plan.u_off[-1]))
    u_data[:] = sys.data[plan.u_gather] if len(plan.u_gather) else 0.0
    d_pt = ws.take("schur_dpt", (plan.n_pt, 3, 3))
    if plan.n_pt:
        d_pt.reshape(plan.n_pt, 9)[:] = sys.data[plan.pt_diag_idx]

    # direct part of S
    s_mat = ws.take("schur_S", (n_ret, n_ret))
    s_flat = s_mat.reshape(-1)
    s_flat[:] = 0.0
    s_flat[plan.s_diag_idx] = sys.data[plan.s_diag_src]
    if len(plan.s_off_idx):
        vals = sys.data[plan.s_off_src]
        s_flat[plan.s_off_idx] = vals
        s_flat[plan.s_off_idx_t] = vals

    # ---- stage 1: eliminate per-observation scale blocks
    if plan.n_sc:
        d_sc = sys.data[plan.sc_diag_off]
        b_sc = g_work[plan.sc_theta_rows].copy()
        u_c = sys.data[plan.sc_uc_gather]
        u_p = sys.data[plan.sc_up_gather]
        zero = d_sc == 0.0
        if zero.any():
            bad = (np.abs(b_sc[zero]).max(initial=0.0) != 0.0
                   or np.abs(u_c[zero]).max(initial=0.0) != 0.0
                   or np.abs(u_p[zero]).max(initial=0.0) != 0.0)
            if bad:
                raise SingularBlock("masked scale with non-zero coupling")
        inv_d = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, d_sc))

        # retained (camera) diagonal updates, applied directly to S
        c_rows = (plan.ret_s_off[plan.sc_c_local][:, None]
                  + np.arange(3, dtype=np.int64))
        s_idx = (c_rows[:, :, None] * n_ret + c_rows[:, None, :])
        np.subtract.at(s_flat, s_idx.ravel(),
                       (inv_d[:, None, None] * np.einsum("ni,nj->nij", u_c, u_c)).ravel())
        # point diagonal updates
        np.subtract.at(d_pt, plan.sc_p_local,
                       inv_d[:, None, None] * np.einsum("ni,nj->nij", u_p, u_p))
        # camera-point coupling updates land on the matching U block
        upd = inv_d[:, None, None] * np.einsum("ni,nj->nij", u_c, u_p)
        u_idx = (plan.u_off[plan.sc_u_entry][:, None]
                 + np.arange(9, dtype=np.int64))
        np.subtract.at(u_data, u_idx.ravel(), upd.reshape(len(u_idx), 9).ravel())
        # gradient updates
        theta_c_rows = plan.theta_rows_ret[c_rows]
        np.subtract.at(g_work, theta_c_rows.ravel(),
                       (inv_d[:, None] * b_sc[:, None] * u_c).ravel())
        np.subtract.at(g_work, plan.pt_theta_rows[plan.sc_p_local].ravel(),
                       (inv_d[:, None] * b_sc[:, None] * u_p).ravel())

    # ---- stage 2: eliminate point blocks
    if plan.n_pt:
        b_pt = g_work[plan.pt_theta_rows]
        minv = _invert_elim_blocks(d_pt, b_pt)
        y_pt = np.einsum("nij,nj->ni", minv, b_pt)
    else:
        minv = np.zeros((0, 3, 3))
        y_pt = np.zeros((0, 3))

    b_red = ws.take("schur_b", n_ret)
    b_red[:] = g_work[plan.theta_rows_ret]
    if len(plan.u_src_ids):
        rows_all = []
        vals_all = []
        for w in np.unique(plan.u_w):
            sel = np.nonzero(plan.u_w == w)[0]
            blocks = u_data[plan.u_off[sel][:, None]
                            + np.arange(int(w) * 3, dtype=np.int64)]
            blocks = blocks.reshape(len(sel), int(w), 3)
            contrib = np.einsum("nij,nj->ni", blocks, y_pt[plan.u_pt_local[sel]])
            rows = plan.u_ret_rows[sel][:, None] + np.arange(int(w), dtype=np.int64)
            rows_all.append(rows.ravel())
            vals_all.append(contrib.ravel())
        np.subtract.at(b_red, np.concatenate(rows_all), np.concatenate(vals_all))

        backend = _kernels.get_backend()
        backend.schur_fill(plan, u_data, np.ascontiguousarray(minv), s_mat,
                           _kernels.worker_count())

    # pin masked retained directions
    sd = np.diagonal(s_mat).copy()
    zero = sd == 0.0
    if zero.any():
        if np.abs(b_red[zero]).max(initial=0.0) != 0.0:
            raise SingularBlock("masked retained direction with non-zero gradient")
        idx = np.nonzero(zero)[0]
        s_mat[idx, idx] = 1.0

    # ---- PCG on the reduced system
    factors = _precond_factors(plan, s_flat)
    ref = float(np.linalg.norm(sys.gradient))
    tol = config.cg_tol * max(ref, _TINY)
    x = ws.take("cg_x", n_ret)
    x[:] = 0.0
    r = b_red.copy()
    z = np.empty_like(r)
    cg_iters = 0
    rn = float(np.linalg.norm(r))
    if rn > tol:
        _apply_precond(plan, factors, r, z)
        p = z.copy()
        rho = float(r @ z)
        while True:
            if cg_iters >= config.cg_max_iters:
                raise CGStall(f"CG did not reach tolerance in "
                              f"{config.cg_max_iters} iterations "
                              f"(|r| {rn:.3e}, tol {tol:.3e})")
            q = s_mat @ p
            pq = float(p @ q)
            if not np.isfinite(pq) or pq <= 0.0:
                raise CGStall(f"CG broke down (p.q = {pq!r})")
            alpha = rho / pq
            x += alpha * p
            r -= alpha * q
            cg_iters += 1
            rn = float(np.linalg.norm(r))
            if rn <= tol:
                break
            _apply_precond(plan, factors, r, z)
            rho_new = float(r @ z)
            p *= rho_new / rho
            p += z
            rho = rho_new
    info["cg_iters"] = cg_iters

    # ---- back-substitution
    delta = np.zeros(lay.total_params)
    delta[plan.theta_rows_ret] = x
    if plan.n_pt:
        tmp = y_pt.copy()  # M (b_e - U^T x); start from M b_e
        if len(plan.u_src_ids):
            acc = np.zeros((plan.n_pt, 3))
            for w in np.unique(plan.u_w):
                sel = np.nonzero(plan.u_w == w)[0]
                blocks = u_data[plan.u_off[sel][:, None]
                                + np.arange(int(w) * 3, dtype=np.int64)]
                blocks = blocks.reshape(len(sel), int(w), 3)
                rows = plan.u_ret_rows[sel][:, None] + np.arange(int(w), dtype=np.int64)
                contrib = np.einsum("nij,ni->nj", blocks, x[rows])
                np.add.at(acc, plan.u_pt_local[sel], contrib)
            tmp -= np.einsum("nij,nj->ni", minv, acc)
        delta[plan.pt_theta_rows.ravel()] = tmp.ravel()

    if plan.n_sc:
        d_sc = sys.data[plan.sc_diag_off]
        zero = d_sc == 0.0
        inv_d = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, d_sc))
        u_c = sys.data[plan.sc_uc_gather]
        u_p = sys.data[plan.sc_up_gather]
        b_sc = sys.gradient[plan.sc_theta_rows]
        dc = delta[plan.theta_rows_ret[
            plan.ret_s_off[plan.sc_c_local][:, None] + np.arange(3, dtype=np.int64)]]
        dp = delta[plan.pt_theta_rows[plan.sc_p_local]]
        delta[plan.sc_theta_rows] = inv_d * (
            b_sc - np.einsum("ni,ni->n", u_c, dc) - np.einsum("ni,ni->n", u_p, dp))
    return delta


def solve_normal(sys: BlockNormalSystem, layout: BlockLayout, config: LMConfig,
                 workspace: Workspace | None = None,
                 info: dict | None = None) -> np.ndarray:
    """Solve the damped normal equations for the update step.

    ``sys`` must already be damped (apply_damping) and carry -Jt r in its
    gradient. Raises SingularBlock or CGStall on failure.
    """
    ws = workspace or Workspace()
    if info is None:
        info = {}
    if config.solver == "dense":
        return _solve_dense(sys, config, ws, info)
    return _solve_schur(sys, config, ws, info)


# ---------------------------------------------------------------------------
# LM driver
# ---------------------------------------------------------------------------

def lm_solve(problem, theta0: np.ndarray, config: LMConfig | None = None,
             workspace: Workspace | None = None) -> tuple[np.ndarray, SolveReport]:
    """Levenberg-Marquardt with accept/reject damping control.

    ``problem`` provides ``layout``, ``cost(theta)``, ``linearize(theta) ->
    (weighted residuals, BlockSparseJacobian)`` and optionally
    ``post_step(theta)`` (e.g. quaternion renormalization), applied to every
    candidate before it is scored.
    """
    config = config or LMConfig()
    ws = workspace or Workspace()
    layout = problem.layout
    post_step = getattr(problem, "post_step", None)

    theta = np.array(theta0, dtype=np.float64, copy=True)
    if not np.isfinite(theta).all():
        raise ValueError("theta0 must be finite")
    lam = config.lambda0
    report = SolveReport(termination="max_iter")

    cost = float(problem.cost(theta))
    sys = None
    grad = None
    need_linearize = True
    residuals = None
    jac = None

    for it in range(1, config.max_iterations + 1):
        t0 = time.perf_counter_ns()
        if need_linearize:
            residuals, jac = problem.linearize(theta)
            sys = jtj(jac, out=sys)
            grad = jtr(jac, residuals, out=grad)
            np.negative(grad, out=sys.gradient)
            need_linearize = False
            if float(np.abs(grad).max(initial=0.0)) < config.grad_tol:
                report.termination = "converged_grad"
                break

        damped = apply_damping(sys, lam)
        info = {}
        try:
            delta = solve_normal(damped, layout, config, ws, info)
            candidate = theta + delta
            if post_step is not None:
                candidate = post_step(candidate)
            cost_new = float(problem.cost(candidate))
            solve_failed = False
        except (SingularBlock, CGStall, ZeroQuaternion) as exc:
            if lam >= config.lambda_max:
                report.termination = "solver_failure"
                raise SolverFailure(f"linear solve failed at lambda_max: {exc}",
                                    report) from exc
            cost_new = float("nan")
            solve_failed = True

        accepted = (not solve_failed) and np.isfinite(cost_new) and cost_new < cost
        report.iterations.append(IterationRecord(
            it, cost, cost_new, lam, accepted,
            int(info.get("cg_iters", 0)), time.perf_counter_ns() - t0))

        if accepted:
            rel_dec = (cost - cost_new) / max(cost, _TINY)
            theta = candidate
            cost = cost_new
            lam = max(lam / config.lambda_down, config.lambda_min)
            need_linearize = True
            if rel_dec < config.rel_cost_tol:
                report.termination = "converged_cost"
                break
        else:
            lam = min(lam * config.lambda_up, config.lambda_max)

    return theta, report
