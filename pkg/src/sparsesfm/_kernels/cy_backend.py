"""Thin wrappers adapting pattern objects to the compiled kernel signatures."""

import numpy as np

from . import _core


def _i32(a):
    return np.ascontiguousarray(a, dtype=np.int32)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def jtj_fill(pat, entry_data, entry_off, entry_h, entry_w, out_data, workers):
    out_data[:] = 0.0
    if len(pat.keys_in_order) == 0:
        return
    _core.jtj_fill_cy(entry_data, _i64(entry_off), _i32(entry_h), _i32(entry_w),
                      pat.contrib_a, pat.contrib_b, pat.seg_start,
                      pat.key_out_off, out_data, int(workers))


def jtr_fill(pat, entry_data, entry_off, entry_h, entry_w, param_ids,
             param_offsets, residuals, out, workers):
    out[:] = 0.0
    if len(pat.params_in_order) == 0:
        return
    _core.jtr_fill_cy(entry_data, _i64(entry_off), _i32(entry_h), _i32(entry_w),
                      pat.by_entry, pat.seg_start, pat.seg_out, pat.res_row,
                      np.ascontiguousarray(residuals, dtype=np.float64), out,
                      int(workers))


def schur_fill(spat, u_data, minv, s_mat, workers):
    if len(spat.slot_row) == 0:
        return
    _core.schur_fill_cy(u_data, spat.u_off, minv,
                        spat.contrib_ua, spat.contrib_ub, spat.contrib_e,
                        spat.slot_seg_start, spat.slot_row, spat.slot_col,
                        spat.slot_wa, spat.slot_wb, s_mat, int(workers))
