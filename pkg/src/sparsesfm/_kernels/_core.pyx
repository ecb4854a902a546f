# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels for the block-sparse normal equations.

Every output block is owned by exactly one loop iteration and accumulated
sequentially in the order the pattern arrays prescribe, so results are
bit-identical for any thread count. Scratch accumulators are indexed by
thread id; fixed-size C arrays would be shared across OpenMP threads.
"""

from cython.parallel import prange, threadid

import numpy as np
cimport numpy as cnp

cnp.import_array()


def jtj_fill_cy(double[::1] entry_data,
                long long[::1] entry_off,
                int[::1] entry_h,
                int[::1] entry_w,
                int[::1] contrib_a,
                int[::1] contrib_b,
                long long[::1] seg_start,
                long long[::1] key_out_off,
                double[::1] out_data,
                int workers):
    cdef Py_ssize_t nkeys = key_out_off.shape[0]
    cdef Py_ssize_t k, c, ca, cb
    cdef long long da, db, base
    cdef int h, wa, wb, i, j, r, tid
    cdef double s
    scratch_np = np.zeros((workers, 49))
    cdef double[:, ::1] scratch = scratch_np

    for k in prange(nkeys, nogil=True, schedule="static", num_threads=workers):
        tid = threadid()
        ca = contrib_a[seg_start[k]]
        cb = contrib_b[seg_start[k]]
        wa = entry_w[ca]
        wb = entry_w[cb]
        for i in range(wa * wb):
            scratch[tid, i] = 0.0
        for c in range(seg_start[k], seg_start[k + 1]):
            ca = contrib_a[c]
            cb = contrib_b[c]
            da = entry_off[ca]
            db = entry_off[cb]
            h = entry_h[ca]
            for i in range(wa):
                for j in range(wb):
                    s = 0.0
                    for r in range(h):
                        s = s + entry_data[da + r * wa + i] * entry_data[db + r * wb + j]
                    scratch[tid, i * wb + j] = scratch[tid, i * wb + j] + s
        base = key_out_off[k]
        for i in range(wa * wb):
            out_data[base + i] = scratch[tid, i]


def jtr_fill_cy(double[::1] entry_data,
                long long[::1] entry_off,
                int[::1] entry_h,
                int[::1] entry_w,
                int[::1] by_entry,
                long long[::1] seg_start,
                long long[::1] seg_out,
                long long[::1] res_row,
                double[::1] residuals,
                double[::1] out,
                int workers):
    cdef Py_ssize_t nsegs = seg_out.shape[0]
    cdef Py_ssize_t s, c, e
    cdef long long doff, roff, base
    cdef int h, w, i, r, tid
    cdef double v
    scratch_np = np.zeros((workers, 7))
    cdef double[:, ::1] scratch = scratch_np

    for s in prange(nsegs, nogil=True, schedule="static", num_threads=workers):
        tid = threadid()
        w = entry_w[by_entry[seg_start[s]]]
        for i in range(w):
            scratch[tid, i] = 0.0
        for c in range(seg_start[s], seg_start[s + 1]):
            e = by_entry[c]
            h = entry_h[e]
            doff = entry_off[e]
            roff = res_row[c]
            for i in range(w):
                v = 0.0
                for r in range(h):
                    v = v + entry_data[doff + r * w + i] * residuals[roff + r]
                scratch[tid, i] = scratch[tid, i] + v
        base = seg_out[s]
        for i in range(w):
            out[base + i] = scratch[tid, i]


def schur_fill_cy(double[::1] u_data,
                  long long[::1] u_off,
                  double[:, :, ::1] minv,
                  int[::1] contrib_ua,
                  int[::1] contrib_ub,
                  int[::1] contrib_e,
                  long long[::1] seg_start,
                  long long[::1] slot_row,
                  long long[::1] slot_col,
                  int[::1] slot_wa,
                  int[::1] slot_wb,
                  double[:, ::1] s_mat,
                  int workers):
    """S[slot] -= U_a M U_b^T summed over the slot's contributions.

    S must already hold the direct retained-retained part; off-diagonal slots
    receive the mirrored write too (same owner, still race-free).
    """
    cdef Py_ssize_t nslots = slot_row.shape[0]
    cdef Py_ssize_t s, c
    cdef long long ua, ub, off_a, off_b, r0, c0
    cdef int wa, wb, e, i, j, k, tid
    cdef double v
    scratch_np = np.zeros((workers, 21 + 49))
    cdef double[:, ::1] scratch = scratch_np

    for s in prange(nslots, nogil=True, schedule="static", num_threads=workers):
        tid = threadid()
        wa = slot_wa[s]
        wb = slot_wb[s]
        r0 = slot_row[s]
        c0 = slot_col[s]
        for i in range(wa * wb):
            scratch[tid, 21 + i] = 0.0
        for c in range(seg_start[s], seg_start[s + 1]):
            ua = contrib_ua[c]
            ub = contrib_ub[c]
            e = contrib_e[c]
            off_a = u_off[ua]
            off_b = u_off[ub]
            # tm = U_a @ M, shapes (wa, 3) @ (3, 3)
            for i in range(wa):
                for k in range(3):
                    v = 0.0
                    for j in range(3):
                        v = v + u_data[off_a + i * 3 + j] * minv[e, j, k]
                    scratch[tid, i * 3 + k] = v
            # acc += tm @ U_b^T, shapes (wa, 3) @ (3, wb)
            for i in range(wa):
                for j in range(wb):
                    v = 0.0
                    for k in range(3):
                        v = v + scratch[tid, i * 3 + k] * u_data[off_b + j * 3 + k]
                    scratch[tid, 21 + i * wb + j] = scratch[tid, 21 + i * wb + j] + v
        for i in range(wa):
            for j in range(wb):
                s_mat[r0 + i, c0 + j] -= scratch[tid, 21 + i * wb + j]
        if r0 != c0:
            for i in range(wa):
                for j in range(wb):
                    s_mat[c0 + j, r0 + i] -= scratch[tid, 21 + i * wb + j]
