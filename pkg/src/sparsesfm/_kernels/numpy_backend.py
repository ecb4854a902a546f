"""Pure-numpy kernels, the fallback when the compiled core is unavailable.

Accumulation uses np.add.at over contribution arrays that the patterns keep
sorted by (shape, output block, source order); np.add.at applies updates
sequentially in array order, so every output block is summed in the same
fixed order the compiled kernels use.
"""

import numpy as np

_CHUNK = 1 << 16


def _gather(data, off, sel, h, w):
    idx = off[sel][:, None] + np.arange(h * w, dtype=np.int64)
    return data[idx].reshape(len(sel), h, w)


def jtj_fill(pat, entry_data, entry_off, entry_h, entry_w, out_data, workers):
    out_data[:] = 0.0
    for c0, c1, k0, k1, h, wa, wb, local in pat.groups:
        ea = pat.contrib_a[c0:c1]
        eb = pat.contrib_b[c0:c1]
        blk_a = _gather(entry_data, entry_off, ea, h, wa)
        blk_b = _gather(entry_data, entry_off, eb, h, wb)
        prods = np.einsum("chw,chv->cwv", blk_a, blk_b)
        buf = np.zeros((k1 - k0, wa, wb))
        np.add.at(buf, local, prods)
        pos = pat.key_out_off[k0:k1][:, None] + np.arange(wa * wb, dtype=np.int64)
        out_data[pos] = buf.reshape(k1 - k0, -1)


def jtr_fill(pat, entry_data, entry_off, entry_h, entry_w, param_ids,
             param_offsets, residuals, out, workers):
    out[:] = 0.0
    for c0, c1, h, w in pat.groups:
        sel = pat.by_entry[c0:c1]
        blocks = _gather(entry_data, entry_off, sel, h, w)
        rows = pat.res_row[c0:c1][:, None] + np.arange(h, dtype=np.int64)
        rblk = residuals[rows]
        contrib = np.einsum("ehw,eh->ew", blocks, rblk)
        flat = param_offsets[param_ids[sel]][:, None] + np.arange(w, dtype=np.int64)
        np.add.at(out, flat.ravel(), contrib.ravel())


def schur_fill(spat, u_data, minv, s_mat, workers):
    """Subtract U_a M U_b^T contributions from the reduced camera system.

    Off-diagonal slots also receive the mirrored write so the dense matrix
    stays symmetric; both writes belong to the same slot owner.
    """
    n = s_mat.shape[0]
    flat = s_mat.reshape(-1)
    for c0, c1, wa, wb in spat.groups:
        for s in range(c0, c1, _CHUNK):
            t = min(s + _CHUNK, c1)
            ua = spat.contrib_ua[s:t]
            ub = spat.contrib_ub[s:t]
            ee = spat.contrib_e[s:t]
            blk_a = _gather(u_data, spat.u_off, ua, wa, 3)
            blk_b = _gather(u_data, spat.u_off, ub, wb, 3)
            tm = np.einsum("nij,njk->nik", blk_a, minv[ee])
            acc = np.einsum("nik,njk->nij", tm, blk_b)
            rows = spat.contrib_row[s:t]
            cols = spat.contrib_col[s:t]
            idx = ((rows[:, None] + np.arange(wa, dtype=np.int64))[:, :, None] * n
                   + (cols[:, None] + np.arange(wb, dtype=np.int64))[:, None, :])
            np.subtract.at(flat, idx.ravel(), acc.ravel())
            offd = rows != cols
            if offd.any():
                idx_t = np.swapaxes(idx[offd], 1, 2)
                np.subtract.at(flat, idx_t.ravel(),
                               np.swapaxes(acc[offd], 1, 2).ravel())
