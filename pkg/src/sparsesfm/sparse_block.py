"""Block-sparse Jacobian storage and the normal-equation kernels.

A Jacobian is stored as a sorted coordinate list of small dense blocks: for
entry ``e``, ``(res_ids[e], param_ids[e])`` names the (residual block, param
block) pair and ``data[data_off[e]:data_off[e+1]]`` holds the block row-major.
Storage is O(entries); nothing of size total_params x total_residuals is ever
materialized here.

The JtJ / Jtr products are computed by a backend kernel (compiled extension
when available, numpy fallback otherwise). Both backends accumulate every
output block in a fixed order owned by exactly one worker, so results are
bit-identical across runs and worker counts.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, LayoutMismatch

# Parameter block kinds and their fixed widths.
KINDS = ("camera_pose", "point", "focal", "gp_center", "gp_point", "gp_scale")
KIND_CODE = {name: i for i, name in enumerate(KINDS)}
WIDTH_BY_CODE = np.array([7, 3, 1, 3, 3, 1], dtype=np.int32)
# Blocks eliminated by the Schur step: point-like and per-observation scales.
ELIMINABLE_BY_CODE = np.array([False, True, False, False, True, True])

_VALID_HEIGHTS = (2, 3)


class BlockLayout:
    """Ordered parameter and residual block structure of a problem."""

    __slots__ = ("kind_codes", "widths", "param_offsets", "residual_heights",
                 "residual_offsets", "total_params", "total_residuals")

    def __init__(self, kinds, residual_heights):
        codes = np.array([KIND_CODE[k] if isinstance(k, str) else int(k) for k in kinds],
                         dtype=np.int8)
        heights = np.asarray(residual_heights, dtype=np.int32)
        if heights.size and not np.isin(heights, _VALID_HEIGHTS).all():
            raise LayoutMismatch(f"residual heights must be in {_VALID_HEIGHTS}")
        self.kind_codes = codes
        self.widths = WIDTH_BY_CODE[codes.astype(np.int32)]
        self.param_offsets = np.concatenate([[0], np.cumsum(self.widths, dtype=np.int64)])
        self.residual_heights = heights
        self.residual_offsets = np.concatenate([[0], np.cumsum(heights, dtype=np.int64)])
        self.total_params = int(self.param_offsets[-1])
        self.total_residuals = int(self.residual_offsets[-1])

    @property
    def num_param_blocks(self) -> int:
        return len(self.kind_codes)

    @property
    def num_residual_blocks(self) -> int:
        return len(self.residual_heights)

    def kind_name(self, block_id: int) -> str:
        return KINDS[self.kind_codes[block_id]]

    def eliminable_mask(self) -> np.ndarray:
        return ELIMINABLE_BY_CODE[self.kind_codes.astype(np.int32)]

    def param_blocks(self):
        """Iterate (block_id, width, kind) tuples."""
        for k in range(self.num_param_blocks):
            yield k, int(self.widths[k]), self.kind_name(k)


class BlockSparseJacobian:
    """Sorted coordinate list of dense Jacobian blocks.

    ``data`` may be rewritten in place between solver iterations; the index
    arrays and the derived product patterns are immutable and cached.
    """

    __slots__ = ("layout", "res_ids", "param_ids", "data", "data_off",
                 "entry_h", "entry_w", "_jtj_pattern", "_jtr_pattern")

    def __init__(self, layout: BlockLayout, res_ids, param_ids, data, data_off,
                 validate: bool = True):
        self.layout = layout
        self.res_ids = np.asarray(res_ids, dtype=np.int32)
        self.param_ids = np.asarray(param_ids, dtype=np.int32)
        self.data = np.asarray(data, dtype=np.float64)
        self.data_off = np.asarray(data_off, dtype=np.int64)
        self.entry_h = layout.residual_heights[self.res_ids]
        self.entry_w = layout.widths[self.param_ids]
        self._jtj_pattern = None
        self._jtr_pattern = None
        if validate:
            self._validate()

    def _validate(self):
        lay = self.layout
        e = len(self.res_ids)
        if len(self.param_ids) != e or len(self.data_off) != e + 1:
            raise LayoutMismatch("index arrays disagree on entry count")
        if e:
            if self.res_ids.min() < 0 or self.res_ids.max() >= lay.num_residual_blocks:
                raise LayoutMismatch("residual block id out of range")
            if self.param_ids.min() < 0 or self.param_ids.max() >= lay.num_param_blocks:
                raise LayoutMismatch("param block id out of range")
            code = self.res_ids.astype(np.int64) * lay.num_param_blocks + self.param_ids
            if not (np.diff(code) > 0).all():
                raise LayoutMismatch("entries must be strictly sorted by (residual, param)")
        sizes = (self.entry_h.astype(np.int64) * self.entry_w)
        if not np.array_equal(np.diff(self.data_off), sizes):
            raise LayoutMismatch("entry data sizes disagree with layout shapes")
        if self.data_off[-1] != self.data.size:
            raise LayoutMismatch("flat data length disagrees with offsets")

    @classmethod
    def allocate(cls, layout: BlockLayout, res_ids, param_ids) -> "BlockSparseJacobian":
        """Zero-filled Jacobian with the given sparsity pattern."""
        res_ids = np.asarray(res_ids, dtype=np.int32)
        param_ids = np.asarray(param_ids, dtype=np.int32)
        sizes = (layout.residual_heights[res_ids].astype(np.int64)
                 * layout.widths[param_ids])
        off = np.concatenate([[0], np.cumsum(sizes)])
        return cls(layout, res_ids, param_ids, np.zeros(int(off[-1])), off)

    @classmethod
    def from_blocks(cls, layout: BlockLayout, blocks) -> "BlockSparseJacobian":
        """Build from an iterable of (residual_block, param_block, array)."""
        blocks = sorted(blocks, key=lambda b: (b[0], b[1]))
        res_ids = np.array([b[0] for b in blocks], dtype=np.int32)
        param_ids = np.array([b[1] for b in blocks], dtype=np.int32)
        parts = []
        for r, p, arr in blocks:
            arr = np.asarray(arr, dtype=np.float64)
            want = (int(layout.residual_heights[r]), int(layout.widths[p]))
            if arr.shape != want:
                raise LayoutMismatch(f"block ({r}, {p}) has shape {arr.shape}, expected {want}")
            parts.append(arr.ravel())
        data = np.concatenate(parts) if parts else np.zeros(0)
        sizes = np.array([p.size for p in parts], dtype=np.int64)
        off = np.concatenate([[0], np.cumsum(sizes)])
        return cls(layout, res_ids, param_ids, data, off)

    @property
    def num_entries(self) -> int:
        return len(self.res_ids)

    def entry_block(self, e: int) -> np.ndarray:
        h, w = int(self.entry_h[e]), int(self.entry_w[e])
        return self.data[self.data_off[e]:self.data_off[e + 1]].reshape(h, w)

    def jtj_pattern(self) -> "JtJPattern":
        if self._jtj_pattern is None:
            self._jtj_pattern = JtJPattern(self.layout, self.res_ids, self.param_ids)
        return self._jtj_pattern

    def jtr_pattern(self) -> "JtrPattern":
        if self._jtr_pattern is None:
            self._jtr_pattern = JtrPattern(self.layout, self.res_ids, self.param_ids)
        return self._jtr_pattern


class BlockNormalSystem:
    """Block-structured JtJ with gradient (-Jtr) and damping factor.

    Diagonal blocks for every param block come first in ``data``, followed by
    the off-diagonal blocks named by ``off_keys`` (a < b, sorted).
    """

    __slots__ = ("layout", "data", "diag_off", "off_keys", "off_off",
                 "gradient", "lam")

    def __init__(self, layout: BlockLayout, data, diag_off, off_keys, off_off,
                 gradient=None, lam: float = 0.0):
        self.layout = layout
        self.data = data
        self.diag_off = diag_off
        self.off_keys = off_keys
        self.off_off = off_off
        self.gradient = gradient if gradient is not None else np.zeros(layout.total_params)
        self.lam = lam

    @classmethod
    def empty(cls, layout: BlockLayout, off_keys: np.ndarray) -> "BlockNormalSystem":
        w = layout.widths.astype(np.int64)
        diag_off = np.concatenate([[0], np.cumsum(w * w)])
        off_sizes = w[off_keys[:, 0]] * w[off_keys[:, 1]]
        off_off = diag_off[-1] + np.concatenate([[0], np.cumsum(off_sizes)])
        data = np.zeros(int(off_off[-1]))
        return cls(layout, data, diag_off, off_keys, off_off)

    @property
    def num_off_blocks(self) -> int:
        return len(self.off_keys)

    def diag_block(self, k: int) -> np.ndarray:
        w = int(self.layout.widths[k])
        return self.data[self.diag_off[k]:self.diag_off[k + 1]].reshape(w, w)

    def off_block(self, i: int) -> np.ndarray:
        a, b = self.off_keys[i]
        wa, wb = int(self.layout.widths[a]), int(self.layout.widths[b])
        return self.data[self.off_off[i]:self.off_off[i + 1]].reshape(wa, wb)

    def off_index(self, a: int, b: int) -> int:
        """Index of off-diagonal block (a, b); -1 when absent from the pattern."""
        n = self.layout.num_param_blocks
        codes = self.off_keys[:, 0].astype(np.int64) * n + self.off_keys[:, 1]
        i = int(np.searchsorted(codes, a * n + b))
        if i < len(codes) and codes[i] == a * n + b:
            return i
        return -1

    def copy(self) -> "BlockNormalSystem":
        return BlockNormalSystem(self.layout, self.data.copy(), self.diag_off,
                                 self.off_keys, self.off_off,
                                 self.gradient.copy(), self.lam)


class JtJPattern:
    """Precomputed contribution schedule for the block JtJ product.

    Contributions are sorted by (block shape, output key, source order); each
    output block's sum therefore runs in one fixed order regardless of the
    worker count, which is what makes the product bit-deterministic.
    """

    __slots__ = ("layout", "off_keys", "n_param", "contrib_a", "contrib_b",
                 "keys_in_order", "seg_start", "key_out_off", "contrib_local_key",
                 "groups", "res_ids", "param_ids")

    def __init__(self, layout: BlockLayout, res_ids: np.ndarray, param_ids: np.ndarray):
        self.layout = layout
        self.res_ids = res_ids
        self.param_ids = param_ids
        n_param = layout.num_param_blocks
        self.n_param = n_param
        widths = layout.widths
        heights_by_res = layout.residual_heights

        counts = np.bincount(res_ids, minlength=layout.num_residual_blocks) \
            if len(res_ids) else np.zeros(layout.num_residual_blocks, dtype=np.int64)
        seg_begin = np.concatenate([[0], np.cumsum(counts)])[:-1]

        parts_a, parts_b = [], []
        for m in np.unique(counts):
            if m == 0:
                continue
            rs = np.nonzero(counts == m)[0]
            ti, tj = np.triu_indices(int(m))
            base = seg_begin[rs]
            parts_a.append((base[:, None] + ti[None, :]).ravel())
            parts_b.append((base[:, None] + tj[None, :]).ravel())
        if parts_a:
            contrib_a = np.concatenate(parts_a).astype(np.int64)
            contrib_b = np.concatenate(parts_b).astype(np.int64)
        else:
            contrib_a = np.zeros(0, dtype=np.int64)
            contrib_b = np.zeros(0, dtype=np.int64)

        pa = param_ids[contrib_a] if len(contrib_a) else np.zeros(0, dtype=np.int32)
        pb = param_ids[contrib_b] if len(contrib_b) else np.zeros(0, dtype=np.int32)
        diag_mask = contrib_a == contrib_b
        off_codes = pa.astype(np.int64) * n_param + pb
        uniq_off = np.unique(off_codes[~diag_mask])
        self.off_keys = np.stack([uniq_off // n_param, uniq_off % n_param], axis=1).astype(np.int32) \
            if len(uniq_off) else np.zeros((0, 2), dtype=np.int32)

        key_id = np.where(diag_mask, pa.astype(np.int64),
                          n_param + np.searchsorted(uniq_off, off_codes))

        h = heights_by_res[res_ids[contrib_a]] if len(contrib_a) else np.zeros(0, dtype=np.int32)
        wa, wb = widths[pa], widths[pb]
        shape_code = h.astype(np.int64) * 64 + wa * 8 + wb
        order = np.lexsort((np.arange(len(key_id)), key_id, shape_code))

        self.contrib_a = contrib_a[order].astype(np.int32)
        self.contrib_b = contrib_b[order].astype(np.int32)
        key_sorted = key_id[order]
        shape_sorted = shape_code[order]

        if len(key_sorted):
            change = np.nonzero(np.diff(key_sorted) != 0)[0] + 1
            starts = np.concatenate([[0], change, [len(key_sorted)]])
        else:
            starts = np.zeros(1, dtype=np.int64)
        self.seg_start = starts.astype(np.int64)
        self.keys_in_order = key_sorted[starts[:-1]].astype(np.int64) \
            if len(key_sorted) else np.zeros(0, dtype=np.int64)

        w64 = widths.astype(np.int64)
        diag_off = np.concatenate([[0], np.cumsum(w64 * w64)])
        off_sizes = w64[self.off_keys[:, 0]] * w64[self.off_keys[:, 1]]
        off_off = diag_off[-1] + np.concatenate([[0], np.cumsum(off_sizes)])
        self.key_out_off = np.empty(len(self.keys_in_order), dtype=np.int64)
        dm = self.keys_in_order < n_param
        self.key_out_off[dm] = diag_off[self.keys_in_order[dm]]
        self.key_out_off[~dm] = off_off[self.keys_in_order[~dm] - n_param]

        # Local key ordinal per contribution, for grouped numpy reduction.
        key_seg_idx = np.zeros(len(key_sorted), dtype=np.int64)
        if len(key_sorted):
            key_seg_idx[starts[1:-1]] = 1
            key_seg_idx = np.cumsum(key_seg_idx)

        # Shape groups: slices over contributions and over keys_in_order.
        self.groups = []
        if len(shape_sorted):
            gchange = np.nonzero(np.diff(shape_sorted) != 0)[0] + 1
            gstarts = np.concatenate([[0], gchange, [len(shape_sorted)]])
            key_starts_pos = starts[:-1]
            for gi in range(len(gstarts) - 1):
                c0, c1 = int(gstarts[gi]), int(gstarts[gi + 1])
                code = int(shape_sorted[c0])
                hh, rem = divmod(code, 64)
                gwa, gwb = divmod(rem, 8)
                k0 = int(np.searchsorted(key_starts_pos, c0))
                k1 = int(np.searchsorted(key_starts_pos, c1))
                local = (key_seg_idx[c0:c1] - k0).astype(np.int64)
                self.groups.append((c0, c1, k0, k1, hh, gwa, gwb, local))
        self.contrib_local_key = key_seg_idx

    def make_system(self) -> BlockNormalSystem:
        return BlockNormalSystem.empty(self.layout, self.off_keys)


class JtrPattern:
    """Gather schedule for the block J^T r product, owned per param block."""

    __slots__ = ("by_entry", "params_in_order", "seg_start", "seg_out",
                 "res_row", "groups")

    def __init__(self, layout: BlockLayout, res_ids: np.ndarray, param_ids: np.ndarray):
        widths = layout.widths
        heights = layout.residual_heights
        e = len(res_ids)
        h = heights[res_ids] if e else np.zeros(0, dtype=np.int32)
        w = widths[param_ids] if e else np.zeros(0, dtype=np.int32)
        shape_code = h.astype(np.int64) * 8 + w
        order = np.lexsort((np.arange(e), param_ids, shape_code))
        self.by_entry = order.astype(np.int32)
        psorted = param_ids[order] if e else np.zeros(0, dtype=np.int32)
        ssorted = shape_code[order] if e else np.zeros(0, dtype=np.int64)
        if e:
            change = np.nonzero(np.diff(psorted) != 0)[0] + 1
            starts = np.concatenate([[0], change, [e]])
        else:
            starts = np.zeros(1, dtype=np.int64)
        self.seg_start = starts.astype(np.int64)
        self.params_in_order = psorted[starts[:-1]].astype(np.int64) \
            if e else np.zeros(0, dtype=np.int64)
        self.seg_out = layout.param_offsets[self.params_in_order].astype(np.int64)
        # Residual row offset per entry, in sorted order.
        self.res_row = layout.residual_offsets[res_ids[order]].astype(np.int64) \
            if e else np.zeros(0, dtype=np.int64)

        self.groups = []
        if e:
            gchange = np.nonzero(np.diff(ssorted) != 0)[0] + 1
            gstarts = np.concatenate([[0], gchange, [e]])
            for gi in range(len(gstarts) - 1):
                c0, c1 = int(gstarts[gi]), int(gstarts[gi + 1])
                hh, ww = divmod(int(ssorted[c0]), 8)
                self.groups.append((c0, c1, hh, ww))


# ---------------------------------------------------------------------------
# Public kernels
# ---------------------------------------------------------------------------

def jtj(j: BlockSparseJacobian, out: BlockNormalSystem | None = None) -> BlockNormalSystem:
    """Block-sparse J^T J restricted to the co-observation pattern.

    The returned system has a zero gradient and lambda 0. Pass ``out``
    (from a previous call with the same pattern) to reuse its storage.
    """
    pat = j.jtj_pattern()
    if out is None:
        out = pat.make_system()
    else:
        out.gradient[:] = 0.0
        out.lam = 0.0
    backend = _kernels.get_backend()
    backend.jtj_fill(pat, j.data, j.data_off, j.entry_h, j.entry_w,
                     out.data, _kernels.worker_count())
    return out


def jtr(j: BlockSparseJacobian, residuals: np.ndarray,
        out: np.ndarray | None = None) -> np.ndarray:
    """Block-sparse J^T r."""
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.shape != (j.layout.total_residuals,):
        raise DimensionMismatch(
            f"residual vector has length {residuals.size}, "
            f"layout expects {j.layout.total_residuals}")
    pat = j.jtr_pattern()
    if out is None:
        out = np.zeros(j.layout.total_params)
    backend = _kernels.get_backend()
    backend.jtr_fill(pat, j.data, j.data_off, j.entry_h, j.entry_w,
                     j.param_ids, j.layout.param_offsets, residuals, out,
                     _kernels.worker_count())
    return out


def apply_damping(sys: BlockNormalSystem, lam: float) -> BlockNormalSystem:
    """Scale every diagonal scalar a_kk by (1 + lambda).

    Exactly zero diagonal entries stay zero: those are masked parameters and
    remain fixed. Off-diagonal storage is shared with the input system.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    out = BlockNormalSystem(sys.layout, sys.data.copy(), sys.diag_off,
                            sys.off_keys, sys.off_off, sys.gradient, lam)
    scale_diag_inplace(out, 1.0 + lam)
    return out


def scale_diag_inplace(sys: BlockNormalSystem, factor: float) -> None:
    widths = sys.layout.widths
    for w in np.unique(widths):
        ids = np.nonzero(widths == w)[0]
        base = sys.diag_off[ids]
        idx = base[:, None] + np.arange(w, dtype=np.int64) * (w + 1)
        sys.data[idx] *= factor


def diag_scalars(sys: BlockNormalSystem) -> np.ndarray:
    """The matrix diagonal of A as a vector of length total_params."""
    out = np.empty(sys.layout.total_params)
    widths = sys.layout.widths
    for w in np.unique(widths):
        ids = np.nonzero(widths == w)[0]
        base = sys.diag_off[ids]
        idx = base[:, None] + np.arange(w, dtype=np.int64) * (w + 1)
        rows = sys.layout.param_offsets[ids][:, None] + np.arange(w, dtype=np.int64)
        out[rows] = sys.data[idx]
    return out
