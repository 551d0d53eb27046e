"""Iterative PCA factorization of tables into basis/coefficient products.

A dense table is reduced one axis at a time: unfold into a matrix with the
reduced axis as columns, subtract the column mean, SVD, keep the top-k
right singular vectors as a 1D basis, and keep the projections as
coefficients with one extra component dimension. Chaining reductions turns
the 4D transmission table into 2D coefficient planes plus 1D basis strips,
which is what GPU texture units want.

Reconstruction interpolates coefficient planes and basis strips
multilinearly and sums the factored terms plus the per-stage means (the
means are kept explicitly; centering strictly improves the approximation
at equal component count). The SVD sign convention (first non-negligible
basis entry positive) makes compression deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .tables import Axis, TableNd

TEXTURE_MAGIC = b"CLTX"
TEXTURE_VERSION = 1


class CompressionError(RuntimeError):
    """SVD failure with a condition report."""


@dataclass(frozen=True)
class PcaLevel:
    """One reduction stage: the removed axis, its mean, and k basis vectors."""

    axis: Axis
    k: int
    mean: np.ndarray  # (axis.count,)
    basis: np.ndarray  # (k, axis.count), rows orthonormal

    def interp(self, values):
        """Mean and basis rows sampled at the given axis values: (n,), (n, k)."""
        x = self.axis.to_index(np.asarray(values, dtype=np.float64))
        i0 = np.minimum(np.floor(x).astype(np.int64), self.axis.count - 2)
        f = x - i0
        mean = (1.0 - f) * self.mean[i0] + f * self.mean[i0 + 1]
        basis = (1.0 - f)[:, None] * self.basis[:, i0].T + f[:, None] * self.basis[:, i0 + 1].T
        return mean, basis


@dataclass(frozen=True)
class PcaReduction:
    """Result of one pca_reduce call."""

    coefficients: np.ndarray  # (*other axis counts, k)
    axes: tuple  # axes of the coefficient array, reduced axis removed
    level: PcaLevel


def _svd_reduce(data, dim, count, k, axis_name):
    moved = np.moveaxis(data, dim, -1)
    rows = moved.reshape(-1, count)
    mean = rows.mean(axis=0)
    centered = rows - mean
    try:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        norms = np.linalg.norm(centered, axis=0)
        raise CompressionError(
            f"SVD failed on axis {axis_name!r}; column norms "
            f"{norms.min():.3g}..{norms.max():.3g}"
        ) from exc
    basis = vt[:k].copy()
    for row in basis:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0.0:
            row *= -1.0
    coeff = (centered @ basis.T).reshape(moved.shape[:-1] + (k,))
    return coeff, mean, basis


def pca_reduce(table, axis_name, k):
    """Reduce one axis of a dense table to k principal components."""
    names = [ax.name for ax in table.axes]
    if axis_name not in names:
        raise KeyError(axis_name)
    d = names.index(axis_name)
    ax = table.axes[d]
    if not 1 <= k <= ax.count:
        raise ValueError(f"k must be in [1, {ax.count}]")
    coeff, mean, basis = _svd_reduce(
        np.asarray(table.data, dtype=np.float64), d, ax.count, k, axis_name
    )
    rem = tuple(a for i, a in enumerate(table.axes) if i != d)
    return PcaReduction(coeff, rem, PcaLevel(ax, k, mean, basis))


@dataclass
class CompressedTable:
    """Recursive PCA factorization: leaf coefficients plus per-level bases.

    leaf has shape (*remaining axis counts, k_1, ..., k_m) with component
    dimensions in reduction order. Queries take coordinates in the original
    table's axis order.
    """

    original_axes: tuple  # full axis tuple of the source table, in order
    remaining_axes: tuple
    levels: list
    leaf: np.ndarray

    def __post_init__(self):
        self.original_axes = tuple(self.original_axes)
        self.remaining_axes = tuple(self.remaining_axes)
        self.leaf = np.asarray(self.leaf, dtype=np.float64)

    @property
    def ndim(self):
        return len(self.original_axes)

    def _column(self, name):
        for i, ax in enumerate(self.original_axes):
            if ax.name == name:
                return i
        raise KeyError(name)

    def _leaf_components(self, pts_rem):
        """Multilinear leaf lookup over remaining axes: (n, k_1, ..., k_m)."""
        n = pts_rem.shape[0]
        nrem = len(self.remaining_axes)
        base, frac = [], []
        for d, ax in enumerate(self.remaining_axes):
            x = ax.to_index(pts_rem[:, d])
            i0 = np.minimum(np.floor(x).astype(np.int64), ax.count - 2)
            base.append(i0)
            frac.append(x - i0)
        comp_shape = self.leaf.shape[nrem:]
        flat_leaf = self.leaf.reshape(-1, int(np.prod(comp_shape)))
        out = np.zeros((n, flat_leaf.shape[1]))
        for corner in range(1 << nrem):
            w = np.ones(n)
            flat = np.zeros(n, dtype=np.int64)
            for d, ax in enumerate(self.remaining_axes):
                bit = (corner >> d) & 1
                w = w * (frac[d] if bit else 1.0 - frac[d])
                flat = flat * ax.count + base[d] + bit
            out += w[:, None] * flat_leaf[flat]
        return out.reshape((n,) + comp_shape)

    def lookup(self, points):
        """Reconstruct values at query points (original axis order, clamped)."""
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[1] != self.ndim:
            raise ValueError(f"expected {self.ndim} coordinates, got {pts.shape[1]}")
        rem_cols = [self._column(ax.name) for ax in self.remaining_axes]
        comp = self._leaf_components(pts[:, rem_cols])
        for li in range(len(self.levels) - 1, -1, -1):
            level = self.levels[li]
            mean, basis = level.interp(pts[:, self._column(level.axis.name)])
            # contract this level's component dimension (axis 1 + li)
            comp = np.einsum("n...k,nk->n...", np.moveaxis(comp, 1 + li, -1), basis)
            comp = comp + mean.reshape((-1,) + (1,) * (comp.ndim - 1))
        out = comp
        return float(out[0]) if squeeze else out

    def reconstruct_dense(self):
        """Dense reconstruction on the original grid, original axis order."""
        comp = self.leaf
        nrem = len(self.remaining_axes)
        names = [ax.name for ax in self.remaining_axes]
        for li in range(len(self.levels) - 1, -1, -1):
            level = self.levels[li]
            comp = np.tensordot(comp, level.basis, axes=([nrem + li], [0]))
            comp = comp + level.mean
            names.append(level.axis.name)
        order = [names.index(ax.name) for ax in self.original_axes]
        return np.transpose(comp, order)


def compress_table(table, plan):
    """Apply PCA reductions in order; plan is [(axis_name, k), ...]."""
    axes = list(table.axes)
    data = np.asarray(table.data, dtype=np.float64)
    levels = []
    for axis_name, k in plan:
        names = [ax.name for ax in axes]
        if axis_name not in names:
            raise KeyError(axis_name)
        d = names.index(axis_name)
        ax = axes[d]
        if not 1 <= k <= ax.count:
            raise ValueError(f"k must be in [1, {ax.count}] for axis {axis_name!r}")
        coeff, mean, basis = _svd_reduce(data, d, ax.count, k, axis_name)
        levels.append(PcaLevel(ax, k, mean, basis))
        axes.pop(d)
        data = coeff  # reduced axis replaced by trailing component dim
    remaining = tuple(axes)
    return CompressedTable(table.axes, remaining, levels, data)


def compress_coat_transmission(table, k_tau=2, k_second=4):
    """Chain-reduce the 4D transmission table: tau first, then eta."""
    return compress_table(table, [("tau", k_tau), ("eta", k_second)])


def compress_inner_table(table, k_tau=2):
    """Reduce a 3D inner reflect/transmit table over tau only."""
    return compress_table(table, [("tau", k_tau)])


def relative_rms_error(table, compressed):
    raw = np.asarray(table.data, dtype=np.float64)
    rec = compressed.reconstruct_dense()
    return float(np.linalg.norm(rec - raw) / max(np.linalg.norm(raw), 1e-300))


# --- texture layout -------------------------------------------------------

_DTYPES = {0: np.float16, 1: np.float32}


def export_texture_layout(compressed, path, use_f32=False):
    """Write coefficient plane groups and basis strips as image-shaped blobs.

    The leaf must be 2D in its remaining axes. Plane groups hold 4
    channels: two last-stage components per group, each contributing the
    planes of the earlier-stage components (at most two). Means and bases
    go out as 1D strips; a JSON sidecar (path + ".json") documents the
    reconstruction term order and channel assignment.
    """
    if len(compressed.remaining_axes) != 2:
        raise ValueError("texture export needs a 2D coefficient leaf")
    leaf = compressed.leaf
    comp_shape = leaf.shape[2:]
    earlier = int(np.prod(comp_shape[:-1])) if len(comp_shape) > 1 else 1
    if earlier > 2:
        raise ValueError("texture packing supports at most two upstream components")
    k_last = comp_shape[-1]
    n_groups = (k_last + 1) // 2
    h, w = leaf.shape[0], leaf.shape[1]
    flat = leaf.reshape(h, w, earlier, k_last)

    dtype_code = 1 if use_f32 else 0
    dtype = _DTYPES[dtype_code]
    planes = []
    channel_map = []
    for g in range(n_groups):
        img = np.zeros((h, w, 4), dtype=dtype)
        chans = []
        ch = 0
        for c in (2 * g, 2 * g + 1):
            if c >= k_last:
                break
            for e in range(earlier):
                img[:, :, ch] = flat[:, :, e, c].astype(dtype)
                chans.append({"channel": ch, "component": [e, c]})
                ch += 1
        planes.append(("coeff_group", img))
        channel_map.append(chans)

    strips = []
    for li, level in enumerate(compressed.levels):
        strips.append((f"mean_{li}", level.mean.astype(dtype)[None, :, None]))
        for b in range(level.k):
            strips.append((f"basis_{li}_{b}", level.basis[b].astype(dtype)[None, :, None]))

    with open(path, "wb") as fh:
        fh.write(TEXTURE_MAGIC)
        fh.write(struct.pack("<II", TEXTURE_VERSION, len(planes) + len(strips)))
        for _, img in planes:
            _write_plane(fh, img, dtype_code)
        for _, img in strips:
            _write_plane(fh, img, dtype_code)

    sidecar = {
        "formula": "value = sum over components of coeff_plane(x_remaining) * "
        "prod_i basis_i(level axis value), contracted last stage first, plus "
        "each stage's interpolated mean",
        "dtype": "f32" if use_f32 else "f16",
        "original_axes": [_axis_json(a) for a in compressed.original_axes],
        "remaining_axes": [_axis_json(a) for a in compressed.remaining_axes],
        "levels": [{"axis": _axis_json(lv.axis), "k": lv.k} for lv in compressed.levels],
        "plane_groups": channel_map,
        "plane_order": [name for name, _ in planes] + [name for name, _ in strips],
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)


def _write_plane(fh, img, dtype_code):
    h, w, c = img.shape
    fh.write(struct.pack("<IIIB", w, h, c, dtype_code))
    fh.write(np.ascontiguousarray(img).tobytes())


def _axis_json(ax):
    return {"name": ax.name, "count": ax.count, "lo": ax.lo, "hi": ax.hi, "spacing": ax.spacing}


def _axis_from_json(obj):
    return Axis(obj["name"], obj["count"], obj["lo"], obj["hi"], obj["spacing"])


def load_texture_layout(path):
    """Rebuild a CompressedTable from a texture blob plus its sidecar."""
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TEXTURE_MAGIC:
        raise ValueError(f"{path}: not a CLTX blob")
    version, n_planes = struct.unpack_from("<II", blob, 4)
    if version != TEXTURE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    planes = []
    for _ in range(n_planes):
        w, h, c, dtype_code = struct.unpack_from("<IIIB", blob, off)
        off += struct.calcsize("<IIIB")
        dtype = _DTYPES[dtype_code]
        count = w * h * c
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(h, w, c)
        off += count * np.dtype(dtype).itemsize
        planes.append(arr.astype(np.float64))

    original = tuple(_axis_from_json(a) for a in sidecar["original_axes"])
    remaining = tuple(_axis_from_json(a) for a in sidecar["remaining_axes"])
    level_meta = sidecar["levels"]
    groups = sidecar["plane_groups"]
    ks = [m["k"] for m in level_meta]
    earlier = int(np.prod(ks[:-1])) if len(ks) > 1 else 1
    k_last = ks[-1]
    h, w = planes[0].shape[0], planes[0].shape[1]
    leaf = np.zeros((h, w, earlier, k_last))
    for g, chans in enumerate(groups):
        for entry in chans:
            e, c = entry["component"]
            leaf[:, :, e, c] = planes[g][:, :, entry["channel"]]
    leaf = leaf.reshape((h, w) + tuple(ks))

    levels = []
    pi = len(groups)
    for meta in level_meta:
        ax = _axis_from_json(meta["axis"])
        mean = planes[pi][0, :, 0]
        pi += 1
        basis = np.stack([planes[pi + b][0, :, 0] for b in range(meta["k"])])
        pi += meta["k"]
        levels.append(PcaLevel(ax, meta["k"], mean, basis))
    return CompressedTable(original, remaining, levels, leaf)
