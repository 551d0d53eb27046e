"""Precompute, store, interpolate, and serialize the model's statistic tables.

Four tables drive the approximate BRDF:

* coat transmission (4D: cos_theta, alpha, eta, tau) — directional energy
  refracted through the coating from above, each transmitted path weighted
  by tau^(1/|cos|) for the crossing down to the base;
* inner reflection / inner transmission (3D: eta, alpha, tau) —
  cosine-weighted averages for light leaving the base, with the gap
  traversals folded in so the multiple-scattering series telescopes
  exactly (up-leg on both, plus the return leg on reflection);
* escape variance (2D: eta, alpha) — projected-disc width of the light
  escaping the coating;
* refraction jacobian (2D: eta, alpha) — variance scaling of a lobe
  crossing the interface upward, used by the layered-stack composition.

A precompute work item is one (alpha, eta) block seeded from
(seed, table tag, block indices); cells are therefore reproducible and
independent of worker count or scheduling order.
"""

from __future__ import annotations

import hashlib
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .microfacet import cosine_sample_hemisphere, sample_ggx_ndf
from .rng import Rng, derive_seed
from .simulate import interface_event, measure_escape_variance

MAGIC = b"CLTB"
VERSION = 1
_LAWS = {"linear": 0, "log": 1}
_LAW_NAMES = {v: k for k, v in _LAWS.items()}

DEFAULT_PATHS_PER_CELL = 40_960
_TAGS = {"coat_transmission": 1, "inner": 2, "escape_variance": 3, "jacobian": 4}


class TableFormatError(ValueError):
    """Bad magic, version, truncation, shape, or content-hash mismatch."""


@dataclass(frozen=True)
class Axis:
    """A named, uniformly warped parameter axis."""

    name: str
    count: int
    lo: float
    hi: float
    spacing: str = "linear"

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("axis needs at least two samples")
        if not self.lo < self.hi:
            raise ValueError("axis needs lo < hi")
        if self.spacing not in _LAWS:
            raise ValueError(f"unknown spacing law {self.spacing!r}")
        if self.spacing == "log" and self.lo <= 0:
            raise ValueError("log axis needs positive bounds")

    def nodes(self):
        if self.spacing == "log":
            return np.geomspace(self.lo, self.hi, self.count)
        return np.linspace(self.lo, self.hi, self.count)

    def to_index(self, values):
        """Continuous grid coordinate of values, clipped to the axis range."""
        v = np.asarray(values, dtype=np.float64)
        if self.spacing == "log":
            v = np.log(np.clip(v, 1e-300, None))
            lo, hi = np.log(self.lo), np.log(self.hi)
        else:
            lo, hi = self.lo, self.hi
        x = (v - lo) / (hi - lo) * (self.count - 1)
        return np.clip(x, 0.0, self.count - 1)


@dataclass
class TableNd:
    """Dense N-dimensional grid of scalars with multilinear interpolation."""

    axes: tuple
    data: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axes = tuple(self.axes)
        counts = tuple(ax.count for ax in self.axes)
        self.data = np.asarray(self.data, dtype=np.float32).reshape(counts)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("table contains non-finite values")

    @property
    def ndim(self):
        return len(self.axes)

    def axis(self, name):
        for ax in self.axes:
            if ax.name == name:
                return ax
        raise KeyError(name)

    def lookup(self, points):
        """Multilinear interpolation; out-of-range coordinates clamp."""
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[1] != self.ndim:
            raise ValueError(f"expected {self.ndim} coordinates, got {pts.shape[1]}")
        n = pts.shape[0]
        base = []
        frac = []
        for d, ax in enumerate(self.axes):
            x = ax.to_index(pts[:, d])
            i0 = np.minimum(np.floor(x).astype(np.int64), ax.count - 2)
            base.append(i0)
            frac.append(x - i0)
        flat_data = self.data.ravel()
        out = np.zeros(n)
        for corner in range(1 << self.ndim):
            w = np.ones(n)
            flat = np.zeros(n, dtype=np.int64)
            for d, ax in enumerate(self.axes):
                bit = (corner >> d) & 1
                w = w * (frac[d] if bit else 1.0 - frac[d])
                flat = flat * ax.count + base[d] + bit
            out += w * flat_data[flat]
        return float(out[0]) if squeeze else out

    def content_hash(self):
        return hashlib.sha256(self._payload()).digest()[:8]

    def _payload(self):
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.axes))]
        for ax in self.axes:
            name = ax.name.encode("utf-8")
            parts.append(struct.pack("<I", len(name)))
            parts.append(name)
            parts.append(struct.pack("<IddB", ax.count, ax.lo, ax.hi, _LAWS[ax.spacing]))
        parts.append(self.data.astype("<f4").tobytes(order="C"))
        return b"".join(parts)

    def save(self, path):
        payload = self._payload()
        digest = hashlib.sha256(payload).digest()[:8]
        with open(path, "wb") as fh:
            fh.write(payload)
            fh.write(digest)

    @staticmethod
    def load(path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 12 or blob[:4] != MAGIC:
            raise TableFormatError(f"{path}: not a CLTB table")
        version, n_axes = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise TableFormatError(f"{path}: unsupported version {version}")
        off = 12
        axes = []
        try:
            for _ in range(n_axes):
                (nlen,) = struct.unpack_from("<I", blob, off)
                off += 4
                name = blob[off : off + nlen].decode("utf-8")
                off += nlen
                count, lo, hi, law = struct.unpack_from("<IddB", blob, off)
                off += struct.calcsize("<IddB")
                axes.append(Axis(name, count, lo, hi, _LAW_NAMES[law]))
        except (struct.error, KeyError) as exc:
            raise TableFormatError(f"{path}: truncated or corrupt header") from exc
        n_values = int(np.prod([ax.count for ax in axes]))
        end = off + 4 * n_values
        if len(blob) != end + 8:
            raise TableFormatError(f"{path}: truncated data section")
        digest = hashlib.sha256(blob[:end]).digest()[:8]
        if digest != blob[end:]:
            raise TableFormatError(f"{path}: content hash mismatch")
        data = np.frombuffer(blob[off:end], dtype="<f4").reshape(
            [ax.count for ax in axes]
        )
        return TableNd(tuple(axes), data.copy(), {"content_hash": digest})


def default_axes():
    """Grid defaults: enough resolution for rendering, moderate file size."""
    return {
        "cos_theta": Axis("cos_theta", 64, 0.0, 1.0),
        "alpha": Axis("alpha", 64, 0.0, 1.0),
        "eta": Axis("eta", 64, 0.25, 4.0, "log"),
        "tau": Axis("tau", 16, 0.0, 1.0),
    }


def _block_map(n_alpha, n_eta, fn, workers):
    jobs = [(ia, ie) for ia in range(n_alpha) for ie in range(n_eta)]
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda j: fn(*j), jobs))
    return [fn(*j) for j in jobs]


def _tau_weights(tau_nodes, cos_values):
    # tau^(1/|cos|) per (path, tau-node); tau = 0 contributes zero
    expo = 1.0 / np.maximum(np.abs(cos_values), 1e-9)
    return np.power(tau_nodes[None, :], expo[:, None])


def precompute_coat_transmission(
    axes=None, n_paths=DEFAULT_PATHS_PER_CELL, seed=0, workers=None, chunk=1 << 20
):
    """4D directional transmittance through the coating from above.

    Per cell: stochastic interface interactions at the (cos_theta, alpha,
    eta) node; every transmitted path is weighted by tau^(1/|cos_t|) for
    each tau node, so the whole tau axis shares one set of paths. TIR and
    retried chains follow the oracle's interface model.
    """
    ax = axes or default_axes()
    a_cos, a_alpha, a_eta, a_tau = ax["cos_theta"], ax["alpha"], ax["eta"], ax["tau"]
    cos_nodes = np.clip(a_cos.nodes(), 1e-4, 1.0)
    tau_nodes = a_tau.nodes()
    out = np.zeros((a_cos.count, a_alpha.count, a_eta.count, a_tau.count))

    paths_per_call = max(1, min(n_paths, chunk // a_cos.count))

    def block(ia, ie):
        alpha = float(a_alpha.nodes()[ia])
        eta = float(a_eta.nodes()[ie])
        gen = Rng(derive_seed(seed, _TAGS["coat_transmission"], ia, ie)).generator()
        acc = np.zeros((a_cos.count, a_tau.count))
        done = 0
        while done < n_paths:
            cnt = min(paths_per_call, n_paths - done)
            sin_nodes = np.sqrt(np.clip(1.0 - cos_nodes**2, 0.0, None))
            d0 = np.empty((a_cos.count * cnt, 3))
            d0[:, 0] = np.repeat(sin_nodes, cnt)
            d0[:, 1] = 0.0
            d0[:, 2] = -np.repeat(cos_nodes, cnt)
            d_new, crossed = interface_event(d0, False, alpha, eta, gen)
            w = np.zeros((a_cos.count * cnt, a_tau.count))
            if crossed.any():
                w[crossed] = _tau_weights(tau_nodes, d_new[crossed, 2])
            acc += w.reshape(a_cos.count, cnt, a_tau.count).sum(axis=1)
            done += cnt
        return ia, ie, acc / n_paths

    for ia, ie, cell in _block_map(a_alpha.count, a_eta.count, block, workers):
        out[:, ia, ie, :] = cell
    table = TableNd(
        (a_cos, a_alpha, a_eta, a_tau),
        out,
        {"seed": seed, "paths_per_cell": n_paths},
    )
    _check_unit_range(table)
    return table


def precompute_inner_reflectance(
    axes=None, n_paths=DEFAULT_PATHS_PER_CELL, seed=0, workers=None
):
    """3D cosine-averaged reflection/transmission for light leaving the base.

    Both tables fold the upward gap traversal into the sample weight; the
    reflection table adds the return traversal (light must cross the gap
    again to reach the base), which makes the bounce series exactly
    tau-consistent.
    """
    ax = axes or default_axes()
    a_alpha, a_eta, a_tau = ax["alpha"], ax["eta"], ax["tau"]
    tau_nodes = a_tau.nodes()
    refl = np.zeros((a_eta.count, a_alpha.count, a_tau.count))
    trans = np.zeros_like(refl)

    def block(ia, ie):
        alpha = float(a_alpha.nodes()[ia])
        eta = float(a_eta.nodes()[ie])
        gen = Rng(derive_seed(seed, _TAGS["inner"], ia, ie)).generator()
        d0 = cosine_sample_hemisphere(gen.random(n_paths), gen.random(n_paths))
        up_w = _tau_weights(tau_nodes, d0[:, 2])
        d_new, crossed = interface_event(d0, True, alpha, eta, gen)
        t_cell = up_w[crossed].sum(axis=0) / n_paths
        back = ~crossed
        r_cell = (up_w[back] * _tau_weights(tau_nodes, d_new[back, 2])).sum(axis=0) / n_paths
        return ia, ie, r_cell, t_cell

    for ia, ie, r_cell, t_cell in _block_map(a_alpha.count, a_eta.count, block, workers):
        refl[ie, ia, :] = r_cell
        trans[ie, ia, :] = t_cell
    prov = {"seed": seed, "paths_per_cell": n_paths}
    r_table = TableNd((a_eta, a_alpha, a_tau), refl, dict(prov))
    t_table = TableNd((a_eta, a_alpha, a_tau), trans, dict(prov))
    _check_unit_range(r_table)
    _check_unit_range(t_table)
    return r_table, t_table


def precompute_escape_variance(axes=None, n_paths=DEFAULT_PATHS_PER_CELL, seed=0, workers=None):
    """2D projected-disc variance of light escaping a lone coating."""
    ax = axes or default_axes()
    a_alpha, a_eta = ax["alpha"], ax["eta"]
    out = np.zeros((a_eta.count, a_alpha.count))

    def block(ia, ie):
        alpha = float(a_alpha.nodes()[ia])
        eta = float(a_eta.nodes()[ie])
        rng = Rng(derive_seed(seed, _TAGS["escape_variance"], ia, ie))
        return ia, ie, measure_escape_variance(eta, alpha, n_paths, rng=rng)

    for ia, ie, v in _block_map(a_alpha.count, a_eta.count, block, workers):
        out[ie, ia] = v
    table = TableNd((a_eta, a_alpha), out, {"seed": seed, "paths_per_cell": n_paths})
    if np.any(table.data < -1e-6) or np.any(table.data > 0.5):
        raise ValueError("escape variance out of [0, 0.5]")
    return table


_JACOBIAN_PROBE_WIDTHS = (0.0, 0.1, 0.2, 0.3, 0.4)


def _normal_lobe_dirs(width, n, gen):
    """Directions of a normal-centered GGX lobe of the given roughness."""
    if width <= 0.0:
        d = np.zeros((n, 3))
        d[:, 2] = 1.0
        return d
    h = sample_ggx_ndf(width, gen.random(n), gen.random(n))
    d = 2.0 * h[:, 2:3] * h
    d[:, 2] -= 1.0
    keep = d[:, 2] > 1e-6
    d = d[keep]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _disc_variance(dirs):
    x, y = dirs[:, 0], dirs[:, 1]
    return float((x.var() + y.var()) / 2.0)


def precompute_refraction_jacobian(
    axes=None, n_paths=16_384, seed=0, workers=None, probe_widths=_JACOBIAN_PROBE_WIDTHS
):
    """Variance scaling and intrinsic spread of upward interface crossings.

    Calibrated numerically: normal-centered GGX lobes of several widths are
    pushed up through a lone interface. The delta probe's transmitted
    variance is the interface's own spread (zero when index-matched); the
    least-squares slope of transmitted vs incident variance through that
    intercept is the variance-scaling jacobian. Returns (jacobian, spread)
    tables over (eta, alpha).
    """
    ax = axes or {}
    a_eta = ax.get("eta", Axis("eta", 17, 0.25, 4.0, "log"))
    a_alpha = ax.get("alpha", Axis("alpha", 9, 0.0, 1.0))
    jac = np.ones((a_eta.count, a_alpha.count))
    spread = np.zeros((a_eta.count, a_alpha.count))

    def block(ia, ie):
        alpha = float(a_alpha.nodes()[ia])
        eta = float(a_eta.nodes()[ie])
        gen = Rng(derive_seed(seed, _TAGS["jacobian"], ia, ie)).generator()
        s_in = []
        s_out = []
        for width in probe_widths:
            d0 = _normal_lobe_dirs(width, n_paths, gen)
            d_new, crossed = interface_event(d0, True, alpha, eta, gen)
            if crossed.sum() < 32:
                continue
            s_in.append(_disc_variance(d0))
            s_out.append(_disc_variance(d_new[crossed]))
        if not s_out:
            return ia, ie, 1.0, 0.0
        intercept = s_out[0] if probe_widths[0] == 0.0 else 0.0
        x = np.asarray(s_in)
        y = np.asarray(s_out) - intercept
        denom = float((x * x).sum())
        slope = float((x * y).sum() / denom) if denom > 1e-12 else 1.0
        return ia, ie, max(slope, 0.0), max(intercept, 0.0)

    for ia, ie, j, s in _block_map(a_alpha.count, a_eta.count, block, workers):
        jac[ie, ia] = j
        spread[ie, ia] = s
    prov = {"seed": seed, "paths_per_cell": n_paths}
    return (
        TableNd((a_eta, a_alpha), jac, dict(prov)),
        TableNd((a_eta, a_alpha), spread, dict(prov)),
    )


def _check_unit_range(table, tol=1e-6):
    if np.any(table.data < -tol) or np.any(table.data > 1.0 + tol):
        raise ValueError(f"table values out of [0, 1]: {table.data.min()}..{table.data.max()}")


def slice_curve(table, axis_name, fixed):
    """Values along one axis with the other coordinates held fixed."""
    ax = table.axis(axis_name)
    x = ax.nodes()
    pts = np.zeros((ax.count, table.ndim))
    for d, a in enumerate(table.axes):
        pts[:, d] = x if a.name == axis_name else fixed[a.name]
    return x, table.lookup(pts)
