"""The approximate two-lobe BRDF for a Lambertian base under a rough coating.

The direct lobe is a classic Fresnel-weighted GGX microfacet reflection at
the coating's roughness. The indirect lobe carries the energy of every
path that touched the base: a closed-form geometric series of the
precomputed transmission/reflection averages, shaped as a GGX lobe
centered on the shading normal whose roughness reproduces the tabulated
projected-disc variance. The indirect lobe's shadowing term is normalized
by the GGX directional albedo so its integral equals the series energy
rather than losing energy twice.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import microfacet as mf
from .compress import load_texture_layout
from .tables import Axis, TableFormatError, TableNd

TABLE_FILES = {
    "coat_transmission": 4,
    "inner_reflection": 3,
    "inner_transmission": 3,
    "escape_variance": 2,
}


class SaturationError(ArithmeticError):
    """Raised when the bounce-series denominator collapses."""


@dataclass(frozen=True)
class CoatedLambertianParams:
    """Relative IOR and roughness of the coat, base albedo, gap transmittance."""

    eta: float
    alpha: float
    rho: tuple
    tau: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta > 0.0):
            raise ValueError("eta must be finite and positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        for field_name in ("rho", "tau"):
            v = np.asarray(getattr(self, field_name), dtype=np.float64).ravel()
            if v.size == 1:
                v = np.repeat(v, 3)
            if v.size != 3 or np.any(v < 0.0) or np.any(v > 1.0):
                raise ValueError(f"{field_name} must be three channel values in [0, 1]")
            object.__setattr__(self, field_name, tuple(float(x) for x in v))


@dataclass(frozen=True)
class Lobe:
    """Per-channel energy, mean direction, and equivalent GGX roughness."""

    energy: np.ndarray
    mean: np.ndarray
    alpha_eq: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.energy)):
            raise ValueError("lobe energy must be finite")
        if not 0.0 <= self.alpha_eq <= 1.0:
            raise ValueError("alpha_eq must be in [0, 1]")


_VAR_EXP = 1.1


def roughness_to_variance(alpha):
    """Monotone roughness -> lobe-variance map of the statistical framework."""
    a = np.clip(np.asarray(alpha, dtype=np.float64), 0.0, 1.0 - 1e-9)
    p = a**_VAR_EXP
    out = p / (1.0 - p)
    return float(out) if np.ndim(alpha) == 0 else out


def variance_to_roughness(sigma):
    """Inverse of roughness_to_variance, clamped to [0, 1]."""
    s = np.clip(np.asarray(sigma, dtype=np.float64), 0.0, None)
    out = np.clip((s / (1.0 + s)) ** (1.0 / _VAR_EXP), 0.0, 1.0)
    return float(out) if np.ndim(sigma) == 0 else out


@lru_cache(maxsize=4)
def ggx_energy_table(n_cos=32, n_alpha=32, n_quad=128):
    """Directional albedo of the F=1 GGX lobe (height-correlated Smith).

    E(mu, alpha) = (1 / 4 mu) * integral of D(h) G2 over outgoing
    directions; the split-sum albedo used to normalize the indirect lobe's
    shadowing term.
    """
    cos_axis = Axis("cos_theta", n_cos, 0.0, 1.0)
    alpha_axis = Axis("alpha", n_alpha, 0.0, 1.0)
    mu_q, w_q = np.polynomial.legendre.leggauss(n_quad)
    mu_q = 0.5 * (mu_q + 1.0)
    w_q = 0.5 * w_q
    phi = (np.arange(n_quad) + 0.5) / n_quad * 2.0 * np.pi
    ct, ph = np.meshgrid(mu_q, phi, indexing="ij")
    st = np.sqrt(1.0 - ct**2)
    wo = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    w = (w_q[:, None] * (2.0 * np.pi / n_quad) * np.ones_like(ph)).ravel()

    data = np.ones((n_cos, n_alpha))
    for ia, alpha in enumerate(alpha_axis.nodes()):
        if alpha <= 0.0:
            continue
        for ic, mu in enumerate(cos_axis.nodes()):
            mu_c = max(mu, 1e-2)
            wi = np.array([np.sqrt(1.0 - mu_c**2), 0.0, mu_c])
            f = mf.ggx_reflection_eval(wi[None, :], wo, alpha, 1.5, with_fresnel=False)
            data[ic, ia] = np.sum(w * f * wo[:, 2])
    return TableNd((cos_axis, alpha_axis), np.clip(data, 0.0, 1.0))


def _as_dirs(w):
    w = np.asarray(w, dtype=np.float64)
    return w[None, :] if w.ndim == 1 else w


@dataclass
class TableSet:
    """The model's lookup tables; dense or compressed entries both work."""

    coat_transmission: object
    inner_reflection: object
    inner_transmission: object
    escape_variance: object
    refraction_jacobian: object = None
    transmit_spread: object = None
    ggx_energy: object = None

    def __post_init__(self):
        for name, ndim in TABLE_FILES.items():
            t = getattr(self, name)
            got = t.ndim if hasattr(t, "ndim") else len(t.original_axes)
            if got != ndim:
                raise TableFormatError(f"{name} must be {ndim}D, got {got}D")
        if self.ggx_energy is None:
            self.ggx_energy = ggx_energy_table()

    @classmethod
    def load(cls, directory):
        """Load tables from a directory of .cltb (dense) or .cltx (compressed) files."""
        kw = {}
        for name in TABLE_FILES:
            dense = os.path.join(directory, name + ".cltb")
            packed = os.path.join(directory, name + ".cltx")
            if os.path.exists(dense):
                kw[name] = TableNd.load(dense)
            elif os.path.exists(packed):
                kw[name] = load_texture_layout(packed)
            else:
                raise FileNotFoundError(f"missing table {name} in {directory}")
        for extra in ("refraction_jacobian", "transmit_spread"):
            path = os.path.join(directory, extra + ".cltb")
            if os.path.exists(path):
                kw[extra] = TableNd.load(path)
        return cls(**kw)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for name in TABLE_FILES:
            getattr(self, name).save(os.path.join(directory, name + ".cltb"))
        for extra in ("refraction_jacobian", "transmit_spread"):
            t = getattr(self, extra)
            if t is not None:
                t.save(os.path.join(directory, extra + ".cltb"))

    # -- lookup helpers ----------------------------------------------------

    def coat_albedo(self, cos_theta, alpha, eta):
        """Fresnel directional albedo of the coat: 1 - transmission at tau=1."""
        c = np.atleast_1d(np.asarray(cos_theta, dtype=np.float64))
        pts = np.stack([c, np.full_like(c, alpha), np.full_like(c, eta), np.ones_like(c)], axis=1)
        t = np.clip(self.coat_transmission.lookup(pts), 0.0, 1.0)
        out = 1.0 - t
        return float(out[0]) if np.ndim(cos_theta) == 0 else out

    def sigma_indirect(self, eta, alpha):
        return float(np.clip(self.escape_variance.lookup([eta, alpha]), 0.0, 0.5))

    def ggx_energy_lookup(self, cos_theta, alpha):
        c = np.atleast_1d(np.asarray(cos_theta, dtype=np.float64))
        pts = np.stack([c, np.full_like(c, alpha)], axis=1)
        e = np.clip(self.ggx_energy.lookup(pts), 1e-3, 1.0)
        return float(e[0]) if np.ndim(cos_theta) == 0 else e

    def jacobian(self, eta, alpha):
        if self.refraction_jacobian is None:
            return 1.0
        return float(max(self.refraction_jacobian.lookup([eta, alpha]), 1e-3))

    def crossing_spread(self, eta, alpha):
        """Transmitted-lobe variance of a delta beam crossing upward."""
        if self.transmit_spread is None:
            return roughness_to_variance(alpha) if abs(eta - 1.0) > 1e-9 else 0.0
        return float(max(self.transmit_spread.lookup([eta, alpha]), 0.0))

    def diffuse_reflectance(self, eta, alpha, from_below=True):
        """Cosine-averaged interface reflectance (the sigma = 0.25 limit).

        The from-above value reuses the from-below table of the mirrored
        interface (eta -> 1/eta), which is the same physical boundary."""
        e = eta if from_below else 1.0 / eta
        return float(np.clip(self.inner_reflection.lookup([e, alpha, 1.0]), 0.0, 1.0))

    def lobe_albedo(self, sigma, eta, alpha, from_below=True):
        """From-one-side reflectance of a normal-centered lobe of width sigma.

        Interpolates between the normal-incidence delta value and the
        cosine-lobe (diffuse) value on the lobe's variance; 0.25 is the
        cosine lobe's projected-disc variance."""
        w = float(np.clip(sigma / 0.25, 0.0, 1.0))
        if from_below:
            delta = self.coat_albedo(1.0, alpha, 1.0 / eta)
        else:
            delta = self.coat_albedo(1.0, alpha, eta)
        return (1.0 - w) * delta + w * self.diffuse_reflectance(eta, alpha, from_below)

    def cosine_average_transmission(self, alpha, eta, tau):
        """Cosine-weighted average of the coat transmission over incidence."""
        ax = (
            self.coat_transmission.axes[0]
            if hasattr(self.coat_transmission, "axes")
            else self.coat_transmission.original_axes[0]
        )
        c = ax.nodes()
        pts = np.stack(
            [c, np.full_like(c, alpha), np.full_like(c, eta), np.full_like(c, tau)], axis=1
        )
        vals = np.clip(self.coat_transmission.lookup(pts), 0.0, 1.0)
        trapezoid = getattr(np, "trapezoid", np.trapz)
        return float(trapezoid(vals * 2.0 * c, c))


def indirect_albedo(cos_theta_i, params, tables):
    """Per-channel energy of all base-interacting paths (closed-form series).

    transmission-in * rho / (1 - rho * inner_reflection) * inner
    transmission, each factor looked up at that channel's tau.
    """
    c = np.atleast_1d(np.asarray(cos_theta_i, dtype=np.float64))
    out = np.zeros(c.shape + (3,))
    for ch in range(3):
        tau = params.tau[ch]
        rho = params.rho[ch]
        pts4 = np.stack(
            [c, np.full_like(c, params.alpha), np.full_like(c, params.eta), np.full_like(c, tau)],
            axis=1,
        )
        t_in = np.clip(tables.coat_transmission.lookup(pts4), 0.0, 1.0)
        pts3 = np.stack(
            [np.full_like(c, params.eta), np.full_like(c, params.alpha), np.full_like(c, tau)],
            axis=1,
        )
        r_inner = np.clip(tables.inner_reflection.lookup(pts3), 0.0, 1.0)
        t_inner = np.clip(tables.inner_transmission.lookup(pts3), 0.0, 1.0)
        denom = 1.0 - rho * r_inner
        if np.any(denom < 1e-6):
            raise SaturationError("bounce series does not converge: rho * reflection ~ 1")
        out[..., ch] = t_in * rho / denom * t_inner
    return out[0] if np.ndim(cos_theta_i) == 0 else out


def eval_brdf(params, w_i, w_o, tables, diffuse_indirect=False):
    """Evaluate the two-lobe BRDF; w_i, w_o point away from the surface.

    Returns per-channel values with shape (..., 3); zero whenever either
    direction leaves the upper hemisphere.
    """
    if diffuse_indirect and params.eta <= 1.0:
        raise ValueError("the diffuse indirect fallback is only valid for eta > 1")
    wi = _as_dirs(w_i)
    wo = _as_dirs(w_o)
    wi, wo = np.broadcast_arrays(wi, wo)
    ci = wi[..., 2]
    co = wo[..., 2]
    valid = (ci > 0.0) & (co > 0.0)

    direct = mf.ggx_reflection_eval(wi, wo, params.alpha, params.eta)

    rho2 = indirect_albedo(np.clip(ci, 1e-6, 1.0), params, tables)
    sigma = tables.sigma_indirect(params.eta, params.alpha)
    a2 = variance_to_roughness(sigma)
    if diffuse_indirect:
        shape = np.full_like(co, 1.0 / np.pi)
    elif a2 < 1e-4:
        shape = np.zeros_like(co)
    else:
        cos_h = np.sqrt(np.clip((1.0 + co) / 2.0, 0.0, 1.0))
        d = mf.ggx_ndf(cos_h, a2)
        g = mf.smith_g1(co, a2)
        e_alb = tables.ggx_energy_lookup(np.clip(co, 0.0, 1.0).ravel(), a2).reshape(co.shape)
        shape = d * g / np.maximum(4.0 * co * e_alb, 1e-12)

    out = (direct[..., None] + rho2 * shape[..., None]) * valid[..., None]
    squeeze = np.asarray(w_i).ndim == 1 and np.asarray(w_o).ndim == 1
    return out[0] if squeeze else out


def lobes(params, w_i, tables):
    """The model's two lobes for one incidence: (direct, indirect).

    The direct lobe's equivalent roughness round-trips through the
    variance map so layered-stack composition reproduces it bitwise.
    """
    w_i = np.asarray(w_i, dtype=np.float64)
    ci = float(w_i[2])
    r = tables.coat_albedo(ci, params.alpha, params.eta)
    mirror = np.array([-w_i[0], -w_i[1], w_i[2]])
    direct = Lobe(
        energy=np.full(3, r),
        mean=mirror,
        alpha_eq=variance_to_roughness(roughness_to_variance(params.alpha)),
    )
    sigma = tables.sigma_indirect(params.eta, params.alpha)
    indirect = Lobe(
        energy=indirect_albedo(ci, params, tables),
        mean=np.array([0.0, 0.0, 1.0]),
        alpha_eq=variance_to_roughness(sigma),
    )
    return direct, indirect


def sample_brdf(params, w_i, rng, n=1, tables=None):
    """Draw outgoing directions from a two-lobe mixture.

    Returns (w_o, pdf, value). The stated pdf is the exact density of the
    sampling process over the full sphere of candidate directions;
    candidates below the horizon carry zero value and are a no-op in any
    estimator that weights by value/pdf.
    """
    if tables is None:
        raise ValueError("tables are required")
    w_i = np.asarray(w_i, dtype=np.float64)
    ci = float(w_i[2])
    if ci <= 0.0:
        raise ValueError("w_i must lie in the upper hemisphere")
    gen = rng.generator()

    w_direct = tables.coat_albedo(ci, params.alpha, params.eta)
    rho2 = indirect_albedo(ci, params, tables)
    w_ind = float(np.mean(rho2))
    total = w_direct + w_ind
    if total <= 0.0:
        p_direct = 1.0
    else:
        p_direct = w_direct / total

    sigma = tables.sigma_indirect(params.eta, params.alpha)
    a2 = variance_to_roughness(sigma)

    pick_direct = gen.random(n) < p_direct
    wo = np.zeros((n, 3))

    nd = int(pick_direct.sum())
    if nd:
        if params.alpha > 0.0:
            m = mf.sample_ggx_vndf(
                np.tile(w_i, (nd, 1)), params.alpha, gen.random(nd), gen.random(nd)
            )
            wo[pick_direct] = 2.0 * np.sum(m * w_i, axis=1)[:, None] * m - w_i
        else:
            wo[pick_direct] = np.array([-w_i[0], -w_i[1], w_i[2]])
    ni = n - nd
    if ni:
        h = mf.sample_ggx_ndf(max(a2, 1e-4), gen.random(ni), gen.random(ni))
        wo[~pick_direct] = 2.0 * h[:, 2:3] * h - np.array([0.0, 0.0, 1.0])

    pdf = np.zeros(n)
    if params.alpha > 0.0:
        h_d = w_i[None, :] + wo
        norm = np.linalg.norm(h_d, axis=1, keepdims=True)
        ok = norm[:, 0] > 1e-9
        h_d = np.where(ok[:, None], h_d / np.maximum(norm, 1e-12), 0.0)
        pdf_direct = np.where(
            ok,
            mf.ggx_ndf(np.abs(h_d[:, 2]), params.alpha) * mf.smith_g1(ci, params.alpha) / (4.0 * ci),
            0.0,
        )
    else:
        pdf_direct = np.zeros(n)  # delta lobe
    h_i = wo + np.array([0.0, 0.0, 1.0])
    norm = np.linalg.norm(h_i, axis=1, keepdims=True)
    h_i = h_i / np.maximum(norm, 1e-12)
    pdf_ind = mf.ggx_ndf(np.abs(h_i[:, 2]), max(a2, 1e-4)) / 4.0
    pdf = p_direct * pdf_direct + (1.0 - p_direct) * pdf_ind

    value = eval_brdf(params, np.tile(w_i, (n, 1)), wo, tables)
    return wo, pdf, value
