"""GGX microfacet and dielectric optics primitives.

Everything operates in the local tangent frame (z = shading normal) and
accepts scalars or numpy arrays; direction arrays have shape (..., 3).
Relative IOR arguments are always the transmitted side's index over the
incident side's.
"""

from __future__ import annotations

import numpy as np


def _as_float(x):
    out = np.asarray(x, dtype=np.float64)
    return out


def _scalar_or_array(out, *inputs):
    if all(np.ndim(v) == 0 for v in inputs):
        return float(out)
    return out


def normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def dot(a, b):
    return np.sum(a * b, axis=-1)


def reflect(d, m):
    """Mirror the travel direction d about the facet normal m."""
    return d - 2.0 * dot(d, m)[..., None] * m


def fresnel_dielectric(cos_theta_i, eta):
    """Unpolarized Fresnel reflectance for a smooth dielectric boundary.

    cos_theta_i is the incident cosine in [0, 1]; eta > 0 is the relative
    IOR. Returns 1 beyond the critical angle when eta < 1.
    """
    eta = _as_float(eta)
    if not np.all(np.isfinite(eta)) or np.any(eta <= 0.0):
        raise ValueError("relative IOR must be finite and positive")
    ci = np.clip(_as_float(cos_theta_i), 0.0, 1.0)
    sin2_t = (1.0 - ci * ci) / (eta * eta)
    total = sin2_t >= 1.0
    ct = np.sqrt(np.clip(1.0 - sin2_t, 0.0, None))
    r_s = (ci - eta * ct) / (ci + eta * ct)
    r_p = (eta * ci - ct) / (eta * ci + ct)
    f = np.where(total, 1.0, 0.5 * (r_s * r_s + r_p * r_p))
    return _scalar_or_array(f, cos_theta_i, eta)


def refract(d, eta, m=None):
    """Snell-refract the travel direction d through a facet with normal m.

    m defaults to the macroscopic normal oriented against d. Returns
    (t, tir): the refracted unit direction on the opposite side, and a mask
    flagging total internal reflection (t then holds the mirror direction).
    """
    d = _as_float(d)
    eta = _as_float(eta)
    if m is None:
        z = np.zeros_like(d)
        z[..., 2] = np.where(d[..., 2] > 0.0, -1.0, 1.0)
        m = z
    ci = -dot(d, m)
    sin2_t = (1.0 - ci * ci) / (eta * eta)
    tir = sin2_t > 1.0
    ct = np.sqrt(np.clip(1.0 - sin2_t, 0.0, None))
    t = d / eta[..., None] + (ci / eta - ct)[..., None] * m
    t = t / np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
    t = np.where(tir[..., None], reflect(d, m), t)
    return t, tir


def ggx_ndf(cos_theta_h, alpha):
    """GGX normal distribution; integrates to 1 against cos_theta over the hemisphere."""
    c = _as_float(cos_theta_h)
    a2 = _as_float(alpha) ** 2
    denom = c * c * (a2 - 1.0) + 1.0
    d = np.where(c > 0.0, a2 / (np.pi * denom * denom), 0.0)
    return _scalar_or_array(d, cos_theta_h, alpha)


def smith_lambda(cos_theta, alpha):
    """Smith Lambda for GGX from the direction's |cos theta|."""
    c = np.abs(_as_float(cos_theta))
    c = np.clip(c, 1e-9, 1.0)
    tan2 = (1.0 - c * c) / (c * c)
    return 0.5 * (-1.0 + np.sqrt(1.0 + _as_float(alpha) ** 2 * tan2))


def smith_g1(cos_theta, alpha):
    g = 1.0 / (1.0 + smith_lambda(cos_theta, alpha))
    return _scalar_or_array(g, cos_theta, alpha)


def smith_g2(cos_i, cos_o, alpha, height_correlated=True):
    """Smith masking-shadowing for the (i, o) pair."""
    if height_correlated:
        g = 1.0 / (1.0 + smith_lambda(cos_i, alpha) + smith_lambda(cos_o, alpha))
    else:
        g = smith_g1(cos_i, alpha) * smith_g1(cos_o, alpha)
    return _scalar_or_array(g, cos_i, cos_o, alpha)


def sample_ggx_ndf(alpha, u1, u2):
    """Inverse-CDF sample of the GGX distribution of normals.

    tan^2(theta) = alpha^2 u / (1 - u), phi = 2 pi u2.
    """
    u1 = _as_float(u1)
    u2 = _as_float(u2)
    a2 = _as_float(alpha) ** 2
    tan2 = a2 * u1 / np.maximum(1.0 - u1, 1e-16)
    c = 1.0 / np.sqrt(1.0 + tan2)
    s = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    phi = 2.0 * np.pi * u2
    m = np.stack([s * np.cos(phi), s * np.sin(phi), c * np.ones_like(phi)], axis=-1)
    return m


def sample_ggx_vndf(v, alpha, u1, u2):
    """Sample the GGX distribution of visible normals for view v (v_z > 0).

    Heitz's spherical-cap construction; the returned normal satisfies
    dot(v, m) >= 0.
    """
    v = _as_float(v)
    alpha = _as_float(alpha)
    u1 = _as_float(u1)
    u2 = _as_float(u2)
    a = np.broadcast_to(alpha, v[..., 0].shape)
    vh = np.stack([a * v[..., 0], a * v[..., 1], v[..., 2]], axis=-1)
    vh = vh / np.linalg.norm(vh, axis=-1, keepdims=True)
    lensq = vh[..., 0] ** 2 + vh[..., 1] ** 2
    inv_len = 1.0 / np.sqrt(np.maximum(lensq, 1e-24))
    t1 = np.where(
        (lensq > 1e-20)[..., None],
        np.stack([-vh[..., 1] * inv_len, vh[..., 0] * inv_len, np.zeros_like(inv_len)], axis=-1),
        np.broadcast_to(np.array([1.0, 0.0, 0.0]), vh.shape),
    )
    t2 = np.cross(vh, t1)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    p1 = r * np.cos(phi)
    p2 = r * np.sin(phi)
    s = 0.5 * (1.0 + vh[..., 2])
    p2 = (1.0 - s) * np.sqrt(np.clip(1.0 - p1 * p1, 0.0, None)) + s * p2
    p3 = np.sqrt(np.clip(1.0 - p1 * p1 - p2 * p2, 0.0, None))
    nh = p1[..., None] * t1 + p2[..., None] * t2 + p3[..., None] * vh
    m = np.stack(
        [a * nh[..., 0], a * nh[..., 1], np.maximum(nh[..., 2], 1e-9)], axis=-1
    )
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def sample_ggx_normal(alpha, u1, u2, view=None):
    """Sample a microfacet normal: visible-normal when a view is given, plain NDF otherwise."""
    if view is None:
        return sample_ggx_ndf(alpha, u1, u2)
    return sample_ggx_vndf(view, alpha, u1, u2)


def cosine_sample_hemisphere(u1, u2):
    """Direction with density cos(theta)/pi in the upper hemisphere."""
    u1 = _as_float(u1)
    u2 = _as_float(u2)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    z = np.sqrt(np.clip(1.0 - u1, 0.0, None))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def ggx_reflection_eval(wi, wo, alpha, eta, height_correlated=True, with_fresnel=True):
    """Single-scattering rough dielectric reflection (Walter form).

    wi and wo point away from the surface with positive z. Returns the BRDF
    value (cosine not baked in); zero for alpha == 0.
    """
    wi = _as_float(wi)
    wo = _as_float(wo)
    if np.ndim(alpha) == 0 and float(alpha) == 0.0:
        return np.zeros(np.broadcast_shapes(wi[..., 2].shape, wo[..., 2].shape))
    ci = wi[..., 2]
    co = wo[..., 2]
    h = wi + wo
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    d = ggx_ndf(h[..., 2], alpha)
    g = smith_g2(ci, co, alpha, height_correlated)
    f = fresnel_dielectric(np.abs(dot(wi, h)), eta) if with_fresnel else 1.0
    val = f * d * g / np.maximum(4.0 * ci * co, 1e-12)
    return np.where((ci > 0.0) & (co > 0.0), val, 0.0)


def ggx_transmission_eval(w_in, w_out, alpha, eta_in, eta_out, height_correlated=False):
    """Single-scattering rough dielectric transmission (Walter form).

    w_in points away from the surface on the incident side, w_out away on
    the transmitted side (their z components have opposite signs). eta_in
    and eta_out are the absolute-or-relative indices on each side; only the
    ratio matters. Includes the (eta_out/eta_in)^2 radiance scaling.
    """
    w_in = _as_float(w_in)
    w_out = _as_float(w_out)
    ci = np.abs(w_in[..., 2])
    co = np.abs(w_out[..., 2])
    ht = -(eta_in * w_in + eta_out * w_out)
    norm = np.linalg.norm(ht, axis=-1, keepdims=True)
    ht = ht / np.maximum(norm, 1e-12)
    ht = np.where(ht[..., 2:3] < 0.0, -ht, ht)
    i_dot_h = dot(w_in, ht)
    o_dot_h = dot(w_out, ht)
    d = ggx_ndf(ht[..., 2], alpha)
    g = smith_g2(ci, co, alpha, height_correlated)
    f = fresnel_dielectric(np.abs(i_dot_h), eta_out / eta_in)
    denom = (eta_in * i_dot_h + eta_out * o_dot_h) ** 2
    val = (
        np.abs(i_dot_h)
        * np.abs(o_dot_h)
        / np.maximum(ci * co, 1e-12)
        * eta_out**2
        * (1.0 - f)
        * g
        * d
        / np.maximum(denom, 1e-12)
    )
    opposite = w_in[..., 2] * w_out[..., 2] < 0.0
    return np.where(opposite & (norm[..., 0] > 1e-12), val, 0.0)
