"""Sphere-under-directional-light renders of the material models.

An orthographic camera looks down the world z axis at a unit sphere; a
directional light with per-channel radiance illuminates it. Pixel values
are BRDF * cos(theta_i) * radiance, so images isolate the reflectance
model. Three engines share the geometry:

* model   — the two-lobe approximate BRDF (table lookups);
* layered — the lobe list from the stack composition, interpolated over an
  incidence-cosine grid;
* oracle  — a stochastic estimator of the ground-truth BRDF: analytic
  single-scattering reflection for the coat plus next-event estimation of
  every base interaction through the coating (Walter-form transmission
  eval, or the closed-form delta case for smooth/index-matched coats).
"""

from __future__ import annotations

import numpy as np

from . import microfacet as mf
from .model import CoatedLambertianParams, eval_brdf, indirect_albedo
from .layered import eval_lobes, evaluate_stack
from .rng import Rng
from .simulate import Lambertian, LayerStack, RoughDielectric, interface_event

DEFAULT_LIGHT_DIR = (-0.35, -0.25, -0.9)


def sphere_geometry(size, light_dir=DEFAULT_LIGHT_DIR):
    """Per-pixel local-frame directions for the sphere setup.

    Returns (mask, wi_local, wo_local): mask flags pixels on the sphere
    facing both camera and light; direction arrays are (n_masked, 3) in
    each pixel's tangent frame (z = surface normal).
    """
    light = mf.normalize(np.asarray(light_dir, dtype=np.float64))
    wi_world = -light
    wo_world = np.array([0.0, 0.0, 1.0])
    px = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    x, y = np.meshgrid(px, px, indexing="xy")
    r2 = x**2 + y**2
    on_sphere = r2 < 1.0
    nz = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    n = np.stack([x, -y, nz], axis=-1)  # image rows run top to bottom

    # branchless orthonormal basis per pixel
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1)
    bt = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)

    def to_local(v):
        return np.stack([np.sum(t * v, -1), np.sum(bt * v, -1), np.sum(n * v, -1)], axis=-1)

    wi_l = to_local(wi_world)
    wo_l = to_local(wo_world)
    mask = on_sphere & (wi_l[..., 2] > 1e-6) & (wo_l[..., 2] > 1e-6)
    return mask, wi_l[mask], wo_l[mask]


def render_model(params, tables, size=256, light_dir=DEFAULT_LIGHT_DIR, radiance=(1.0, 1.0, 1.0)):
    mask, wi, wo = sphere_geometry(size, light_dir)
    img = np.zeros((size, size, 3))
    vals = eval_brdf(params, wi, wo, tables)
    img[mask] = vals * wi[:, 2:3] * np.asarray(radiance)[None, :]
    return img


def render_layered(stack, tables, size=256, light_dir=DEFAULT_LIGHT_DIR, radiance=(1.0, 1.0, 1.0), cos_grid=65):
    """Lobe-list render; lobe energies/widths interpolate over cos(theta_i)."""
    mask, wi, wo = sphere_geometry(size, light_dir)
    cg = np.linspace(1e-3, 1.0, cos_grid)
    lobe_sets = []
    for c in cg:
        w = np.array([np.sqrt(1.0 - c * c), 0.0, c])
        lobe_sets.append(evaluate_stack(stack, w, tables))
    n_lobes = len(lobe_sets[0])
    img = np.zeros((size, size, 3))
    ci = wi[:, 2]
    idx = np.clip(np.searchsorted(cg, ci) - 1, 0, cos_grid - 2)
    f = (ci - cg[idx]) / (cg[idx + 1] - cg[idx])
    out = np.zeros((wi.shape[0], 3))
    from .model import Lobe

    for li in range(n_lobes):
        e = np.stack([np.asarray(ls[li].energy) for ls in lobe_sets])  # (grid, 3)
        a = np.array([ls[li].alpha_eq for ls in lobe_sets])
        energy = (1 - f)[:, None] * e[idx] + f[:, None] * e[idx + 1]
        alpha = (1 - f) * a[idx] + f * a[idx + 1]
        # evaluate the lobe shape per pixel with its interpolated roughness,
        # binned by quantized roughness to keep the evaluation vectorized
        qa = np.clip(np.round(alpha * 512) / 512, 1e-4, 1.0)
        for av in np.unique(qa):
            sel = qa == av
            lobe = Lobe(np.ones(3), lobe_sets[0][li].mean, float(av))
            shape = eval_lobes([lobe], wi[sel], wo[sel], tables) / 1.0
            out[sel] += energy[sel] * shape
    img[mask] = out * wi[:, 2:3] * np.asarray(radiance)[None, :]
    return img


def _coat_params_from_stack(stack):
    if (
        len(stack.interfaces) == 2
        and isinstance(stack.interfaces[0], RoughDielectric)
        and isinstance(stack.interfaces[1], Lambertian)
    ):
        coat = stack.interfaces[0]
        return CoatedLambertianParams(coat.eta, coat.alpha, stack.interfaces[1].rho, stack.media[0])
    return None


def render_oracle(
    params,
    size=256,
    paths_per_pixel=1024,
    seed=0,
    light_dir=DEFAULT_LIGHT_DIR,
    radiance=(1.0, 1.0, 1.0),
    n_passes=None,
    max_chunk=4_000_000,
):
    """Stochastic reference image plus its per-pixel standard-error map.

    Accepts CoatedLambertianParams or a coat+base LayerStack. The order-0
    coat reflection is analytic (separable Smith, the chain model's
    single-scattering limit); base interactions are estimated by next-event
    connections through the coating.
    """
    if isinstance(params, LayerStack):
        p = _coat_params_from_stack(params)
        if p is None:
            raise ValueError("the oracle renders a single coat over a Lambertian base")
        params = p
    mask, wi, wo = sphere_geometry(size, light_dir)
    n_pix = wi.shape[0]
    rad = np.asarray(radiance, dtype=np.float64)

    f0 = mf.ggx_reflection_eval(wi, wo, params.alpha, params.eta, height_correlated=False)
    rho = np.asarray(params.rho)

    img = np.zeros((size, size, 3))
    se_img = np.zeros((size, size, 3))
    if np.all(rho == 0.0) or np.all(np.asarray(params.tau) == 0.0):
        img[mask] = f0[:, None] * wi[:, 2:3] * rad[None, :]
        return img, se_img

    if n_passes is None:
        n_passes = max(8, int(np.ceil(paths_per_pixel * n_pix / max_chunk)))
    per_pass = [paths_per_pixel // n_passes] * n_passes
    for i in range(paths_per_pixel - sum(per_pass)):
        per_pass[i] += 1

    rng = Rng(seed)
    corr = _exit_energy_correction(params, rng.child(0xC0))
    acc = np.zeros((n_pix, 3))
    acc2 = np.zeros((n_pix, 3))
    for pi, cnt in enumerate(per_pass):
        if cnt == 0:
            continue
        gen = rng.child(pi).generator()
        pass_mean = _indirect_pass(params, wi, wo, cnt, gen, corr) / cnt
        acc += pass_mean
        acc2 += pass_mean**2
    used = sum(1 for c in per_pass if c)
    f_ind = acc / used
    var = np.clip(acc2 / used - f_ind**2, 0.0, None) / max(used - 1, 1)
    se = np.sqrt(var)

    vals = (f0[:, None] + f_ind) * wi[:, 2:3] * rad[None, :]
    img[mask] = vals
    se_img[mask] = se * wi[:, 2:3] * rad[None, :]
    return img, se_img


def _ss_refract_sample(view, alpha, eta_rel, gen):
    """One visible-normal refraction sample from `view` (z > 0).

    Returns (d_t, weight): the transmitted travel direction (z < 0 when
    valid) and the single-scattering energy weight (1 - F) G1(out),
    zero for invalid or TIR candidates.
    """
    n = view.shape[0]
    m = mf.sample_ggx_vndf(view, alpha, gen.random(n), gen.random(n))
    ci = np.clip(np.sum(view * m, axis=1), 0.0, 1.0)
    f = mf.fresnel_dielectric(ci, eta_rel)
    sin2_t = (1.0 - ci * ci) / (eta_rel * eta_rel)
    ct = np.sqrt(np.clip(1.0 - sin2_t, 0.0, None))
    d_t = -view / eta_rel + (ci / eta_rel - ct)[:, None] * m
    d_t /= np.maximum(np.linalg.norm(d_t, axis=1, keepdims=True), 1e-12)
    valid = (sin2_t < 1.0) & (d_t[:, 2] < -1e-9)
    w = np.where(valid, (1.0 - f) * mf.smith_g1(np.abs(d_t[:, 2]), alpha), 0.0)
    return d_t, w


def _exit_energy_correction(params, rng, n_nodes=33, n_mc=16_384):
    """Per-outgoing-cosine energy factor for the exit connections.

    The chain interface event transmits slightly more than the
    single-scattering Walter kernel (blocked candidates retry instead of
    vanishing). By reciprocity the connection integral scales with the
    from-above transmittance at the camera direction, so connections carry
    the ratio of the chain's measured from-above transmittance to the
    single-scattering one. Returns (cos_nodes, factor).
    """
    eta, alpha = params.eta, params.alpha
    cos_nodes = np.linspace(0.02, 1.0, n_nodes)
    if alpha == 0.0 or abs(eta - 1.0) < 1e-12:
        return cos_nodes, np.ones(n_nodes)
    gen = rng.generator()
    sin_nodes = np.sqrt(1.0 - cos_nodes**2)
    d0 = np.empty((n_nodes * n_mc, 3))
    d0[:, 0] = np.repeat(sin_nodes, n_mc)
    d0[:, 1] = 0.0
    d0[:, 2] = -np.repeat(cos_nodes, n_mc)
    _, crossed = interface_event(d0, False, alpha, eta, gen)
    t_chain = crossed.reshape(n_nodes, n_mc).mean(axis=1)

    view = -d0
    _, w_ss = _ss_refract_sample(view, alpha, eta, gen)
    t_ss = w_ss.reshape(n_nodes, n_mc).mean(axis=1)
    factor = np.clip(t_chain / np.maximum(t_ss, 1e-6), 0.25, 4.0)
    factor = np.where(t_chain < 1e-4, 1.0, factor)
    return cos_nodes, factor


def _indirect_pass(params, wi, wo, cnt, gen, corr=None):
    """Sum over cnt paths per pixel of the base-interaction estimator."""
    n_pix = wi.shape[0]
    eta, alpha = params.eta, params.alpha
    tau = np.asarray(params.tau)
    rho = np.asarray(params.rho)
    smooth = alpha == 0.0 or abs(eta - 1.0) < 1e-12

    pix = np.repeat(np.arange(n_pix), cnt)
    d0 = np.repeat(-wi, cnt, axis=0)
    out = np.zeros((n_pix, 3))

    if smooth:
        # deterministic exit factor per pixel (delta interface)
        so = np.sqrt(np.clip(1.0 - wo[:, 2] ** 2, 0.0, None))
        sin_v = so / eta
        valid = sin_v < 1.0
        vz = np.sqrt(np.clip(1.0 - sin_v**2, 0.0, None))
        f_int = np.where(valid, mf.fresnel_dielectric(vz, 1.0 / eta), 1.0)
        exit_fac = np.where(
            valid[:, None],
            (1.0 - f_int)[:, None] / (np.pi * eta**2) * tau[None, :] ** (1.0 / np.maximum(vz, 1e-6))[:, None],
            0.0,
        )
        ci = np.repeat(wi[:, 2], cnt)
        f_in = mf.fresnel_dielectric(ci, eta)
        crossed = gen.random(len(pix)) >= f_in
        d_t, _ = mf.refract(d0, eta)
        w = np.where(
            crossed[:, None],
            tau[None, :] ** (1.0 / np.maximum(np.abs(d_t[:, 2]), 1e-6))[:, None],
            0.0,
        )
        pix_a = pix[crossed]
        w_a = w[crossed]
        for _ in range(256):
            if pix_a.size == 0:
                break
            w_a = w_a * rho[None, :]
            np.add.at(out, pix_a, w_a * exit_fac[pix_a])
            # continue: cosine direction up, smooth interface from below
            v = mf.cosine_sample_hemisphere(gen.random(pix_a.size), gen.random(pix_a.size))
            f_i = mf.fresnel_dielectric(v[:, 2], 1.0 / eta)
            stay = gen.random(pix_a.size) < f_i
            leg = 2.0 / np.maximum(v[:, 2], 1e-6)  # up then mirrored down
            w_a = w_a * tau[None, :] ** leg[:, None]
            pix_a = pix_a[stay]
            w_a = w_a[stay]
            pix_a, w_a = _roulette(pix_a, w_a, gen)
        return out

    # rough coat: stochastic entry event, Walter-form exit connections
    d_new, crossed = interface_event(d0, False, alpha, eta, gen)
    w = tau[None, :] ** (1.0 / np.maximum(np.abs(d_new[:, 2]), 1e-6))[:, None]
    pix_a = pix[crossed]
    w_a = w[crossed]
    for _ in range(256):
        if pix_a.size == 0:
            break
        w_a = w_a * rho[None, :]
        v = mf.cosine_sample_hemisphere(gen.random(pix_a.size), gen.random(pix_a.size))
        up_leg = tau[None, :] ** (1.0 / np.maximum(v[:, 2], 1e-6))[:, None]
        ft = mf.ggx_transmission_eval(-v, wo[pix_a], alpha, eta, 1.0)
        if corr is not None:
            ft = ft * np.interp(v[:, 2], corr[0], corr[1])
        np.add.at(out, pix_a, w_a * up_leg * ft[:, None])
        d_next, crossed_up = interface_event(v, True, alpha, eta, gen)
        stay = ~crossed_up
        dn_leg = tau[None, :] ** (1.0 / np.maximum(np.abs(d_next[:, 2]), 1e-6))[:, None]
        w_a = w_a * up_leg * dn_leg
        pix_a = pix_a[stay]
        w_a = w_a[stay]
        pix_a, w_a = _roulette(pix_a, w_a, gen)
    return out


def _roulette(pix_a, w_a, gen, floor=1e-4):
    if pix_a.size == 0:
        return pix_a, w_a
    mx = w_a.max(axis=1)
    low = mx < floor
    if not low.any():
        return pix_a, w_a
    u = gen.random(int(low.sum()))
    survive = u < mx[low]
    keep = np.ones(pix_a.size, dtype=bool)
    low_idx = np.nonzero(low)[0]
    keep[low_idx[~survive]] = False
    w_a = w_a.copy()
    w_a[low_idx[survive]] /= mx[low_idx[survive]][:, None]
    return pix_a[keep], w_a[keep]
