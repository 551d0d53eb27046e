"""Layered-stack composition: a lobe list for N coats over a diffuse base.

Interfaces are folded in from the top with the classic adding equations
(multiple-scattering denominators 1 - r_below * r_i); every fold emits the
reflection lobe it contributes. The bottom (coat + base) group emits one
extra lobe centered on the shading normal, whose energy and variance are
then carried back up through the stack by a bottom-to-top pass, clamping
each transmission variance by the diffuse-escape bound for that interface.

Energies are per-channel; lobe widths are scalar variances mapped to an
equivalent GGX roughness. All directional albedos come from the
precomputed transmission table (from below via the eta -> 1/eta mirror of
the same interface).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import microfacet as mf
from .model import (
    CoatedLambertianParams,
    Lobe,
    indirect_albedo,
    roughness_to_variance,
    variance_to_roughness,
)
from .simulate import Lambertian, RoughDielectric


class InvariantViolation(ArithmeticError):
    """An adding denominator collapsed (needs r_below * r >= 1)."""


@dataclass(frozen=True)
class GlobalStats:
    """Adding-doubling state for the layers folded in so far.

    Reflectances/transmittances are per-channel; variances are scalar lobe
    widths (down-going values live in the local frame below the folded
    stack and are converted upward by the accumulated jacobian).
    """

    r_top: np.ndarray
    r_bottom: np.ndarray
    t_down: np.ndarray
    t_up: np.ndarray
    var_r_top: float = 0.0
    var_r_bottom: float = 0.0
    var_t_down: float = 0.0
    var_t_up: float = 0.0
    jacobian: float = 1.0

    def __post_init__(self):
        for name in ("r_top", "r_bottom", "t_down", "t_up"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(v < -1e-9) or np.any(v > 1.0 + 1e-9):
                raise ValueError(f"{name} out of [0, 1]")
            object.__setattr__(self, name, v)
        if self.jacobian <= 0.0:
            raise ValueError("jacobian must be positive")


@dataclass(frozen=True)
class LocalStats:
    """One interface's own energies, lobe variances, and variance jacobian."""

    r_above: np.ndarray
    r_below: np.ndarray
    t_above: np.ndarray
    t_below: np.ndarray
    var_reflect: float
    var_transmit: float
    jacobian: float


def initial_stats():
    return GlobalStats(
        r_top=np.zeros(3), r_bottom=np.zeros(3), t_down=np.ones(3), t_up=np.ones(3)
    )


def interface_local_stats(interface, cos_above, cos_below, tables, jacobian_fn=None):
    """Local energies and variances of one dielectric interface.

    Energies are Fresnel directional albedos from the precomputed
    transmission table (from below via the mirrored interface); variances
    use the framework's roughness map for reflection and the calibrated
    crossing spread for transmission; the variance jacobian comes from the
    calibration table unless jacobian_fn overrides it.
    """
    if not isinstance(interface, RoughDielectric):
        raise ValueError("local stats are defined for dielectric interfaces")
    eta, alpha = interface.eta, interface.alpha
    r_above = np.full(3, tables.coat_albedo(cos_above, alpha, eta))
    r_below = np.full(3, tables.coat_albedo(cos_below, alpha, 1.0 / eta))
    if jacobian_fn is not None:
        j = float(jacobian_fn(eta, alpha))
    else:
        j = tables.jacobian(eta, alpha)
    return LocalStats(
        r_above=r_above,
        r_below=r_below,
        t_above=1.0 - r_above,
        t_below=1.0 - r_below,
        var_reflect=roughness_to_variance(alpha),
        var_transmit=tables.crossing_spread(eta, alpha),
        jacobian=j,
    )


def _mix_variance(e_a, v_a, e_b, v_b):
    wa = float(np.mean(e_a))
    wb = float(np.mean(e_b))
    if wa + wb <= 0.0:
        return 0.0
    return (wa * v_a + wb * v_b) / (wa + wb)


def adding_step(gs, local, mirror_dir):
    """Fold one dielectric interface under the current stack.

    Returns (updated stats, emitted lobe). The lobe is the reflection off
    this interface seen through the stack above it, with energy
    t_down * r * t_up / (1 - r_bottom * r) and variance
    var_t_up + j * (var_t_down + var_r + m * (var_r + var_r_bottom)),
    m = r_bottom * r / (1 - r_bottom * r).
    """
    denom = 1.0 - gs.r_bottom * local.r_above
    if np.any(denom <= 0.0):
        raise InvariantViolation("multiple-scattering denominator <= 0")
    lobe_energy = gs.t_down * local.r_above * gs.t_up / denom
    m = float(np.mean(gs.r_bottom * local.r_above / denom))
    lobe_var = gs.var_t_up + gs.jacobian * (
        gs.var_t_down + local.var_reflect + m * (local.var_reflect + gs.var_r_bottom)
    )
    lobe = Lobe(lobe_energy, np.asarray(mirror_dir, dtype=np.float64), variance_to_roughness(lobe_var))

    inv_j = 1.0 / max(local.jacobian, 1e-6)
    through_var = (
        2.0 * local.var_transmit
        + gs.var_r_bottom
        + m * (local.var_reflect + gs.var_r_bottom)
    )
    new = GlobalStats(
        r_top=gs.r_top + lobe_energy,
        r_bottom=local.r_below + local.t_below * gs.r_bottom * local.t_above / denom,
        t_down=gs.t_down * local.t_above / denom,
        t_up=local.t_below * gs.t_up / denom,
        var_r_top=_mix_variance(gs.r_top, gs.var_r_top, lobe_energy, lobe_var),
        var_r_bottom=_mix_variance(
            local.r_below,
            local.var_reflect,
            local.t_below * gs.r_bottom * local.t_above / denom,
            through_var,
        ),
        var_t_down=inv_j * (gs.var_t_down + m * (local.var_reflect + gs.var_r_bottom))
        + local.var_transmit,
        var_t_up=gs.var_t_up
        + gs.jacobian * (local.var_transmit + m * (local.var_reflect + gs.var_r_bottom)),
        jacobian=gs.jacobian * local.jacobian,
    )
    return new, lobe


def gap_step(gs, tau, cos_below):
    """Fold an absorbing gap below the folded stack (pure attenuation)."""
    a = np.asarray(tau, dtype=np.float64) ** (1.0 / max(float(cos_below), 1e-6))
    return replace(
        gs,
        t_down=gs.t_down * a,
        t_up=gs.t_up * a,
        r_bottom=gs.r_bottom * a * a,
    )


def clamp_variance(sigma_t, eta, alpha, tables):
    """Transmission variance can never exceed the diffuse escape bound."""
    return min(float(sigma_t), tables.sigma_indirect(eta, alpha))


class LobeList(list):
    def total_energy(self):
        return np.sum([lobe.energy for lobe in self], axis=0)


def _refracted_cosines(stack, cos0):
    """Mean-direction cosines tracked through the upper interfaces by Snell."""
    cosines = [float(cos0)]
    for iface in stack.interfaces[:-1]:
        c = cosines[-1]
        sin2_t = (1.0 - c * c) / (iface.eta**2)
        cosines.append(float(np.sqrt(max(1.0 - sin2_t, 1e-6))))
    return cosines


def evaluate_stack(stack, w_i, tables, jacobian_fn=None):
    """Lobe list for a dielectric stack over a Lambertian base.

    Upper interfaces emit mirror-direction lobes via adding steps; the last
    dielectric plus the base form one grouped interface that also emits the
    normal-centered lobe, whose energy and variance ride back to the top
    through a bottom-to-top pass.
    """
    if not stack.has_base:
        raise ValueError("the stack must end in a Lambertian base")
    if len(stack.interfaces) < 2 or not isinstance(stack.interfaces[-2], RoughDielectric):
        raise ValueError("need a dielectric coat directly above the base")
    w_i = np.asarray(w_i, dtype=np.float64)
    if w_i[2] <= 0.0:
        raise ValueError("w_i must lie in the upper hemisphere")
    mirror = np.array([-w_i[0], -w_i[1], w_i[2]])

    dielectrics = stack.interfaces[:-1]
    base = stack.interfaces[-1]
    n_up = len(dielectrics) - 1  # interfaces above the coat
    cosines = _refracted_cosines(stack, w_i[2])

    lobes_out = LobeList()
    gs = initial_stats()
    locals_up = []
    for k in range(n_up):
        iface = dielectrics[k]
        local = interface_local_stats(iface, cosines[k], cosines[k + 1], tables, jacobian_fn)
        locals_up.append(local)
        gs, lobe = adding_step(gs, local, mirror)
        lobes_out.append(lobe)
        gs = gap_step(gs, stack.media[k], cosines[k + 1])

    coat = dielectrics[-1]
    t_down_above_coat = gs.t_down.copy()
    local_coat = interface_local_stats(coat, cosines[n_up], cosines[n_up + 1], tables, jacobian_fn)
    _, coat_lobe = adding_step(gs, local_coat, mirror)
    lobes_out.append(coat_lobe)

    params = CoatedLambertianParams(
        coat.eta, coat.alpha, base.rho, stack.media[-1] if stack.media else (1.0, 1.0, 1.0)
    )
    r_up = t_down_above_coat * indirect_albedo(cosines[n_up], params, tables)
    sigma_up = tables.sigma_indirect(coat.eta, coat.alpha)

    # From-above reflectance of the (coat + base) group for the wide lobe:
    # the coat's own diffuse reflection plus the base-interacting series
    # with a cosine-averaged entry. Feeds the multiple-scattering
    # denominators of the upward pass.
    rho = np.asarray(base.rho, dtype=np.float64)
    tau_last = np.asarray(params.tau, dtype=np.float64)
    r_substack = np.empty(3)
    for ch in range(3):
        t_entry = tables.cosine_average_transmission(coat.alpha, coat.eta, float(tau_last[ch]))
        r_in = np.clip(tables.inner_reflection.lookup([coat.eta, coat.alpha, float(tau_last[ch])]), 0, 1)
        t_out = np.clip(tables.inner_transmission.lookup([coat.eta, coat.alpha, float(tau_last[ch])]), 0, 1)
        r_substack[ch] = tables.diffuse_reflectance(coat.eta, coat.alpha, from_below=False) + (
            t_entry * rho[ch] / max(1.0 - rho[ch] * r_in, 1e-6) * t_out
        )
    r_substack = np.clip(r_substack, 0.0, 1.0)

    # bottom-to-top: adding-doubling for the transmittance when the stack is
    # lit by the base, with interface albedos re-evaluated for the lobe's
    # mean (the normal) and width
    for i in range(n_up - 1, -1, -1):
        iface = dielectrics[i]
        r_i_below = tables.lobe_albedo(sigma_up, iface.eta, iface.alpha, from_below=True)
        t_i_below = 1.0 - r_i_below
        a = np.asarray(stack.media[i], dtype=np.float64)  # lobe mean is the normal
        ms = r_i_below * a * a * r_substack
        denom = 1.0 - ms
        if np.any(denom <= 0.0):
            raise InvariantViolation("bottom-to-top denominator <= 0")
        r_up = r_up * a * t_i_below / denom
        j_i = jacobian_fn(iface.eta, iface.alpha) if jacobian_fn else tables.jacobian(iface.eta, iface.alpha)
        sigma_r_i = roughness_to_variance(iface.alpha)
        sigma_r_next = roughness_to_variance(dielectrics[i + 1].alpha)
        sigma_up = (
            j_i * sigma_up
            + tables.crossing_spread(iface.eta, iface.alpha)
            + j_i * (sigma_r_i + sigma_r_next) * float(np.mean(ms / denom))
        )
        sigma_up = clamp_variance(sigma_up, iface.eta, iface.alpha, tables)
        # fold this interface (and its gap) into the substack reflectance
        r_i_above = tables.lobe_albedo(sigma_up, iface.eta, iface.alpha, from_below=False)
        r_substack = np.clip(
            r_i_above + (1.0 - r_i_above) * a * a * r_substack * t_i_below / denom, 0.0, 1.0
        )

    lobes_out.append(Lobe(r_up, np.array([0.0, 0.0, 1.0]), variance_to_roughness(sigma_up)))
    return lobes_out


def eval_lobes(lobes_list, w_i, w_o, tables):
    """Render-side evaluation of a lobe list as normalized GGX lobes.

    Mirror-direction lobes evaluate as microfacet reflections of the
    incident direction; normal-centered lobes use the shading normal as
    the incident direction. Each lobe integrates (cosine-weighted) to its
    energy by construction.
    """
    wi = np.atleast_2d(np.asarray(w_i, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(w_o, dtype=np.float64))
    wi, wo = np.broadcast_arrays(wi, wo)
    ci = wi[..., 2]
    co = wo[..., 2]
    valid = (ci > 0.0) & (co > 0.0)
    out = np.zeros(wi.shape[:-1] + (3,))
    for lobe in lobes_list:
        a = max(lobe.alpha_eq, 1e-4)
        if float(np.mean(lobe.energy)) <= 0.0:
            continue
        if abs(lobe.mean[2] - 1.0) < 1e-9 and abs(lobe.mean[0]) < 1e-9:
            # normal-centered lobe
            cos_h = np.sqrt(np.clip((1.0 + co) / 2.0, 0.0, 1.0))
            d = mf.ggx_ndf(cos_h, a)
            g = mf.smith_g1(co, a)
            e = tables.ggx_energy_lookup(np.clip(co, 0.0, 1.0).ravel(), a).reshape(co.shape)
            shape = d * g / np.maximum(4.0 * co * e, 1e-12)
        else:
            f = mf.ggx_reflection_eval(wi, wo, a, 1.5, with_fresnel=False)
            e = tables.ggx_energy_lookup(np.clip(ci, 0.0, 1.0).ravel(), a).reshape(ci.shape)
            shape = f / np.maximum(e, 1e-3)
        out += np.asarray(lobe.energy)[None, :] * (shape * valid)[..., None]
    squeeze = np.asarray(w_i).ndim == 1 and np.asarray(w_o).ndim == 1
    return out[0] if squeeze else out
