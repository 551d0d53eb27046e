"""Stochastic ground-truth light transport in a planar layer stack.

The simulator is the package's oracle: it traces random walks through a
stack of rough dielectric interfaces over an optional Lambertian base,
separated by absorbing media, and bins the escaping energy on the
projected disc of outgoing directions.

Interface events are lossless: a candidate microfacet interaction
(visible-normal sample, Fresnel choice of reflect/refract) is accepted
with the Smith masking probability of the outgoing direction and a
correct-side check; rejected candidates restart the event from the
incident direction. The single-scattering limit of this chain is the
separable-Smith microfacet kernel, and energy is conserved exactly, so
white-furnace totals hold to Monte Carlo precision.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .microfacet import (
    cosine_sample_hemisphere,
    fresnel_dielectric,
    reflect,
    sample_ggx_vndf,
    smith_g1,
)
from .rng import Rng

ROULETTE_FLOOR = 1e-4
_EVENT_ROUNDS = 64
_DEFAULT_BATCH = 1 << 16


class SimulationError(RuntimeError):
    """Raised when a walk produces non-finite throughput."""


class EmptyHistogramError(ValueError):
    """Raised when directional statistics are requested for zero mass."""


@dataclass(frozen=True)
class RoughDielectric:
    """Dielectric microfacet interface; eta is IOR below over IOR above."""

    eta: float
    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta > 0.0):
            raise ValueError("eta must be finite and positive")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")


@dataclass(frozen=True)
class Lambertian:
    """Ideal diffuse interface with per-channel albedo."""

    rho: tuple

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64)
        if rho.shape != (3,) or np.any(rho < 0.0) or np.any(rho > 1.0):
            raise ValueError("rho must be three channel values in [0, 1]")
        object.__setattr__(self, "rho", tuple(float(r) for r in rho))


@dataclass(frozen=True)
class LayerStack:
    """Interfaces ordered top to bottom with per-gap unit-length transmittance."""

    interfaces: tuple
    media: tuple = ()

    def __post_init__(self):
        ifaces = tuple(self.interfaces)
        media = tuple(tuple(float(t) for t in np.asarray(m, dtype=np.float64)) for m in self.media)
        if len(ifaces) == 0:
            raise ValueError("a stack needs at least one interface")
        if len(media) != len(ifaces) - 1:
            raise ValueError("need exactly one medium per gap between interfaces")
        for i, f in enumerate(ifaces):
            if isinstance(f, Lambertian) and i != len(ifaces) - 1:
                raise ValueError("a Lambertian interface may only close the stack")
        n_lambert = sum(isinstance(f, Lambertian) for f in ifaces)
        if n_lambert > 1:
            raise ValueError("at most one Lambertian interface")
        for m in media:
            if len(m) != 3 or any(t <= 0.0 or t > 1.0 for t in m):
                raise ValueError("tau must be three channel values in (0, 1]")
        object.__setattr__(self, "interfaces", ifaces)
        object.__setattr__(self, "media", media)

    @property
    def has_base(self):
        return isinstance(self.interfaces[-1], Lambertian)

    def to_json(self):
        ifaces = []
        for f in self.interfaces:
            if isinstance(f, RoughDielectric):
                ifaces.append({"type": "rough_dielectric", "eta": f.eta, "alpha": f.alpha})
            else:
                ifaces.append({"type": "lambertian", "rho": list(f.rho)})
        return {"interfaces": ifaces, "media": [{"tau": list(m)} for m in self.media]}

    @staticmethod
    def from_json(obj):
        ifaces = []
        for f in obj["interfaces"]:
            if f["type"] == "rough_dielectric":
                ifaces.append(RoughDielectric(float(f["eta"]), float(f["alpha"])))
            elif f["type"] == "lambertian":
                ifaces.append(Lambertian(tuple(f["rho"])))
            else:
                raise ValueError(f"unknown interface type {f['type']!r}")
        media = [tuple(m["tau"]) for m in obj.get("media", [])]
        return LayerStack(tuple(ifaces), tuple(media))


def load_stack(path):
    with open(path, "r", encoding="utf-8") as fh:
        return LayerStack.from_json(json.load(fh))


def save_stack(stack, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stack.to_json(), fh, indent=2)


@dataclass
class PathOutcome:
    side: str  # "top" | "bottom" | "absorbed"
    direction: np.ndarray
    throughput: np.ndarray
    order: int


@dataclass(frozen=True)
class DirectionalStats:
    """Energy, projected-disc mean, and per-axis projected-disc variance."""

    energy: np.ndarray
    mean: np.ndarray
    variance: float

    def __post_init__(self):
        if np.linalg.norm(self.mean) > 1.0 + 1e-9:
            raise ValueError("projected mean must lie inside the unit disc")
        if not -1e-9 <= self.variance <= 0.5 + 1e-9:
            raise ValueError("projected-disc variance must lie in [0, 0.5]")


def interface_event(d, below, alpha, eta, gen):
    """One full microfacet interaction at a rough dielectric interface.

    d: (n, 3) travel directions arriving at the interface; below flags rays
    arriving from underneath; alpha and eta are the interface constants.
    Returns (d_out, crossed). Candidates that end on the wrong side or fail
    the Smith masking test restart the chain from the incident direction,
    which keeps the event lossless.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    below = np.broadcast_to(np.asarray(below, dtype=bool), (n,))
    flip = np.where(below, -1.0, 1.0)
    d_c = d.copy()
    d_c[:, 2] *= flip
    v = -d_c
    eta_rel = np.where(below, 1.0 / eta, eta)

    out = np.empty_like(d_c)
    crossed = np.zeros(n, dtype=bool)
    undecided = np.ones(n, dtype=bool)
    for _ in range(_EVENT_ROUNDS):
        idx = np.nonzero(undecided)[0]
        if idx.size == 0:
            break
        va = v[idx]
        if alpha > 0.0:
            m = sample_ggx_vndf(va, alpha, gen.random(idx.size), gen.random(idx.size))
        else:
            m = np.zeros((idx.size, 3))
            m[:, 2] = 1.0
        ci = np.clip(np.sum(va * m, axis=-1), 0.0, 1.0)
        f = fresnel_dielectric(ci, eta_rel[idx])
        refl = gen.random(idx.size) < f
        d_r = reflect(d_c[idx], m)
        e = eta_rel[idx]
        sin2_t = (1.0 - ci * ci) / (e * e)
        ct = np.sqrt(np.clip(1.0 - sin2_t, 0.0, None))
        d_t = d_c[idx] / e[:, None] + (ci / e - ct)[:, None] * m
        d_t /= np.maximum(np.linalg.norm(d_t, axis=-1, keepdims=True), 1e-12)
        cand = np.where(refl[:, None], d_r, d_t)
        ok_side = np.where(refl, cand[:, 2] > 1e-9, cand[:, 2] < -1e-9)
        g1 = smith_g1(cand[:, 2], alpha) if alpha > 0.0 else 1.0
        acc = ok_side & (gen.random(idx.size) < g1)
        take = idx[acc]
        out[take] = cand[acc]
        crossed[take] = ~refl[acc]
        undecided[take] = False
    if undecided.any():
        # vanishingly rare; fall back to a specular bounce off the mean surface
        idx = np.nonzero(undecided)[0]
        out[idx] = d_c[idx]
        out[idx, 2] *= -1.0
        crossed[idx] = False
    out[:, 2] *= flip
    return out, crossed


def _walk_batch(stack, d0, gen, region0=0, max_steps=4096):
    """Trace one batch of paths through the stack.

    Returns (exit_code, exit_dir, throughput, order) with exit codes
    0 = top, 1 = bottom, 2 = absorbed.
    """
    interfaces = stack.interfaces
    n_if = len(interfaces)
    n = d0.shape[0]
    d = np.array(d0, dtype=np.float64)
    thr = np.ones((n, 3))
    order = np.zeros(n, dtype=np.int64)
    region = np.full(n, region0, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    exit_code = np.full(n, 2, dtype=np.int8)
    exit_dir = np.zeros((n, 3))

    for _ in range(max_steps):
        if not alive.any():
            break
        up = d[:, 2] > 0.0
        top = alive & up & (region == 0)
        if top.any():
            exit_code[top] = 0
            exit_dir[top] = d[top]
            alive[top] = False
        bottom = alive & ~up & (region == n_if)
        if bottom.any():
            exit_code[bottom] = 1
            exit_dir[bottom] = d[bottom]
            alive[bottom] = False
        if not alive.any():
            break

        mx = thr.max(axis=1)
        low = alive & (mx < ROULETTE_FLOOR)
        if low.any():
            u = gen.random(int(low.sum()))
            p = mx[low]
            survive = u < p
            kill = np.nonzero(low)[0][~survive]
            keep = np.nonzero(low)[0][survive]
            thr[keep] /= p[survive][:, None]
            alive[kill] = False

        up = d[:, 2] > 0.0
        for q in range(1, n_if):
            mask = alive & (region == q)
            if mask.any():
                tau = np.asarray(stack.media[q - 1])
                thr[mask] *= tau[None, :] ** (1.0 / np.abs(d[mask, 2:3]))

        target = np.where(up, region - 1, region)
        for k in range(n_if):
            mask = alive & (target == k)
            if not mask.any():
                continue
            iface = interfaces[k]
            if isinstance(iface, Lambertian):
                thr[mask] *= np.asarray(iface.rho)[None, :]
                order[mask] += 1
                cnt = int(mask.sum())
                d[mask] = cosine_sample_hemisphere(gen.random(cnt), gen.random(cnt))
            else:
                frm_below = region[mask] == k + 1
                d_new, _ = interface_event(d[mask], frm_below, iface.alpha, iface.eta, gen)
                d[mask] = d_new
                region[mask] = k + (d_new[:, 2] < 0.0)

    if not np.all(np.isfinite(thr)):
        bad = int(np.nonzero(~np.isfinite(thr).all(axis=1))[0][0])
        raise SimulationError(
            f"non-finite throughput in path {bad}: thr={thr[bad]}, dir={d[bad]}, "
            f"region={region[bad]}, order={order[bad]}"
        )
    return exit_code, exit_dir, thr, order


def trace_path(stack, w_i, rng):
    """Trace a single path; w_i points away from the surface (w_i[2] > 0)."""
    w_i = np.asarray(w_i, dtype=np.float64)
    if w_i[2] <= 0.0:
        raise ValueError("w_i must lie in the upper hemisphere")
    gen = rng.generator()
    code, edir, thr, order = _walk_batch(stack, -w_i[None, :], gen)
    side = {0: "top", 1: "bottom", 2: "absorbed"}[int(code[0])]
    return PathOutcome(side, edir[0], thr[0], int(order[0]))


@dataclass
class GonioHistograms:
    """Projected-disc energy histograms split by scattering order."""

    bins: int
    direct: np.ndarray  # (bins, bins, 3), order 0
    indirect: np.ndarray  # (bins, bins, 3), order >= 1
    bottom: np.ndarray  # (3,)
    n_paths: int
    seed: int = 0

    @property
    def absorbed(self):
        return 1.0 - self.top_energy - self.bottom

    @property
    def top_energy(self):
        return self.direct.sum(axis=(0, 1)) + self.indirect.sum(axis=(0, 1))

    def bin_centers(self):
        edges = np.linspace(-1.0, 1.0, self.bins + 1)
        return 0.5 * (edges[:-1] + edges[1:])

    def write_csv(self, path):
        """Dump bins as CSV rows (bin x, bin y, order, channel, value)."""
        centers = self.bin_centers()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("bin_x,bin_y,order,channel,value\n")
            for order, hist in ((0, self.direct), (1, self.indirect)):
                for i, x in enumerate(centers):
                    for j, y in enumerate(centers):
                        for c in range(3):
                            v = hist[i, j, c]
                            if v != 0.0:
                                fh.write(f"{x:.6g},{y:.6g},{order},{c},{v:.9g}\n")


def _bin_exits(hist, dirs, weights, bins):
    ix = np.clip(((dirs[:, 0] + 1.0) * 0.5 * bins).astype(np.int64), 0, bins - 1)
    iy = np.clip(((dirs[:, 1] + 1.0) * 0.5 * bins).astype(np.int64), 0, bins - 1)
    flat = ix * bins + iy
    for c in range(3):
        hist[:, :, c] += np.bincount(flat, weights=weights[:, c], minlength=bins * bins).reshape(
            bins, bins
        )


def goniophotometer(stack, w_i, n_paths, bins=64, rng=None, batch_size=_DEFAULT_BATCH, workers=None):
    """Record top-exiting energy on the projected disc, split by order.

    Order 0 never touched the Lambertian base; the indirect histogram
    holds everything with one base interaction or more. The estimator is
    a plain unbiased sample mean, so totals plus losses sum to one for
    lossless stacks.
    """
    if n_paths < 1 or bins < 2:
        raise ValueError("need n_paths >= 1 and bins >= 2")
    w_i = np.asarray(w_i, dtype=np.float64)
    if w_i[2] <= 0.0:
        raise ValueError("w_i must lie in the upper hemisphere")
    rng = rng or Rng(0)

    starts = list(range(0, n_paths, batch_size))

    def run(bi):
        b0 = starts[bi]
        cnt = min(batch_size, n_paths - b0)
        gen = rng.child(bi).generator()
        d0 = np.tile(-w_i, (cnt, 1))
        code, edir, thr, order = _walk_batch(stack, d0, gen)
        direct = np.zeros((bins, bins, 3))
        indirect = np.zeros((bins, bins, 3))
        top = code == 0
        w = thr / n_paths
        m0 = top & (order == 0)
        m1 = top & (order >= 1)
        if m0.any():
            _bin_exits(direct, edir[m0], w[m0], bins)
        if m1.any():
            _bin_exits(indirect, edir[m1], w[m1], bins)
        bottom = w[code == 1].sum(axis=0)
        return direct, indirect, bottom

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(starts))))
    else:
        results = [run(bi) for bi in range(len(starts))]

    direct = np.zeros((bins, bins, 3))
    indirect = np.zeros((bins, bins, 3))
    bottom = np.zeros(3)
    for dh, ih, bo in results:
        direct += dh
        indirect += ih
        bottom += bo
    return GonioHistograms(bins, direct, indirect, bottom, n_paths, rng.seed)


def directional_stats(hist, bins=None):
    """Energy, centroid, and per-axis variance of a projected-disc histogram.

    hist is (bins, bins) or (bins, bins, 3); statistics use the channel
    mean as the scalar weight field. Variance is E[|p - mean|^2] / 2.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.ndim == 3:
        energy = hist.sum(axis=(0, 1))
        w = hist.mean(axis=2)
    else:
        energy = np.full(3, hist.sum())
        w = hist
    total = w.sum()
    if total <= 0.0:
        raise EmptyHistogramError("histogram has no mass")
    b = bins or w.shape[0]
    centers = np.linspace(-1.0, 1.0, b + 1)
    centers = 0.5 * (centers[:-1] + centers[1:])
    px, py = np.meshgrid(centers, centers, indexing="ij")
    mx = float((w * px).sum() / total)
    my = float((w * py).sum() / total)
    var = float((w * ((px - mx) ** 2 + (py - my) ** 2)).sum() / total / 2.0)
    return DirectionalStats(energy=energy, mean=np.array([mx, my]), variance=var)


def furnace_albedo(stack, w_i, n_paths, rng=None, batch_size=_DEFAULT_BATCH, workers=None):
    """Total top-exit energy per channel; 1 up to MC error for lossless stacks."""
    g = goniophotometer(stack, w_i, n_paths, bins=2, rng=rng, batch_size=batch_size, workers=workers)
    return g.top_energy


def _emission_stack(eta, alpha):
    return LayerStack(
        (RoughDielectric(eta, alpha), Lambertian((1.0, 1.0, 1.0))),
        ((1.0, 1.0, 1.0),),
    )


def _emit_escapes(eta, alpha, n_paths, rng, batch_size=_DEFAULT_BATCH):
    """Escape directions for cosine emission from the base; yields per batch."""
    stack = _emission_stack(eta, alpha)
    done = 0
    bi = 0
    while done < n_paths:
        cnt = min(batch_size, n_paths - done)
        gen = rng.child(bi).generator()
        d0 = cosine_sample_hemisphere(gen.random(cnt), gen.random(cnt))
        code, edir, _, _ = _walk_batch(stack, d0, gen, region0=1)
        yield edir[code == 0]
        done += cnt
        bi += 1


def measure_escape_variance(eta, alpha, n_paths, rng=None):
    """Projected-disc variance of light escaping a lone coating.

    Cosine-distributed rays start at the diffuse base; inter-reflected rays
    are re-emitted by the base, so the result is independent of any
    incident direction. This is the width statistic behind the indirect
    lobe's equivalent roughness.
    """
    rng = rng or Rng(0)
    n = 0
    sx = sy = sr2 = 0.0
    for dirs in _emit_escapes(eta, alpha, n_paths, rng):
        n += dirs.shape[0]
        sx += dirs[:, 0].sum()
        sy += dirs[:, 1].sum()
        sr2 += (dirs[:, 0] ** 2 + dirs[:, 1] ** 2).sum()
    if n == 0:
        raise EmptyHistogramError("no paths escaped")
    mx, my = sx / n, sy / n
    return float((sr2 / n - mx * mx - my * my) / 2.0)


def escape_histogram(eta, alpha, n_paths, bins=64, rng=None):
    """Projected-disc histogram of the escaping distribution (base emission)."""
    rng = rng or Rng(0)
    hist = np.zeros((bins, bins))
    for dirs in _emit_escapes(eta, alpha, n_paths, rng):
        ix = np.clip(((dirs[:, 0] + 1.0) * 0.5 * bins).astype(np.int64), 0, bins - 1)
        iy = np.clip(((dirs[:, 1] + 1.0) * 0.5 * bins).astype(np.int64), 0, bins - 1)
        hist += np.bincount(ix * bins + iy, minlength=bins * bins).reshape(bins, bins)
    return hist / n_paths


def escape_radial_profile(eta, alpha, n_paths, bins=128, rng=None):
    """Incidence-plane slice of the escape density over x in [-1, 1].

    The base-emission setup is azimuthally symmetric, so the slice equals
    the radial density profile; estimating it radially uses every sample.
    Returns (x, density) with the density normalized to unit integral.
    """
    rng = rng or Rng(0)
    half = bins // 2
    edges = np.linspace(0.0, 1.0, half + 1)
    counts = np.zeros(half)
    total = 0
    for dirs in _emit_escapes(eta, alpha, n_paths, rng):
        r = np.hypot(dirs[:, 0], dirs[:, 1])
        counts += np.histogram(r, bins=edges)[0]
        total += dirs.shape[0]
    area = np.pi * (edges[1:] ** 2 - edges[:-1] ** 2)
    dens = counts / max(total, 1) / area
    centers = 0.5 * (edges[:-1] + edges[1:])
    x = np.concatenate([-centers[::-1], centers])
    prof = np.concatenate([dens[::-1], dens])
    trapezoid = getattr(np, "trapezoid", np.trapz)
    norm = trapezoid(prof, x)
    if norm > 0:
        prof = prof / norm
    return x, prof
