import numpy as np
import pytest

from coatlamb import microfacet as mf
from coatlamb.model import (
    CoatedLambertianParams,
    Lobe,
    SaturationError,
    TableSet,
    eval_brdf,
    ggx_energy_table,
    indirect_albedo,
    lobes,
    roughness_to_variance,
    sample_brdf,
    variance_to_roughness,
)
from coatlamb.rng import Rng
from coatlamb.tables import Axis, TableFormatError, TableNd


def constant_tables(t_in=1.0, r_inner=0.0, t_inner=1.0, sigma=0.25):
    """Exact tables for analytic limits (e.g. index-matched, lossless)."""
    a2 = lambda n: Axis(n, 2, 0.0, 1.0)
    eta_axis = Axis("eta", 2, 0.25, 4.0, "log")
    four = (a2("cos_theta"), a2("alpha"), eta_axis, a2("tau"))
    three = (eta_axis, a2("alpha"), a2("tau"))
    two = (eta_axis, a2("alpha"))
    return TableSet(
        coat_transmission=TableNd(four, np.full((2, 2, 2, 2), t_in)),
        inner_reflection=TableNd(three, np.full((2, 2, 2), r_inner)),
        inner_transmission=TableNd(three, np.full((2, 2, 2), t_inner)),
        escape_variance=TableNd(two, np.full((2, 2), sigma)),
    )


@pytest.fixture(scope="module")
def small_tables(unit_tables):
    return unit_tables


def hemi_quadrature(n=128):
    mu, wmu = np.polynomial.legendre.leggauss(n)
    mu = 0.5 * (mu + 1.0)
    wmu = 0.5 * wmu
    phi = (np.arange(n) + 0.5) / n * 2.0 * np.pi
    ct, ph = np.meshgrid(mu, phi, indexing="ij")
    st = np.sqrt(1.0 - ct**2)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    w = (wmu[:, None] * (2.0 * np.pi / n) * np.ones_like(ph)).ravel()
    return dirs, w


class TestVarianceMap:
    def test_zero_maps_to_zero(self):
        assert variance_to_roughness(0.0) == 0.0
        assert roughness_to_variance(0.0) == 0.0

    def test_round_trip(self):
        for a in np.arange(0.1, 0.95, 0.1):
            assert variance_to_roughness(roughness_to_variance(a)) == pytest.approx(a, abs=1e-6)

    def test_strictly_increasing(self):
        a = np.linspace(0.01, 0.99, 99)
        v = roughness_to_variance(a)
        assert np.all(np.diff(v) > 0.0)


class TestIndirectAlbedo:
    def test_black_base(self):
        t = constant_tables()
        p = CoatedLambertianParams(1.5, 0.1, (0.0, 0.0, 0.0))
        np.testing.assert_allclose(indirect_albedo(0.8, p, t), 0.0)

    def test_single_bounce_term(self):
        t = constant_tables(t_in=0.9, r_inner=0.0, t_inner=0.85)
        p = CoatedLambertianParams(1.5, 0.1, (0.5, 0.5, 0.5))
        np.testing.assert_allclose(indirect_albedo(0.8, p, t), 0.9 * 0.5 * 0.85, atol=1e-6)

    def test_series_oracle(self):
        # truncated series sum_{k<=64} t_in rho^(k+1) r^k t_out
        t = constant_tables(t_in=0.9, r_inner=0.2, t_inner=0.85)
        p = CoatedLambertianParams(1.5, 0.1, (0.5, 0.5, 0.5))
        got = indirect_albedo(0.8, p, t)[0]
        series = sum(0.9 * 0.5 ** (k + 1) * 0.2**k * 0.85 for k in range(65))
        assert got == pytest.approx(series, abs=1e-6)
        assert got == pytest.approx(0.425, abs=1e-6)

    def test_saturation_error(self):
        t = constant_tables(r_inner=1.0)
        p = CoatedLambertianParams(1.5, 0.1, (1.0, 1.0, 1.0))
        with pytest.raises(SaturationError):
            indirect_albedo(0.8, p, t)

    def test_per_channel_tau(self, small_tables):
        p = CoatedLambertianParams(1.5, 0.2, (0.8, 0.8, 0.8), (1.0, 0.5, 0.25))
        v = indirect_albedo(0.9, p, small_tables)
        assert v[0] > v[1] > v[2] > 0.0


class TestEval:
    def test_black_base_is_pure_coat(self, small_tables):
        p = CoatedLambertianParams(1.5, 0.2, (0.0, 0.0, 0.0))
        wi = mf.normalize(np.array([0.3, 0.1, 0.9]))
        wo = mf.normalize(np.array([-0.25, -0.1, 0.95]))
        got = eval_brdf(p, wi, wo, small_tables)
        want = mf.ggx_reflection_eval(wi, wo, 0.2, 1.5)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_below_horizon_zero(self, small_tables):
        p = CoatedLambertianParams(1.5, 0.2, (0.5, 0.5, 0.5))
        wi = np.array([0.0, 0.0, 1.0])
        wo = np.array([0.3, 0.0, -0.95])
        np.testing.assert_array_equal(eval_brdf(p, wi, wo, small_tables), 0.0)

    def test_index_matched_integrates_to_rho(self):
        # eta=1, tau=1: the model must return the base albedo when
        # integrated against the outgoing cosine (quadrature oracle)
        tables = constant_tables()
        rho = (0.7, 0.4, 0.1)
        p = CoatedLambertianParams(1.0, 0.3, rho)
        wi = mf.normalize(np.array([0.4, 0.0, 0.85]))
        dirs, w = hemi_quadrature()
        vals = eval_brdf(p, np.tile(wi, (len(dirs), 1)), dirs, tables)
        alb = (w[:, None] * vals * dirs[:, 2:3]).sum(axis=0)
        np.testing.assert_allclose(alb, rho, rtol=0.02)

    @pytest.mark.parametrize("eta,alpha", [(0.8, 0.1), (0.8, 0.5), (1.5, 0.1), (1.5, 0.5)])
    def test_indirect_lobe_integrates_to_its_energy(self, small_tables, eta, alpha):
        # quadrature: integral of the indirect term equals the series energy,
        # which is what the albedo-normalized shadowing term enforces
        p = CoatedLambertianParams(eta, alpha, (1.0, 1.0, 1.0))
        wi = np.array([0.0, 0.0, 1.0])
        dirs, w = hemi_quadrature()
        full = eval_brdf(p, np.tile(wi, (len(dirs), 1)), dirs, small_tables)
        p0 = CoatedLambertianParams(eta, alpha, (0.0, 0.0, 0.0))
        coat = eval_brdf(p0, np.tile(wi, (len(dirs), 1)), dirs, small_tables)
        indirect = ((full - coat) * dirs[:, 2:3] * w[:, None]).sum(axis=0)
        np.testing.assert_allclose(indirect, indirect_albedo(1.0, p, small_tables), rtol=0.02)

    def test_total_albedo_plausible(self, small_tables):
        dirs, w = hemi_quadrature()
        for eta in (0.8, 1.5, 2.5):
            for alpha in (0.1, 0.5):
                p = CoatedLambertianParams(eta, alpha, (1.0, 1.0, 1.0))
                for ci in (0.95, 0.6):
                    wi = np.array([np.sqrt(1 - ci**2), 0.0, ci])
                    vals = eval_brdf(p, np.tile(wi, (len(dirs), 1)), dirs, small_tables)
                    alb = (w[:, None] * vals * dirs[:, 2:3]).sum(axis=0)
                    assert np.all(alb <= 1.02)
                    assert np.all(alb >= 0.0)

    def test_indirect_peak_at_normal(self, small_tables):
        p = CoatedLambertianParams(1.5, 0.3, (1.0, 1.0, 1.0))
        p0 = CoatedLambertianParams(1.5, 0.3, (0.0, 0.0, 0.0))
        wi = mf.normalize(np.array([0.5, 0.0, 0.8]))
        dirs, w = hemi_quadrature(96)
        ind = (
            eval_brdf(p, np.tile(wi, (len(dirs), 1)), dirs, small_tables)
            - eval_brdf(p0, np.tile(wi, (len(dirs), 1)), dirs, small_tables)
        )[:, 0] * dirs[:, 2]
        best = dirs[np.argmax(ind)]
        assert np.degrees(np.arccos(np.clip(best[2], -1, 1))) < 2.0

    def test_diffuse_fallback_guard(self, small_tables):
        p = CoatedLambertianParams(0.8, 0.1, (0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            eval_brdf(p, np.array([0, 0, 1.0]), np.array([0, 0, 1.0]), small_tables, diffuse_indirect=True)

    def test_diffuse_fallback_energy(self, small_tables):
        p = CoatedLambertianParams(1.5, 0.2, (0.6, 0.6, 0.6))
        wi = np.array([0.0, 0.0, 1.0])
        dirs, w = hemi_quadrature()
        p0 = CoatedLambertianParams(1.5, 0.2, (0.0, 0.0, 0.0))
        full = eval_brdf(p, np.tile(wi, (len(dirs), 1)), dirs, small_tables, diffuse_indirect=True)
        coat = eval_brdf(p0, np.tile(wi, (len(dirs), 1)), dirs, small_tables)
        ind = ((full - coat) * dirs[:, 2:3] * w[:, None]).sum(axis=0)
        np.testing.assert_allclose(ind, indirect_albedo(1.0, p, small_tables), rtol=1e-6)


class TestSample:
    def test_black_base_always_direct(self, small_tables):
        p = CoatedLambertianParams(1.5, 0.3, (0.0, 0.0, 0.0))
        wi = mf.normalize(np.array([0.4, 0.0, 0.9]))
        wo, pdf, val = sample_brdf(p, wi, Rng(40), n=2000, tables=small_tables)
        # all samples come from the reflection lobe: half vectors near wi+wo
        h = mf.normalize(wi[None, :] + wo)
        assert np.all(np.sum(h * wi, axis=1) > 0.0)
        assert pdf.min() > 0.0

    def test_pdf_integrates_to_one(self, small_tables):
        # the stated pdf is a density over the full sphere of candidates
        p = CoatedLambertianParams(1.5, 0.3, (0.8, 0.8, 0.8))
        wi = mf.normalize(np.array([0.5, 0.0, 0.85]))
        ci = wi[2]
        w_direct = small_tables.coat_albedo(ci, 0.3, 1.5)
        rho2 = float(np.mean(indirect_albedo(ci, p, small_tables)))
        p_direct = w_direct / (w_direct + rho2)
        a2 = variance_to_roughness(small_tables.sigma_indirect(1.5, 0.3))

        mu, wmu = np.polynomial.legendre.leggauss(256)
        phi = (np.arange(512) + 0.5) / 512 * 2 * np.pi
        ct, ph = np.meshgrid(mu, phi, indexing="ij")
        st = np.sqrt(1 - ct**2)
        dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], -1).reshape(-1, 3)
        w = (wmu[:, None] * (2 * np.pi / 512) * np.ones_like(ph)).ravel()

        h_d = mf.normalize(wi[None, :] + dirs)
        pdf_d = mf.ggx_ndf(np.abs(h_d[:, 2]), 0.3) * mf.smith_g1(ci, 0.3) / (4 * ci)
        h_i = dirs + np.array([0.0, 0.0, 1.0])
        nlen = np.linalg.norm(h_i, axis=1)
        h_i = h_i / np.maximum(nlen[:, None], 1e-12)
        pdf_i = mf.ggx_ndf(np.abs(h_i[:, 2]), a2) / 4.0
        pdf = p_direct * pdf_d + (1 - p_direct) * pdf_i
        total = np.sum(w * pdf)
        assert total == pytest.approx(1.0, abs=1e-2)

    def test_mc_albedo_matches_quadrature(self, small_tables):
        p = CoatedLambertianParams(1.5, 0.25, (0.7, 0.5, 0.3))
        wi = mf.normalize(np.array([0.3, 0.2, 0.95]))
        wo, pdf, val = sample_brdf(p, wi, Rng(41), n=400_000, tables=small_tables)
        good = pdf > 1e-12
        est = (val[good] * (np.clip(wo[good, 2:3], 0, None) / pdf[good, None])).sum(axis=0) / len(pdf)
        dirs, w = hemi_quadrature()
        quad = (
            w[:, None] * eval_brdf(p, np.tile(wi, (len(dirs), 1)), dirs, small_tables) * dirs[:, 2:3]
        ).sum(axis=0)
        np.testing.assert_allclose(est, quad, rtol=0.01)


class TestLobes:
    def test_structure(self, small_tables):
        p = CoatedLambertianParams(1.5, 0.3, (0.8, 0.6, 0.4), (0.9, 0.9, 0.9))
        wi = mf.normalize(np.array([0.4, 0.1, 0.9]))
        direct, indirect = lobes(p, wi, small_tables)
        np.testing.assert_allclose(direct.mean, [-wi[0], -wi[1], wi[2]])
        np.testing.assert_allclose(indirect.mean, [0.0, 0.0, 1.0])
        assert direct.alpha_eq == pytest.approx(0.3, abs=1e-6)
        np.testing.assert_allclose(
            indirect.energy, indirect_albedo(wi[2], p, small_tables), atol=1e-12
        )

    def test_lobe_validation(self):
        with pytest.raises(ValueError):
            Lobe(np.array([np.inf, 0, 0]), np.array([0, 0, 1.0]), 0.5)
        with pytest.raises(ValueError):
            Lobe(np.zeros(3), np.array([0, 0, 1.0]), 1.5)


class TestTableSet:
    def test_shape_validation(self):
        t = constant_tables()
        with pytest.raises(TableFormatError, match="4D"):
            TableSet(
                coat_transmission=t.inner_reflection,
                inner_reflection=t.inner_reflection,
                inner_transmission=t.inner_transmission,
                escape_variance=t.escape_variance,
            )

    def test_save_load_round_trip(self, tmp_path, small_tables):
        small_tables.save(tmp_path)
        back = TableSet.load(tmp_path)
        np.testing.assert_array_equal(
            back.coat_transmission.data, small_tables.coat_transmission.data
        )

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            TableSet.load(tmp_path)

    def test_ggx_energy_table_bounds(self):
        t = ggx_energy_table()
        assert t.data.min() > 0.0  # grazing albedo dips hard but stays positive
        assert t.data.max() <= 1.0
        # low roughness keeps all the energy away from grazing
        assert t.lookup([0.9, 0.02]) == pytest.approx(1.0, abs=0.01)
        # albedo decreases with roughness at fixed moderate incidence
        cs = t.lookup(np.stack([np.full(8, 0.7), np.linspace(0.05, 0.95, 8)], axis=1))
        assert np.all(np.diff(cs) < 1e-3)


class TestParams:
    def test_scalar_broadcast(self):
        p = CoatedLambertianParams(1.5, 0.1, 0.5, 0.9)
        assert p.rho == (0.5, 0.5, 0.5)
        assert p.tau == (0.9, 0.9, 0.9)

    def test_validation(self):
        with pytest.raises(ValueError):
            CoatedLambertianParams(-1.0, 0.1, 0.5)
        with pytest.raises(ValueError):
            CoatedLambertianParams(1.5, 2.0, 0.5)
        with pytest.raises(ValueError):
            CoatedLambertianParams(1.5, 0.1, 1.5)
