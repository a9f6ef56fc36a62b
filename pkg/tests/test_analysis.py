import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from spadofdm.analysis import (BerCurve, Expectations, PhotonAffineCoeffs, SignalStats, analytic_ber,
                               analytic_ber_curve, ber_mqam, bussgang_decompose, bussgang_expectations,
                               bussgang_expectations_aq, bussgang_expectations_pq, clipped_signal_stats,
                               dbm_to_watts, dco_clipping_model, gaussian_expectation, photon_affine_coeffs,
                               qfunc, shot_noise_variance, snr)
from spadofdm.exceptions import ConfigError, NumericalInstabilityError
from spadofdm.link import LinkScenario
from spadofdm.ofdm import OfdmConfig
from spadofdm.spad import SpadArrayConfig, dead_time_event_oracle

ACO_STATS = SignalStats(rho=0.0, sigma_x=math.sqrt(2 * math.pi), mean_clipped=1 / math.sqrt(2 * math.pi), sigma_m=1.0)


def printed_moment(k, c, rho, sigma, Cs, Cn):
    """Completed-square form of E[N^k exp(-c N)], N = Cs x + Cn for x >= 0 and Cn otherwise.

    The shifted Gaussian has mean m = rho - c Cs sigma^2; the mass of x >= 0
    under it is Q(-m/sigma).
    """
    m = rho - c * Cs * sigma**2
    pre = math.exp(0.5 * c**2 * Cs**2 * sigma**2 - c * Cs * rho - c * Cn)
    q, p = qfunc(-m / sigma), norm.pdf(m / sigma)
    first = m * q + sigma * p
    if k == 1:
        inner = Cs * first + Cn * q
    else:
        second = (m**2 + sigma**2) * q + m * sigma * p
        inner = Cs**2 * second + 2 * Cs * Cn * first + Cn**2 * q
    return pre * inner + Cn**k * math.exp(-c * Cn) * qfunc(rho / sigma)


def quad_expectation(func, rho, sigma, Cs, Cn):
    """E[func(N(x))] by mpmath quadrature of the defining integral."""
    with mpmath.workdps(30):
        dens = lambda x: mpmath.npdf(x, rho, sigma)
        cont = mpmath.quad(lambda x: func(Cs * x + Cn) * dens(x), [0, rho, rho + 4 * sigma, rho + 12 * sigma, mpmath.inf])
        atom = func(mpmath.mpf(Cn)) * mpmath.ncdf(0, rho, sigma)
        return float(cont + atom)


class TestSignalStats:
    @pytest.mark.parametrize("M", [4, 16, 64, 1024])
    def test_aco(self, M):
        s = clipped_signal_stats(OfdmConfig("ACO", M))
        assert s.rho == 0.0
        assert s.sigma_x == pytest.approx(2.5066, abs=1e-4)
        assert s.sigma_m == pytest.approx(math.sqrt((M - 1) / 3), rel=1e-12)

    def test_aco_m4_unit_sigma(self):
        assert clipped_signal_stats(OfdmConfig("ACO", 4)).sigma_m == pytest.approx(1.0)

    def test_dco_7db(self):
        s = clipped_signal_stats(OfdmConfig("DCO", 4, 2048, 7.0))
        assert s.sigma_m == pytest.approx(1.4135, abs=1e-3)
        assert s.bias == pytest.approx(2.8313, abs=1e-2)

    def test_dco_against_sampling(self, rng):
        s = clipped_signal_stats(OfdmConfig("DCO", 16, 2048, 7.0))
        x = np.maximum(rng.normal(s.bias, s.sigma_m, 10**6), 0)
        assert x.mean() == pytest.approx(s.mean_clipped, rel=3e-3)


class TestCoefficients:
    def test_table_values(self, spad):
        c = photon_affine_coeffs(1e-9, spad, 1e-6)
        assert c.C_t == pytest.approx(1.3184e-5, abs=1e-9)
        assert c.C_n == pytest.approx(7.518, abs=0.01)
        assert c.C_s == pytest.approx(147.4, abs=1)

    def test_negative_power(self, spad):
        with pytest.raises(ValueError):
            photon_affine_coeffs(-1.0, spad, 1e-6)


class TestPqExpectations:
    def test_no_dead_time_identity(self):
        c = PhotonAffineCoeffs(C_s=300.0, C_n=7.5, C_t=0.0)
        e = bussgang_expectations_pq(ACO_STATS, c)
        assert e.ENz == pytest.approx(e.EN2, rel=1e-12)
        assert e.Ez == pytest.approx(e.EN, rel=1e-12)
        bd = bussgang_decompose(e)
        assert bd.alpha == pytest.approx(1.0, rel=1e-12)
        assert bd.sigma_Y_sq == pytest.approx(0.0, abs=1e-9 * e.Ez2)

    def test_aco_mean(self):
        c = PhotonAffineCoeffs(C_s=123.0, C_n=4.0, C_t=1e-5)
        assert bussgang_expectations_pq(ACO_STATS, c).EN == pytest.approx(127.0, rel=1e-12)

    @given(rho=st.floats(0, 4), sigma=st.floats(0.3, 4), Cs=st.floats(1, 1e4), Cn=st.floats(0, 50),
           load=st.floats(0, 1.5))
    def test_matches_completed_square_form(self, rho, sigma, Cs, Cn, load):
        Ct = load / (Cs * sigma)
        stats = SignalStats(rho, sigma, 1.0, 1.0)
        e = bussgang_expectations_pq(stats, PhotonAffineCoeffs(Cs, Cn, Ct))
        ref = {
            "ENz": printed_moment(2, Ct, rho, sigma, Cs, Cn),
            "EN2": printed_moment(2, 0.0, rho, sigma, Cs, Cn),
            "Ez2": printed_moment(2, 2 * Ct, rho, sigma, Cs, Cn),
            "Ez": printed_moment(1, Ct, rho, sigma, Cs, Cn),
            "EN": printed_moment(1, 0.0, rho, sigma, Cs, Cn),
        }
        for key, val in ref.items():
            assert getattr(e, key) == pytest.approx(val, rel=1e-9)

    @pytest.mark.parametrize("rho,sigma,Cs,Cn,Ct", [
        (0.0, math.sqrt(2 * math.pi), 2e4, 7.5, 1.3e-5),
        (1.9, 0.75, 5e4, 7.5, 1.3e-5),
        (0.5, 2.0, 3e2, 0.0, 1e-2),
        (3.0, 0.4, 1e5, 20.0, 4e-5),
    ])
    def test_against_quadrature(self, rho, sigma, Cs, Cn, Ct):
        e = bussgang_expectations_pq(SignalStats(rho, sigma, 1.0, 1.0), PhotonAffineCoeffs(Cs, Cn, Ct))
        z = lambda n: n * mpmath.exp(-Ct * n)
        args = (rho, sigma, Cs, Cn)
        assert e.ENz == pytest.approx(quad_expectation(lambda n: n * z(n), *args), rel=1e-6)
        assert e.EN2 == pytest.approx(quad_expectation(lambda n: n * n, *args), rel=1e-6)
        assert e.Ez2 == pytest.approx(quad_expectation(lambda n: z(n) ** 2, *args), rel=1e-6)
        assert e.Ez == pytest.approx(quad_expectation(z, *args), rel=1e-6)
        assert e.EN == pytest.approx(quad_expectation(lambda n: n, *args), rel=1e-6)

    def test_deep_saturation_stays_finite(self):
        # far past the transfer peak the completed-square prefactor overflows doubles
        e = bussgang_expectations_pq(ACO_STATS, PhotonAffineCoeffs(1e9, 7.5, 1.3e-5))
        assert all(np.isfinite(v) and v >= 0 for v in e.as_dict().values())


class TestAqExpectations:
    def test_no_dead_time_matches_pq(self):
        c = PhotonAffineCoeffs(C_s=500.0, C_n=7.5, C_t=0.0)
        aq, pq = bussgang_expectations_aq(ACO_STATS, c), bussgang_expectations_pq(ACO_STATS, c)
        for key in ("ENz", "EN2", "Ez2", "Ez", "EN"):
            assert getattr(aq, key) == pytest.approx(getattr(pq, key), rel=1e-8)

    def test_small_load_alpha_matches_pq(self):
        c = PhotonAffineCoeffs(C_s=50.0, C_n=7.5, C_t=1e-6)
        a_aq = bussgang_decompose(bussgang_expectations_aq(ACO_STATS, c)).alpha
        a_pq = bussgang_decompose(bussgang_expectations_pq(ACO_STATS, c)).alpha
        assert a_aq == pytest.approx(a_pq, abs=1e-3)

    @given(Cs=st.floats(1, 1e7), Cn=st.floats(0, 100))
    def test_mean_below_ceiling(self, Cs, Cn):
        Ct = 1.3184e-5
        assert bussgang_expectations_aq(ACO_STATS, PhotonAffineCoeffs(Cs, Cn, Ct)).Ez < 1 / Ct

    def test_against_quadrature(self):
        rho, sigma, Cs, Cn, Ct = 1.2, 0.8, 4e4, 7.5, 1.3e-5
        e = bussgang_expectations_aq(SignalStats(rho, sigma, 1.0, 1.0), PhotonAffineCoeffs(Cs, Cn, Ct))
        z = lambda n: n / (1 + Ct * n)
        assert e.Ez == pytest.approx(quad_expectation(z, rho, sigma, Cs, Cn), rel=1e-8)
        assert e.Ez2 == pytest.approx(quad_expectation(lambda n: z(n) ** 2, rho, sigma, Cs, Cn), rel=1e-8)
        assert e.ENz == pytest.approx(quad_expectation(lambda n: n * z(n), rho, sigma, Cs, Cn), rel=1e-8)

    def test_generic_expectation_of_constant(self):
        c = PhotonAffineCoeffs(10.0, 1.0, 0.0)
        assert gaussian_expectation(lambda n: 1.0, ACO_STATS, c) == pytest.approx(1.0, rel=1e-10)


class TestDecompose:
    def test_scaled_identity(self):
        e = Expectations(ENz=2 * 50.0, EN2=50.0, Ez2=4 * 50.0, Ez=2 * 6.0, EN=6.0)
        bd = bussgang_decompose(e)
        assert bd.alpha == pytest.approx(2.0)
        assert bd.sigma_Y_sq == pytest.approx(0.0, abs=1e-12)

    def test_clamps_roundoff(self):
        e = Expectations(ENz=50.0, EN2=50.0, Ez2=50.0 - 1e-9, Ez=6.0, EN=6.0)
        assert bussgang_decompose(e).sigma_Y_sq == 0.0

    def test_rejects_inconsistent(self):
        with pytest.raises(NumericalInstabilityError):
            bussgang_decompose(Expectations(ENz=50.0, EN2=50.0, Ez2=40.0, Ez=6.0, EN=6.0))

    def test_rejects_zero_power(self):
        with pytest.raises(ValueError):
            bussgang_decompose(Expectations(0.0, 0.0, 0.0, 0.0, 0.0))

    @pytest.mark.parametrize("kind", ["PQ", "AQ"])
    def test_orthogonality_sampled(self, spad, kind, rng):
        stats = clipped_signal_stats(OfdmConfig("ACO", 4))
        c = photon_affine_coeffs(float(dbm_to_watts(-35.0)), spad, 1e-6)
        x = rng.normal(stats.rho, stats.sigma_x, 10**6)
        N = np.where(x >= 0, c.C_s * x + c.C_n, c.C_n)
        z = N * np.exp(-c.C_t * N) if kind == "PQ" else N / (1 + c.C_t * N)
        bd = bussgang_decompose(bussgang_expectations(kind, stats, c))
        prod = N * (z - bd.alpha * N)
        assert abs(prod.mean()) < 3 * prod.std() / math.sqrt(prod.size)


class TestClipping:
    def test_rejects_aco(self, spad):
        with pytest.raises(ConfigError):
            dco_clipping_model(OfdmConfig("ACO"), photon_affine_coeffs(1e-9, spad, 1e-6))

    def test_large_bias_no_clipping(self, spad):
        cm = dco_clipping_model(OfdmConfig("DCO", 4, bias_db=40.0), photon_affine_coeffs(1e-9, spad, 1e-6))
        assert cm.alpha_c == pytest.approx(1.0, abs=1e-9)
        assert cm.sigma_c_sq == pytest.approx(0.0, abs=1e-9)

    def test_zero_bias(self, spad):
        cm = dco_clipping_model(OfdmConfig("DCO", 4, bias_db=0.0), photon_affine_coeffs(1e-9, spad, 1e-6))
        assert cm.alpha_c == pytest.approx(0.5, abs=1e-12)

    def test_bounds(self, spad):
        for bias in (0.0, 3.0, 7.0, 13.0):
            cm = dco_clipping_model(OfdmConfig("DCO", 16, bias_db=bias), photon_affine_coeffs(1e-9, spad, 1e-6))
            assert 0 < cm.alpha_c <= 1 and 0 < cm.G_DC <= 1

    def test_against_sampling(self, spad, rng):
        cfg = OfdmConfig("DCO", 64, 2048, 7.0)
        cm = dco_clipping_model(cfg, photon_affine_coeffs(1e-9, spad, 1e-6))
        s = clipped_signal_stats(cfg)
        # stratified draws: the clipped tail dominates the residual and plain
        # sampling has ~0.45% standard error at this size
        n = 10**7
        x = norm.ppf((np.arange(n) + rng.random(n)) / n, s.bias, s.sigma_m)
        y = np.maximum(x, 0.0)
        alpha = np.dot(x, y) / np.dot(x, x)
        resid = y - alpha * x
        assert cm.alpha_c == pytest.approx(alpha, rel=5e-3)
        assert cm.sigma_c_sq == pytest.approx(resid.var(), rel=5e-3)
        assert cm.G_DC == pytest.approx(s.sigma_m**2 / np.mean(x * x), rel=5e-3)


class TestShotNoise:
    def test_poisson_equals_mean_without_dead_time(self):
        c = PhotonAffineCoeffs(200.0, 7.5, 0.0)
        cfg = SpadArrayConfig()
        v = shot_noise_variance("PQ", "poisson", ACO_STATS, c, cfg, 1e-6)
        assert v == pytest.approx(207.5, rel=1e-12)

    @pytest.mark.parametrize("kind", ["PQ", "AQ"])
    def test_exact_tends_to_poisson(self, kind):
        cfg = SpadArrayConfig(dead_time=1e-16)
        c = photon_affine_coeffs(1e-9, cfg, 1e-6)
        exact = shot_noise_variance(kind, "exact", ACO_STATS, c, cfg, 1e-6)
        pois = shot_noise_variance(kind, "poisson", ACO_STATS, c, cfg, 1e-6)
        assert exact == pytest.approx(pois, rel=1e-6)

    def test_exact_pq_against_event_oracle(self, spad, rng):
        T = 1e-6
        stats = clipped_signal_stats(OfdmConfig("ACO", 4))
        c = photon_affine_coeffs(float(dbm_to_watts(-45.0)), spad, T)
        analytic = shot_noise_variance("PQ", "exact", stats, c, spad, T)
        # average the conditional array variance over signal quantiles
        u = (np.arange(64) + 0.5) / 64
        x = norm.ppf(u, stats.rho, stats.sigma_x)
        N = np.where(x >= 0, c.C_s * x + c.C_n, c.C_n)
        cond = [dead_time_event_oracle(n / (T * spad.n_spad), "PQ", spad.dead_time, T, rng, 40_000).var()
                for n in N]
        oracle = spad.n_spad * float(np.mean(cond))
        assert analytic == pytest.approx(oracle, rel=0.05)


class TestSnr:
    def test_spectral_efficiency(self, spad):
        r_aco = snr(OfdmConfig("ACO", 4, symbol_period=1e-6), spad, "PQ", "poisson", 1e-9).spectral_efficiency
        r_dco = snr(OfdmConfig("DCO", 4, symbol_period=1e-6), spad, "PQ", "poisson", 1e-9).spectral_efficiency
        assert r_aco == 0.5
        assert r_dco == pytest.approx(0.99902, abs=1e-5)

    @pytest.mark.parametrize("scheme", ["ACO", "DCO"])
    def test_zero_power(self, spad, scheme):
        assert snr(OfdmConfig(scheme, 4, symbol_period=1e-6), spad, "PQ", "poisson", 0.0).snr == 0.0

    def test_pq_rises_then_collapses(self, spad):
        T = 1e-6
        cfg = OfdmConfig("ACO", 4, symbol_period=T)
        powers = np.arange(-80.0, -5.0, 1.0)
        values = np.array([snr(cfg, spad, "PQ", "poisson", float(dbm_to_watts(p))).snr for p in powers])
        turns = np.flatnonzero(np.diff(np.sign(np.diff(values))) != 0)
        assert turns.size == 1
        peak_power = powers[turns[0] + 1]
        # the power at which the mean potential count reaches T_s N_SPAD / tau_d
        stats = clipped_signal_stats(cfg)
        mu_peak = T * spad.n_spad / spad.dead_time
        c1 = photon_affine_coeffs(1.0, spad, T).C_s
        transfer_peak_dbm = 10 * math.log10(mu_peak / c1 / 1e-3)
        assert peak_power < transfer_peak_dbm
        assert values[-1] < 1e-3 * values.max()
        assert stats.rho == 0.0

    def test_pq_aq_converge_without_dead_time_and_dark(self):
        cfg_spad = SpadArrayConfig(dead_time=1e-15, dcr=0.0)
        for scheme in ("ACO", "DCO"):
            cfg = OfdmConfig(scheme, 16, symbol_period=1e-6)
            a = snr(cfg, cfg_spad, "PQ", "poisson", 1e-9).snr
            b = snr(cfg, cfg_spad, "AQ", "poisson", 1e-9).snr
            assert a == pytest.approx(b, rel=1e-3)

    def test_dc_gain_flag(self, spad):
        cfg = OfdmConfig("DCO", 16, bias_db=7.0, symbol_period=1e-6)
        base = snr(cfg, spad, "PQ", "poisson", 1e-8)
        flagged = snr(cfg, spad, "PQ", "poisson", 1e-8, dc_gain_in_signal=True)
        G = dco_clipping_model(cfg, photon_affine_coeffs(1e-8, spad, 1e-6)).G_DC
        assert flagged.snr == pytest.approx(G * base.snr, rel=1e-12)

    def test_components_recorded(self, spad):
        res = snr(OfdmConfig("DCO", 16, symbol_period=1e-6), spad, "AQ", "exact", 1e-8)
        assert set(res.components) >= {"signal_power", "distortion_var", "shot_var", "clip_var"}
        assert all(v >= 0 for v in res.components.values())


class TestBer:
    def test_zero_snr(self):
        assert ber_mqam(0.0, 4, 0.5) == pytest.approx(0.5)

    def test_reference_point(self):
        assert ber_mqam(19.10, 4, 0.5) == pytest.approx(1e-3, rel=0.05)

    def test_large_snr(self):
        assert ber_mqam(1e6, 16, 1.0) < 1e-300

    def test_negative_snr(self):
        with pytest.raises(ValueError):
            ber_mqam(-1.0, 4, 0.5)

    @given(M=st.sampled_from([4, 16, 64, 256, 1024]), a=st.floats(0, 1e4), b=st.floats(0, 1e4))
    def test_monotone(self, M, a, b):
        lo, hi = sorted((a, b))
        R = math.log2(M) / 4
        assert ber_mqam(hi, M, R) <= ber_mqam(lo, M, R)
        assert 0 <= ber_mqam(lo, M, R) <= 1

    def test_dco_64_clipping_floor(self, spad):
        cfg = OfdmConfig("DCO", 64, bias_db=7.0, symbol_period=1e-6)
        bers = [analytic_ber(cfg, spad, "PQ", "poisson", p) for p in np.arange(-80.0, 0.0, 1.0)]
        assert min(bers) > 1e-4


class TestCurve:
    def test_curve_rejects_unsorted(self):
        with pytest.raises(ValueError):
            BerCurve([0.0, -1.0], [0.1, 0.2])

    def test_aco_pq_1ms_crossings(self):
        sc = LinkScenario(OfdmConfig("ACO", 4, symbol_period=1e-3), SpadArrayConfig(), "PQ", "poisson")
        powers = np.arange(-100.0, -30.0, 1.0)
        curve = analytic_ber_curve(sc, powers)
        below = np.flatnonzero(curve.ber < 1e-3)
        assert below.size
        lo, hi = powers[below[0]], powers[below[-1]]
        # falling and rising crossings of the 1e-3 line
        assert -92 <= lo <= -88 and -42 <= hi <= -38

    def test_low_side_monotone(self):
        sc = LinkScenario(OfdmConfig("ACO", 16, symbol_period=1e-6), SpadArrayConfig(), "PQ", "poisson")
        curve = analytic_ber_curve(sc, np.arange(-90.0, -60.0, 1.0))
        assert np.all(np.diff(curve.ber) <= 0)

    @pytest.mark.parametrize("scheme", ["ACO", "DCO"])
    def test_pq_rises_before_aq(self, scheme):
        powers = np.arange(-60.0, 0.0, 0.5)
        ofdm = OfdmConfig(scheme, 4, bias_db=7.0, symbol_period=1e-6)
        pq = analytic_ber_curve(LinkScenario(ofdm, SpadArrayConfig(), "PQ", "poisson"), powers).ber
        aq = analytic_ber_curve(LinkScenario(ofdm, SpadArrayConfig(), "AQ", "poisson"), powers).ber
        last_good = lambda b: powers[np.flatnonzero(b < 1e-3)[-1]]
        assert last_good(pq) < last_good(aq)

    def test_deterministic(self):
        sc = LinkScenario(OfdmConfig("DCO", 16, symbol_period=1e-6), SpadArrayConfig(), "AQ", "exact")
        p = np.linspace(-70, -20, 6)
        np.testing.assert_array_equal(analytic_ber_curve(sc, p).ber, analytic_ber_curve(sc, p).ber)
