"""Closed-form BER analysis of SPAD-received optical OFDM.

The received normalized sample ``x ~ Normal(rho, sigma_x**2)`` maps to an
expected potential photon count ``N(x) = C_s * max(x, 0) + C_n``; samples
clipped at the transmitter still carry the dark-count floor ``C_n``. The
dead-time nonlinearity ``z(N)`` (``N exp(-C_t N)`` for PQ, ``N / (1 + C_t N)``
for AQ) is linearised with the Bussgang decomposition ``z = alpha N + Y``.

The five expectations needed for the PQ case share one template,
``D_k(c) = E[N^k exp(-c N)]``, which has an exact finite expression in terms
of the integrals ``I_m(w) = int_0^inf u^m exp(-u^2/2 - w u) du``:

    D_k(c) = exp(-c C_n) [ phi(a) sum_m C(k,m) C_n^(k-m) (C_s sigma)^m I_m(w)
                          + C_n^k Q(a) ],   a = rho/sigma, w = c C_s sigma - a.

``I_0 = sqrt(pi/2) erfcx(w/sqrt 2)`` and ``I_m = (m-1) I_(m-2) - w I_(m-1)``.
For large ``w`` the recursion cancels badly, so Gauss-Laguerre quadrature of
the rescaled integral is used there. This form never forms the large
exponential prefactors and is stable for any ``C_t``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special
from scipy.stats import norm

from .exceptions import ConfigError, NumericalInstabilityError, QuadratureError
from .ofdm import OfdmConfig, Scheme
from .spad import CountMode, DeadTimeKind, SpadArrayConfig, _kind, _mode


def dbm_to_watts(p_dbm):
    return 1e-3 * np.power(10.0, np.asarray(p_dbm, dtype=float) / 10.0)


def qfunc(x):
    """Standard normal tail probability, accurate far into both tails."""
    return norm.sf(x)


# -- signal statistics --------------------------------------------------------------

@dataclass(frozen=True)
class SignalStats:
    """Distribution of the unit-mean transmitted sample before clipping.

    ``rho`` and ``sigma_x`` are the mean and standard deviation of the bipolar
    (biased) Gaussian in units of the clipped-frame mean; ``sigma_m`` and
    ``mean_clipped`` are the unnormalized values for unit-energy symbols.
    """

    rho: float
    sigma_x: float
    mean_clipped: float
    sigma_m: float
    bias: float = 0.0


def clipped_signal_stats(cfg: OfdmConfig) -> SignalStats:
    M, N = cfg.M, cfg.N
    if cfg.scheme is Scheme.ACO:
        sigma_m = math.sqrt((M - 1) / 3)
        mean = sigma_m / math.sqrt(2 * math.pi)
        return SignalStats(rho=0.0, sigma_x=math.sqrt(2 * math.pi), mean_clipped=mean, sigma_m=sigma_m)
    sigma_m = math.sqrt(2 * (M - 1) * (N - 2) / (3 * N))
    bias = cfg.beta * sigma_m
    mean = bias * qfunc(-bias / sigma_m) + sigma_m * norm.pdf(bias / sigma_m)
    return SignalStats(rho=bias / mean, sigma_x=sigma_m / mean, mean_clipped=mean, sigma_m=sigma_m, bias=bias)


@dataclass(frozen=True)
class PhotonAffineCoeffs:
    """``N(x) = C_s x+ + C_n``; ``C_t = tau_d / (T_s N_SPAD)``."""

    C_s: float
    C_n: float
    C_t: float


def photon_affine_coeffs(power_w, cfg: SpadArrayConfig, symbol_period: float) -> PhotonAffineCoeffs:
    if power_w < 0:
        raise ValueError("optical power must be non-negative")
    gain = 1.0 + cfg.afterpulse
    C_s = cfg.fill_factor * cfg.pdp * power_w * symbol_period * gain / cfg.photon_energy
    C_n = cfg.dark_counts(symbol_period) * gain
    return PhotonAffineCoeffs(C_s=float(C_s), C_n=float(C_n), C_t=cfg.dead_time_constant(symbol_period))


# -- Gaussian expectation machinery ----------------------------------------------

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LAGUERRE = np.polynomial.laguerre.laggauss(80)
_W_SWITCH = 4.0


def _half_gauss_moments(w: float, kmax: int) -> np.ndarray:
    """``I_m(w)`` for ``m = 0..kmax``."""
    if w > _W_SWITCH:
        v, wt = _LAGUERRE
        damp = wt * np.exp(-0.5 * (v / w) ** 2)
        return np.array([np.dot(damp, v**m) / w ** (m + 1) for m in range(kmax + 1)])
    out = np.empty(kmax + 1)
    out[0] = math.sqrt(math.pi / 2) * special.erfcx(w / math.sqrt(2))
    if kmax >= 1:
        out[1] = 1.0 - w * out[0]
    for m in range(2, kmax + 1):
        out[m] = (m - 1) * out[m - 2] - w * out[m - 1]
    return out


def _weighted_moment(k: int, c: float, rho: float, sigma: float, C_s: float, C_n: float) -> float:
    """``E[N^k exp(-c N)]`` for ``x ~ Normal(rho, sigma^2)``."""
    a = rho / sigma
    b = C_s * sigma
    w = c * b - a
    I = _half_gauss_moments(w, k)
    cont = sum(math.comb(k, m) * C_n ** (k - m) * b**m * I[m] for m in range(k + 1))
    return math.exp(-c * C_n) * (norm.pdf(a) * cont + C_n**k * qfunc(a))


@dataclass(frozen=True)
class Expectations:
    """The five Gaussian expectations feeding the Bussgang decomposition."""

    ENz: float
    EN2: float
    Ez2: float
    Ez: float
    EN: float

    def as_dict(self):
        return {"E[Nz]": self.ENz, "E[N^2]": self.EN2, "E[z^2]": self.Ez2, "E[z]": self.Ez, "E[N]": self.EN}


def bussgang_expectations_pq(stats: SignalStats, coeffs: PhotonAffineCoeffs) -> Expectations:
    args = (stats.rho, stats.sigma_x, coeffs.C_s, coeffs.C_n)
    Ct = coeffs.C_t
    return Expectations(
        ENz=_weighted_moment(2, Ct, *args),
        EN2=_weighted_moment(2, 0.0, *args),
        Ez2=_weighted_moment(2, 2 * Ct, *args),
        Ez=_weighted_moment(1, Ct, *args),
        EN=_weighted_moment(1, 0.0, *args),
    )


def gaussian_expectation(func, stats: SignalStats, coeffs: PhotonAffineCoeffs, epsrel: float = 1e-10) -> float:
    """``E[func(N(x))]`` by adaptive quadrature plus the exact ``x < 0`` mass."""
    rho, sigma = stats.rho, stats.sigma_x
    a = rho / sigma
    b = coeffs.C_s * sigma

    Cn = coeffs.C_n

    def integrand(t):  # x = sigma * (a + t), density phi(t)
        return func(b * (a + t) + Cn) * math.exp(-0.5 * t * t) * _INV_SQRT_2PI

    hi = 40.0
    lo = -a
    if lo >= hi:
        cont, err = 0.0, 0.0
    else:
        points = [q for q in (0.0, 6.0, 12.0) if lo < q < hi] or None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            cont, err = integrate.quad(integrand, lo, hi, epsrel=epsrel, epsabs=0.0, limit=400, points=points)
    atom = func(coeffs.C_n) * qfunc(a)
    total = cont + atom
    achieved = err / abs(total) if total else err
    if achieved > max(10 * epsrel, 1e-8):
        raise QuadratureError(f"quadrature reached relative error {achieved:.2e}", achieved=achieved)
    return float(total)


def bussgang_expectations_aq(stats: SignalStats, coeffs: PhotonAffineCoeffs) -> Expectations:
    Ct = coeffs.C_t

    def z(n):
        return n / (1.0 + Ct * n)

    return Expectations(
        ENz=gaussian_expectation(lambda n: n * z(n), stats, coeffs),
        EN2=_weighted_moment(2, 0.0, stats.rho, stats.sigma_x, coeffs.C_s, coeffs.C_n),
        Ez2=gaussian_expectation(lambda n: z(n) ** 2, stats, coeffs),
        Ez=gaussian_expectation(z, stats, coeffs),
        EN=_weighted_moment(1, 0.0, stats.rho, stats.sigma_x, coeffs.C_s, coeffs.C_n),
    )


def bussgang_expectations(kind, stats: SignalStats, coeffs: PhotonAffineCoeffs) -> Expectations:
    if _kind(kind) is DeadTimeKind.PQ:
        return bussgang_expectations_pq(stats, coeffs)
    return bussgang_expectations_aq(stats, coeffs)


@dataclass(frozen=True)
class BussgangDecomposition:
    alpha: float
    sigma_Y_sq: float
    expectations: Expectations


def bussgang_decompose(exp: Expectations) -> BussgangDecomposition:
    """Gain ``alpha = E[Nz]/E[N^2]`` and distortion variance ``E[Y^2] - E[Y]^2``."""
    if not exp.EN2 > 0:
        raise ValueError("E[N^2] must be positive")
    alpha = exp.ENz / exp.EN2
    EY2 = exp.Ez2 - alpha**2 * exp.EN2
    EY = exp.Ez - alpha * exp.EN
    var = EY2 - EY**2
    if var < 0:
        if var < -1e-6 * exp.Ez2:
            raise NumericalInstabilityError(f"distortion variance {var:.3e} is negative beyond round-off")
        var = 0.0
    return BussgangDecomposition(alpha=float(alpha), sigma_Y_sq=float(var), expectations=exp)


# -- DCO clipping ----------------------------------------------------------------

@dataclass(frozen=True)
class ClippingModel:
    alpha_c: float
    sigma_c_sq: float
    G_DC: float
    sigma_cp_sq: float
    B_DC: float


def dco_clipping_model(cfg: OfdmConfig, coeffs: PhotonAffineCoeffs) -> ClippingModel:
    """Bussgang model of zero-level clipping of the biased DCO frame.

    ``sigma_cp_sq`` refers the clipping noise to the receiver count domain
    through the transmitter normalization and ``C_s``.
    """
    if cfg.scheme is not Scheme.DCO:
        raise ConfigError("the clipping model applies to DCO only", key="scheme")
    st = clipped_signal_stats(cfg)
    sm, B, beta = st.sigma_m, st.bias, cfg.beta
    G = sm**2 / (sm**2 + B**2)
    alpha_c = qfunc(-B / sm) + beta * G * norm.pdf(B / sm)
    var_c = alpha_c * (1 - alpha_c) * (sm**2 + B**2) - (
        B * qfunc(-B / sm) + sm * norm.pdf(B / sm) - alpha_c * B
    ) ** 2
    var_c = max(var_c, 0.0)
    R = cfg.spectral_efficiency
    var_cp = (1 - G / R) * coeffs.C_s**2 * var_c / st.mean_clipped**2
    return ClippingModel(alpha_c=float(alpha_c), sigma_c_sq=float(var_c), G_DC=float(G),
                         sigma_cp_sq=float(var_cp), B_DC=float(B))


# -- shot noise, SNR and BER ------------------------------------------------------

def shot_noise_variance(kind, mode, stats: SignalStats, coeffs: PhotonAffineCoeffs,
                        cfg_spad: SpadArrayConfig, symbol_period: float, expectations: Expectations | None = None) -> float:
    """Signal-averaged count variance.

    Poisson mode uses ``E[z]``. Exact PQ uses
    ``E[(3 tau - 2 T)/T * C_t z^2 + z]``; exact AQ averages the equilibrium
    AQ variance with ``g = C_t N`` and ``lam = 1/(1+g)``.
    """
    kind, mode = _kind(kind), _mode(mode)
    if expectations is None:
        expectations = bussgang_expectations(kind, stats, coeffs)
    if mode is CountMode.POISSON:
        return expectations.Ez
    Ct = coeffs.C_t
    if kind is DeadTimeKind.PQ:
        tau, T = cfg_spad.dead_time, symbol_period
        return (3 * tau - 2 * T) / T * Ct * expectations.Ez2 + expectations.Ez
    n = cfg_spad.n_spad

    def aq_var(N):
        g = Ct * N
        lam = 1.0 / (1.0 + g)
        return n * lam**3 * (N / n + g**2 * lam * (1 + 2 * g / 3 + g**2 / 6))

    return gaussian_expectation(aq_var, stats, coeffs)


@dataclass(frozen=True)
class SnrResult:
    snr: float
    spectral_efficiency: float
    components: dict = field(default_factory=dict)


def snr(cfg: OfdmConfig, cfg_spad: SpadArrayConfig, kind, mode, power_w: float,
        dc_gain_in_signal: bool = False) -> SnrResult:
    """Electrical SNR per data subcarrier at average received power ``power_w``.

    ACO: ``alpha^2 C_s^2 sigma_x^2 / (2 R (sigma_Y^2 + sigma_N^2))``.
    DCO: ``alpha_c^2 alpha^2 C_s^2 sigma_x^2 / (R (alpha_c^2 sigma_cp^2 + sigma_Y^2 + sigma_N^2))``.

    ``sigma_x`` is already the AC deviation of the unit-mean biased frame, so
    the bias cost is contained in it. Setting ``dc_gain_in_signal`` multiplies
    the DCO signal term by ``G_DC`` once more, which undercounts the SNR by
    ``1 + beta^2`` relative to simulation.
    """
    kind, mode = _kind(kind), _mode(mode)
    T = cfg.symbol_period
    stats = clipped_signal_stats(cfg)
    coeffs = photon_affine_coeffs(power_w, cfg_spad, T)
    exp = bussgang_expectations(kind, stats, coeffs)
    bd = bussgang_decompose(exp)
    shot = shot_noise_variance(kind, mode, stats, coeffs, cfg_spad, T, expectations=exp)
    R = cfg.spectral_efficiency
    signal = bd.alpha**2 * coeffs.C_s**2 * stats.sigma_x**2
    comps = {"signal_power": signal, "distortion_var": bd.sigma_Y_sq, "shot_var": shot, "clip_var": 0.0,
             "alpha": bd.alpha}
    if cfg.scheme is Scheme.ACO:
        value = signal / (2 * R * (bd.sigma_Y_sq + shot))
    else:
        clip = dco_clipping_model(cfg, coeffs)
        comps["clip_var"] = clip.alpha_c**2 * clip.sigma_cp_sq
        gain = clip.G_DC if dc_gain_in_signal else 1.0
        value = gain * clip.alpha_c**2 * signal / (R * (comps["clip_var"] + bd.sigma_Y_sq + shot))
    return SnrResult(snr=float(max(value, 0.0)), spectral_efficiency=R, components=comps)


def ber_mqam(snr_value, M: int, spectral_efficiency: float):
    """Approximate Gray-coded square M-QAM bit error rate at a given SNR."""
    if isinstance(snr_value, SnrResult):
        snr_value = snr_value.snr
    s = np.asarray(snr_value, dtype=float)
    if np.any(s < 0):
        raise ValueError("SNR must be non-negative")
    rM, k = math.sqrt(M), math.log2(M)
    arg = np.sqrt(3 * spectral_efficiency / (M - 1) * s)
    ber = 4 * (rM - 1) / (rM * k) * qfunc(arg) + 4 * (rM - 2) / (rM * k) * qfunc(3 * arg)
    ber = np.clip(ber, 0.0, 1.0)
    return ber if ber.ndim else float(ber)


def analytic_ber(cfg: OfdmConfig, cfg_spad: SpadArrayConfig, kind, mode, power_dbm: float,
                 dc_gain_in_signal: bool = False) -> float:
    res = snr(cfg, cfg_spad, kind, mode, float(dbm_to_watts(power_dbm)), dc_gain_in_signal)
    return ber_mqam(res.snr, cfg.M, res.spectral_efficiency)


@dataclass
class BerCurve:
    """BER samples over received power. ``n_bits``/``n_errors`` are 0 for analytic points."""

    power_dbm: np.ndarray
    ber: np.ndarray
    n_bits: np.ndarray | None = None
    n_errors: np.ndarray | None = None

    def __post_init__(self):
        self.power_dbm = np.asarray(self.power_dbm, dtype=float)
        self.ber = np.asarray(self.ber, dtype=float)
        if self.power_dbm.shape != self.ber.shape:
            raise ValueError("power and BER arrays differ in shape")
        if np.any(np.diff(self.power_dbm) <= 0):
            raise ValueError("powers must be strictly increasing")
        n = self.power_dbm.size
        self.n_bits = np.zeros(n, dtype=np.int64) if self.n_bits is None else np.asarray(self.n_bits)
        self.n_errors = np.zeros(n, dtype=np.int64) if self.n_errors is None else np.asarray(self.n_errors)

    def __len__(self):
        return self.power_dbm.size


def analytic_ber_curve(scenario, powers_dbm) -> BerCurve:
    """Analytic BER at each power for a scenario (``ofdm``, ``spad``, ``kind``, ``count_mode``)."""
    powers = np.asarray(powers_dbm, dtype=float).ravel()
    ber = [analytic_ber(scenario.ofdm, scenario.spad, scenario.kind, scenario.count_mode, p) for p in powers]
    return BerCurve(powers, np.asarray(ber, dtype=float))
