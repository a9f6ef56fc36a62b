"""SPAD array receiver: photon flux, dead-time nonlinearity and count statistics.

Two dead-time models are supported. Passive quenching (``PQ``) is paralyzable:
every arrival during the dead time restarts it. Active quenching (``AQ``) is
non-paralyzable: arrivals during the dead time are simply lost.

Rates follow two conventions and the argument names say which one applies.
``mu`` is the expected number of *potential* counts of the whole array in one
symbol period. ``rate`` is the potential count rate of a single device in
counts per second, ``mu / (T_s * n_spad)``.

All count distributions describe a detector in statistical equilibrium at the
start of the counting window (arrivals extend back before ``t = 0``), which
is the regime in which the mean-rate transfer curves hold exactly.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import mpmath
import numpy as np
from scipy import signal, special, stats

from .exceptions import ConfigError, NumericalInstabilityError, SupportOverflowError

log = logging.getLogger(__name__)

PLANCK = 6.62607015e-34
SPEED_OF_LIGHT = 299_792_458.0


class DeadTimeKind(str, enum.Enum):
    PQ = "PQ"
    AQ = "AQ"


class CountMode(str, enum.Enum):
    POISSON = "poisson"
    EXACT = "exact"


def _kind(kind) -> DeadTimeKind:
    try:
        return DeadTimeKind(str(getattr(kind, "value", kind)).upper())
    except ValueError:
        raise ConfigError(f"unknown dead-time kind {kind!r}", key="kind") from None


def _mode(mode) -> CountMode:
    try:
        return CountMode(str(getattr(mode, "value", mode)).lower())
    except ValueError:
        raise ConfigError(f"unknown count mode {mode!r}", key="count_mode") from None


@dataclass(frozen=True)
class SpadArrayConfig:
    """Receiver hardware. Defaults describe a 1024-device array at 450 nm."""

    fill_factor: float = 0.322
    pdp: float = 0.2
    dcr: float = 7270.0
    afterpulse: float = 0.01
    dead_time: float = 13.5e-9
    n_spad: int = 1024
    wavelength: float = 450e-9

    def __post_init__(self):
        checks = {
            "fill_factor": 0 <= self.fill_factor <= 1,
            "pdp": 0 <= self.pdp <= 1,
            "dcr": self.dcr >= 0,
            "afterpulse": self.afterpulse >= 0,
            "dead_time": self.dead_time > 0,
            "n_spad": int(self.n_spad) == self.n_spad and self.n_spad >= 1,
            "wavelength": self.wavelength > 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid SPAD parameter {key}={getattr(self, key)!r}", key=key)

    @property
    def photon_energy(self) -> float:
        return PLANCK * SPEED_OF_LIGHT / self.wavelength

    def dark_counts(self, symbol_period: float) -> float:
        """Expected dark counts of the array per symbol, before after-pulsing."""
        return self.dcr * self.n_spad * symbol_period

    def dead_time_constant(self, symbol_period: float) -> float:
        """``tau_d / (T_s * n_spad)``, the array-level saturation constant."""
        return self.dead_time / (symbol_period * self.n_spad)


# -- count distributions -------------------------------------------------------

@dataclass
class CountDistribution:
    """Probability mass over counts ``offset, offset+1, ...``.

    Entries down to ``-1e-12`` are treated as round-off and clamped to zero;
    anything more negative raises :class:`NumericalInstabilityError`.
    """

    pmf: np.ndarray
    offset: int = 0
    _cdf: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float).ravel()
        if pmf.size == 0:
            raise ValueError("empty pmf")
        if not np.all(np.isfinite(pmf)):
            raise NumericalInstabilityError("pmf contains non-finite entries")
        bad = np.flatnonzero(pmf < -1e-12)
        if bad.size:
            idx = int(bad[0]) + self.offset
            raise NumericalInstabilityError(
                f"pmf entry at count {idx} is {pmf[bad[0]]:.3e} (below the -1e-12 round-off floor)", index=idx
            )
        pmf = np.clip(pmf, 0.0, None)
        total = pmf.sum()
        if abs(total - 1.0) > 1e-6:
            raise NumericalInstabilityError(f"pmf sums to {total!r}, not 1")
        self.pmf = pmf
        self.offset = int(self.offset)

    @property
    def support(self) -> np.ndarray:
        return self.offset + np.arange(self.pmf.size)

    @property
    def max_count(self) -> int:
        return self.offset + self.pmf.size - 1

    def mean(self) -> float:
        return float(np.dot(self.support, self.pmf))

    def var(self) -> float:
        k = self.support - self.mean()
        return float(np.dot(k * k, self.pmf))

    def prob(self, k):
        """P(count == k) for scalar or array ``k``."""
        k = np.asarray(k)
        idx = k - self.offset
        inside = (idx >= 0) & (idx < self.pmf.size)
        out = np.where(inside, self.pmf[np.clip(idx, 0, self.pmf.size - 1)], 0.0)
        return out if out.ndim else float(out)

    def cdf(self) -> np.ndarray:
        if self._cdf is None:
            self._cdf = np.cumsum(self.pmf)
        return self._cdf

    def trimmed(self, tol: float = 1e-15) -> "CountDistribution":
        """Drop head and tail entries whose combined mass is at most ``tol`` each side."""
        c = np.cumsum(self.pmf)
        lo = int(np.searchsorted(c, tol, side="right"))
        tail = np.cumsum(self.pmf[::-1])
        hi = self.pmf.size - int(np.searchsorted(tail, tol, side="right"))
        lo = min(lo, self.pmf.size - 1)
        hi = max(hi, lo + 1)
        pmf = self.pmf[lo:hi]
        return CountDistribution(pmf / pmf.sum(), self.offset + lo)

    def convolve(self, other: "CountDistribution") -> "CountDistribution":
        out = signal.fftconvolve(self.pmf, other.pmf) if min(self.pmf.size, other.pmf.size) > 64 else np.convolve(self.pmf, other.pmf)
        out = np.where(np.abs(out) < 1e-13, 0.0, out)
        return CountDistribution(out / out.sum(), self.offset + other.offset)

    def sample(self, rng: np.random.Generator, size=None):
        u = rng.random(size)
        idx = np.searchsorted(self.cdf(), u * self.cdf()[-1], side="right")
        return self.offset + np.minimum(idx, self.pmf.size - 1)

    def tv_distance(self, other: "CountDistribution") -> float:
        lo = min(self.offset, other.offset)
        hi = max(self.max_count, other.max_count)
        k = np.arange(lo, hi + 1)
        return 0.5 * float(np.abs(self.prob(k) - other.prob(k)).sum())

    @classmethod
    def from_samples(cls, samples) -> "CountDistribution":
        samples = np.asarray(samples, dtype=np.int64).ravel()
        lo = int(samples.min())
        hist = np.bincount(samples - lo)
        return cls(hist / hist.sum(), lo)

    @classmethod
    def poisson(cls, mean: float, tail: float = 1e-15) -> "CountDistribution":
        if mean <= 0:
            return cls(np.array([1.0]))
        lo = int(stats.poisson.ppf(tail, mean))
        hi = int(stats.poisson.isf(tail, mean)) + 1
        k = np.arange(lo, hi + 1)
        pmf = stats.poisson.pmf(k, mean)
        return cls(pmf / pmf.sum(), lo)


# -- mean behaviour ---------------------------------------------------------------

def mean_potential_counts(power, cfg: SpadArrayConfig, symbol_period: float):
    """Expected potential array counts per symbol for received optical power (W).

    ``mu = (C_FF C_PDP P T_s / E_P + N_DCR N_SPAD T_s) (1 + P_AP)``.
    """
    power = np.asarray(power, dtype=float)
    if np.any(power < 0):
        raise ValueError("optical power must be non-negative")
    if symbol_period <= 0:
        raise ValueError("symbol period must be positive")
    signal_photons = cfg.fill_factor * cfg.pdp * power * symbol_period / cfg.photon_energy
    mu = (signal_photons + cfg.dark_counts(symbol_period)) * (1.0 + cfg.afterpulse)
    return mu if mu.ndim else float(mu)


def potential_counts_from_incident(incident, cfg: SpadArrayConfig, symbol_period: float):
    """Potential array counts for a number of photons incident on the array."""
    incident = np.asarray(incident, dtype=float)
    mu = (cfg.fill_factor * cfg.pdp * incident + cfg.dark_counts(symbol_period)) * (1.0 + cfg.afterpulse)
    return mu if mu.ndim else float(mu)


def dead_time_mean_transfer(mu, kind, cfg: SpadArrayConfig, symbol_period: float):
    """Mean registered array counts per symbol given potential counts ``mu``."""
    mu = np.asarray(mu, dtype=float)
    ct = cfg.dead_time_constant(symbol_period)
    if _kind(kind) is DeadTimeKind.PQ:
        out = mu * np.exp(-mu * ct)
    else:
        out = mu / (1.0 + mu * ct)
    return out if out.ndim else float(out)


def max_count_rate(kind, cfg: SpadArrayConfig, symbol_period: float) -> float:
    """Largest achievable mean array count per symbol (PQ peak / AQ supremum)."""
    base = symbol_period * cfg.n_spad / cfg.dead_time
    return base / math.e if _kind(kind) is DeadTimeKind.PQ else base


def exact_moments(kind, mu, cfg: SpadArrayConfig, symbol_period: float):
    """Mean and variance of the array count for potential counts ``mu``.

    PQ: mean ``mu exp(-mu C_t)`` and variance
    ``N [r^2 e^{-2 r tau}(3 tau^2 - 2 T tau) + r e^{-r tau} T]`` with ``r`` the
    per-device rate. AQ: mean ``N lam r T`` and variance
    ``N lam^3 [r T + g^2 lam (1 + 2g/3 + g^2/6)]`` with ``g = r tau`` and
    ``lam = 1/(1+g)``. The PQ variance carries ``3 tau^2`` where the equilibrium
    pmf gives ``tau^2``; the two agree to ``O(tau/T_s)``.
    """
    mu = np.asarray(mu, dtype=float)
    n, tau, T = cfg.n_spad, cfg.dead_time, symbol_period
    rate = mu / (T * n)
    g = rate * tau
    if _kind(kind) is DeadTimeKind.PQ:
        mean = mu * np.exp(-mu * cfg.dead_time_constant(T))
        var = n * (rate**2 * np.exp(-2 * g) * (3 * tau**2 - 2 * T * tau) + rate * np.exp(-g) * T)
    else:
        lam = 1.0 / (1.0 + g)
        mean = n * lam * rate * T
        var = n * lam**3 * (rate * T + g**2 * lam * (1 + 2 * g / 3 + g**2 / 6))
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var


# -- single-device exact distributions --------------------------------------------

def support_limit(kind, cfg: SpadArrayConfig, symbol_period: float) -> int:
    """``floor(T_s/(e tau_d))`` for PQ (mean-count ceiling), ``floor(T_s/tau_d)`` for AQ."""
    ratio = symbol_period / cfg.dead_time
    return math.floor(ratio / math.e) if _kind(kind) is DeadTimeKind.PQ else math.floor(ratio)


_MAX_SERIES_TERMS = 4000


@lru_cache(maxsize=16384)
def _pq_pmf(rate: float, tau: float, T: float) -> tuple[np.ndarray, int]:
    # Factorial-moment series of the equilibrium paralyzable counter:
    # P(a) = sum_j (-1)^(j-a) C(j,a) x_j^j / j!,  x_j = r e^{-r tau} (T - (j-1) tau).
    if rate == 0:
        return np.array([1.0]), 0
    j_hi = math.floor(T / tau) + 1
    if T - (j_hi - 1) * tau <= 0:
        j_hi -= 1
    base = rate * math.exp(-rate * tau)
    j = np.arange(1, j_hi + 1)
    x = base * (T - (j - 1) * tau)
    log_f = j * np.log(x) - special.gammaln(j + 1)
    log_bound = log_f + j * math.log(2.0)
    # terms with 2^j f_j below 1e-30 cannot move any probability noticeably
    keep = np.flatnonzero(log_bound > math.log(1e-30))
    J = int(keep[-1]) + 1 if keep.size else 1
    if J > _MAX_SERIES_TERMS:
        raise NumericalInstabilityError(
            f"PQ count series needs {J} terms (limit {_MAX_SERIES_TERMS}); rate*T_s is too large", index=J
        )
    digits = max(log_bound[:J].max(), 0.0) / math.log(10)
    if digits < 1.0:
        f = np.concatenate(([1.0], np.exp(log_f[:J])))
        a = np.arange(J + 1)
        binom = special.comb(a[None, :], a[:, None])  # [a, j] = C(j, a)
        sign = np.where((a[None, :] - a[:, None]) % 2, -1.0, 1.0)
        pmf = (np.triu(binom * sign) * f[None, :]).sum(axis=1)
        return pmf, 0
    with mpmath.workdps(int(digits) + 30):
        f = [mpmath.mpf(1)]
        mbase = mpmath.mpf(rate) * mpmath.exp(-mpmath.mpf(rate) * tau)
        for jj in range(1, J + 1):
            xj = mbase * (mpmath.mpf(T) - (jj - 1) * mpmath.mpf(tau))
            f.append(xj**jj / mpmath.factorial(jj))
        pmf = np.empty(J + 1)
        for a in range(J + 1):
            acc = mpmath.mpf(0)
            c = 1  # C(j, a) for j = a
            for jj in range(a, J + 1):
                term = c * f[jj]
                acc = acc + term if (jj - a) % 2 == 0 else acc - term
                c = c * (jj + 1) // (jj + 1 - a)
            pmf[a] = float(acc)
    return pmf, 0


@lru_cache(maxsize=16384)
def _aq_pmf(rate: float, tau: float, T: float) -> tuple[np.ndarray, int]:
    # Three-case equilibrium non-paralyzable distribution, with Pr(j, S) the
    # Poisson mass of mean S and S_a = r (T - a tau).
    if rate == 0:
        return np.array([1.0]), 0
    amax = math.floor(T / tau)
    lam = 1.0 / (1.0 + rate * tau)
    k = np.arange(amax + 1)
    S = rate * (T - k * tau)
    # F(k) = sum_{j<k} (k - j) Pr(j, S_k) = k P(J<=k-1) - S_k P(J<=k-2)
    F = k * stats.poisson.cdf(k - 1, S) - S * stats.poisson.cdf(k - 2, S)
    F = np.where(k == 0, 0.0, F)
    Fm1 = np.concatenate(([0.0], F[:-1]))  # F(a-1)
    pmf = np.empty(amax + 2)
    if amax >= 1:
        a = np.arange(amax)
        pmf[:amax] = lam * (Fm1[a] - 2 * F[a] + F[a + 1])
    rT = rate * T
    pmf[amax] = lam * (Fm1[amax] - 2 * F[amax] - rT) + amax + 1
    pmf[amax + 1] = lam * (F[amax] + rT) - (amax + 1) + 1
    return pmf, 0


def single_device_pmf(kind, rate: float, cfg: SpadArrayConfig, symbol_period: float,
                      on_unstable: str = "raise", rng=None, oracle_trials: int = 10**6) -> CountDistribution:
    """Exact count distribution of one device in one symbol period.

    Args:
        kind: ``"PQ"`` or ``"AQ"``.
        rate: potential count rate of the device in counts per second.
        on_unstable: ``"raise"`` or ``"oracle"``. With ``"oracle"`` an
            unstable series is replaced by the empirical distribution of
            ``oracle_trials`` event-level simulations drawn from ``rng``.
    """
    kind = _kind(kind)
    tau, T = cfg.dead_time, symbol_period
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if not tau < T:
        raise ConfigError("exact count distributions need dead_time < symbol_period", key="symbol_period")
    try:
        if kind is DeadTimeKind.PQ:
            pmf, offset = _pq_pmf(float(rate), float(tau), float(T))
        else:
            pmf, offset = _aq_pmf(float(rate), float(tau), float(T))
        return CountDistribution(pmf.copy(), offset).trimmed(1e-16)
    except NumericalInstabilityError:
        if on_unstable != "oracle":
            raise
        log.warning("%s pmf unstable at rate %.4g/s; using event-level empirical pmf", kind.value, rate)
        rng = rng if rng is not None else np.random.default_rng(0)
        samples = dead_time_event_oracle(rate, kind, tau, T, rng, size=oracle_trials)
        return CountDistribution.from_samples(samples)


def array_pmf(device: CountDistribution, n: int, max_support: int = 10**7,
              tail: float = 1e-13) -> CountDistribution:
    """Distribution of the sum of ``n`` i.i.d. devices, by repeated squaring."""
    if n < 1:
        raise ValueError("n must be >= 1")
    required = n * (device.pmf.size - 1) + 1
    if required > max_support:
        raise SupportOverflowError(
            f"array pmf would need {required} support points (limit {max_support})", required=required
        )
    result = None
    power = device
    m = int(n)
    while m:
        if m & 1:
            result = power if result is None else result.convolve(power).trimmed(tail)
        m >>= 1
        if m:
            power = power.convolve(power).trimmed(tail)
    return result


# -- sampling -----------------------------------------------------------------------

def _quantize(rate, step):
    out = np.zeros_like(rate)
    pos = rate > 0
    out[pos] = np.exp(np.round(np.log(rate[pos]) / step) * step)
    return out


def sample_counts(mu, kind, mode, rng: np.random.Generator, cfg: SpadArrayConfig,
                  symbol_period: float, grid_step: float = 1e-3):
    """Draw array counts for potential counts ``mu`` (scalar or array).

    ``poisson`` mode draws from a Poisson law with the dead-time transfer mean.
    ``exact`` mode draws each device from its exact distribution and sums the
    ``n_spad`` devices (through a multinomial over device counts). Device
    rates are snapped to a logarithmic grid of relative step ``grid_step`` so
    distributions can be reused. Where the exact series cannot be evaluated,
    a normal law with the exact mean and variance is used instead.
    """
    kind, mode = _kind(kind), _mode(mode)
    mu_arr = np.asarray(mu, dtype=float)
    if np.any(mu_arr < 0):
        raise ValueError("mu must be non-negative")
    if mode is CountMode.POISSON:
        out = rng.poisson(dead_time_mean_transfer(mu_arr, kind, cfg, symbol_period))
        return out if np.ndim(mu) else int(out)
    flat = mu_arr.ravel()
    rates = _quantize(flat / (symbol_period * cfg.n_spad), grid_step)
    nodes, inverse = np.unique(rates, return_inverse=True)
    out = np.empty(flat.size, dtype=np.int64)
    for i, node in enumerate(nodes):
        sel = np.flatnonzero(inverse == i)
        try:
            dist = single_device_pmf(kind, node, cfg, symbol_period)
        except (NumericalInstabilityError, SupportOverflowError):
            log.warning("exact %s pmf unavailable at rate %.4g/s; using normal approximation", kind.value, node)
            m, v = exact_moments(kind, node * symbol_period * cfg.n_spad, cfg, symbol_period)
            draw = np.rint(m + math.sqrt(max(v, 0.0)) * rng.standard_normal(sel.size))
            out[sel] = np.maximum(draw, 0).astype(np.int64)
            continue
        hist = rng.multinomial(cfg.n_spad, dist.pmf, size=sel.size)
        out[sel] = hist @ dist.support
    out = out.reshape(mu_arr.shape)
    return out if np.ndim(mu) else int(out)


def empirical_array_distribution(kind, rate: float, cfg: SpadArrayConfig, symbol_period: float,
                                 rng: np.random.Generator, n_samples: int = 100_000,
                                 device_trials: int = 1_000_000) -> CountDistribution:
    """Empirical array count distribution from event-level simulation.

    ``device_trials`` single-device windows are simulated once; each of the
    ``n_samples`` array counts then sums ``n_spad`` devices drawn from that
    pool with replacement.
    """
    pool = dead_time_event_oracle(rate, kind, cfg.dead_time, symbol_period, rng, size=device_trials)
    device = CountDistribution.from_samples(pool)
    totals = rng.multinomial(cfg.n_spad, device.pmf, size=n_samples) @ device.support
    return CountDistribution.from_samples(totals)


def dead_time_event_oracle(rate: float, kind, dead_time: float, symbol_period: float,
                           rng: np.random.Generator, size=None, chunk_elems: int = 4_000_000):
    """Event-level simulation of one device counting for one symbol period.

    Arrivals form a homogeneous Poisson process of ``rate`` per second, in
    equilibrium at ``t = 0``. PQ registers an arrival iff no other arrival
    occurred in the preceding ``dead_time``; the gap before the first arrival
    includes the backward recurrence time to the last arrival before the
    window. AQ registers an arrival iff ``dead_time`` has passed since the
    last registration; it starts dead with probability ``g/(1+g)`` and a
    uniform residual dead time, and skips blocked arrivals using the
    memoryless property (the next arrival after recovery is exponential).
    """
    kind = _kind(kind)
    n = 1 if size is None else int(np.prod(size))
    tau, T = dead_time, symbol_period
    counts = np.zeros(n, dtype=np.int64)
    if rate > 0 and n:
        mean_arrivals = rate * T
        if kind is DeadTimeKind.PQ:
            cap = int(mean_arrivals + 8 * math.sqrt(mean_arrivals) + 16)
        else:
            g = rate * tau
            expected = mean_arrivals / (1 + g)
            cap = min(math.floor(T / tau) + 2, int(expected + 8 * math.sqrt(expected) + 16))
        rows = max(1, chunk_elems // cap)
        for start in range(0, n, rows):
            m = min(rows, n - start)
            if kind is DeadTimeKind.PQ:
                counts[start:start + m] = _pq_chunk(rate, tau, T, rng, m, cap)
            else:
                counts[start:start + m] = _aq_chunk(rate, tau, T, rng, m, cap)
    if size is None:
        return int(counts[0])
    return counts.reshape(size)


def _pq_chunk(rate, tau, T, rng, m, cap):
    gaps = rng.exponential(1.0 / rate, size=(m, cap))
    times = np.cumsum(gaps, axis=1)
    while np.any(times[:, -1] <= T):
        more = rng.exponential(1.0 / rate, size=(m, cap))
        gaps = np.hstack([gaps, more])
        times = np.hstack([times, times[:, -1:] + np.cumsum(more, axis=1)])
    prev_gap = gaps.copy()
    prev_gap[:, 0] += rng.exponential(1.0 / rate, size=m)
    return np.count_nonzero((times <= T) & (prev_gap >= tau), axis=1)


def _aq_chunk(rate, tau, T, rng, m, cap):
    g = rate * tau
    dead = rng.random(m) < g / (1 + g)
    start = np.where(dead, rng.random(m) * tau, 0.0)
    steps = tau + rng.exponential(1.0 / rate, size=(m, cap))
    steps[:, 0] += start - tau
    times = np.cumsum(steps, axis=1)
    while np.any(times[:, -1] <= T):
        more = tau + rng.exponential(1.0 / rate, size=(m, cap))
        times = np.hstack([times, times[:, -1:] + np.cumsum(more, axis=1)])
    return np.count_nonzero(times <= T, axis=1)
