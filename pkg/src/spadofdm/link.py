"""End-to-end link evaluation: Monte Carlo BER, equalizer, thresholds, bit-rate limits.

Bit-rate convention: one OFDM time-domain sample is counted per ``T_s``, so
the bit rate of a configuration is ``spectral_efficiency / T_s``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.stats import binomtest

from .analysis import BerCurve, analytic_ber, dbm_to_watts
from .exceptions import ConfigError
from .ofdm import OfdmConfig, Scheme, receive_frames, transmit_frames
from .spad import (CountMode, DeadTimeKind, SpadArrayConfig, _kind, _mode, mean_potential_counts,
                   sample_counts)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinkScenario:
    """One link configuration.

    ``allow_fast_symbols`` permits ``T_s <= dead_time``, which only the
    analytic path and the Poisson sampler can handle; it is used by the
    bit-rate sweep.
    """

    ofdm: OfdmConfig = field(default_factory=OfdmConfig)
    spad: SpadArrayConfig = field(default_factory=SpadArrayConfig)
    kind: DeadTimeKind = DeadTimeKind.PQ
    count_mode: CountMode = CountMode.POISSON
    target_ber: float = 1e-3
    allow_fast_symbols: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", _kind(self.kind))
        object.__setattr__(self, "count_mode", _mode(self.count_mode))
        if not 0 < self.target_ber < 0.5:
            raise ConfigError(f"target_ber must lie in (0, 0.5), got {self.target_ber!r}", key="target_ber")
        if not self.allow_fast_symbols and not self.spad.dead_time < self.ofdm.symbol_period:
            raise ConfigError("dead_time must be shorter than symbol_period", key="symbol_period")

    @property
    def symbol_period(self) -> float:
        return self.ofdm.symbol_period

    def with_symbol_period(self, symbol_period: float) -> "LinkScenario":
        return replace(self, ofdm=replace(self.ofdm, symbol_period=symbol_period))

    def analytic_ber(self, power_dbm: float) -> float:
        return analytic_ber(self.ofdm, self.spad, self.kind, self.count_mode, power_dbm)


@dataclass(frozen=True)
class MonteCarloResult:
    ber: float
    n_bits: int
    n_errors: int
    ci_low: float
    ci_high: float
    n_frames: int


@dataclass(frozen=True)
class LinkMetrics:
    mpr_dbm: float
    moi_dbm: float
    lea_db: float
    feasible: bool
    note: str = ""


@dataclass(frozen=True)
class BitRatePoint:
    scheme: str
    kind: str
    M: int
    spectral_efficiency: float
    max_bit_rate: float
    limiting_Ts: float
    feasible: bool = True
    best_power_dbm: float = float("nan")


# -- channel -------------------------------------------------------------------

def _received_counts(amplitudes, scenario: LinkScenario, power_w: float, rng):
    mu = mean_potential_counts(power_w * amplitudes, scenario.spad, scenario.symbol_period)
    return sample_counts(mu, scenario.kind, scenario.count_mode, rng, scenario.spad, scenario.symbol_period)


def _random_bits(rng, n_frames, cfg: OfdmConfig):
    return rng.integers(0, 2, size=(n_frames, cfg.bits_per_frame), dtype=np.int8)


@dataclass(frozen=True)
class Equalizer:
    """Affine photon-to-amplitude map ``amplitude = coef * (counts - offset)``."""

    coef: float
    offset: float

    def __call__(self, counts):
        return self.coef * (np.asarray(counts, dtype=float) - self.offset)


def fit_pilot_equalizer(scenario: LinkScenario, power_dbm: float, n_pilot_frames: int = 10,
                        rng=None, method: str = "slope") -> Equalizer:
    """Estimate the equalizer from pilot frames with known data.

    ``slope`` fits counts against the known unit-mean amplitudes by least
    squares, so the coefficient is the inverse of the effective (dead-time
    compressed) gain and the offset absorbs the dark-count floor. Past the
    PQ count-rate peak that gain, and so the coefficient, turns negative. ``mean``
    uses the ratio of mean amplitude to mean counts with no offset.
    """
    if n_pilot_frames < 1:
        raise ValueError("n_pilot_frames must be >= 1")
    rng = np.random.default_rng(rng)
    cfg = scenario.ofdm
    amps = transmit_frames(_random_bits(rng, n_pilot_frames, cfg), cfg)
    counts = _received_counts(amps, scenario, float(dbm_to_watts(power_dbm)), rng).astype(float)
    if counts.mean() <= 0:
        raise ValueError("pilot produced no counts; the equalizer is undefined")
    if method == "mean":
        return Equalizer(coef=float(amps.mean() / counts.mean()), offset=0.0)
    if method != "slope":
        raise ValueError(f"unknown equalizer method {method!r}")
    a, c = amps.ravel(), counts.ravel()
    slope, intercept = np.polyfit(a, c, 1)
    if slope == 0:
        raise ValueError("pilot counts do not depend on amplitude; the equalizer is undefined")
    return Equalizer(coef=float(1.0 / slope), offset=float(intercept))


def pilot_equalizer_coefficient(scenario: LinkScenario, power_dbm: float, n_pilot_frames: int = 10,
                                seed=0, method: str = "slope") -> float:
    return fit_pilot_equalizer(scenario, power_dbm, n_pilot_frames, np.random.default_rng(seed), method).coef


def _run_batch(scenario, power_w, eq, n_frames, rng):
    cfg = scenario.ofdm
    bits = _random_bits(rng, n_frames, cfg)
    amps = transmit_frames(bits, cfg)
    counts = _received_counts(amps, scenario, power_w, rng)
    detected = receive_frames(eq(counts), cfg)
    return bits.size, int(np.count_nonzero(detected != bits))


def run_monte_carlo(scenario: LinkScenario, power_dbm: float, n_frames: int | None = None, seed: int = 0,
                    min_errors: int = 100, max_frames: int = 20000, batch_frames: int = 50,
                    n_pilot_frames: int = 10, equalizer: str = "slope") -> MonteCarloResult:
    """Monte Carlo bit error rate at one received power.

    With ``n_frames`` given, exactly that many frames are simulated.
    Otherwise batches run until ``min_errors`` errors or ``max_frames``
    frames. Batch ``i`` draws from its own child of ``SeedSequence(seed)``,
    so results depend only on ``(scenario, power, seed)``.
    """
    if n_frames is not None and n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    ss = np.random.SeedSequence(seed)
    pilot_ss, data_ss = ss.spawn(2)
    power_w = float(dbm_to_watts(power_dbm))
    eq = fit_pilot_equalizer(scenario, power_dbm, n_pilot_frames, np.random.default_rng(pilot_ss), equalizer)
    target = n_frames if n_frames is not None else max_frames
    n_bits = n_err = done = 0
    batch_idx = 0
    while done < target:
        m = min(batch_frames, target - done)
        rng = np.random.default_rng(
            np.random.SeedSequence(data_ss.entropy, spawn_key=data_ss.spawn_key + (batch_idx,)))
        b, e = _run_batch(scenario, power_w, eq, m, rng)
        n_bits += b
        n_err += e
        done += m
        batch_idx += 1
        if n_frames is None and n_err >= min_errors:
            break
    ci = binomtest(n_err, n_bits).proportion_ci(0.95, method="exact")
    return MonteCarloResult(ber=n_err / n_bits, n_bits=n_bits, n_errors=n_err,
                            ci_low=float(ci.low), ci_high=float(ci.high), n_frames=done)


def monte_carlo_curve(scenario: LinkScenario, powers_dbm, seed: int = 0, **kwargs) -> BerCurve:
    res = [run_monte_carlo(scenario, p, seed=seed, **kwargs) for p in powers_dbm]
    return BerCurve(np.asarray(powers_dbm, float), [r.ber for r in res],
                    [r.n_bits for r in res], [r.n_errors for r in res])


# -- thresholds ------------------------------------------------------------------

def _log_ber(b):
    return math.log10(max(float(b), 1e-300))


def _refine(ber_fn, lo, hi, target, xtol):
    f = lambda p: _log_ber(ber_fn(p)) - math.log10(target)  # noqa: E731
    return optimize.brentq(f, lo, hi, xtol=xtol)


def _interp(p0, p1, b0, b1, target):
    l0, l1, lt = _log_ber(b0), _log_ber(b1), math.log10(target)
    return p0 + (lt - l0) * (p1 - p0) / (l1 - l0)


def find_thresholds(curve: BerCurve, target: float = 1e-3, ber_fn=None, xtol: float = 0.01) -> LinkMetrics:
    """Minimum power requirement and maximum irradiance at a target BER.

    The MPR is the first downward crossing of ``target`` and the MOI the next
    upward crossing. Crossings are refined by root-finding on ``log10 BER``
    when ``ber_fn(power_dbm)`` is supplied, by log-linear interpolation
    between grid points otherwise.
    """
    p, b = curve.power_dbm, curve.ber
    below = b < target
    nan = float("nan")
    if not below.any():
        return LinkMetrics(nan, nan, nan, False, "BER never falls below target")
    i = int(np.argmax(below))
    note = []
    if i == 0:
        mpr = float(p[0])
        note.append("curve starts below target; MPR is the lowest grid power")
    else:
        mpr = _refine(ber_fn, p[i - 1], p[i], target, xtol) if ber_fn else _interp(p[i - 1], p[i], b[i - 1], b[i], target)
    rest = np.flatnonzero(~below[i:])
    if rest.size == 0:
        moi = float(p[-1])
        note.append("BER stays below target to the top of the grid; MOI is the highest grid power")
    else:
        j = i + int(rest[0])
        moi = _refine(ber_fn, p[j - 1], p[j], target, xtol) if ber_fn else _interp(p[j - 1], p[j], b[j - 1], b[j], target)
    mpr, moi = float(mpr), float(moi)
    return LinkMetrics(mpr, moi, moi - mpr, moi > mpr, "; ".join(note))


def link_metrics(scenario: LinkScenario, powers_dbm=None) -> LinkMetrics:
    """Analytic MPR/MOI/LEA on a 1 dB grid with root-finding refinement."""
    if powers_dbm is None:
        powers_dbm = np.arange(-130.0, 20.0 + 1e-9, 1.0)
    curve = BerCurve(powers_dbm, [scenario.analytic_ber(p) for p in powers_dbm])
    return find_thresholds(curve, scenario.target_ber, ber_fn=scenario.analytic_ber)


# -- maximum bit rate -----------------------------------------------------------

def min_analytic_ber(scenario: LinkScenario, lo_dbm: float = -130.0, hi_dbm: float = 30.0):
    """Lowest analytic BER over received power, and the power achieving it."""
    grid = np.arange(lo_dbm, hi_dbm + 1e-9, 2.0)
    logs = np.array([_log_ber(scenario.analytic_ber(p)) for p in grid])
    k = int(np.argmin(logs))
    a, c = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    if c > a:
        res = optimize.minimize_scalar(lambda q: _log_ber(scenario.analytic_ber(q)), bounds=(a, c),
                                       method="bounded", options={"xatol": 1e-3})
        if res.fun < logs[k]:
            return 10.0**res.fun, float(res.x)
    return 10.0 ** logs[k], float(grid[k])


def max_bit_rate(scenario: LinkScenario, ts_bounds=(1e-12, 1e-3), rtol: float = 1e-3) -> BitRatePoint:
    """Smallest symbol period with a non-empty low-error region, found by bisection on ``log T_s``."""
    fast = replace(scenario, allow_fast_symbols=True)
    cfg = fast.ofdm
    R = cfg.spectral_efficiency

    def feasible(ts):
        return min_analytic_ber(fast.with_symbol_period(ts))[0] < fast.target_ber

    lo, hi = math.log(ts_bounds[0]), math.log(ts_bounds[1])
    if not feasible(math.exp(hi)):
        return BitRatePoint(cfg.scheme.value, fast.kind.value, cfg.M, R, float("nan"), float("nan"), False)
    if feasible(math.exp(lo)):
        ts = math.exp(lo)
    else:
        while hi - lo > rtol:
            mid = 0.5 * (lo + hi)
            if feasible(math.exp(mid)):
                hi = mid
            else:
                lo = mid
        ts = math.exp(hi)
    _, p_best = min_analytic_ber(fast.with_symbol_period(ts))
    return BitRatePoint(cfg.scheme.value, fast.kind.value, cfg.M, R, R / ts, ts, True, p_best)


def max_bit_rate_sweep(scenario: LinkScenario, constellations=(4, 16, 64, 256, 1024)) -> list[BitRatePoint]:
    """Maximum bit rate for each constellation size (hence spectral efficiency).

    Infeasible constellations are returned with ``feasible=False`` and NaN rates.
    """
    out = []
    for M in constellations:
        sc = replace(scenario, ofdm=replace(scenario.ofdm, M=int(M)), allow_fast_symbols=True)
        point = max_bit_rate(sc)
        if not point.feasible:
            log.info("M=%d infeasible at every symbol period", M)
        out.append(point)
    return out
