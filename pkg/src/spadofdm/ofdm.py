"""DCO/ACO optical OFDM baseband: QAM mapping, Hermitian framing, clipping.

DFT convention: ``to_time_domain`` is ``numpy.fft.ifft`` (1/N on the inverse)
and ``forward_dft`` is ``numpy.fft.fft`` (no scaling), so
``sum |X|**2 == N * sum x**2``.

Gray labelling is per axis. With ``L = sqrt(M)`` levels and ``k = log2(L)``
bits per axis, the first ``k`` bits of a symbol label the in-phase axis and the
last ``k`` bits the quadrature axis (MSB first). Position ``i`` on an axis has
amplitude ``L - 1 - 2*i`` and carries the label ``i ^ (i >> 1)``, so for
4-QAM ``00 -> (+1+1j)/sqrt(2)``, ``01 -> (+1-1j)/sqrt(2)``,
``10 -> (-1+1j)/sqrt(2)`` and ``11 -> (-1-1j)/sqrt(2)``.

All functions broadcast over leading axes, so a batch of frames is an array
of shape ``(n_frames, ...)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.stats import norm

from .exceptions import ConfigError


class Scheme(str, enum.Enum):
    ACO = "ACO"
    DCO = "DCO"


def _is_power_of(n, base):
    if n < 1:
        return False
    while n % base == 0:
        n //= base
    return n == 1


@dataclass(frozen=True)
class OfdmConfig:
    """Optical OFDM frame parameters.

    Attributes:
        scheme: ``Scheme.ACO`` or ``Scheme.DCO`` (strings accepted).
        M: QAM constellation size, a power of 4.
        N: DFT length, a power of 2 (at least 8).
        bias_db: DCO bias level ``10*log10(beta**2 + 1)``; ignored for ACO.
        symbol_period: duration of one time-domain sample in seconds.
    """

    scheme: Scheme = Scheme.ACO
    M: int = 4
    N: int = 2048
    bias_db: float = 7.0
    symbol_period: float = 1e-6

    def __post_init__(self):
        try:
            object.__setattr__(self, "scheme", Scheme(str(getattr(self.scheme, "value", self.scheme)).upper()))
        except ValueError:
            raise ConfigError(f"unknown OFDM scheme {self.scheme!r}", key="scheme") from None
        if not (isinstance(self.M, (int, np.integer)) and self.M >= 4 and _is_power_of(int(self.M), 4)):
            raise ConfigError(f"M must be a power of 4 (>= 4), got {self.M!r}", key="M")
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 8 and _is_power_of(int(self.N), 2)):
            raise ConfigError(f"N must be a power of 2 (>= 8), got {self.N!r}", key="N")
        if not self.bias_db >= 0:
            raise ConfigError(f"bias_db must be >= 0, got {self.bias_db!r}", key="bias_db")
        if not self.symbol_period > 0:
            raise ConfigError(f"symbol_period must be > 0, got {self.symbol_period!r}", key="symbol_period")

    @property
    def beta(self) -> float:
        if self.scheme is Scheme.ACO:
            return 0.0
        return bias_factor(self.bias_db)

    @property
    def bits_per_symbol(self) -> int:
        return int(round(math.log2(self.M)))

    @property
    def n_data_symbols(self) -> int:
        return self.N // 4 if self.scheme is Scheme.ACO else self.N // 2 - 1

    @property
    def bits_per_frame(self) -> int:
        return self.n_data_symbols * self.bits_per_symbol

    @property
    def spectral_efficiency(self) -> float:
        """Bits/s/Hz: ``log2(M)/4`` for ACO, ``(N-2)/(2N) log2(M)`` for DCO."""
        if self.scheme is Scheme.ACO:
            return 0.25 * self.bits_per_symbol
        return (self.N - 2) / (2 * self.N) * self.bits_per_symbol


def bias_factor(bias_db: float) -> float:
    """Return ``beta`` such that ``10*log10(beta**2 + 1) == bias_db``."""
    return math.sqrt(10.0 ** (bias_db / 10.0) - 1.0)


# -- QAM -------------------------------------------------------------------

@lru_cache(maxsize=None)
def _axis_tables(M: int):
    L = int(round(math.isqrt(M)))
    positions = np.arange(L)
    labels = positions ^ (positions >> 1)
    levels = (L - 1 - 2 * positions).astype(float)
    level_of_label = np.empty(L)
    level_of_label[labels] = levels
    return L, int(round(math.log2(L))), level_of_label


def qam_scale(M: int) -> float:
    """Amplitude divisor giving unit average energy for square M-QAM."""
    return math.sqrt(2.0 * (M - 1) / 3.0)


def constellation(M: int) -> np.ndarray:
    """All M points, indexed by their integer label."""
    labels = np.arange(M)
    bits = ((labels[:, None] >> np.arange(int(math.log2(M)))[::-1]) & 1).astype(np.int8)
    return qam_modulate(bits.reshape(-1), M)


def _bits_to_int(bits, k):
    weights = 1 << np.arange(k)[::-1]
    return bits @ weights


def qam_modulate(bits, M: int) -> np.ndarray:
    """Map bits (last axis) to unit-energy Gray-labelled square M-QAM symbols."""
    _, k, level_of_label = _axis_tables(int(M))
    bits = np.asarray(bits).astype(np.int64)
    n = bits.shape[-1]
    if n % (2 * k):
        raise ValueError(f"bit count {n} is not a multiple of log2(M) = {2 * k}")
    groups = bits.reshape(bits.shape[:-1] + (n // (2 * k), 2 * k))
    i_label = _bits_to_int(groups[..., :k], k)
    q_label = _bits_to_int(groups[..., k:], k)
    return (level_of_label[i_label] + 1j * level_of_label[q_label]) / qam_scale(M)


def qam_detect(symbols, M: int) -> np.ndarray:
    """Nearest-point (ML) detection; returns bits along the last axis.

    The constellation is separable, so each axis is decided on its own. Exact
    ties go to the smaller label, which yields the smaller overall label.
    """
    L, k, level_of_label = _axis_tables(int(M))
    s = np.asarray(symbols) * qam_scale(M)
    out = []
    for axis in (s.real, s.imag):
        dist = np.abs(axis[..., None] - level_of_label)
        label = np.argmin(dist, axis=-1)
        out.append((label[..., None] >> np.arange(k)[::-1]) & 1)
    bits = np.concatenate(out, axis=-1)
    return bits.reshape(bits.shape[:-2] + (-1,)).astype(np.int8)


# -- framing -----------------------------------------------------------------

def assemble_subcarriers(symbols, cfg: OfdmConfig) -> np.ndarray:
    """Place data symbols on subcarriers and impose Hermitian symmetry."""
    symbols = np.asarray(symbols, dtype=complex)
    N = cfg.N
    if symbols.shape[-1] != cfg.n_data_symbols:
        raise ValueError(
            f"{cfg.scheme.value} with N={N} needs {cfg.n_data_symbols} symbols per frame, "
            f"got {symbols.shape[-1]}"
        )
    bins = np.zeros(symbols.shape[:-1] + (N,), dtype=complex)
    if cfg.scheme is Scheme.DCO:
        data_idx = np.arange(1, N // 2)
    else:
        data_idx = np.arange(1, N // 2, 2)
    bins[..., data_idx] = symbols
    bins[..., N - data_idx] = np.conj(symbols)
    return bins


def is_hermitian(bins, atol: float = 1e-9) -> bool:
    bins = np.asarray(bins)
    N = bins.shape[-1]
    mirrored = np.conj(bins[..., (-np.arange(N)) % N])
    scale = max(1.0, float(np.max(np.abs(bins), initial=0.0)))
    return bool(np.all(np.abs(bins - mirrored) <= atol * scale))


def to_time_domain(bins) -> np.ndarray:
    """Inverse DFT of a Hermitian frame (real output, 1/N scaling)."""
    if not is_hermitian(bins):
        raise ValueError("frequency frame is not Hermitian-symmetric; inverse DFT would be complex")
    return np.fft.ifft(bins, axis=-1).real


def forward_dft(frame) -> np.ndarray:
    return np.fft.fft(frame, axis=-1)


def apply_bias_and_clip(frame, cfg: OfdmConfig, rms=None) -> np.ndarray:
    """Add the DCO bias ``beta * rms`` (none for ACO) and clip at zero.

    ``rms`` defaults to the per-frame root mean square of ``frame``.
    """
    frame = np.asarray(frame, dtype=float)
    if cfg.scheme is Scheme.DCO:
        if rms is None:
            rms = np.sqrt(np.mean(frame**2, axis=-1, keepdims=True))
        frame = frame + cfg.beta * rms
    return np.maximum(frame, 0.0)


def normalize_unit_mean(frame):
    """Scale each frame to unit mean; returns ``(normalized, scale)``."""
    frame = np.asarray(frame, dtype=float)
    mean = np.mean(frame, axis=-1, keepdims=True)
    if np.any(mean <= 0):
        raise ValueError("cannot normalise a frame with non-positive mean (all-zero frame?)")
    scale = 1.0 / mean
    normalized = frame * scale
    if scale.ndim == 1:
        return normalized, float(scale[0])
    return normalized, scale


def demodulate(frame, cfg: OfdmConfig) -> np.ndarray:
    """Forward DFT and data-bin extraction.

    ACO zero-clipping halves the odd-bin amplitudes, so those bins are
    multiplied by 2 here.
    """
    frame = np.asarray(frame, dtype=float)
    if frame.shape[-1] != cfg.N:
        raise ValueError(f"expected frames of length {cfg.N}, got {frame.shape[-1]}")
    bins = forward_dft(frame)
    if cfg.scheme is Scheme.DCO:
        return bins[..., 1 : cfg.N // 2]
    return 2.0 * bins[..., 1 : cfg.N // 2 : 2]


# -- ensemble statistics of the transmitted frame ------------------------------

def frame_rms(cfg: OfdmConfig) -> float:
    """Ensemble RMS of the bipolar frame for unit-energy symbols."""
    active = cfg.N // 2 if cfg.scheme is Scheme.ACO else cfg.N - 2
    return math.sqrt(active) / cfg.N


def expected_clipped_mean(cfg: OfdmConfig) -> float:
    """Ensemble mean of the clipped frame under the Gaussian approximation."""
    sigma = frame_rms(cfg)
    if cfg.scheme is Scheme.ACO:
        return sigma / math.sqrt(2 * math.pi)
    beta = cfg.beta
    return sigma * (beta * norm.cdf(beta) + norm.pdf(beta))


def transmit_frames(bits, cfg: OfdmConfig) -> np.ndarray:
    """Bits -> biased, clipped frames scaled to unit ensemble mean.

    The fixed ensemble scale ``1/expected_clipped_mean`` is known to both ends,
    so :func:`receive_frames` needs no side information.
    """
    symbols = qam_modulate(bits, cfg.M)
    bipolar = to_time_domain(assemble_subcarriers(symbols, cfg))
    clipped = apply_bias_and_clip(bipolar, cfg, rms=frame_rms(cfg))
    return clipped / expected_clipped_mean(cfg)


def receive_frames(frames, cfg: OfdmConfig) -> np.ndarray:
    """Unit-mean amplitude frames -> detected bits (inverse of transmit_frames)."""
    symbols = demodulate(np.asarray(frames) * expected_clipped_mean(cfg), cfg)
    return qam_detect(symbols, cfg.M)
