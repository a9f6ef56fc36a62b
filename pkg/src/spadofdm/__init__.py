"""Performance modelling of optical OFDM links received by SPAD arrays."""

__version__ = "0.1.0"

from .analysis import (BerCurve, BussgangDecomposition, ClippingModel, Expectations, PhotonAffineCoeffs,
                       SignalStats, SnrResult, analytic_ber, analytic_ber_curve, ber_mqam, bussgang_decompose,
                       bussgang_expectations_aq, bussgang_expectations_pq, clipped_signal_stats,
                       dco_clipping_model, photon_affine_coeffs, shot_noise_variance, snr)
from .exceptions import ConfigError, NumericalInstabilityError, QuadratureError, SupportOverflowError
from .link import (BitRatePoint, LinkMetrics, LinkScenario, MonteCarloResult, find_thresholds, link_metrics,
                   max_bit_rate, max_bit_rate_sweep, pilot_equalizer_coefficient, run_monte_carlo)
from .ofdm import OfdmConfig, Scheme
from .spad import (CountDistribution, CountMode, DeadTimeKind, SpadArrayConfig, array_pmf,
                   dead_time_event_oracle, dead_time_mean_transfer, exact_moments, max_count_rate,
                   mean_potential_counts, sample_counts, single_device_pmf)
