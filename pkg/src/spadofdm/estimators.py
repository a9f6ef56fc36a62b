"""scikit-learn style wrappers around the link building blocks.

Each wrapper keeps its hyper-parameters as constructor arguments (so
``get_params``/``set_params``/``clone`` work) and validates array input with
sklearn's helpers. Stateless stages implement a no-op ``fit``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .analysis import BerCurve, analytic_ber, dbm_to_watts
from .link import LinkScenario, find_thresholds
from .ofdm import OfdmConfig, receive_frames, transmit_frames
from .spad import SpadArrayConfig, mean_potential_counts, sample_counts


def _ofdm_config(est) -> OfdmConfig:
    return OfdmConfig(scheme=est.scheme, M=est.M, N=est.N, bias_db=est.bias_db,
                      symbol_period=getattr(est, "symbol_period", 1e-6))


class OfdmModulator(TransformerMixin, BaseEstimator):
    """Bits ``(n_frames, bits_per_frame)`` -> unit-mean intensity frames ``(n_frames, N)``."""

    def __init__(self, scheme="ACO", M=4, N=2048, bias_db=7.0):
        self.scheme = scheme
        self.M = M
        self.N = N
        self.bias_db = bias_db

    def fit(self, X=None, y=None):
        self.config_ = _ofdm_config(self)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_array(X, dtype=np.int8)
        if X.shape[1] != self.config_.bits_per_frame:
            raise ValueError(f"expected {self.config_.bits_per_frame} bits per frame, got {X.shape[1]}")
        if np.any((X != 0) & (X != 1)):
            raise ValueError("bits must be 0 or 1")
        return transmit_frames(X, self.config_)


class OfdmDemodulator(TransformerMixin, BaseEstimator):
    """Unit-mean amplitude frames ``(n_frames, N)`` -> detected bits."""

    def __init__(self, scheme="ACO", M=4, N=2048, bias_db=7.0):
        self.scheme = scheme
        self.M = M
        self.N = N
        self.bias_db = bias_db

    def fit(self, X=None, y=None):
        self.config_ = _ofdm_config(self)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_array(X, dtype=float)
        return receive_frames(X, self.config_)


class SpadArrayDetector(TransformerMixin, BaseEstimator):
    """Optical power per sample (W) -> registered array counts.

    ``random_state`` seeds a generator created at ``fit``; successive
    ``transform`` calls continue the same stream.
    """

    def __init__(self, kind="PQ", count_mode="poisson", symbol_period=1e-6, spad=None, random_state=None):
        self.kind = kind
        self.count_mode = count_mode
        self.symbol_period = symbol_period
        self.spad = spad
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.spad_ = self.spad if self.spad is not None else SpadArrayConfig()
        if not self.spad_.dead_time < self.symbol_period:
            raise ValueError("dead_time must be shorter than symbol_period")
        seed = check_random_state(self.random_state).randint(0, 2**31 - 1)
        self.rng_ = np.random.default_rng(seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "rng_")
        X = check_array(X, dtype=float, ensure_min_features=1)
        if np.any(X < 0):
            raise ValueError("optical power must be non-negative")
        mu = mean_potential_counts(X, self.spad_, self.symbol_period)
        return sample_counts(mu, self.kind, self.count_mode, self.rng_, self.spad_, self.symbol_period)


class PhotonToAmplitudeEqualizer(TransformerMixin, BaseEstimator):
    """Affine map from counts back to unit-mean amplitude, learned from pilots.

    ``fit(counts, amplitudes)`` with ``method="slope"`` regresses counts on
    the known amplitudes; ``method="mean"`` uses the ratio of their means.
    """

    def __init__(self, method="slope"):
        self.method = method

    def fit(self, X, y):
        X = check_array(X, dtype=float, ensure_2d=False).ravel()
        y = check_array(y, dtype=float, ensure_2d=False).ravel()
        if X.shape != y.shape:
            raise ValueError("counts and amplitudes differ in size")
        if X.mean() <= 0:
            raise ValueError("pilot produced no counts; the equalizer is undefined")
        if self.method == "mean":
            self.coef_, self.offset_ = float(y.mean() / X.mean()), 0.0
        elif self.method == "slope":
            slope, intercept = np.polyfit(y, X, 1)
            if slope == 0:
                raise ValueError("counts do not depend on amplitude")
            self.coef_, self.offset_ = float(1.0 / slope), float(intercept)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        return self

    def transform(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float, ensure_2d=False)
        return self.coef_ * (X - self.offset_)


class AnalyticBerModel(BaseEstimator):
    """Closed-form BER as a function of received power in dBm.

    ``predict`` accepts a 1-D array or a single-column 2-D array of powers.
    ``thresholds`` returns MPR/MOI/LEA from the model's own curve.
    """

    def __init__(self, scheme="ACO", M=4, N=2048, bias_db=7.0, symbol_period=1e-3, kind="PQ",
                 count_mode="poisson", spad=None):
        self.scheme = scheme
        self.M = M
        self.N = N
        self.bias_db = bias_db
        self.symbol_period = symbol_period
        self.kind = kind
        self.count_mode = count_mode
        self.spad = spad

    def fit(self, X=None, y=None):
        self.scenario_ = LinkScenario(ofdm=_ofdm_config(self), spad=self.spad or SpadArrayConfig(),
                                      kind=self.kind, count_mode=self.count_mode)
        return self

    def predict(self, X):
        check_is_fitted(self, "scenario_")
        X = check_array(X, dtype=float, ensure_2d=False)
        if X.ndim == 2:
            if X.shape[1] != 1:
                raise ValueError("expected a single column of powers")
            X = X[:, 0]
        sc = self.scenario_
        return np.array([analytic_ber(sc.ofdm, sc.spad, sc.kind, sc.count_mode, p) for p in X])

    def predict_counts_mean(self, X):
        """Mean potential counts per symbol at the given powers (dBm)."""
        check_is_fitted(self, "scenario_")
        X = check_array(X, dtype=float, ensure_2d=False)
        return mean_potential_counts(dbm_to_watts(X), self.scenario_.spad, self.symbol_period)

    def thresholds(self, powers_dbm=None, target=1e-3):
        check_is_fitted(self, "scenario_")
        if powers_dbm is None:
            powers_dbm = np.arange(-130.0, 20.0 + 1e-9, 1.0)
        curve = BerCurve(powers_dbm, self.predict(np.asarray(powers_dbm)))
        return find_thresholds(curve, target, ber_fn=lambda p: float(self.predict([p])[0]))
