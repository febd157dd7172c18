"""OM-LSA spectral gain: a posteriori / a priori SIR, speech presence and gain rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_interval, check_positive
from .stft import Spectrogram

EULER_GAMMA = 0.57721566490153286061
POWER_FLOOR = 1e-12
V_FLOOR = 1e-10
LSA_GAIN_CAP = 1e3


@njit(cache=True)
def _e1_scalar(x, tol, max_iter):
    if x == np.inf:
        return 0.0
    if x < 1.0:
        total = 0.0
        term = 1.0
        for k in range(1, max_iter):
            term *= -x / k
            total += term / k
            if abs(term / k) <= tol * abs(total):
                break
        return -EULER_GAMMA - np.log(x) - total
    # Modified Lentz evaluation of the continued fraction.
    b = x + 1.0
    c = 1e300
    d = 1.0 / b
    h = d
    for i in range(1, max_iter):
        an = -float(i * i)
        b += 2.0
        d = 1.0 / (an * d + b)
        c = b + an / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) <= tol:
            break
    return h * np.exp(-x)


@njit(cache=True)
def _e1_array(v, tol, max_iter, out):
    for i in range(v.size):
        out[i] = _e1_scalar(v[i], tol, max_iter)


def expint_e1(v, tol=1e-15, max_iter=1000):
    """Exponential integral E1 for positive real arguments.

    Power series below 1, modified-Lentz continued fraction from 1 upwards.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v <= 0) or np.any(np.isnan(v)):
        raise ValueError("E1 is only implemented for v > 0")
    flat = np.ascontiguousarray(v).ravel()
    out = np.empty_like(flat)
    _e1_array(flat, tol, max_iter, out)
    return out.reshape(v.shape)


@dataclass(frozen=True)
class PostfilterParams:
    beta: float = 0.98
    xi_min: float = 10.0 ** (-15.0 / 10.0)
    g_min: float = 10.0 ** (-18.0 / 10.0)
    q_absent: float = 0.5

    def __post_init__(self):
        check_interval(self.beta, "beta", 0.0, 1.0)
        check_positive(self.xi_min, "xi_min")
        check_interval(self.g_min, "g_min", 0.0, 1.0, closed=(False, True))
        check_interval(self.q_absent, "q_absent", 0.0, 1.0, closed=(True, False))


@dataclass
class PostfilterState:
    prev_gain: np.ndarray | None = None
    prev_gamma: np.ndarray | None = None
    warm: bool = False

    def reset(self):
        self.prev_gain = self.prev_gamma = None
        self.warm = False


def a_posteriori_sir(mic_power, lambda_total):
    lam = np.asarray(lambda_total, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("lambda_total must be non-negative")
    return np.asarray(mic_power, dtype=np.float64) / np.maximum(lam, POWER_FLOOR)


def a_priori_sir_dd(state, gamma, params):
    """Decision-directed a priori SIR; the first frame uses the ML estimate."""
    gamma = np.asarray(gamma, dtype=np.float64)
    ml = np.maximum(gamma - 1.0, 0.0)
    if not state.warm:
        return np.maximum(ml, params.xi_min)
    b = params.beta
    xi = b * state.prev_gain**2 * state.prev_gamma + (1.0 - b) * ml
    return np.maximum(xi, params.xi_min)


def speech_presence_probability(xi, gamma, params):
    """Posterior speech presence under the complex Gaussian model with a fixed prior.

    Evaluated as a logistic in the log domain, which cannot overflow and
    keeps p -> 1 as the SIR grows without bound.
    """
    xi = np.asarray(xi, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    q = params.q_absent
    if q == 0.0:
        return np.ones(np.broadcast(xi, gamma).shape)
    v = xi * gamma / (1.0 + xi)
    log_lr = v - np.log1p(xi) - np.log(q / (1.0 - q))
    p = 1.0 / (1.0 + np.exp(-np.clip(log_lr, -700.0, 700.0)))
    return np.clip(p, 0.0, 1.0)


def lsa_gain(xi, gamma):
    """Log-spectral amplitude gain ``xi/(1+xi) * exp(E1(v)/2)``."""
    xi = np.asarray(xi, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(xi <= 0):
        raise ValueError("xi must be positive")
    v = np.maximum(xi * gamma / (1.0 + xi), V_FLOOR)
    g = xi / (1.0 + xi) * np.exp(0.5 * expint_e1(v))
    return np.minimum(g, LSA_GAIN_CAP)


def omlsa_gain(g_lsa, p, params):
    """Presence-weighted geometric mean of the LSA gain and the floor gain."""
    g_lsa = np.asarray(g_lsa, dtype=np.float64)
    if np.any(g_lsa <= 0):
        raise ValueError("g_lsa must be positive")
    p = np.asarray(p, dtype=np.float64)
    g = np.exp(p * np.log(g_lsa) + (1.0 - p) * np.log(params.g_min))
    return np.clip(g, params.g_min, 1.0)


@dataclass
class FrameGain:
    gain: np.ndarray
    presence: np.ndarray
    xi: np.ndarray
    gamma: np.ndarray


def postfilter_frame(frame, lambda_total, params, state):
    """Gain for one spectral frame; updates ``state`` in place."""
    power = np.abs(frame) ** 2
    gamma = a_posteriori_sir(power, lambda_total)
    xi = a_priori_sir_dd(state, gamma, params)
    p = speech_presence_probability(xi, gamma, params)
    g = omlsa_gain(lsa_gain(xi, gamma), p, params)
    state.prev_gain = g
    state.prev_gamma = gamma
    state.warm = True
    return FrameGain(g, p, xi, gamma)


def _lambda_rows(estimates, shape):
    if isinstance(estimates, np.ndarray):
        lam = np.asarray(estimates, dtype=np.float64)
    else:
        lam = np.stack([e.lambda_total for e in estimates])
    if lam.shape != shape:
        raise ValueError(f"interference estimates have shape {lam.shape}, spectrogram {shape}")
    return lam


def apply_postfilter(spec, estimates, params=None, state=None, return_gains=False):
    """Apply the OM-LSA gain frame by frame.

    ``estimates`` is either a sequence of :class:`InterferenceEstimates`
    (one per frame) or an array of total variances shaped like the
    spectrogram.
    """
    params = params or PostfilterParams()
    state = state if state is not None else PostfilterState()
    lam = _lambda_rows(estimates, spec.frames.shape)
    gains = np.empty(spec.frames.shape)
    for i, frame in enumerate(spec.frames):
        gains[i] = postfilter_frame(frame, lam[i], params, state).gain
    out = spec.with_frames(spec.frames * gains)
    return (out, gains) if return_gains else out


class OMLSAPostfilter(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`apply_postfilter`.

    ``transform(X, interference)`` takes a :class:`Spectrogram` and an array
    of total interference variances with the same shape.
    """

    def __init__(self, beta=0.98, xi_min=10.0 ** (-1.5), g_min=10.0 ** (-1.8), q_absent=0.5):
        self.beta = beta
        self.xi_min = xi_min
        self.g_min = g_min
        self.q_absent = q_absent

    def _params(self):
        return PostfilterParams(self.beta, self.xi_min, self.g_min, self.q_absent)

    def fit(self, X=None, y=None):
        self.params_ = self._params()
        return self

    def transform(self, X, interference):
        if not isinstance(X, Spectrogram):
            raise TypeError("X must be a Spectrogram")
        params = getattr(self, "params_", None) or self._params()
        out, self.gains_ = apply_postfilter(X, interference, params, PostfilterState(),
                                            return_gains=True)
        return out
