"""Spectral variance estimators for noise, late residual echo and late reverberation.

All three share the exponential-decay room model: once the reverberation
time is known (estimated from the identified echo path), energy decays by
``frame_decay = exp(-2 * rho * hop / fs)`` per STFT frame with
``rho = 3 ln(10) / T60``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_interval, check_positive
from .signals import ImpulseResponse


class T60EstimationError(ValueError):
    """The decay curve is too short, too shallow or not exponential."""


@dataclass(frozen=True)
class ReverbModel:
    t60_s: float
    hop: int = 256
    sample_rate: int = 16000

    def __post_init__(self):
        check_positive(self.t60_s, "t60_s")

    @property
    def decay_rate(self):
        """Amplitude decay rate in nepers per second."""
        return 3.0 * np.log(10.0) / self.t60_s

    @property
    def frame_decay(self):
        """Energy decay over one hop, in (0, 1)."""
        return float(np.exp(-2.0 * self.decay_rate * self.hop / self.sample_rate))


def schroeder_curve(taps):
    """Backward-integrated energy decay curve in dB re. its first value."""
    energy = np.cumsum(np.asarray(taps, dtype=np.float64)[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise T60EstimationError("impulse response tail has no energy")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def estimate_t60(air, fit_range_db=(-5.0, -25.0), min_taps=32, compensate_truncation=False,
                 max_deviation_db=3.0, hop=256):
    """Reverberation time from the Schroeder decay of the taps after the direct path.

    A least-squares line is fitted to the decay curve between the two levels
    of ``fit_range_db`` and ``T60 = -60 / slope``. With
    ``compensate_truncation`` the energy missing beyond the last tap is
    extrapolated from the current fit and added back before refitting, which
    lets short (truncated) estimated paths be used with a shallow fit range.

    Raises :class:`T60EstimationError` when the tail is shorter than
    ``min_taps``, never reaches the lower fit level, or deviates from the
    fitted line by more than ``max_deviation_db``.
    """
    hi, lo = fit_range_db
    if not hi > lo:
        raise ValueError("fit_range_db must be (upper, lower) with upper > lower")
    tail = np.asarray(air.taps[air.direct_delay + 1:], dtype=np.float64)
    if tail.size < min_taps:
        raise T60EstimationError(f"only {tail.size} taps after the direct path")
    fs = air.sample_rate
    energy = np.cumsum(tail[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise T60EstimationError("impulse response tail has no energy")
    n = np.arange(tail.size)
    extra = 0.0
    slope = intercept = None
    for _ in range(10 if compensate_truncation else 1):
        with np.errstate(divide="ignore"):
            edc = 10.0 * np.log10((energy + extra) / (energy[0] + extra))
        sel = (edc <= hi) & (edc >= lo)
        if edc[-1] > lo or np.count_nonzero(sel) < min_taps:
            raise T60EstimationError(
                f"decay curve does not span {hi:g} to {lo:g} dB over {min_taps}+ taps"
            )
        slope, intercept = np.polyfit(n[sel], edc[sel], 1)
        if slope >= 0:
            raise T60EstimationError("decay curve is not decreasing")
        if not compensate_truncation:
            break
        # Energy still to come after the last tap, per the fitted exponential.
        new_extra = (energy[0] + extra) * 10.0 ** ((intercept + slope * tail.size) / 10.0)
        if abs(new_extra - extra) <= 1e-9 * energy[0]:
            extra = new_extra
            break
        extra = new_extra
    resid = edc[sel] - (intercept + slope * n[sel])
    if np.max(np.abs(resid)) > max_deviation_db:
        raise T60EstimationError(
            f"decay curve deviates {np.max(np.abs(resid)):.1f} dB from an exponential"
        )
    t60 = -60.0 / (slope * fs)
    return ReverbModel(float(t60), hop, fs)


@dataclass
class NoiseTrackerState:
    n_bins: int
    alpha_n: float = 0.95
    init_frames: int = 10
    presence_threshold: float = 0.1
    lambda_noise: np.ndarray = field(default=None)
    frame_count: int = 0

    def __post_init__(self):
        check_interval(self.alpha_n, "alpha_n", 0.0, 1.0, closed=(False, False))
        if self.lambda_noise is None:
            self.lambda_noise = np.zeros(self.n_bins)


def track_noise(state, power, presence):
    """Update and return the noise variance estimate for one frame.

    The first ``init_frames`` frames are averaged unconditionally; after that
    bins are smoothed with ``alpha_n`` only where speech presence is below
    ``presence_threshold`` and frozen elsewhere.
    """
    power = np.asarray(power, dtype=np.float64)
    presence = np.broadcast_to(np.asarray(presence, dtype=np.float64), power.shape)
    if power.shape != state.lambda_noise.shape:
        raise ValueError(f"frame has {power.shape} bins, tracker has {state.lambda_noise.shape}")
    k = state.frame_count
    if k < state.init_frames:
        state.lambda_noise = state.lambda_noise + (power - state.lambda_noise) / (k + 1)
    else:
        a = state.alpha_n
        upd = presence < state.presence_threshold
        state.lambda_noise = np.where(upd, a * state.lambda_noise + (1 - a) * power,
                                      state.lambda_noise)
    state.frame_count = k + 1
    return state.lambda_noise


def estimate_late_residual_echo(model, tail_power, echo_power, prev_lambda):
    """One step of the exponential-decay late residual echo recursion.

    ``lambda = frame_decay * prev + frame_decay * w0 * |Y_echo|^2``.
    """
    fd = model.frame_decay
    w0 = np.asarray(tail_power, dtype=np.float64)
    if np.any(w0 < 0):
        raise ValueError("tail power must be non-negative")
    return fd * np.asarray(prev_lambda) + fd * w0 * np.asarray(echo_power)


def estimate_tail_power(estimated_path, model):
    """Energy of the last quarter of the estimated path, decayed by one frame."""
    taps = estimated_path.taps if isinstance(estimated_path, ImpulseResponse) else np.asarray(estimated_path)
    if taps.size < 128:
        raise ValueError(f"estimated path needs >= 128 taps, got {taps.size}")
    quarter = taps[-(taps.size // 4):]
    return float(np.sum(quarter**2) * model.frame_decay)


def estimate_late_reverb(model, history, n_early, dpc_enabled=False, dpc_factor=1.0):
    """Late reverberant variance from the smoothed near-end variance ``n_early`` frames back.

    ``history`` holds per-bin smoothed variances, oldest row first, newest
    last. Returns ``(lambda_rev, ready)``; ``ready`` is False (and the
    estimate zero) while fewer than ``n_early + 1`` frames are available.
    """
    history = np.atleast_2d(np.asarray(history, dtype=np.float64))
    if n_early < 0:
        raise ValueError("n_early must be >= 0")
    if history.shape[0] < n_early + 1:
        return np.zeros(history.shape[1]), False
    past = history[-1 - n_early]
    if dpc_enabled:
        past = dpc_factor * past
    return model.frame_decay**n_early * past, True


class LateReverbTracker:
    """Streaming wrapper: smooths the near-end variance and keeps the ring buffer."""

    def __init__(self, n_bins, n_early=3, smoothing=0.7):
        self.n_early = n_early
        self.smoothing = smoothing
        self._ring = np.zeros((n_early + 1, n_bins))
        self._count = 0
        self._smoothed = np.zeros(n_bins)

    def push(self, near_power):
        a = self.smoothing
        self._smoothed = a * self._smoothed + (1 - a) * np.asarray(near_power)
        self._ring = np.roll(self._ring, -1, axis=0)
        self._ring[-1] = self._smoothed
        self._count += 1
        return self._smoothed

    def estimate(self, model, dpc_enabled=False, dpc_factor=1.0):
        depth = min(self._count, self.n_early + 1)
        return estimate_late_reverb(model, self._ring[self._ring.shape[0] - depth:],
                                    self.n_early, dpc_enabled, dpc_factor)


@dataclass
class InterferenceEstimates:
    lambda_noise: np.ndarray
    lambda_echo_late: np.ndarray
    lambda_rev_late: np.ndarray

    def __post_init__(self):
        for name in ("lambda_noise", "lambda_echo_late", "lambda_rev_late"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite and non-negative")
            setattr(self, name, v)

    @property
    def lambda_total(self):
        return self.lambda_noise + self.lambda_echo_late + self.lambda_rev_late
