"""Objective measures: ERLE, segmental SNR/SIR, log spectral distance, misalignment summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive, check_same_length, check_signal
from .signals import AudioSignal
from .stft import FrameParams

ERLE_POWER_FLOOR = 1e-15


def _samples(x, name):
    if isinstance(x, AudioSignal):
        return x.samples, x.sample_rate
    return check_signal(x, name), None


def _rate(*rates, default):
    known = {r for r in rates if r is not None}
    if len(known) > 1:
        raise ValueError(f"sample rate mismatch: {sorted(known)}")
    return known.pop() if known else default


@dataclass(frozen=True)
class ErleResult:
    trace_db: np.ndarray
    times_s: np.ndarray
    mean_db: float


def erle(echo, residual, window_s=0.1, sample_rate=16000, converged_fraction=0.25,
         min_echo_dbfs=-60.0):
    """Windowed echo return loss enhancement.

    Windows are contiguous and non-overlapping; those whose echo power is
    below ``min_echo_dbfs`` are dropped from the trace. The mean is taken in
    dB over the retained windows in the final ``converged_fraction`` of the
    signal (NaN if there are none).
    """
    d, fs_d = _samples(echo, "echo")
    r, fs_r = _samples(residual, "residual")
    fs = _rate(fs_d, fs_r, default=sample_rate)
    check_same_length(d, r, names=("echo", "residual"))
    check_positive(window_s, "window_s")
    n = int(round(window_s * fs))
    n_win = d.size // n
    if n_win == 0:
        raise ValueError("signal shorter than one ERLE window")
    pd = np.mean(d[: n_win * n].reshape(n_win, n) ** 2, axis=1)
    pr = np.mean(r[: n_win * n].reshape(n_win, n) ** 2, axis=1)
    keep = pd >= 10.0 ** (min_echo_dbfs / 10.0)
    trace = 10.0 * np.log10(pd[keep] / np.maximum(pr[keep], ERLE_POWER_FLOOR))
    starts = np.arange(n_win)[keep]
    tail = starts >= int(np.floor((1.0 - converged_fraction) * n_win))
    mean = float(np.mean(trace[tail])) if np.any(tail) else float("nan")
    return ErleResult(trace, starts * n / fs, mean)


def _frame_energy(x, n):
    m = x.size // n
    return np.sum(x[: m * n].reshape(m, n) ** 2, axis=1)


def _segmental(ref_energy, err_energy, clamp_db, floor_db, activity_threshold_db):
    peak = np.max(ref_energy) if ref_energy.size else 0.0
    active = (ref_energy > 0) & (ref_energy >= peak * 10.0 ** (-activity_threshold_db / 10.0))
    if not np.any(active):
        raise ValueError("reference has no active frames")
    with np.errstate(divide="ignore"):
        seg = 10.0 * np.log10(ref_energy[active] / err_energy[active])
    return float(np.mean(np.clip(seg, floor_db, clamp_db)))


def segmental_snr(reference, processed, frame_s=0.032, clamp_db=35.0, activity_threshold_db=40.0,
                  sample_rate=16000, floor_db=-10.0):
    """Mean per-frame SNR of ``processed`` against ``reference`` over active frames."""
    s, fs_s = _samples(reference, "reference")
    y, fs_y = _samples(processed, "processed")
    fs = _rate(fs_s, fs_y, default=sample_rate)
    check_same_length(s, y, names=("reference", "processed"))
    n = int(round(frame_s * fs))
    return _segmental(_frame_energy(s, n), _frame_energy(y - s, n), clamp_db, floor_db,
                      activity_threshold_db)


def segmental_sir(reference, processed, interference, frame_s=0.032, clamp_db=35.0,
                  activity_threshold_db=40.0, sample_rate=16000, floor_db=-10.0):
    """Like :func:`segmental_snr` with the error replaced by the isolated interference."""
    s, fs_s = _samples(reference, "reference")
    y, fs_y = _samples(processed, "processed")
    v, fs_v = _samples(interference, "interference")
    fs = _rate(fs_s, fs_y, fs_v, default=sample_rate)
    check_same_length(s, y, v, names=("reference", "processed", "interference"))
    n = int(round(frame_s * fs))
    return _segmental(_frame_energy(s, n), _frame_energy(v, n), clamp_db, floor_db,
                      activity_threshold_db)


def _frame_power_spectra(x, params):
    win = params.analysis_window()
    m = params.n_frames(x.size)
    idx = np.arange(params.frame_len)[None, :] + params.hop * np.arange(m)[:, None]
    spec = np.fft.rfft(x[idx] * win, n=params.fft_len, axis=1)
    return spec.real**2 + spec.imag**2


def lsd(reference, processed, params=None, activity_threshold_db=40.0, floor_db=-50.0):
    """Log spectral distance in dB.

    Per frame the RMS over bins of the dB ratio of the two power spectra,
    each floored at ``floor_db`` below its own strongest bin. Averaged over
    frames that are active (within ``activity_threshold_db`` of the loudest
    frame) in both signals, which makes the measure symmetric.
    """
    params = params or FrameParams()
    s, fs_s = _samples(reference, "reference")
    y, fs_y = _samples(processed, "processed")
    _rate(fs_s, fs_y, default=None)
    check_same_length(s, y, names=("reference", "processed"))
    if s.size < params.frame_len:
        raise ValueError("signals shorter than one frame")
    ps = _frame_power_spectra(s, params)
    py = _frame_power_spectra(y, params)

    def active(p):
        e = p.sum(axis=1)
        return (e > 0) & (e >= e.max() * 10.0 ** (-activity_threshold_db / 10.0))

    def floored(p):
        return np.maximum(p, 10.0 ** (floor_db / 10.0) * p.max(axis=1, keepdims=True))

    both = active(ps) & active(py)
    if not np.any(both):
        raise ValueError("no frame is active in both signals")
    # Difference of logs keeps lsd(a, b) == lsd(b, a) bit for bit.
    ratio = 10.0 * (np.log10(floored(ps[both])) - np.log10(floored(py[both])))
    return float(np.mean(np.sqrt(np.mean(ratio**2, axis=1))))


def time_to_threshold(times, trace_db, threshold_db=-20.0):
    """First time the trace reaches ``threshold_db`` or below; inf if never."""
    hit = np.nonzero(np.asarray(trace_db) <= threshold_db)[0]
    return float(times[hit[0]]) if hit.size else float("inf")


def steady_state(trace_db, fraction=0.25):
    """Mean of the final ``fraction`` of a dB trace."""
    trace_db = np.asarray(trace_db, dtype=np.float64)
    if trace_db.size == 0:
        return float("nan")
    k = max(1, int(np.ceil(fraction * trace_db.size)))
    return float(np.mean(trace_db[-k:]))


@dataclass
class MetricsReport:
    """Scalar and trace results of one scenario run.

    Scalars that are undefined for a scenario (for example ERLE without any
    echo, segmental SNR without near-end speech) are NaN.
    """

    erle_trace: np.ndarray
    mean_erle_db: float
    seg_snr_db: float
    seg_sir_db: float
    lsd_db: float
    misalignment_trace: np.ndarray
    erle_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    misalignment_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_erle_aec_db: float = float("nan")
    t20_s: float = float("nan")
    ss_misalign_db: float = float("nan")
    t60_s: float = float("nan")
    diverged: bool = False

    def __post_init__(self):
        for name in ("erle_trace", "misalignment_trace"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, v)

    def scalars(self):
        return {
            "mean_erle_db": self.mean_erle_db,
            "mean_erle_aec_db": self.mean_erle_aec_db,
            "t20_s": self.t20_s,
            "ss_misalign_db": self.ss_misalign_db,
            "seg_snr_db": self.seg_snr_db,
            "seg_sir_db": self.seg_sir_db,
            "lsd_db": self.lsd_db,
            "t60_s": self.t60_s,
            "diverged": float(self.diverged),
        }
