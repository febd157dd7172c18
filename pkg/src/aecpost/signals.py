"""Audio containers, WAV I/O and deterministic scenario synthesis.

Every generator in this module is a pure function of its arguments: all
randomness is drawn from ``numpy.random.default_rng(seed)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from ._validation import (
    check_positive,
    check_sample_rate,
    check_same_rate,
    check_signal,
)

DEFAULT_SAMPLE_RATE = 16000


class WavFormatError(ValueError):
    """Base class for WAV files this package refuses to read."""


class MultiChannelError(WavFormatError):
    pass


class UnsupportedEncodingError(WavFormatError):
    pass


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AudioSignal:
    """Mono real-valued signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "sample_rate", check_sample_rate(self.sample_rate))
        x = check_signal(self.samples, "samples", allow_empty=True)
        object.__setattr__(self, "samples", _frozen(x))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    @property
    def power(self):
        return float(np.mean(self.samples**2)) if self.samples.size else 0.0

    def with_samples(self, samples):
        return AudioSignal(samples, self.sample_rate)


@dataclass(frozen=True)
class ImpulseResponse:
    """FIR acoustic impulse response.

    ``direct_delay`` is the tap index of the direct-path peak.
    """

    taps: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    direct_delay: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sample_rate", check_sample_rate(self.sample_rate))
        h = check_signal(self.taps, "taps")
        if not 0 <= int(self.direct_delay) < h.size:
            raise ValueError(
                f"direct_delay {self.direct_delay} outside [0, {h.size})"
            )
        object.__setattr__(self, "direct_delay", int(self.direct_delay))
        object.__setattr__(self, "taps", _frozen(h))

    def __len__(self):
        return self.taps.size

    @property
    def energy(self):
        return float(np.sum(self.taps**2))

    def truncated(self, length):
        return ImpulseResponse(self.taps[:length], self.sample_rate,
                               min(self.direct_delay, length - 1))

    def scaled(self, gain):
        return ImpulseResponse(self.taps * gain, self.sample_rate, self.direct_delay)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------


def read_wav(path):
    """Read a mono PCM16 or float32 WAV file into an :class:`AudioSignal`.

    PCM16 samples are scaled by 1/32768, so full scale maps to
    ``[-1, 32767/32768]``.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise MultiChannelError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(
            f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)"
        )
    return AudioSignal(samples, int(rate))


def write_wav(path, signal, encoding="pcm16"):
    """Write ``signal`` as mono WAV. PCM16 clips out-of-range samples."""
    x = signal.samples
    if encoding == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown encoding {encoding!r}; use 'pcm16' or 'float32'")
    wavfile.write(path, signal.sample_rate, data)


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------


def _n_samples(duration_s, sample_rate):
    check_positive(duration_s, "duration_s")
    return int(round(duration_s * sample_rate))


def generate_white_noise(duration_s, sample_rate=DEFAULT_SAMPLE_RATE, seed=0, std=0.1):
    """Zero-mean Gaussian white noise, ``std`` 0.1 by default."""
    n = _n_samples(duration_s, check_sample_rate(sample_rate))
    rng = np.random.default_rng(seed)
    return AudioSignal(std * rng.standard_normal(n), sample_rate)


def decay_envelope(n_taps, t60_s, sample_rate):
    """Amplitude envelope ``exp(-3 ln(10) t / t60)`` for ``t = k / fs``."""
    t = np.arange(n_taps) / sample_rate
    return np.exp(-3.0 * np.log(10.0) * t / t60_s)


def generate_synthetic_air(t60_s, direct_delay, length, sample_rate=DEFAULT_SAMPLE_RATE,
                           seed=0, drr_db=0.0):
    """Synthetic room impulse response: unit direct path plus a decaying noise tail.

    The tail after the direct path is Gaussian noise under the envelope
    :func:`decay_envelope`; it is scaled so that the expected
    direct-to-reverberant energy ratio equals ``drr_db``.
    """
    check_positive(t60_s, "t60_s")
    sample_rate = check_sample_rate(sample_rate)
    if direct_delay < 0 or length <= direct_delay:
        raise ValueError(f"length ({length}) must exceed direct_delay ({direct_delay})")
    rng = np.random.default_rng(seed)
    n_tail = length - direct_delay - 1
    env = decay_envelope(n_tail + 1, t60_s, sample_rate)[1:]
    tail = rng.standard_normal(n_tail) * env
    if n_tail:
        tail_energy = float(np.sum(env**2))
        tail *= np.sqrt(10.0 ** (-drr_db / 10.0) / tail_energy)
    taps = np.zeros(length)
    taps[direct_delay] = 1.0
    taps[direct_delay + 1:] = tail
    return ImpulseResponse(taps, sample_rate, direct_delay)


def generate_sparse_air(length, n_active, sample_rate=DEFAULT_SAMPLE_RATE, seed=0):
    """Sparse echo path with ``n_active`` nonzero Gaussian taps and unit energy.

    The largest-magnitude tap is reported as the direct path.
    """
    if not 0 < n_active <= length:
        raise ValueError(f"n_active must lie in [1, {length}], got {n_active}")
    rng = np.random.default_rng(seed)
    positions = np.sort(rng.choice(length, size=n_active, replace=False))
    amps = rng.standard_normal(n_active)
    taps = np.zeros(length)
    taps[positions] = amps / np.linalg.norm(amps)
    return ImpulseResponse(taps, sample_rate, int(np.argmax(np.abs(taps))))


# Vowel formant table (F1, F2, F3) in Hz.
_VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [530, 1840, 2480],
    [660, 1720, 2410],
    [300, 870, 2240],
    [570, 840, 2410],
    [440, 1020, 2240],
])


def _resonator(x, freq, bandwidth, fs):
    r = np.exp(-np.pi * bandwidth / fs)
    a = [1.0, -2.0 * r * np.cos(2 * np.pi * freq / fs), r * r]
    return sps.lfilter([1.0 - r], a, x)


def generate_speech_like(duration_s, sample_rate=DEFAULT_SAMPLE_RATE, seed=0, level=0.1,
                         lead_silence_s=0.25):
    """Speech-shaped test signal: syllables of formant-filtered excitation with pauses.

    Voiced syllables use a jittered glottal pulse train (harmonic spectrum),
    unvoiced ones white noise; both pass through a three-formant resonator
    cascade under a raised-cosine syllable envelope. Syllables are separated
    by short gaps and, every few seconds, by a longer pause. The output is
    scaled so that the RMS over active samples equals ``level``.
    """
    sample_rate = check_sample_rate(sample_rate)
    n = _n_samples(duration_s, sample_rate)
    rng = np.random.default_rng(seed)
    out = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    t = int(lead_silence_s * sample_rate)
    next_pause = t + int(rng.uniform(1.5, 3.0) * sample_rate)
    while t < n:
        seg = int(rng.uniform(0.12, 0.35) * sample_rate)
        seg = min(seg, n - t)
        if seg < 32:
            break
        if rng.random() < 0.8:
            f0 = rng.uniform(95.0, 220.0) * (1 + 0.05 * np.linspace(-1, 1, seg) * rng.choice([-1, 1]))
            phase = np.cumsum(f0 / sample_rate)
            exc = np.diff(np.floor(phase), prepend=0.0)
            exc = sps.lfilter([1.0], [1.0, -0.9], exc)
            exc += 0.02 * rng.standard_normal(seg)
            formants = _VOWELS[rng.integers(len(_VOWELS))] * rng.uniform(0.9, 1.15)
            bws = (80.0, 110.0, 160.0)
        else:
            exc = rng.standard_normal(seg)
            formants = np.array([2500.0, 4000.0, 5500.0]) * rng.uniform(0.9, 1.1)
            formants = np.minimum(formants, 0.45 * sample_rate)
            bws = (600.0, 800.0, 1000.0)
        y = exc
        for f, bw in zip(formants, bws):
            y = _resonator(y, f, bw, sample_rate)
        env = np.sin(np.pi * (np.arange(seg) + 0.5) / seg) ** 0.6
        y = y * env
        y /= np.sqrt(np.mean(y**2)) + 1e-12
        out[t:t + seg] = y * rng.uniform(0.5, 1.5)
        active[t:t + seg] = True
        t += seg + int(rng.uniform(0.04, 0.15) * sample_rate)
        if t >= next_pause:
            t += int(rng.uniform(0.3, 0.6) * sample_rate)
            next_pause = t + int(rng.uniform(1.5, 3.0) * sample_rate)
    if active.any():
        out *= level / np.sqrt(np.mean(out[active] ** 2))
    return AudioSignal(out, sample_rate)


# --------------------------------------------------------------------------
# Signal operations
# --------------------------------------------------------------------------


def convolve(signal, air):
    """Linear convolution truncated to the input length."""
    check_same_rate(signal, air)
    x = signal.samples
    if x.size == 0:
        return signal
    y = sps.fftconvolve(x, air.taps)[: x.size]
    return AudioSignal(y, signal.sample_rate)


def apply_nonlinearity(signal, model, level):
    """Memoryless loudspeaker nonlinearity: ``hard_clip`` or ``soft_saturation``."""
    check_positive(level, "level")
    x = signal.samples
    if model == "hard_clip":
        y = np.clip(x, -level, level)
    elif model == "soft_saturation":
        y = level * np.tanh(x / level)
    elif model == "none":
        y = x
    else:
        raise ValueError(f"unknown nonlinearity model {model!r}")
    return AudioSignal(y, signal.sample_rate)


def snr_gain(target, interferer, snr_db):
    """Amplitude gain that puts ``interferer`` ``snr_db`` below ``target``."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    p_t = np.mean(target**2)
    p_i = np.mean(interferer**2)
    if p_t <= 0:
        raise ValueError("target has zero power")
    if p_i <= 0:
        raise ValueError("interferer has zero power")
    return float(np.sqrt(p_t / (p_i * 10.0 ** (snr_db / 10.0))))


def fit_length(x, n):
    """Truncate or loop ``x`` to exactly ``n`` samples."""
    return np.resize(np.asarray(x, dtype=np.float64), n)


def mix_at_snr(target, interferer, snr_db):
    """Return ``target + g * interferer`` with the full-signal SNR equal to ``snr_db``."""
    check_same_rate(target, interferer)
    v = fit_length(interferer.samples, len(target))
    g = snr_gain(target.samples, v, snr_db)
    return AudioSignal(target.samples + g * v, target.sample_rate)


def measured_snr_db(target, interferer):
    return float(10.0 * np.log10(np.mean(np.square(target)) / np.mean(np.square(interferer))))


def _local_envelope(taps, width=65):
    kernel = np.ones(width) / width
    return np.sqrt(np.convolve(taps**2, kernel, mode="same"))


def perturb_tail(air, start_fraction, amount, seed=0):
    """Redraw the tail of ``air`` from ``start_fraction * length`` onward.

    The fresh tail is Gaussian noise under the local RMS envelope of the
    existing taps. Old and new tails are blended ``(1-a)*old + a*new`` and
    the blend is rescaled by ``1/sqrt((1-a)^2 + a^2)`` so the tail energy
    envelope is preserved for every ``amount``.
    """
    if not 0.0 < start_fraction < 1.0:
        raise ValueError("start_fraction must lie in (0, 1)")
    if amount < 0:
        raise ValueError("amount must be non-negative")
    taps = np.array(air.taps)
    start = int(start_fraction * taps.size)
    if amount == 0 or start >= taps.size:
        return air
    env = _local_envelope(taps)[start:]
    rng = np.random.default_rng(seed)
    fresh = rng.standard_normal(env.size) * env
    old = taps[start:]
    blend = (1.0 - amount) * old + amount * fresh
    blend /= np.sqrt((1.0 - amount) ** 2 + amount**2)
    taps[start:] = blend
    return ImpulseResponse(taps, air.sample_rate, air.direct_delay)


def sner_db(linear_echo, nonlinear_echo):
    """Signal-to-nonlinear-echo ratio ``P_lin / P(nonlinear - linear)`` in dB."""
    lin = np.asarray(linear_echo)
    dist = np.asarray(nonlinear_echo) - lin
    p_d = np.mean(dist**2)
    if p_d <= 0:
        return np.inf
    return float(10.0 * np.log10(np.mean(lin**2) / p_d))


def clip_level_for_sner(far_end, air, target_db, model="hard_clip", tol_db=0.05):
    """Bisect the nonlinearity level so the echo reaches roughly ``target_db`` SNER.

    Returns ``(level, achieved_sner_db)``.
    """
    x = far_end.samples
    peak = float(np.max(np.abs(x)))
    if peak == 0:
        raise ValueError("far-end signal is silent")
    lin = convolve(far_end, air).samples

    def achieved(level):
        nl = convolve(apply_nonlinearity(far_end, model, level), air).samples
        return sner_db(lin, nl)

    lo, hi = 1e-4 * peak, peak
    level, val = hi, achieved(hi)
    for _ in range(60):
        mid = np.sqrt(lo * hi)
        val = achieved(mid)
        level = mid
        if abs(val - target_db) < tol_db:
            break
        # SNER grows with the clip level.
        if val < target_db:
            lo = mid
        else:
            hi = mid
    return float(level), float(val)
