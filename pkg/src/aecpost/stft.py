"""Square-root-Hann weighted overlap-add STFT analysis and synthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .signals import AudioSignal


@dataclass(frozen=True)
class FrameParams:
    frame_len: int = 512
    hop: int = 256
    fft_len: int = 512
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.window != "sqrt_hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.frame_len <= 0 or self.hop <= 0:
            raise ValueError("frame_len and hop must be positive")
        if self.fft_len < self.frame_len:
            raise ValueError("fft_len must be >= frame_len")
        if self.hop * 2 != self.frame_len:
            raise ValueError("only 50% overlap (hop = frame_len / 2) is supported")

    @property
    def n_bins(self):
        return self.fft_len // 2 + 1

    def n_frames(self, n_samples):
        if n_samples < self.frame_len:
            return 0
        return (n_samples - self.frame_len) // self.hop + 1

    def analysis_window(self):
        n = np.arange(self.frame_len)
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.frame_len))

    synthesis_window = analysis_window


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT: ``frames[l, k]`` is bin ``k`` of frame ``l``."""

    frames: np.ndarray
    params: FrameParams
    origin_length: int
    sample_rate: int = 16000

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.ndim != 2 or frames.shape[1] != self.params.n_bins:
            raise ValueError(
                f"frames must have shape (n_frames, {self.params.n_bins}), got {frames.shape}"
            )
        if frames.shape[0] != self.params.n_frames(self.origin_length):
            raise ValueError(
                f"{frames.shape[0]} frames inconsistent with origin_length "
                f"{self.origin_length} and hop {self.params.hop}"
            )
        if not np.all(np.isfinite(frames)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def power(self):
        return self.frames.real**2 + self.frames.imag**2

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def with_frames(self, frames):
        return Spectrogram(frames, self.params, self.origin_length, self.sample_rate)


def stft(signal, params=FrameParams()):
    x = signal.samples
    if x.size < params.frame_len:
        raise ValueError(
            f"signal of {x.size} samples is shorter than one frame ({params.frame_len})"
        )
    n_frames = params.n_frames(x.size)
    windows = np.lib.stride_tricks.sliding_window_view(x, params.frame_len)[::params.hop]
    windows = windows[:n_frames] * params.analysis_window()
    frames = np.fft.rfft(windows, n=params.fft_len, axis=1)
    return Spectrogram(frames, params, x.size, signal.sample_rate)


def istft(spec):
    p = spec.params
    if spec.frames.shape[1] != p.n_bins:
        raise ValueError("spectrogram bin count does not match fft_len")
    blocks = np.fft.irfft(spec.frames, n=p.fft_len, axis=1)[:, : p.frame_len]
    blocks *= p.synthesis_window()
    out = np.zeros(max(spec.origin_length, p.frame_len + p.hop * max(spec.n_frames - 1, 0)))
    for l in range(spec.n_frames):
        out[l * p.hop: l * p.hop + p.frame_len] += blocks[l]
    return AudioSignal(out[: spec.origin_length], spec.sample_rate)


class STFTTransformer(BaseEstimator, TransformerMixin):
    """Estimator wrapper so the transform composes with sklearn pipelines."""

    def __init__(self, frame_len=512, hop=256, fft_len=512):
        self.frame_len = frame_len
        self.hop = hop
        self.fft_len = fft_len

    def fit(self, X=None, y=None):
        self.params_ = FrameParams(self.frame_len, self.hop, self.fft_len)
        return self

    def transform(self, X):
        if not isinstance(X, AudioSignal):
            X = AudioSignal(X)
        return stft(X, self.params_)

    def inverse_transform(self, X):
        return istft(X)
