"""Acoustic echo cancellation with an OM-LSA postfilter for residual echo, reverberation and noise."""

from .adaptive import (
    VARIANTS,
    AdaptiveFilterState,
    DtdParams,
    DtdState,
    EchoCanceller,
    FilterDivergedError,
    FilterVariant,
    aec_process_block,
    aec_process_sample,
    detect_double_talk,
    misalignment,
    process_signal,
    proportionate_gains,
)
from .config import ConfigError, PipelineConfig, ScenarioConfig, build_config, load_config
from .interference import (
    InterferenceEstimates,
    NoiseTrackerState,
    ReverbModel,
    T60EstimationError,
    estimate_late_residual_echo,
    estimate_late_reverb,
    estimate_t60,
    estimate_tail_power,
    track_noise,
)
from .metrics import MetricsReport, erle, lsd, segmental_sir, segmental_snr
from .omlsa import (
    OMLSAPostfilter,
    PostfilterParams,
    PostfilterState,
    a_posteriori_sir,
    a_priori_sir_dd,
    apply_postfilter,
    expint_e1,
    lsa_gain,
    omlsa_gain,
    speech_presence_probability,
)
from .pipeline import PipelineError, run_benchmark, run_pipeline, synthesize
from .signals import (
    AudioSignal,
    ImpulseResponse,
    apply_nonlinearity,
    convolve,
    generate_synthetic_air,
    generate_white_noise,
    mix_at_snr,
    perturb_tail,
    read_wav,
    write_wav,
)
from .stft import FrameParams, Spectrogram, STFTTransformer, istft, stft

__version__ = "0.1.0"
