"""Flat ``section.key = value`` configuration files and the typed run configuration."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adaptive import VARIANTS, DtdParams, FilterVariant
from .omlsa import PostfilterParams
from .stft import FrameParams

STAGES = ("NS", "RS", "REVS", "DPC")
NONLINEARITIES = ("none", "hard_clip", "soft_saturation")
SIGNAL_KINDS = ("speech", "white", "none")


class ConfigError(ValueError):
    """Malformed, unknown or inconsistent configuration entry."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs of the synthetic acoustic scene.

    Levels are RMS amplitudes (speech RMS over its active samples). The
    echo path is scaled so that its energy equals ``-erl_db``. ``snr_db``
    sets the background noise relative to the near-end speech at the
    microphone, or relative to the echo when there is no near-end speech;
    ``None`` disables noise.
    """

    seed: int = 0
    duration_s: float = 20.0
    sample_rate: int = 16000
    far_signal: str = "speech"
    far_level: float = 0.1
    near_signal: str = "none"
    near_level: float = 0.05
    near_onset_s: float = 0.0
    echo_t60: float = 0.3
    echo_delay: int = 32
    echo_length: int = 4096
    echo_drr_db: float = 0.0
    echo_sparse_taps: int = 0
    erl_db: float = 12.0
    near_t60: float | None = None
    near_delay: int = 0
    near_length: int = 4096
    near_drr_db: float = 0.0
    early_ms: float = 48.0
    snr_db: float | None = 30.0
    snr_mode: str = "global"
    nonlinearity: str = "none"
    nl_level: float | None = None
    sner_db: float | None = None
    tail_change_s: float | None = None
    tail_change_start: float = 0.25
    tail_change_amount: float = 0.5

    def validate(self):
        if self.duration_s <= 0:
            raise ConfigError("scenario.duration_s must be positive")
        if self.far_signal not in SIGNAL_KINDS:
            raise ConfigError(f"scenario.far_signal must be one of {SIGNAL_KINDS}")
        if self.near_signal not in SIGNAL_KINDS:
            raise ConfigError(f"scenario.near_signal must be one of {SIGNAL_KINDS}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"scenario.nonlinearity must be one of {NONLINEARITIES}")
        if self.nonlinearity != "none" and self.nl_level is None and self.sner_db is None:
            raise ConfigError("a nonlinearity needs scenario.nl_level or scenario.sner_db")
        if self.nl_level is not None and self.nl_level <= 0:
            raise ConfigError("scenario.nl_level must be positive")
        if self.snr_db is not None and not abs(self.snr_db) < float("inf"):
            raise ConfigError("scenario.snr_db must be finite")
        if self.snr_mode not in ("global", "segmental"):
            raise ConfigError("scenario.snr_mode must be 'global' or 'segmental'")
        if self.echo_length <= self.echo_delay:
            raise ConfigError("scenario.echo_length must exceed scenario.echo_delay")
        if self.near_t60 is not None and self.near_length <= self.near_delay:
            raise ConfigError("scenario.near_length must exceed scenario.near_delay")
        if self.tail_change_s is not None and not 0 < self.tail_change_s < self.duration_s:
            raise ConfigError("scenario.tail_change_s must lie inside the run")


@dataclass(frozen=True)
class AecConfig:
    enabled: bool = True
    variant: str = "NLMS"
    n_taps: int = 1024
    mu: float = 0.5
    # Sized for speech-like far-end signals; None gives the filter default 1e-6 * n_taps.
    delta: float | None = 1.0
    rho: float = 0.01
    delta_p: float = 0.01
    mu_law: float = 1000.0
    alpha: float = -0.75
    order: int = 4
    input_power: float | None = None

    def variant_spec(self, input_power=0.01):
        return FilterVariant(self.variant, self.n_taps, self.mu, self.delta, self.rho,
                             self.delta_p, self.mu_law, self.alpha, self.order,
                             self.input_power if self.input_power is not None else input_power)


@dataclass(frozen=True)
class DtdConfig:
    enabled: bool = True
    threshold: float = 0.5
    window: int = 1024
    hangover: int = 240

    def params(self):
        return DtdParams(self.threshold, self.window, self.hangover)


@dataclass(frozen=True)
class PostfilterConfig:
    stages: str = "NS,RS,REVS"
    beta: float = 0.98
    xi_min_db: float = -15.0
    g_min_db: float = -18.0
    q_absent: float = 0.5
    alpha_n: float = 0.95
    init_frames: int = 10
    z_smoothing: float = 0.7
    early_ms: float = 48.0
    dpc_factor: float = 1.0
    w0_mode: str = "scalar"
    t60_fit_hi_db: float = -1.0
    t60_fit_lo_db: float = -8.0
    t60_fallback: float | None = None

    @property
    def stage_set(self):
        return parse_stages(self.stages)

    def params(self):
        return PostfilterParams(self.beta, 10.0 ** (self.xi_min_db / 10.0),
                                10.0 ** (self.g_min_db / 10.0), self.q_absent)


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    hop: int = 256
    fft_len: int = 512

    def params(self):
        return FrameParams(self.frame_len, self.hop, self.fft_len)


@dataclass(frozen=True)
class MetricsConfig:
    erle_window_s: float = 0.1
    snapshot_s: float = 0.01
    converged_fraction: float = 0.25
    seg_frame_s: float = 0.032
    clamp_db: float = 35.0
    floor_db: float = -10.0
    activity_db: float = 40.0
    threshold_db: float = -20.0


@dataclass(frozen=True)
class OutputConfig:
    dir: str | None = None
    processed: str = "processed.wav"
    residual: str = "residual.wav"
    metrics: str = "metrics.csv"
    encoding: str = "float32"


@dataclass(frozen=True)
class BenchConfig:
    variants: str = "NLMS"
    environments: str = "linear"
    seeds: str = "3"
    sparse_taps: int = 8
    sner_db: float = 20.0
    results: str = "bench.csv"

    def variant_list(self):
        out = [v.strip().upper() for v in self.variants.split(",") if v.strip()]
        for v in out:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        return out

    def environment_list(self):
        return [e.strip() for e in self.environments.split(",") if e.strip()]

    def seed_list(self):
        """``"3"`` means seeds 0, 1, 2; a comma list (``"7,"`` for one) is taken literally."""
        try:
            if "," not in self.seeds:
                return list(range(int(self.seeds)))
            return [int(p) for p in self.seeds.split(",") if p.strip()]
        except ValueError as exc:
            raise ConfigError(f"bench.seeds: {exc}") from None


@dataclass(frozen=True)
class PipelineConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    aec: AecConfig = field(default_factory=AecConfig)
    dtd: DtdConfig = field(default_factory=DtdConfig)
    postfilter: PostfilterConfig = field(default_factory=PostfilterConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self):
        self.scenario.validate()
        stages = self.postfilter.stage_set
        if self.aec.enabled:
            if self.aec.variant not in VARIANTS:
                raise ConfigError(f"unknown variant {self.aec.variant!r}; expected one of {VARIANTS}")
            try:
                self.aec.variant_spec()
                self.dtd.params()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        elif stages & {"RS", "REVS", "DPC"}:
            raise ConfigError("stages RS/REVS/DPC need the echo canceller (aec.enabled)")
        if "DPC" in stages and "REVS" not in stages:
            raise ConfigError("stage DPC modifies REVS and needs it enabled")
        if self.postfilter.w0_mode not in ("scalar", "per_bin"):
            raise ConfigError("postfilter.w0_mode must be 'scalar' or 'per_bin'")
        if self.outputs.encoding not in ("pcm16", "float32"):
            raise ConfigError("outputs.encoding must be pcm16 or float32")
        try:
            self.stft.params()
            self.postfilter.params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)

    def with_values(self, mapping):
        """Copy with dotted ``section.key`` entries overridden (values as text or typed)."""
        return build_config(mapping, base=self)


def parse_stages(mask):
    if mask is None:
        return frozenset()
    text = mask.strip()
    if text.lower() in ("", "none", "off"):
        return frozenset()
    stages = {s.strip().upper() for s in text.replace("+", ",").split(",") if s.strip()}
    unknown = stages - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown postfilter stage(s) {sorted(unknown)}; expected {STAGES}")
    return frozenset(stages)


def parse_config_text(text):
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {key!r} must look like section.key")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def load_config(path, overrides=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    entries = parse_config_text(text)
    entries.update(overrides or {})
    return build_config(entries)


def _coerce(text, hint, key):
    if not isinstance(text, str):
        return text
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if text.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def build_config(entries, base=None):
    """Build a validated :class:`PipelineConfig` from dotted entries."""
    base = base or PipelineConfig()
    grouped = {}
    for key, value in entries.items():
        section, _, name = key.partition(".")
        grouped.setdefault(section, {})[name] = value
    sections = {}
    for section, values in grouped.items():
        if section not in {f.name for f in dataclasses.fields(PipelineConfig)}:
            raise ConfigError(f"unknown config section {section!r}")
        current = getattr(base, section)
        hints = typing.get_type_hints(type(current))
        known = {f.name for f in dataclasses.fields(current)}
        typed = {}
        for name, value in values.items():
            if name not in known:
                raise ConfigError(f"unknown config key {section}.{name}")
            typed[name] = _coerce(value, hints[name], f"{section}.{name}")
        sections[section] = dataclasses.replace(current, **typed)
    return dataclasses.replace(base, **sections).validate()

