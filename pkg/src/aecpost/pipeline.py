"""End-to-end runs: scene synthesis, echo cancellation, postfilter, metrics and reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptive import EchoCanceller, misalignment
from .config import ConfigError, PipelineConfig
from .interference import (
    InterferenceEstimates,
    LateReverbTracker,
    NoiseTrackerState,
    ReverbModel,
    T60EstimationError,
    estimate_late_residual_echo,
    estimate_t60,
    estimate_tail_power,
    track_noise,
)
from .metrics import (
    MetricsReport,
    erle,
    lsd,
    segmental_sir,
    segmental_snr,
    steady_state,
    time_to_threshold,
)
from .omlsa import PostfilterState, postfilter_frame
from .signals import (
    AudioSignal,
    ImpulseResponse,
    apply_nonlinearity,
    clip_level_for_sner,
    convolve,
    generate_sparse_air,
    generate_speech_like,
    generate_synthetic_air,
    generate_white_noise,
    perturb_tail,
    sner_db,
    snr_gain,
    write_wav,
)
from .stft import istft, stft

log = logging.getLogger(__name__)

CSV_COLUMNS = ("variant", "environment", "seed", "mean_erle_db", "t20_s", "ss_misalign_db",
               "seg_snr_db", "seg_sir_db", "lsd_db")
RUN_EXTRA_COLUMNS = ("mean_erle_aec_db", "t60_s", "diverged")


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# Scene synthesis
# --------------------------------------------------------------------------


@dataclass
class Scenario:
    """Synthetic microphone signal together with its exact decomposition."""

    far: AudioSignal
    echo: np.ndarray
    near_early: np.ndarray
    near_late: np.ndarray
    noise: np.ndarray
    echo_paths: list
    sner_db: float = float("inf")

    @property
    def sample_rate(self):
        return self.far.sample_rate

    @property
    def near(self):
        return self.near_early + self.near_late

    @property
    def mic(self):
        return AudioSignal(self.echo + self.near_early + self.near_late + self.noise,
                           self.sample_rate)

    def active_path(self, sample):
        path = self.echo_paths[0][1]
        for start, p in self.echo_paths:
            if sample >= start:
                path = p
        return path


def _sub_seeds(seed):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(8)]


def _segmental_noise_gain(target, noise, snr_db, fs):
    """Noise gain that makes the segmental SNR of ``target + g*noise`` equal ``snr_db``."""
    def seg(g):
        return segmental_snr(target, target + g * noise, sample_rate=fs)
    lo, hi = 1e-6, 1e6
    for _ in range(100):
        mid = np.sqrt(lo * hi)
        if seg(mid) > snr_db:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-10:
            break
    return float(np.sqrt(lo * hi))


def synthesize(cfg):
    """Build the scene described by a :class:`ScenarioConfig`."""
    fs = cfg.sample_rate
    n = int(round(cfg.duration_s * fs))
    s_far, s_near, s_echo, s_room, s_noise, s_tail = _sub_seeds(cfg.seed)[:6]

    if cfg.far_signal == "speech":
        far = generate_speech_like(cfg.duration_s, fs, s_far, level=cfg.far_level)
    elif cfg.far_signal == "white":
        far = generate_white_noise(cfg.duration_s, fs, s_far, std=cfg.far_level)
    else:
        far = AudioSignal(np.zeros(n), fs)

    if cfg.echo_sparse_taps > 0:
        air = generate_sparse_air(cfg.echo_length, cfg.echo_sparse_taps, fs, s_echo)
    else:
        air = generate_synthetic_air(cfg.echo_t60, cfg.echo_delay, cfg.echo_length, fs, s_echo,
                                     drr_db=cfg.echo_drr_db)
    air = air.scaled(np.sqrt(10.0 ** (-cfg.erl_db / 10.0) / air.energy))

    speaker = far
    achieved_sner = float("inf")
    if cfg.nonlinearity != "none":
        level = cfg.nl_level
        if level is None:
            level, _ = clip_level_for_sner(far, air, cfg.sner_db, cfg.nonlinearity)
        speaker = apply_nonlinearity(far, cfg.nonlinearity, level)
        achieved_sner = sner_db(convolve(far, air).samples, convolve(speaker, air).samples)

    paths = [(0, air)]
    echo = convolve(speaker, air).samples
    if cfg.tail_change_s is not None:
        start = int(round(cfg.tail_change_s * fs))
        air2 = perturb_tail(air, cfg.tail_change_start, cfg.tail_change_amount, seed=s_tail)
        echo = echo.copy()
        echo[start:] = convolve(speaker, air2).samples[start:]
        paths.append((start, air2))

    near_early = np.zeros(n)
    near_late = np.zeros(n)
    if cfg.near_signal != "none":
        if cfg.near_signal == "speech":
            dry = generate_speech_like(cfg.duration_s, fs, s_near, level=cfg.near_level).samples
        else:
            dry = generate_white_noise(cfg.duration_s, fs, s_near, std=cfg.near_level).samples
        dry = dry.copy()
        dry[: int(round(cfg.near_onset_s * fs))] = 0.0
        dry_sig = AudioSignal(dry, fs)
        if cfg.near_t60 is None:
            near_early = dry
        else:
            room = generate_synthetic_air(cfg.near_t60, cfg.near_delay, cfg.near_length, fs, s_room,
                                          drr_db=cfg.near_drr_db)
            split = min(room.direct_delay + int(round(cfg.early_ms * 1e-3 * fs)), len(room))
            early_taps = np.where(np.arange(len(room)) < split, room.taps, 0.0)
            late_taps = room.taps - early_taps
            near_early = convolve(dry_sig, ImpulseResponse(early_taps, fs, room.direct_delay)).samples
            near_late = convolve(dry_sig, ImpulseResponse(late_taps, fs, room.direct_delay)).samples

    noise = np.zeros(n)
    if cfg.snr_db is not None:
        target = near_early + near_late
        if not np.any(target):
            target = echo
        if np.any(target):
            raw = np.random.default_rng(s_noise).standard_normal(n)
            if cfg.snr_mode == "segmental":
                g = _segmental_noise_gain(target, raw, cfg.snr_db, fs)
            else:
                g = snr_gain(target, raw, cfg.snr_db)
            noise = g * raw

    return Scenario(far, echo, near_early, near_late, noise, paths, achieved_sner)


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


@dataclass
class PipelineResult:
    report: MetricsReport
    scenario: Scenario
    aec_output: np.ndarray
    echo_estimate: np.ndarray
    processed: np.ndarray
    gains: np.ndarray
    components: dict
    erle_aec_trace: np.ndarray
    erle_aec_times: np.ndarray
    estimated_path: np.ndarray | None = None
    reverb_model: ReverbModel | None = None


def _padded_stft(x, params, fs):
    """STFT of ``x`` padded by one frame of zeros on each side so every sample is covered twice."""
    n = x.size
    pad = params.frame_len
    total = n + 2 * pad
    total += (-(total - params.frame_len)) % params.hop
    buf = np.zeros(total)
    buf[pad:pad + n] = x
    return stft(AudioSignal(buf, fs), params)


def _padded_istft(spec, n, params):
    return istft(spec).samples[params.frame_len:params.frame_len + n]


def _reverb_model(cfg, weights, fs, hop):
    pf = cfg.postfilter
    path = ImpulseResponse(weights, fs, int(np.argmax(np.abs(weights))))
    try:
        return estimate_t60(path, fit_range_db=(pf.t60_fit_hi_db, pf.t60_fit_lo_db),
                            compensate_truncation=True, hop=hop)
    except T60EstimationError as exc:
        if pf.t60_fallback is not None:
            log.warning("T60 estimation failed (%s); using fallback %.3g s", exc, pf.t60_fallback)
            return ReverbModel(pf.t60_fallback, hop, fs)
        log.warning("T60 estimation failed (%s); late echo/reverb estimates disabled", exc)
        return None


def _tail_power(cfg, weights, model, params):
    """Injection gain of the late residual echo recursion, relative to the echo estimate power.

    Scalar mode divides the tail proxy by the path energy. Per-bin mode
    uses the spectrum of the last quarter of the path over the spectrum of
    the whole path at the STFT bin frequencies.
    """
    energy = float(np.sum(weights**2))
    if energy <= 0:
        return 0.0
    if cfg.postfilter.w0_mode == "scalar":
        return estimate_tail_power(weights, model) / energy
    n = -(-weights.size // params.fft_len) * params.fft_len
    step = n // params.fft_len
    quarter = np.zeros(weights.size)
    quarter[-(weights.size // 4):] = weights[-(weights.size // 4):]
    q = np.abs(np.fft.rfft(quarter, n))[::step] ** 2
    h = np.abs(np.fft.rfft(weights, n))[::step] ** 2
    return model.frame_decay * q / np.maximum(h, 1e-3 * np.mean(h))


def run_postfilter(cfg, error, echo_estimate, model, w0, fs):
    """Frame loop of the postfilter; returns the per-frame gains and the STFT of ``error``."""
    params = cfg.stft.params()
    stages = cfg.postfilter.stage_set
    pf = cfg.postfilter
    pparams = pf.params()
    e_spec = _padded_stft(error, params, fs)
    n_frames, n_bins = e_spec.frames.shape
    if not stages:
        # Bypass: the interference floor would otherwise attenuate near-silent bins.
        return np.ones((n_frames, n_bins)), e_spec
    y_pow = _padded_stft(echo_estimate, params, fs).power
    n_early = int(round(pf.early_ms * 1e-3 * fs / params.hop))

    tracker = NoiseTrackerState(n_bins, pf.alpha_n, pf.init_frames)
    reverb = LateReverbTracker(n_bins, n_early, pf.z_smoothing)
    state = PostfilterState()
    presence = np.zeros(n_bins)
    lam_r = np.zeros(n_bins)
    zeros = np.zeros(n_bins)
    gains = np.empty((n_frames, n_bins))
    for i in range(n_frames):
        frame = e_spec.frames[i]
        power = frame.real**2 + frame.imag**2
        lam_n = track_noise(tracker, power, presence)
        lam_rev = zeros
        if model is not None:
            lam_r = estimate_late_residual_echo(model, w0, y_pow[i], lam_r)
            reverb.push(np.maximum(power - lam_n - lam_r, 0.0))
            lam_rev, _ = reverb.estimate(model, "DPC" in stages, pf.dpc_factor)
        est = InterferenceEstimates(
            lam_n if "NS" in stages else zeros,
            lam_r if ("RS" in stages and model is not None) else zeros,
            lam_rev if "REVS" in stages else zeros,
        )
        fg = postfilter_frame(frame, est.lambda_total, pparams, state)
        gains[i] = fg.gain
        presence = fg.presence
    return gains, e_spec


def _apply_gains(x, gains, params, fs):
    spec = _padded_stft(x, params, fs)
    return _padded_istft(spec.with_frames(spec.frames * gains), x.size, params)


def run_pipeline(config, write_outputs=True, environment="run"):
    """Run synthesis, echo cancellation, postfilter and evaluation for one configuration."""
    if not isinstance(config, PipelineConfig):
        raise TypeError("config must be a PipelineConfig")
    cfg = config.validate()
    sc = cfg.scenario
    fs = sc.sample_rate
    mcfg = cfg.metrics
    try:
        scen = synthesize(sc)
    except ValueError as exc:
        raise PipelineError("synthesis", str(exc)) from exc
    mic = scen.mic.samples
    n = mic.size

    # Echo cancellation
    diverged = False
    weights = None
    snap_every = max(1, int(round(mcfg.snapshot_s * fs)))
    mis_trace = np.zeros(0)
    mis_times = np.zeros(0)
    if cfg.aec.enabled:
        a = cfg.aec
        ec = EchoCanceller(a.variant, a.n_taps, a.mu, a.delta, a.rho, a.delta_p, a.mu_law,
                           a.alpha, a.order, a.input_power, cfg.dtd.enabled, cfg.dtd.threshold,
                           cfg.dtd.window, cfg.dtd.hangover, snapshot_every=snap_every)
        try:
            ec.fit(scen.far.samples, mic)
        except ValueError as exc:
            raise PipelineError("aec", str(exc)) from exc
        diverged = ec.diverged_
        k = ec.n_processed_
        echo_est = np.zeros(n)
        echo_est[:k] = ec.echo_estimate_[:k]
        error = mic - echo_est
        weights = ec.coef_
        if diverged:
            log.error("adaptive filter diverged after %d samples", k)
        mis = [misalignment(w, scen.active_path(int(i) - 1)) for w, i in
               zip(ec.snapshots_, ec.snapshot_index_)]
        if mis and np.all(np.isfinite(mis)):
            mis_trace = np.asarray(mis)
            mis_times = ec.snapshot_index_ / fs
    else:
        echo_est = np.zeros(n)
        error = mic.copy()
    residual = scen.echo - echo_est

    # Reverberation model and late residual echo injection gain
    params = cfg.stft.params()
    model = None
    w0 = 0.0
    stages = cfg.postfilter.stage_set
    if weights is not None and stages & {"RS", "REVS"} and not diverged:
        model = _reverb_model(cfg, weights, fs, params.hop)
        if model is not None:
            w0 = _tail_power(cfg, weights, model, params)

    gains, _ = run_postfilter(cfg, error, echo_est, model, w0, fs)
    processed = _apply_gains(error, gains, params, fs)
    components = {
        name: _apply_gains(x, gains, params, fs)
        for name, x in (("residual_echo", residual), ("near_early", scen.near_early),
                        ("near_late", scen.near_late), ("noise", scen.noise))
    }

    # Metrics
    kw = dict(window_s=mcfg.erle_window_s, sample_rate=fs,
              converged_fraction=mcfg.converged_fraction)
    erle_pf = erle(scen.echo, components["residual_echo"], **kw)
    erle_aec = erle(scen.echo, residual, **kw)
    seg_kw = dict(frame_s=mcfg.seg_frame_s, clamp_db=mcfg.clamp_db,
                  activity_threshold_db=mcfg.activity_db, sample_rate=fs, floor_db=mcfg.floor_db)
    ref = scen.near_early
    if np.any(ref):
        seg_snr = segmental_snr(ref, processed, **seg_kw)
        interference = components["residual_echo"] + components["noise"] + components["near_late"]
        seg_sir = segmental_sir(ref, processed, interference, **seg_kw)
        try:
            lsd_db = lsd(ref, processed, params, mcfg.activity_db)
        except ValueError:
            lsd_db = float("nan")
    else:
        seg_snr = seg_sir = lsd_db = float("nan")

    report = MetricsReport(
        erle_trace=erle_pf.trace_db,
        mean_erle_db=erle_pf.mean_db,
        seg_snr_db=seg_snr,
        seg_sir_db=seg_sir,
        lsd_db=lsd_db,
        misalignment_trace=mis_trace,
        erle_times=erle_pf.times_s,
        misalignment_times=mis_times,
        mean_erle_aec_db=erle_aec.mean_db,
        t20_s=time_to_threshold(mis_times, mis_trace, mcfg.threshold_db) if mis_trace.size else float("nan"),
        ss_misalign_db=steady_state(mis_trace, mcfg.converged_fraction),
        t60_s=model.t60_s if model is not None else float("nan"),
        diverged=diverged,
    )
    result = PipelineResult(report, scen, error, echo_est, processed, gains, components,
                            erle_aec.trace_db, erle_aec.times_s, weights, model)
    if write_outputs and cfg.outputs.dir:
        write_run_outputs(cfg, result, environment)
    return result


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def _row(variant, environment, seed, report):
    return [variant, environment, seed, report.mean_erle_db, report.t20_s, report.ss_misalign_db,
            report.seg_snr_db, report.seg_sir_db, report.lsd_db]


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_value(v) for v in r])
    return buf.getvalue()


def write_run_outputs(cfg, result, environment="run"):
    out = Path(cfg.outputs.dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        fs = cfg.scenario.sample_rate
        enc = cfg.outputs.encoding
        write_wav(out / cfg.outputs.processed, AudioSignal(result.processed, fs), enc)
        write_wav(out / cfg.outputs.residual, AudioSignal(result.aec_output, fs), enc)
        rep = result.report
        variant = cfg.aec.variant if cfg.aec.enabled else "none"
        row = _row(variant, environment, cfg.scenario.seed, rep) + [
            rep.mean_erle_aec_db, rep.t60_s, rep.diverged]
        (out / cfg.outputs.metrics).write_text(csv_text(CSV_COLUMNS + RUN_EXTRA_COLUMNS, [row]))
    except OSError as exc:
        raise PipelineError("outputs", f"cannot write outputs to {out}: {exc}") from exc


# --------------------------------------------------------------------------
# Benchmark
# --------------------------------------------------------------------------


def environment_config(base, environment):
    """Scenario modifications for a named benchmark environment.

    ``linear``, ``sparse``, ``nonlinear``, ``noisy:<snr_db>``, ``tail_change``
    and ``double_talk``.
    """
    sc = base.scenario
    b = base.bench
    name, _, arg = environment.partition(":")
    if name == "linear" and not arg:
        sc = dataclasses.replace(sc, nonlinearity="none")
    elif name == "sparse" and not arg:
        sc = dataclasses.replace(sc, echo_sparse_taps=b.sparse_taps, echo_length=base.aec.n_taps)
    elif name == "nonlinear" and not arg:
        sc = dataclasses.replace(sc, nonlinearity="hard_clip", sner_db=b.sner_db, nl_level=None)
    elif name == "noisy" and arg:
        try:
            sc = dataclasses.replace(sc, snr_db=float(arg))
        except ValueError:
            raise ConfigError(f"bad SNR in environment {environment!r}") from None
    elif name == "tail_change" and not arg:
        sc = dataclasses.replace(sc, tail_change_s=sc.duration_s / 2)
    elif name == "double_talk" and not arg:
        sc = dataclasses.replace(sc, near_signal="speech", near_onset_s=sc.duration_s / 2)
    else:
        raise ConfigError(f"unknown environment {environment!r}")
    return base.replace(scenario=sc).validate()


def _median(values):
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(np.median(v)) if v.size else float("nan")


@dataclass
class BenchmarkResult:
    rows: list
    summary: list

    def csv(self):
        return csv_text(CSV_COLUMNS, self.rows + self.summary)

    def cell(self, variant, environment, column):
        """Per-seed values of ``column`` for one (variant, environment) cell."""
        j = CSV_COLUMNS.index(column)
        return [r[j] for r in self.rows if r[0] == variant and r[1] == environment]


def run_benchmark(config, out_dir=None):
    """Run every (variant, environment, seed) cell; return rows plus median summaries."""
    b = config.bench
    variants = b.variant_list()
    envs = b.environment_list()
    seeds = b.seed_list()
    if not variants or not envs or not seeds:
        raise ConfigError("bench needs at least one variant, environment and seed")
    env_cfgs = {e: environment_config(config, e) for e in envs}
    rows, summary = [], []
    for v in variants:
        for e in envs:
            cell = []
            for s in seeds:
                c = env_cfgs[e]
                c = c.replace(aec=dataclasses.replace(c.aec, variant=v, enabled=True),
                              scenario=dataclasses.replace(c.scenario, seed=s))
                rep = run_pipeline(c, write_outputs=False).report
                row = _row(v, e, s, rep)
                rows.append(row)
                cell.append(row[3:])
            summary.append([v, e, "median"] + [_median(col) for col in zip(*cell)])
    result = BenchmarkResult(rows, summary)
    if out_dir:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / b.results).write_text(result.csv())
        except OSError as exc:
            raise PipelineError("outputs", f"cannot write {out / b.results}: {exc}") from exc
    return result
