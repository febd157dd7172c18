"""Time-domain adaptive echo cancellation.

Seven update rules share one state layout: LMS, NLMS, FBLMS (overlap-save
block LMS with constrained gradient), PNLMS, MPNLMS, IPNLMS and affine
projection (APA). A Geigel double-talk detector freezes adaptation.

The sample loop runs in a numba kernel; :func:`aec_process_sample` calls
the same kernel with length-one inputs so streaming and batch processing
are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator

from ._validation import check_interval, check_positive, check_same_length, check_signal
from .signals import AudioSignal, ImpulseResponse

VARIANTS = ("LMS", "NLMS", "FBLMS", "PNLMS", "MPNLMS", "IPNLMS", "APA")
_CODES = {name: i for i, name in enumerate(VARIANTS)}
_LMS, _NLMS, _FBLMS, _PNLMS, _MPNLMS, _IPNLMS, _APA = range(7)

DIVERGENCE_LIMIT = 1e6
MAX_APA_ORDER = 8
IPNLMS_EPS = 1e-12
MISALIGNMENT_FLOOR_DB = -300.0


class FilterDivergedError(RuntimeError):
    """Raised when any weight magnitude exceeds :data:`DIVERGENCE_LIMIT`."""


@dataclass(frozen=True)
class FilterVariant:
    """Update rule and its parameters.

    ``delta`` defaults to ``1e-6 * n_taps``. ``input_power`` is the far-end
    power used to scale the LMS and FBLMS step to ``mu / (n_taps * power)``.
    """

    name: str = "NLMS"
    n_taps: int = 1024
    mu: float = 0.5
    delta: float | None = None
    rho: float = 0.01
    delta_p: float = 0.01
    mu_law: float = 1000.0
    alpha: float = -0.75
    order: int = 4
    input_power: float = 0.01

    def __post_init__(self):
        name = self.name.upper()
        if name not in _CODES:
            raise ValueError(f"unknown filter variant {self.name!r}; choose from {VARIANTS}")
        object.__setattr__(self, "name", name)
        if int(self.n_taps) < 1:
            raise ValueError("n_taps must be >= 1")
        object.__setattr__(self, "n_taps", int(self.n_taps))
        check_interval(self.mu, "mu", 0.0, 2.0, closed=(False, False))
        if self.delta is None:
            object.__setattr__(self, "delta", 1e-6 * self.n_taps)
        check_positive(self.delta, "delta")
        check_interval(self.rho, "rho", 0.0, 1.0, closed=(False, True))
        check_positive(self.delta_p, "delta_p")
        check_positive(self.mu_law, "mu_law")
        check_interval(self.alpha, "alpha", -1.0, 1.0, closed=(True, False))
        if not 1 <= int(self.order) <= MAX_APA_ORDER:
            raise ValueError(f"APA order must lie in [1, {MAX_APA_ORDER}]")
        object.__setattr__(self, "order", int(self.order))
        check_positive(self.input_power, "input_power")

    @property
    def code(self):
        return _CODES[self.name]

    @property
    def lms_step(self):
        return self.mu / (self.n_taps * self.input_power)

    def kernel_params(self):
        return np.array([self.mu, self.delta, self.rho, self.delta_p, self.mu_law,
                         self.alpha, self.lms_step])


@dataclass(frozen=True)
class DtdParams:
    threshold: float = 0.5
    window: int = 1024
    hangover: int = 240

    def __post_init__(self):
        check_interval(self.threshold, "threshold", 0.0, 1.0, closed=(False, True))
        if int(self.window) < 1:
            raise ValueError("DTD window must be >= 1 sample")
        if int(self.hangover) < 0:
            raise ValueError("hangover must be >= 0")


class DtdState:
    """Geigel detector state; ``counter`` is the remaining hangover."""

    def __init__(self, threshold=0.5, window=1024, hangover=240):
        self.params = DtdParams(threshold, window, hangover)
        self.counter = 0

    threshold = property(lambda self: self.params.threshold)
    window = property(lambda self: self.params.window)
    hangover = property(lambda self: self.params.hangover)


def detect_double_talk(dtd, mic_sample, far_end_history):
    """Geigel rule: ``|mic| > threshold * max|far-end|`` over the last ``window`` samples.

    ``far_end_history`` is ordered newest first. A detection (re)starts the
    hangover, after which the next ``hangover - 1`` calls also report
    double talk.
    """
    hist = np.asarray(far_end_history, dtype=np.float64)[: dtd.window]
    peak = float(np.max(np.abs(hist))) if hist.size else 0.0
    if abs(mic_sample) > dtd.threshold * peak:
        dtd.counter = max(dtd.hangover - 1, 0)
        return True
    if dtd.counter > 0:
        dtd.counter -= 1
        return True
    return False


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------


@njit(cache=True)
def _prop_gains(code, w, rho, delta_p, mu_law, alpha, out):
    n = w.size
    if code == _IPNLMS:
        l1 = 0.0
        for i in range(n):
            l1 += abs(w[i])
        base = (1.0 - alpha) / (2.0 * n)
        scale = (1.0 + alpha) / (2.0 * l1 + IPNLMS_EPS)
        for i in range(n):
            out[i] = base + scale * abs(w[i])
        return
    fmax = 0.0
    norm = np.log1p(mu_law)
    for i in range(n):
        a = abs(w[i])
        if code == _MPNLMS:
            a = np.log1p(mu_law * a) / norm
        out[i] = a
        if a > fmax:
            fmax = a
    gmin = rho * max(delta_p, fmax)
    total = 0.0
    for i in range(n):
        if out[i] < gmin:
            out[i] = gmin
        total += out[i]
    scale = n / total
    for i in range(n):
        out[i] *= scale


@njit(cache=True)
def _solve_pivot(a, b):
    """Gaussian elimination with partial pivoting; ``a`` and ``b`` are overwritten."""
    n = b.size
    for k in range(n):
        p = k
        for r in range(k + 1, n):
            if abs(a[r, k]) > abs(a[p, k]):
                p = r
        if p != k:
            for c in range(n):
                tmp = a[k, c]
                a[k, c] = a[p, c]
                a[p, c] = tmp
            tmp = b[k]
            b[k] = b[p]
            b[p] = tmp
        piv = a[k, k]
        for r in range(k + 1, n):
            f = a[r, k] / piv
            if f != 0.0:
                for c in range(k, n):
                    a[r, c] -= f * a[k, c]
                b[r] -= f * b[k]
    for k in range(n - 1, -1, -1):
        s = b[k]
        for c in range(k + 1, n):
            s -= a[k, c] * b[c]
        b[k] = s / a[k, k]
    return b


@njit(cache=True)
def _geigel_step(mic, hist, thr, win, hang, cnt):
    peak = 0.0
    for i in range(win):
        v = abs(hist[i])
        if v > peak:
            peak = v
    if abs(mic) > thr * peak:
        cnt[0] = max(hang - 1, 0)
        return True
    if cnt[0] > 0:
        cnt[0] -= 1
        return True
    return False


@njit(cache=True)
def _run_samples(code, w, hist, apa_d, x, d, adapt, fp, order,
                 dtd_on, dtd_thr, dtd_win, dtd_hang, dtd_cnt,
                 snap_every, snap_phase, snaps, n_snaps,
                 y_out, e_out, dt_out):
    """Process ``x``/``d`` sample by sample. Returns ``(n_done, diverged)``."""
    n_taps = w.size
    n_hist = hist.size
    mu = fp[0]
    delta = fp[1]
    rho = fp[2]
    delta_p = fp[3]
    mu_law = fp[4]
    alpha = fp[5]
    lms_step = fp[6]
    g = np.empty(n_taps)
    gram = np.empty((order, order))
    rhs = np.empty(order)
    for t in range(x.size):
        for i in range(n_hist - 1, 0, -1):
            hist[i] = hist[i - 1]
        hist[0] = x[t]
        if code == _APA:
            for j in range(order - 1, 0, -1):
                apa_d[j] = apa_d[j - 1]
            apa_d[0] = d[t]
        y = 0.0
        for i in range(n_taps):
            y += w[i] * hist[i]
        e = d[t] - y
        y_out[t] = y
        e_out[t] = e
        dt = False
        if dtd_on:
            dt = _geigel_step(d[t], hist, dtd_thr, dtd_win, dtd_hang, dtd_cnt)
        dt_out[t] = dt
        wmax = 0.0
        if adapt and not dt and e != 0.0:
            if code == _LMS:
                step = lms_step * e
                for i in range(n_taps):
                    w[i] += step * hist[i]
                    wmax = max(wmax, abs(w[i]))
            elif code == _NLMS:
                energy = 0.0
                for i in range(n_taps):
                    energy += hist[i] * hist[i]
                step = mu * e / (energy + delta)
                for i in range(n_taps):
                    w[i] += step * hist[i]
                    wmax = max(wmax, abs(w[i]))
            elif code == _APA:
                for j in range(order):
                    s = 0.0
                    for i in range(n_taps):
                        s += w[i] * hist[i + j]
                    rhs[j] = apa_d[j] - s
                    for k in range(j, order):
                        s = 0.0
                        for i in range(n_taps):
                            s += hist[i + j] * hist[i + k]
                        gram[j, k] = s
                        gram[k, j] = s
                    gram[j, j] += delta
                a = _solve_pivot(gram, rhs)
                for i in range(n_taps):
                    s = 0.0
                    for j in range(order):
                        s += a[j] * hist[i + j]
                    w[i] += mu * s
                    wmax = max(wmax, abs(w[i]))
            else:
                _prop_gains(code, w, rho, delta_p, mu_law, alpha, g)
                reg = delta
                if code == _IPNLMS:
                    reg = delta * (1.0 - alpha) / (2.0 * n_taps)
                energy = 0.0
                for i in range(n_taps):
                    energy += g[i] * hist[i] * hist[i]
                step = mu * e / (energy + reg)
                for i in range(n_taps):
                    w[i] += step * g[i] * hist[i]
                    wmax = max(wmax, abs(w[i]))
            if not wmax <= DIVERGENCE_LIMIT:
                return t + 1, True
        if snap_every > 0 and (snap_phase + t + 1) % snap_every == 0:
            k = n_snaps[0]
            if k < snaps.shape[0]:
                snaps[k, :] = w
                n_snaps[0] = k + 1
    return x.size, False


@njit(cache=True)
def _geigel_block(far_ext, mic, thr, win, hang, cnt, out):
    """Detector over a block; ``far_ext`` is ``[older history..., block]`` oldest first."""
    offset = far_ext.size - mic.size
    for t in range(mic.size):
        peak = 0.0
        end = offset + t
        for i in range(end, max(end - win, -1), -1):
            v = abs(far_ext[i])
            if v > peak:
                peak = v
        if abs(mic[t]) > thr * peak:
            cnt[0] = max(hang - 1, 0)
            out[t] = True
        elif cnt[0] > 0:
            cnt[0] -= 1
            out[t] = True
        else:
            out[t] = False


# --------------------------------------------------------------------------
# State and per-sample / per-block processing
# --------------------------------------------------------------------------


class AdaptiveFilterState:
    """Weights, far-end history and variant-specific memory for one canceller.

    ``far_end_history`` is ordered newest first and long enough for the
    filter, the APA input matrix and the DTD window. For FBLMS the
    per-sample path buffers far-end and error samples until a block of
    ``n_taps`` is complete, then applies the constrained block gradient.
    """

    def __init__(self, variant=None, dtd=None, weights=None):
        self.variant = variant if variant is not None else FilterVariant()
        self.dtd = dtd
        n = self.variant.n_taps
        self.weights = np.zeros(n) if weights is None else check_signal(weights, "weights").copy()
        if self.weights.size != n:
            raise ValueError(f"weights must have length {n}")
        dtd_window = dtd.window if dtd is not None else 1
        self.far_end_history = np.zeros(max(n + self.variant.order - 1, dtd_window, 2 * n))
        self.apa_desired = np.zeros(self.variant.order)
        self.dtd_counter = np.zeros(1, dtype=np.int64)
        self.adaptation_enabled = True
        self.diverged = False
        self.n_processed = 0
        self._block_err = np.zeros(n)
        self._block_fill = 0

    @property
    def n_taps(self):
        return self.variant.n_taps

    def copy(self):
        new = AdaptiveFilterState.__new__(AdaptiveFilterState)
        new.__dict__ = {k: (v.copy() if isinstance(v, np.ndarray) else v)
                        for k, v in self.__dict__.items()}
        return new


def proportionate_gains(variant, weights):
    """Per-tap step gains for PNLMS, MPNLMS and IPNLMS (ones for the rest)."""
    w = check_signal(weights, "weights")
    out = np.ones(w.size)
    if variant.code in (_PNLMS, _MPNLMS, _IPNLMS):
        _prop_gains(variant.code, w, variant.rho, variant.delta_p, variant.mu_law,
                    variant.alpha, out)
    return out


def _check_alive(state):
    if state.diverged:
        raise FilterDivergedError("filter has diverged; reset the state")


def _run(state, x, d, snap_every=0, snaps=None, n_snaps=None):
    v = state.variant
    dtd = state.dtd
    y = np.empty(x.size)
    e = np.empty(x.size)
    dt = np.zeros(x.size, dtype=np.bool_)
    if snaps is None:
        snaps = np.empty((0, v.n_taps))
        n_snaps = np.zeros(1, dtype=np.int64)
    code = _NLMS if v.code == _FBLMS else v.code
    n_done, diverged = _run_samples(
        code, state.weights, state.far_end_history, state.apa_desired, x, d,
        state.adaptation_enabled and v.code != _FBLMS, v.kernel_params(), v.order,
        dtd is not None, dtd.threshold if dtd else 0.0, dtd.window if dtd else 1,
        dtd.hangover if dtd else 0, state.dtd_counter,
        snap_every, state.n_processed, snaps, n_snaps, y, e, dt)
    state.n_processed += n_done
    if diverged:
        state.diverged = True
    return n_done, y[:n_done], e[:n_done], dt[:n_done]


def aec_process_sample(state, far_end_sample, mic_sample):
    """Filter one sample and adapt. Returns ``(echo_estimate, error)``."""
    _check_alive(state)
    if not (np.isfinite(far_end_sample) and np.isfinite(mic_sample)):
        raise ValueError("non-finite input sample")
    x = np.array([far_end_sample], dtype=np.float64)
    d = np.array([mic_sample], dtype=np.float64)
    _, y, e, dt = _run(state, x, d)
    if state.diverged:
        raise FilterDivergedError(f"weights diverged at sample {state.n_processed}")
    if state.variant.code == _FBLMS:
        state._block_err[state._block_fill] = 0.0 if dt[0] else e[0]
        state._block_fill += 1
        if state._block_fill == state.n_taps:
            _fblms_update(state, state.far_end_history[: 2 * state.n_taps][::-1],
                          state._block_err)
            state._block_fill = 0
    return float(y[0]), float(e[0])


def _fblms_update(state, far_two_blocks, err_block):
    """Constrained overlap-save gradient step; ``far_two_blocks`` is oldest first."""
    if not state.adaptation_enabled:
        return
    n = state.n_taps
    X = np.fft.rfft(far_two_blocks, 2 * n)
    E = np.fft.rfft(np.concatenate([np.zeros(n), err_block]), 2 * n)
    phi = np.fft.irfft(np.conj(X) * E, 2 * n)[:n]
    state.weights += state.variant.lms_step * phi
    if not np.max(np.abs(state.weights)) <= DIVERGENCE_LIMIT:
        state.diverged = True


def aec_process_block(state, far_end_block, mic_block):
    """FBLMS block step via overlap-save fast convolution.

    The output equals direct filtering with the weights held at their
    values from the start of the block; the weights are then updated once.
    """
    _check_alive(state)
    if state.variant.code != _FBLMS:
        raise ValueError("aec_process_block requires the FBLMS variant")
    n = state.n_taps
    x = check_signal(far_end_block, "far_end_block")
    d = check_signal(mic_block, "mic_block")
    if x.size != n or d.size != n:
        raise ValueError(f"block length must equal n_taps ({n})")
    if state._block_fill:
        raise ValueError("a partial block is pending from per-sample processing")
    hist = state.far_end_history
    prev = hist[:n][::-1]
    two = np.concatenate([prev, x])
    X = np.fft.rfft(two, 2 * n)
    W = np.fft.rfft(state.weights, 2 * n)
    y = np.fft.irfft(X * W, 2 * n)[n:]
    e = d - y
    dt = np.zeros(n, dtype=np.bool_)
    if state.dtd is not None:
        w = state.dtd.window
        older = hist[: max(w - 1, 0)][::-1]
        _geigel_block(np.concatenate([older, x]), d, state.dtd.threshold, w,
                      state.dtd.hangover, state.dtd_counter, dt)
    hist[n:] = hist[:-n].copy()
    hist[:n] = x[::-1]
    state.n_processed += n
    _fblms_update(state, two, np.where(dt, 0.0, e))
    if state.diverged:
        raise FilterDivergedError(f"weights diverged at sample {state.n_processed}")
    return y, e


def misalignment(weights, true_air):
    """Normalized misalignment ``20 log10(|w - h| / |h|)`` over the first ``len(w)`` taps."""
    w = weights.weights if isinstance(weights, AdaptiveFilterState) else np.asarray(weights)
    h = true_air.taps if isinstance(true_air, ImpulseResponse) else np.asarray(true_air)
    if h.size < w.size:
        h = np.concatenate([h, np.zeros(w.size - h.size)])
    h = h[: w.size]
    hn = np.linalg.norm(h)
    if hn == 0:
        raise ValueError("true echo path has zero norm")
    dist = np.linalg.norm(w - h)
    if dist == 0:
        return MISALIGNMENT_FLOOR_DB
    return max(20.0 * np.log10(dist / hn), MISALIGNMENT_FLOOR_DB)


# --------------------------------------------------------------------------
# Batch processing
# --------------------------------------------------------------------------


@dataclass
class CancellerOutput:
    echo_estimate: np.ndarray
    error: np.ndarray
    double_talk: np.ndarray
    n_processed: int
    diverged: bool
    snapshots: np.ndarray
    snapshot_index: np.ndarray


def process_signal(state, far_end, mic, snapshot_every=0):
    """Run a whole signal through ``state``; stops early on divergence.

    Weight snapshots are taken every ``snapshot_every`` samples, counted
    from the start of the state's lifetime.
    """
    _check_alive(state)
    x = check_signal(far_end, "far_end", allow_empty=True)
    d = check_signal(mic, "mic", allow_empty=True)
    check_same_length(x, d, names=("far_end", "mic"))
    n = state.n_taps
    start = state.n_processed
    n_snap_max = (start + x.size) // snapshot_every - start // snapshot_every if snapshot_every else 0
    snaps = np.zeros((n_snap_max, n))
    n_snaps = np.zeros(1, dtype=np.int64)
    if state.variant.code != _FBLMS:
        n_done, y, e, dt = _run(state, x, d, snapshot_every, snaps, n_snaps)
    else:
        y, e, dt, n_done = _process_fblms(state, x, d, snapshot_every, snaps, n_snaps)
    k = int(n_snaps[0])
    idx = (np.arange(1, k + 1) + start // snapshot_every) * snapshot_every if snapshot_every else np.empty(0, int)
    return CancellerOutput(y, e, dt, n_done, state.diverged, snaps[:k], idx - start)


def _process_fblms(state, x, d, snap_every, snaps, n_snaps):
    n = state.n_taps
    ys, es, dts = [], [], []
    pos = 0
    # per-sample path until block aligned
    while pos < x.size and state._block_fill:
        y, e = aec_process_sample(state, x[pos], d[pos])
        ys.append([y])
        es.append([e])
        dts.append([False])
        pos += 1
    while pos + n <= x.size:
        t0 = state.n_processed
        try:
            y, e = aec_process_block(state, x[pos:pos + n], d[pos:pos + n])
        except FilterDivergedError:
            break
        ys.append(y)
        es.append(e)
        dts.append(np.zeros(n, dtype=bool))
        pos += n
        if snap_every:
            for t in range(t0 + 1, t0 + n + 1):
                if t % snap_every == 0 and n_snaps[0] < snaps.shape[0]:
                    snaps[n_snaps[0]] = state.weights
                    n_snaps[0] += 1
    if not state.diverged:
        while pos < x.size:
            y, e = aec_process_sample(state, x[pos], d[pos])
            ys.append([y])
            es.append([e])
            dts.append([False])
            pos += 1
    cat = lambda parts, dt=float: np.concatenate(parts) if parts else np.empty(0, dt)
    return cat(ys), cat(es), cat(dts, bool), pos


class EchoCanceller(BaseEstimator):
    """Adaptive echo canceller with an sklearn-style interface.

    ``fit(far_end, mic)`` adapts from zero weights over the whole signal and
    stores the echo estimate and error; ``predict(far_end)`` filters with
    the frozen final weights.

    Parameters
    ----------
    variant : str
        One of ``LMS, NLMS, FBLMS, PNLMS, MPNLMS, IPNLMS, APA``.
    n_taps : int
        Adaptive filter length.
    mu : float
        Step size in (0, 2).
    input_power : float or None
        Far-end power for the LMS/FBLMS step scaling; ``None`` measures it
        on the signal passed to ``fit``.
    dtd : bool
        Gate adaptation with the Geigel double-talk detector.
    snapshot_every : int
        Store a copy of the weights every this many samples (0 disables).
    """

    def __init__(self, variant="NLMS", n_taps=1024, mu=0.5, delta=None, rho=0.01,
                 delta_p=0.01, mu_law=1000.0, alpha=-0.75, order=4, input_power=None,
                 dtd=True, dtd_threshold=0.5, dtd_window=1024, dtd_hangover=240,
                 snapshot_every=0):
        self.variant = variant
        self.n_taps = n_taps
        self.mu = mu
        self.delta = delta
        self.rho = rho
        self.delta_p = delta_p
        self.mu_law = mu_law
        self.alpha = alpha
        self.order = order
        self.input_power = input_power
        self.dtd = dtd
        self.dtd_threshold = dtd_threshold
        self.dtd_window = dtd_window
        self.dtd_hangover = dtd_hangover
        self.snapshot_every = snapshot_every

    def _make_state(self, x):
        power = self.input_power
        if power is None:
            power = float(np.mean(x**2)) if x.size and np.any(x) else 0.01
        v = FilterVariant(self.variant, self.n_taps, self.mu, self.delta, self.rho,
                          self.delta_p, self.mu_law, self.alpha, self.order, power)
        dtd = DtdParams(self.dtd_threshold, self.dtd_window, self.dtd_hangover) if self.dtd else None
        return AdaptiveFilterState(v, dtd)

    def fit(self, X, y):
        x = _as_array(X, "far_end")
        d = _as_array(y, "mic")
        self.state_ = self._make_state(x)
        return self._consume(x, d)

    def partial_fit(self, X, y):
        x = _as_array(X, "far_end")
        d = _as_array(y, "mic")
        if not hasattr(self, "state_"):
            self.state_ = self._make_state(x)
        return self._consume(x, d)

    def _consume(self, x, d):
        out = process_signal(self.state_, x, d, self.snapshot_every)
        self.echo_estimate_ = out.echo_estimate
        self.error_ = out.error
        self.double_talk_ = out.double_talk
        self.n_processed_ = out.n_processed
        self.diverged_ = out.diverged
        self.snapshots_ = out.snapshots
        self.snapshot_index_ = out.snapshot_index
        self.coef_ = self.state_.weights.copy()
        return self

    def fit_transform(self, X, y):
        return self.fit(X, y).error_

    def predict(self, X):
        x = _as_array(X, "far_end")
        return np.convolve(x, self.coef_)[: x.size]

    def transform(self, X, y):
        d = _as_array(y, "mic")
        return d - self.predict(X)

    def score(self, X, y):
        """ERLE (dB) of the frozen filter on ``(far_end, echo)``."""
        d = _as_array(y, "mic")
        r = d - self.predict(X)
        return float(10.0 * np.log10(np.sum(d**2) / max(np.sum(r**2), 1e-300)))


def _as_array(x, name):
    if isinstance(x, AudioSignal):
        return np.asarray(x.samples, dtype=np.float64)
    return check_signal(x, name)


__all__ = [
    "VARIANTS", "FilterVariant", "DtdParams", "DtdState", "AdaptiveFilterState",
    "FilterDivergedError", "EchoCanceller", "aec_process_sample", "aec_process_block",
    "detect_double_talk", "misalignment", "proportionate_gains", "process_signal",
]
