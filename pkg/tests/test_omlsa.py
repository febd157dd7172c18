import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from aecpost.interference import InterferenceEstimates
from aecpost.omlsa import (
    OMLSAPostfilter,
    PostfilterParams,
    PostfilterState,
    a_posteriori_sir,
    a_priori_sir_dd,
    apply_postfilter,
    expint_e1,
    lsa_gain,
    omlsa_gain,
    postfilter_frame,
    speech_presence_probability,
)
from aecpost.signals import AudioSignal
from aecpost.stft import FrameParams, istft, stft

P = FrameParams()
DEFAULT = PostfilterParams()


def _e1_quadrature(v):
    # E1(v) = int_1^inf exp(-v t) / t dt, evaluated independently of the series/CF split.
    val, _ = integrate.quad(lambda t: np.exp(-v * t) / t, 1.0, np.inf, epsabs=0, epsrel=1e-13,
                            limit=500)
    return val


def _noise_spectrogram(seed=0, seconds=4.0, sigma=0.1):
    x = np.random.default_rng(seed).standard_normal(int(16000 * seconds)) * sigma
    spec = stft(AudioSignal(x), P)
    var = np.full(P.n_bins, sigma**2 * np.sum(P.analysis_window() ** 2))
    var[0] *= 2
    var[-1] *= 2
    return spec, np.tile(var, (spec.n_frames, 1))


class TestExpintE1:
    @pytest.mark.parametrize("v", [1e-6, 1e-3, 0.1, 0.5, 0.999, 1.0, 1.001, 2.0, 5.0, 12.0, 30.0])
    def test_against_quadrature(self, v):
        assert expint_e1(v) == pytest.approx(_e1_quadrature(v), rel=1e-8)

    def test_against_mpmath_grid(self):
        v = np.logspace(-6, np.log10(30), 200)
        ref = np.array([float(mpmath.e1(x)) for x in v])
        np.testing.assert_allclose(expint_e1(v), ref, rtol=1e-12)

    def test_reference_value(self):
        assert expint_e1(0.5) == pytest.approx(0.5597736, abs=1e-6)

    def test_small_argument_series(self):
        v = 1e-8
        assert expint_e1(v) == pytest.approx(-np.euler_gamma - np.log(v) + v, rel=1e-12)

    def test_infinity_and_shape(self):
        assert expint_e1(np.inf) == 0.0
        assert expint_e1(np.ones((2, 3))).shape == (2, 3)

    @pytest.mark.parametrize("bad", [0.0, -1.0, np.nan])
    def test_rejects_nonpositive(self, bad):
        with pytest.raises(ValueError):
            expint_e1(bad)


class TestParams:
    @pytest.mark.parametrize("kw", [dict(beta=1.1), dict(xi_min=0.0), dict(g_min=0.0),
                                    dict(g_min=1.5), dict(q_absent=1.0)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            PostfilterParams(**kw)

    def test_defaults(self):
        assert DEFAULT.beta == 0.98
        assert DEFAULT.xi_min == pytest.approx(10 ** -1.5)
        assert DEFAULT.g_min == pytest.approx(10 ** -1.8)
        assert DEFAULT.q_absent == 0.5


class TestAPosteriori:
    def test_values(self):
        np.testing.assert_allclose(a_posteriori_sir([4.0, 0.0, 3.0], [2.0, 1.0, 0.0]),
                                   [2.0, 0.0, 3e12])

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            a_posteriori_sir([1.0], [-1.0])


class TestAPriori:
    def _warm(self, g, gamma):
        return PostfilterState(np.atleast_1d(g), np.atleast_1d(gamma), True)

    def test_first_frame_ml(self):
        xi = a_priori_sir_dd(PostfilterState(), np.array([5.0, 0.5]), DEFAULT)
        np.testing.assert_allclose(xi, [4.0, DEFAULT.xi_min])

    def test_beta_one(self):
        p = PostfilterParams(beta=1.0)
        xi = a_priori_sir_dd(self._warm(0.5, 8.0), np.array([100.0]), p)
        assert xi[0] == 2.0

    def test_beta_zero(self):
        p = PostfilterParams(beta=0.0)
        assert a_priori_sir_dd(self._warm(0.5, 8.0), np.array([5.0]), p)[0] == 4.0

    def test_worked_example(self):
        xi = a_priori_sir_dd(self._warm(0.5, 8.0), np.array([3.0]), DEFAULT)
        assert xi[0] == pytest.approx(0.98 * 0.25 * 8 + 0.02 * 2, rel=1e-15)
        assert xi[0] == pytest.approx(2.0, rel=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(g=st.floats(0.0, 1.0), gp=st.floats(0.0, 1e4), gamma=st.floats(0.0, 1e4))
    def test_floor(self, g, gp, gamma):
        xi = a_priori_sir_dd(self._warm(g, gp), np.array([gamma]), DEFAULT)
        assert xi[0] >= DEFAULT.xi_min


class TestSpeechPresence:
    def test_q_zero(self):
        p = speech_presence_probability(np.array([0.1, 10.0]), np.array([0.0, 5.0]),
                                        PostfilterParams(q_absent=0.0))
        np.testing.assert_array_equal(p, 1.0)

    def test_worked_example(self):
        lam = np.e / 2
        p = speech_presence_probability(1.0, 2.0, DEFAULT)
        assert p == pytest.approx(1 / (1 + 1 / lam), rel=1e-12)
        assert p == pytest.approx(0.576, abs=5e-4)

    def test_gamma_zero_below_prior(self):
        p = speech_presence_probability(0.5, 0.0, DEFAULT)
        assert p < 1 - DEFAULT.q_absent

    def test_no_overflow(self):
        p = speech_presence_probability(np.array([1e6]), np.array([1e12]), DEFAULT)
        assert p[0] == 1.0

    @settings(max_examples=50, deadline=None)
    @given(xi=st.floats(1e-3, 1e3), g1=st.floats(0, 1e3), g2=st.floats(0, 1e3),
           q=st.floats(0.01, 0.99))
    def test_monotone_in_gamma_and_bounded(self, xi, g1, g2, q):
        prm = PostfilterParams(q_absent=q)
        lo, hi = sorted((g1, g2))
        p_lo = speech_presence_probability(xi, lo, prm)
        p_hi = speech_presence_probability(xi, hi, prm)
        assert 0.0 <= p_lo <= p_hi <= 1.0


class TestLsaGain:
    def test_worked_example(self):
        assert lsa_gain(1.0, 1.0) == pytest.approx(0.5 * np.exp(0.5 * _e1_quadrature(0.5)), rel=1e-10)
        assert lsa_gain(1.0, 1.0) == pytest.approx(0.6616, abs=5e-4)

    def test_small_xi(self):
        xi = 1e-6
        v = xi / (1 + xi)
        series = xi / (1 + xi) * np.exp(0.5 * (-np.euler_gamma - np.log(v)))
        g = lsa_gain(xi, 1.0)
        assert 0 < g < 0.01
        assert g == pytest.approx(series, rel=1e-5)

    def test_high_sir_limit(self):
        # The limit needs v = xi*gamma/(1+xi) large too, so that E1(v) vanishes.
        assert lsa_gain(1e8, 1e8) == pytest.approx(1.0, abs=1e-7)
        assert lsa_gain(1e8, 10.0) == pytest.approx(np.exp(0.5 * expint_e1(10.0)), rel=1e-7)

    def test_v_floor_and_cap(self):
        g = lsa_gain(np.array([1e-3]), np.array([0.0]))
        assert np.isfinite(g[0]) and 0 < g[0] <= 1e3

    def test_rejects_nonpositive_xi(self):
        with pytest.raises(ValueError):
            lsa_gain(0.0, 1.0)

    def test_monotone_in_xi_grid(self):
        xi = np.logspace(-2, 2, 60)
        for gamma in np.logspace(-1, 2, 10):
            g = lsa_gain(xi, np.full_like(xi, gamma))
            assert np.all(np.diff(g) > 0)


class TestOmlsaGain:
    def test_endpoints(self):
        np.testing.assert_allclose(omlsa_gain([0.7, 1.5], [1.0, 1.0], DEFAULT), [0.7, 1.0])
        np.testing.assert_allclose(omlsa_gain([0.7], [0.0], DEFAULT), [DEFAULT.g_min])

    def test_geometric_mean_example(self):
        g = omlsa_gain([0.9], [0.5], PostfilterParams(g_min=0.1))
        assert g[0] == pytest.approx(0.3, rel=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(g=st.floats(1e-6, 1e3), p=st.floats(0.0, 1.0))
    def test_bounds(self, g, p):
        out = omlsa_gain([g], [p], DEFAULT)[0]
        assert DEFAULT.g_min <= out <= 1.0


class TestApplyPostfilter:
    def test_zero_interference_passthrough(self, rng):
        x = rng.standard_normal(16000) * 0.1
        spec = stft(AudioSignal(x), P)
        out, g = apply_postfilter(spec, np.zeros(spec.frames.shape), return_gains=True)
        assert np.min(g) >= 1 - 1e-6
        y = istft(out).samples
        sl = slice(P.frame_len, x.size - P.frame_len)
        np.testing.assert_allclose(y[sl], x[sl], atol=1e-9)

    def test_accepts_estimate_objects(self, rng):
        spec, lam = _noise_spectrogram(seconds=0.5)
        est = [InterferenceEstimates(l, np.zeros_like(l), np.zeros_like(l)) for l in lam]
        a = apply_postfilter(spec, est)
        b = apply_postfilter(spec, lam)
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_dimension_mismatch(self):
        spec, lam = _noise_spectrogram(seconds=0.5)
        with pytest.raises(ValueError):
            apply_postfilter(spec, lam[:-1])

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(1e-4, 1e4))
    def test_gain_bounds_random(self, seed, scale):
        r = np.random.default_rng(seed)
        x = r.standard_normal(4096)
        spec = stft(AudioSignal(x), P)
        lam = scale * r.random(spec.frames.shape)
        _, g = apply_postfilter(spec, lam, return_gains=True)
        assert np.all(g >= DEFAULT.g_min) and np.all(g <= 1.0)

    def test_state_updates(self):
        spec, lam = _noise_spectrogram(seconds=0.1)
        state = PostfilterState()
        fg = postfilter_frame(spec.frames[0], lam[0], DEFAULT, state)
        assert state.warm
        np.testing.assert_array_equal(state.prev_gain, fg.gain)
        np.testing.assert_array_equal(state.prev_gamma, fg.gamma)
        assert np.all(fg.xi >= DEFAULT.xi_min)

    def test_stationary_noise_mean_floor(self):
        spec, lam = _noise_spectrogram()
        out = apply_postfilter(spec, lam)
        ratio = out.power.sum() / spec.power.sum()
        assert ratio <= 1.5 * DEFAULT.g_min**2

    def test_residual_noise_floor_percentiles(self):
        spec, lam = _noise_spectrogram()
        out = apply_postfilter(spec, lam)
        r = out.power.sum(axis=1) / spec.power.sum(axis=1)
        lo, hi = np.percentile(r, [10, 90])
        g2 = DEFAULT.g_min**2
        assert 0.25 * g2 <= lo and hi <= 4 * g2

    def test_sinusoid_in_weak_noise(self):
        n = np.arange(16000 * 2)
        k = 40
        tone = np.cos(2 * np.pi * k * n / P.fft_len)
        sigma = np.sqrt(0.5 / 100.0)
        x = tone + np.random.default_rng(0).standard_normal(n.size) * sigma
        spec = stft(AudioSignal(x), P)
        var = np.full(P.n_bins, sigma**2 * np.sum(P.analysis_window() ** 2))
        var[0] *= 2
        var[-1] *= 2
        _, g = apply_postfilter(spec, np.tile(var, (spec.n_frames, 1)), return_gains=True)
        g = g[10:]
        assert np.median(g[:, k]) >= 0.8
        far = np.r_[0:k - 10, k + 10:P.n_bins]
        assert np.median(g[:, far]) <= 2 * DEFAULT.g_min


class TestEstimator:
    def test_transform_matches_function(self):
        spec, lam = _noise_spectrogram(seconds=0.5)
        pf = OMLSAPostfilter().fit()
        out = pf.transform(spec, lam)
        np.testing.assert_array_equal(out.frames, apply_postfilter(spec, lam).frames)
        assert pf.gains_.shape == spec.frames.shape

    def test_rejects_non_spectrogram(self):
        with pytest.raises(TypeError):
            OMLSAPostfilter().transform(np.zeros((3, 257)), np.zeros((3, 257)))

    def test_get_params(self):
        assert OMLSAPostfilter(beta=0.9).get_params()["beta"] == 0.9
