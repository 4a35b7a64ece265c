import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gesfi import dsp
from gesfi.core import CsiRecord, SampleMeta
from gesfi.dsp import CsiRatioSeries


def _rec(data, fs=1000.0):
    return CsiRecord(np.asarray(data, dtype=complex), fs, 0.0517, SampleMeta("g"))


def _series(values, fs=1000.0):
    return CsiRatioSeries(np.atleast_2d(values), (0, 1), fs)


# antenna scores and pair selection

def test_constant_amplitude_scores_zero():
    data = 2.0 * np.exp(1j * np.linspace(0, 3, 40))[None, None, :].repeat(3, 0).repeat(2, 1)
    assert np.allclose(dsp.antenna_scores(data), 0.0)


def test_score_hand_computed():
    data = np.array([[[1.0, 3.0]], [[1.0, 1.0]]])
    assert dsp.antenna_score(data, 0) == pytest.approx(0.5)
    assert dsp.antenna_score(data, 1) == 0.0


def test_zero_subcarrier_rejected():
    data = np.ones((2, 3, 10), complex)
    data[1, 2] = 0
    with pytest.raises(dsp.DegenerateAntennaError):
        dsp.antenna_scores(data)


def _with_scores(scores, T=64):
    # amplitude alternates 1 -/+ x, so var/mean = x**2 exactly
    t = np.arange(T)
    rows = [1.0 + np.sqrt(s) * np.where(t % 2, 1.0, -1.0) for s in scores]
    return np.array(rows)[:, None, :].astype(complex)


@pytest.mark.parametrize("scores,pair", [([0.5, 0.1, 0.9], (2, 1)), ([0.9, 0.1], (0, 1)), ([0.3, 0.3], (0, 1))])
def test_select_pair(scores, pair):
    data = _with_scores(scores)
    assert np.allclose(dsp.antenna_scores(data), scores)
    assert dsp.select_antenna_pair(data) == pair


def test_all_equal_scores_three_antennas():
    assert dsp.select_antenna_pair(_with_scores([0.2, 0.2, 0.2])) == (0, 2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(1, 4), st.integers(2, 20)),
              elements=st.floats(0.01, 100.0)))
def test_scores_match_direct_formula(amp):
    h = amp * np.exp(1j * 0.3)
    m = np.abs(h)
    expected = np.array([np.mean([np.var(m[a, c]) / np.mean(m[a, c]) for c in range(m.shape[1])])
                         for a in range(m.shape[0])])
    got = dsp.antenna_scores(h)
    assert np.allclose(got, expected, rtol=1e-12, atol=1e-15)
    num, den = dsp.select_antenna_pair(h)
    assert got[num] == got.max() and got[den] == got.min() and num != den


# CSI ratio

def test_ratio_identity(rng):
    h = rng.normal(size=(1, 4, 30)) + 1j * rng.normal(size=(1, 4, 30)) + 3
    r = dsp.csi_ratio(_rec(np.concatenate([h, h])), (0, 1))
    assert np.allclose(r.values, 1.0)


def test_ratio_cancels_common_phase(rng):
    h = rng.normal(size=(2, 8, 200)) + 1j * rng.normal(size=(2, 8, 200)) + 2
    theta = rng.uniform(0, 2 * np.pi, 200)
    clean = dsp.csi_ratio(_rec(h), (0, 1)).values
    noisy = dsp.csi_ratio(_rec(h * np.exp(-1j * theta)), (0, 1)).values
    assert np.max(np.abs(noisy - clean) / np.abs(clean)) <= 1e-9


def test_ratio_denominator_zero():
    h = np.ones((2, 3, 20), complex)
    h[1, 2, 7] = 0
    with pytest.raises(dsp.DenominatorUnderflowError, match="subcarrier 2, time 7"):
        dsp.csi_ratio(_rec(h), (0, 1))


def test_ratio_bad_pair():
    with pytest.raises(ValueError):
        dsp.csi_ratio(_rec(np.ones((2, 1, 4))), (1, 1))


# phase

def test_phase_of_one_is_zero():
    assert np.all(dsp.extract_phase(_series(np.ones((3, 50), complex))) == 0)


def test_phase_ramp():
    t = np.arange(100)
    assert np.max(np.abs(dsp.extract_phase(_series(np.exp(1j * 0.1 * t)))[0] - 0.1 * t)) <= 1e-6


def test_phase_half_turns_unwrap_monotonically():
    v = np.array([1, 1j, -1, -1j, 1, 1j, -1], complex)  # +pi/2 steps
    assert np.allclose(np.diff(dsp.extract_phase(_series(v))[0]), np.pi / 2)
    flip = np.array([1, -1, 1, -1], complex)  # exactly pi steps resolve to -pi
    assert np.allclose(np.diff(dsp.unwrap_phase(np.angle(flip))), -np.pi)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-0.99 * np.pi, 0.99 * np.pi)))
def test_unwrap_recovers_slow_phase(steps):
    phase = np.concatenate([[0.0], np.cumsum(steps)])
    got = dsp.extract_phase(_series(np.exp(1j * phase)))[0]
    assert np.allclose(got, phase, atol=1e-9)


# high-pass

def test_highpass_kills_constant():
    out = dsp.highpass(_series(np.full(1000, 2 + 1j)), 2.0)
    assert np.max(np.abs(out.values[0, 200:-200])) <= 1e-2 * abs(2 + 1j)


def test_highpass_keeps_50hz():
    t = np.arange(2000) / 1000.0
    x = np.exp(2j * np.pi * 50 * t)
    out = dsp.highpass(_series(x), 2.0).values[0, 300:-300]
    assert np.abs(out).mean() == pytest.approx(1.0, rel=0.05)


@pytest.mark.parametrize("cutoff", [0.0, -1.0, 500.0, 800.0])
def test_highpass_bad_cutoff(cutoff):
    with pytest.raises(ValueError):
        dsp.highpass(_series(np.ones(100, complex)), cutoff)


# spectrogram

@pytest.mark.parametrize("f0", [20.0, -20.0, 47.0, -3.9])
def test_dfs_peak(f0):
    t = np.arange(1000) / 1000.0
    spec = dsp.dfs_spectrogram(_series(np.exp(2j * np.pi * f0 * t)))
    step = spec.frequencies[1] - spec.frequencies[0]
    assert abs(dsp.peak_frequency(spec) - f0) <= step
    assert step == pytest.approx(1000 / 256)


def test_dfs_axis_symmetric_and_shapes():
    spec = dsp.dfs_spectrogram(_series(np.zeros(1000, complex)))
    assert np.allclose(spec.frequencies, -spec.frequencies[::-1])
    assert spec.power.shape == (255, (1000 - 256) // 16 + 1)
    assert np.all(spec.power == 0)
    assert spec.frame_times[0] == pytest.approx(0.128)


def test_dfs_too_short():
    with pytest.raises(dsp.RecordTooShortError, match="record too short"):
        dsp.dfs_spectrogram(_series(np.ones(100, complex)))


# rendering

def test_constant_view_renders_uniform():
    img = dsp.render_input([("c", np.full((10, 10), 3.0))], size=16)
    assert img.pixels.shape == (3, 16, 16)
    flat = img.pixels.reshape(3, -1)
    assert np.allclose(flat, flat[:, :1])
    assert np.allclose(flat[:, 0], dsp.colorize(np.zeros(1))[0], atol=1e-6)


def test_views_normalized_independently():
    a = np.linspace(0, 10, 100).reshape(10, 10)
    b = np.linspace(0, 1000, 100).reshape(10, 10)
    assert np.allclose(dsp.minmax(a), dsp.minmax(b))
    img = dsp.render_input([("a", a), ("b", b)], size=20)
    assert np.allclose(img.pixels[:, :, :10], img.pixels[:, :, 10:], atol=1e-6)


def test_twelve_tiles():
    views = [(f"v{i}", np.random.default_rng(i).random((20, 30))) for i in range(12)]
    img = dsp.render_input(views, size=224)
    assert img.pixels.shape == (3, 224, 224) and len(img.layout) == 12
    assert img.pixels.min() >= 0 and img.pixels.max() <= 1


def test_grid_too_small():
    with pytest.raises(dsp.LayoutError):
        dsp.render_input([(str(i), np.ones((4, 4))) for i in range(5)], grid=(2, 2))
    with pytest.raises(dsp.LayoutError):
        dsp.render_input([("bad", np.ones(4))])
