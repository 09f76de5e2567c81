import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal as sps

from fibrenet.signals import (
    FREE_RUNNING_ANCHORS,
    DriftSpec,
    NoiseSpec,
    PhaseTimeline,
    as_fraction,
    combine,
    decimate,
    delay,
    delay_samples,
    drift_process,
    fit_anchored_power_law,
    fit_power_law,
    snap_delay,
    spool_50km_noise,
    stream_key,
    synth_power_law_noise,
)

TAU_50KM = 1.468 * 50e3 / 299_792_458.0


def test_as_fraction_is_exact():
    assert as_fraction("37.5e6") == Fraction(37_500_000)
    assert as_fraction(-75_000_000) == Fraction(-75_000_000)
    assert as_fraction(0.1) == Fraction(0.1)
    assert as_fraction(Fraction(1, 3)) == Fraction(1, 3)
    with pytest.raises(TypeError):
        as_fraction(None)
    with pytest.raises(ValueError):
        as_fraction(math.nan)


@pytest.mark.parametrize("terms", [((1, 1.0),), ((-5, 1.0),), ((-1.5, 1.0),), ((0, -1.0),), ((0, math.inf),)])
def test_noise_spec_rejects_bad_terms(terms):
    with pytest.raises(ValueError):
        NoiseSpec(terms)


def test_noise_spec_band_and_psd():
    with pytest.raises(ValueError):
        NoiseSpec(((0, 1.0),), band=(10.0, 1.0))
    spec = NoiseSpec(((0, 2.0), (-2, 3.0)), band=(0.5, 100.0))
    np.testing.assert_allclose(spec.psd([0.1, 1.0, 10.0, 200.0]), [0.0, 5.0, 2.03, 0.0])
    assert NoiseSpec().is_silent
    assert not NoiseSpec(drift=DriftSpec()).is_silent
    half = spec.scaled(0.5)
    np.testing.assert_allclose(half.psd([1.0]), [2.5])


def test_synthesized_psd_matches_model():
    spec = NoiseSpec(((-2, 1.0), (0, 1e-3)), rng_seed=9)
    fs, n = 200.0, 2 ** 19
    x = synth_power_law_noise(spec, n, fs)
    f, p = sps.welch(x.samples, fs, nperseg=4096)
    band = (f > 0.5) & (f < 80)
    ratio = p[band] / spec.psd(f[band])
    assert np.median(ratio) == pytest.approx(1.0, rel=0.05)
    assert np.all((ratio > 0.5) & (ratio < 2.0))


def test_white_shortcut_has_expected_variance():
    b, fs = 4e-6, 1e4
    x = synth_power_law_noise(NoiseSpec(((0, b),), rng_seed=1), 400_000, fs)
    assert np.var(x.samples) == pytest.approx(b * fs / 2, rel=0.01)


def test_synthesis_is_deterministic_and_streams_are_independent():
    spec = NoiseSpec(((-2, 1.0),), rng_seed=3)
    a = synth_power_law_noise(spec, 4096, 10.0, stream=("seg", 1))
    b = synth_power_law_noise(spec, 4096, 10.0, stream=("seg", 1))
    c = synth_power_law_noise(spec, 4096, 10.0, stream=("seg", 2))
    assert np.array_equal(a.samples, b.samples)
    da, dc = np.diff(a.samples), np.diff(c.samples)
    assert abs(np.corrcoef(da, dc)[0, 1]) < 0.05
    assert stream_key("main-loop") == stream_key(["main-loop"])
    assert stream_key(None) == []


def test_band_without_bins_is_rejected():
    with pytest.raises(ValueError, match="no frequency bin"):
        synth_power_law_noise(NoiseSpec(((0, 1.0),), band=(100.0, 200.0)), 64, 10.0)


def test_snap_delay_applies_one_percent_rule():
    with pytest.raises(ValueError, match="not resolvable"):
        snap_delay(TAU_50KM, 100e3)
    assert snap_delay(TAU_50KM, 90e3) == 22
    assert snap_delay(TAU_50KM / 2, 90e3) == 11
    assert snap_delay(0.0, 90e3) == 0
    with pytest.raises(ValueError):
        snap_delay(-1.0, 10.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), st.integers(0, 60))
def test_delay_is_a_held_shift(values, k):
    x = np.array(values)
    y = delay_samples(x, k)
    assert y.size == x.size
    if k < x.size:
        assert np.array_equal(y[k:], x[: x.size - k])
    assert np.all(y[: min(k, x.size)] == x[0])


def test_delay_requires_grid_multiple():
    x = PhaseTimeline(10.0, 0.0, np.arange(10.0))
    assert np.array_equal(delay(x, 0.3).samples[3:], np.arange(7.0))
    with pytest.raises(ValueError, match="not a multiple"):
        delay(x, 0.25)


@given(st.fractions(-10**9, 10**9), st.fractions(-10**9, 10**9), st.integers(-3, 3))
def test_combine_keeps_offsets_exact(fa, fb, scale):
    a = PhaseTimeline(1.0, 0.0, np.ones(4), fa)
    b = PhaseTimeline(1.0, 0.0, np.full(4, 2.0), fb)
    c = combine([(a, 1), (b, scale)])
    assert c.nominal_offset == fa + scale * fb
    np.testing.assert_array_equal(c.samples, 1.0 + 2.0 * scale)


def test_combine_refuses_mismatched_grids():
    a = PhaseTimeline(1.0, 0.0, np.ones(4))
    with pytest.raises(ValueError):
        combine([(a, 1), (PhaseTimeline(2.0, 0.0, np.ones(4)), 1)])
    with pytest.raises(ValueError):
        combine([])


def test_timeline_is_read_only_and_validated():
    x = PhaseTimeline(1.0, 0.0, [0.0, 1.0])
    with pytest.raises(ValueError):
        x.samples[0] = 3.0
    with pytest.raises(ValueError):
        PhaseTimeline(1.0, 0.0, [0.0, math.nan])
    with pytest.raises(ValueError):
        PhaseTimeline(0.0, 0.0, [0.0])


def test_decimate_averages_blocks():
    x = PhaseTimeline(4.0, 0.0, np.arange(8.0), 5)
    y = decimate(x, 4)
    assert y.sample_rate == 1.0
    np.testing.assert_array_equal(y.samples, [1.5, 5.5])
    assert y.nominal_offset == 5
    with pytest.raises(ValueError):
        decimate(x, 3)


def test_drift_process_is_ramp_plus_sinusoid():
    t = np.linspace(0, 86400, 1001)
    d = drift_process(DriftSpec(2e-3, 0.0), t)
    np.testing.assert_allclose(d, 2e-3 * t)
    s = drift_process(DriftSpec(0.0, 0.5), t, seed=4)
    assert np.max(np.abs(s)) == pytest.approx(0.5, rel=1e-3)
    assert np.array_equal(s, drift_process(DriftSpec(0.0, 0.5), t, seed=4))


def test_anchored_fit_passes_through_anchors():
    terms = fit_anchored_power_law(FREE_RUNNING_ANCHORS)
    spec = NoiseSpec(terms)
    for f, s in FREE_RUNNING_ANCHORS:
        assert spec.psd([f])[0] == pytest.approx(s, rel=1e-9)
    assert sorted(a for a, _ in terms) == [-3, -2]
    default = spool_50km_noise()
    assert dict(default.terms) == pytest.approx(dict(terms))
    np.testing.assert_allclose(spool_50km_noise(scale=2.0).psd([1.0]), [20.0])


def test_least_squares_fit_recovers_mixture():
    f = np.logspace(-2, 3, 80)
    truth = 1e-3 + 0.5 * f ** -2 + 2.0 * f ** -4
    terms = dict(fit_power_law(f, truth))
    assert terms[0] == pytest.approx(1e-3, rel=1e-3)
    assert terms[-2] == pytest.approx(0.5, rel=1e-3)
    assert terms[-4] == pytest.approx(2.0, rel=1e-3)
    with pytest.raises(ValueError):
        fit_power_law([1.0, 2.0], [1.0, -1.0])
