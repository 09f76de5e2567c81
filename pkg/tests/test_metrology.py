import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from fibrenet.metrology import (
    NU_0,
    AllanDeviation,
    FreqSeries,
    LambdaCounter,
    PhaseNoisePSD,
    PowerLawNoiseModel,
    Spectrum,
    StabilityCurve,
    accuracy,
    band_average,
    detect_cycle_slips,
    f_factor,
    lambda_count,
    loglog_slope,
    mdev,
    oadev,
    octave_taus,
    predict_mdev,
    read_csv_columns,
    report_taus,
    stability_report,
    welch_psd,
    write_freq_series_csv,
    write_psd_csv,
    write_stability_csv,
)
from fibrenet.optics import BeatNote
from fibrenet.signals import NoiseSpec, PhaseTimeline, synth_power_law_noise
from oracles import brute_mdev, brute_oadev


series64 = arrays(np.float64, 64, elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))


@given(series64, st.sampled_from([0.5, 1.0, 2.0]))
def test_oadev_matches_definition(y, gate):
    fs = FreqSeries(gate, y)
    ms = [1, 2, 4, 8]
    got = oadev(fs, [m * gate for m in ms]).values
    want = np.array([brute_oadev(y, m) for m in ms])
    scale = max(np.max(np.abs(y)), 1e-300)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12 * scale)


@given(series64)
def test_mdev_matches_definition(y):
    fs = FreqSeries(1.0, y)
    ms = [1, 2, 4, 8]
    got = mdev(fs, ms).values
    want = np.array([brute_mdev(y, m) for m in ms])
    scale = max(np.max(np.abs(y)), 1e-300)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12 * scale)


def test_mdev_equals_oadev_at_unit_averaging(rng):
    y = FreqSeries(1.0, rng.standard_normal(200))
    assert mdev(y, [1]).values[0] == pytest.approx(oadev(y, [1]).values[0], rel=1e-14)


def test_counts_reported():
    y = FreqSeries(1.0, np.arange(64.0))
    assert oadev(y, [1, 8]).counts.tolist() == [63, 49]
    assert mdev(y, [1, 8]).counts.tolist() == [63, 42]


def test_tau_must_be_gate_multiple():
    with pytest.raises(ValueError, match="multiple of the gate"):
        mdev(FreqSeries(1.0, np.zeros(64)), [1.5])


def test_constant_series_has_zero_deviation():
    y = FreqSeries(1.0, np.full(100, 3e-15))
    # zero up to rounding of the cumulative phase
    assert np.all(mdev(y, [1, 2, 4]).values < 1e-12 * 3e-15)
    assert np.all(oadev(y, [1, 2, 4]).values < 1e-12 * 3e-15)


@pytest.mark.parametrize("weighting", ["lambda", "pi"])
@pytest.mark.parametrize("offset_hz", [0.0, 0.37, -12.5])
def test_counter_recovers_constant_frequency(weighting, offset_hz):
    fs = 100.0
    t = np.arange(2000) / fs
    x = PhaseTimeline(fs, 0.0, 2 * np.pi * offset_hz * t)
    y = lambda_count(x, 1.0, NU_0, weighting)
    np.testing.assert_allclose(y.samples, offset_hz / NU_0, rtol=1e-12, atol=1e-30)


def test_lambda_counter_recovers_linear_ramp_at_block_midpoints():
    fs, gate, a = 50.0, 2.0, 0.3  # a: frequency ramp, Hz/s
    t = np.arange(1000) / fs
    x = PhaseTimeline(fs, 0.0, np.pi * a * t * t)
    y = lambda_count(x, gate, NU_0)
    m0 = int(gate * fs)
    centres = t[: (t.size // m0) * m0].reshape(-1, m0).mean(axis=1)
    want = a * (centres[1:] + centres[:-1]) / 2 / NU_0
    np.testing.assert_allclose(y.samples, want, rtol=1e-12)
    # the Pi counter reads the same ramp at gate centres
    yp = lambda_count(x, gate, NU_0, "pi")
    edges = t[::m0]
    np.testing.assert_allclose(yp.samples, a * (edges[1:] + edges[:-1]) / 2 / NU_0, rtol=1e-12)


def test_counter_rejects_bad_gate():
    x = PhaseTimeline(10.0, 0.0, np.zeros(100))
    with pytest.raises(ValueError):
        lambda_count(x, 0.15)
    with pytest.raises(ValueError):
        lambda_count(x, 8.0)


@pytest.mark.parametrize(
    "alpha, slope",
    [(0, -1.5), (-2, -0.5), (-3, 0.0), (-4, 0.5)],
    ids=["white-pm", "white-fm", "flicker-fm", "random-walk-fm"],
)
def test_power_law_mdev_slopes(alpha, slope):
    fs, n = 8.0, 2 ** 18
    spec = NoiseSpec(((alpha, 1.0),), band=(1e-7, math.inf), rng_seed=11 + alpha)
    y = lambda_count(synth_power_law_noise(spec, n, fs), 1.0)
    taus = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0]
    curve = mdev(y, taus)
    assert loglog_slope(curve.taus, curve.values) == pytest.approx(slope, abs=0.2)


def test_white_fm_mdev_level_matches_prediction():
    b, fs = 2.0, 10.0
    spec = NoiseSpec(((-2, b),), rng_seed=5)
    y = lambda_count(synth_power_law_noise(spec, 200_000, fs), 1.0)
    taus = np.array([1.0, 4.0, 16.0])
    sim = mdev(y, taus).values
    # white FM: Mod sigma^2 = h0 / (4 tau), h0 = b / nu0^2
    closed_form = np.sqrt(b / (4 * taus)) / NU_0
    pred = predict_mdev(spec.psd, taus)
    np.testing.assert_allclose(pred, closed_form, rtol=0.02)
    np.testing.assert_allclose(sim, closed_form, rtol=0.1)


def test_white_pm_prediction_matches_simulation():
    spec = NoiseSpec(((0, 1e-4),), rng_seed=3)
    y = lambda_count(synth_power_law_noise(spec, 400_000, 100.0), 1.0)
    taus = np.array([1.0, 2.0, 8.0])
    np.testing.assert_allclose(mdev(y, taus).values, predict_mdev(spec.psd, taus), rtol=0.1)


def test_welch_recovers_white_level():
    x = synth_power_law_noise(NoiseSpec(((0, 3e-6),), rng_seed=2), 2 ** 18, 1000.0)
    spec = welch_psd(x, 4096)
    assert np.median(spec.psd) == pytest.approx(3e-6, rel=0.05)
    assert spec.freqs[0] > 0
    with pytest.raises(ValueError):
        welch_psd(x, 4)


def test_band_average_falls_back_to_nearest_bin():
    s = Spectrum(np.array([1.0, 10.0]), np.array([5.0, 7.0]))
    assert band_average(s, 3.0) == 5.0
    assert s.at(10.0) == 7.0


def test_accuracy_uses_window_oadev(rng):
    y = FreqSeries(1.0, 1e-19 + 1e-18 * rng.standard_normal(100_000))
    curve = oadev(y, report_taus(1.0, 1e5))
    mean, unc = accuracy(y, curve)
    assert mean == pytest.approx(np.mean(y.samples))
    assert unc == curve.at(30000.0)


def test_report_taus_grid():
    taus = report_taus(1.0, 1e5)
    for t in (1.0, 2.0, 10.0, 1e4, 2e4, 3e4):
        assert t in taus
    assert report_taus(1.0, 100.0).max() <= 20
    assert octave_taus(1.0, 4.0).size == 0


def test_f_factor_is_squared_ratio():
    a = StabilityCurve([1.0, 2.0], [2.0, 1.0], "mdev", [5, 4])
    b = StabilityCurve([1.0, 2.0], [4.0, 2.0], "mdev", [5, 4])
    assert f_factor(a, b, 1.0) == pytest.approx(0.25)
    with pytest.raises(KeyError):
        a.at(3.0)


def test_cycle_slip_detection():
    fs = 1000.0
    x = np.zeros(5000)
    x[3000:] += 2 * np.pi
    b = BeatNote(PhaseTimeline(fs, 0.0, x))
    assert detect_cycle_slips(b, tracking_bandwidth=None).tolist() == [3000]
    smooth = BeatNote(PhaseTimeline(fs, 0.0, np.linspace(0, 50, 5000)))
    assert detect_cycle_slips(smooth).size == 0


def test_stability_report_of_quiet_beat():
    b = BeatNote(PhaseTimeline(10.0, 0.0, np.zeros(20_000)))
    rep, y = stability_report(b)
    assert rep.slip_count == 0
    assert np.all(rep.mdev.values < 1e-21)
    assert len(y) == 1999


def test_csv_writers_round_trip(tmp_path, rng):
    y = FreqSeries(1.0, rng.standard_normal(300) * 1e-17)
    md, ad = mdev(y, [1, 2, 4]), oadev(y, [1, 2, 4])
    write_stability_csv(tmp_path / "s.csv", md, ad)
    cols = read_csv_columns(tmp_path / "s.csv")
    assert list(cols) == ["tau_s", "mdev", "oadev", "count"]
    assert np.array_equal(cols["mdev"], md.values)
    assert np.array_equal(cols["oadev"], ad.values)
    spec = Spectrum(np.array([0.1, 0.2]), np.array([1 / 3, 2e-300]))
    write_psd_csv(tmp_path / "p.csv", spec)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "freq_hz,psd_rad2_hz"
    assert np.array_equal(read_csv_columns(tmp_path / "p.csv")["psd_rad2_hz"], spec.psd)
    write_freq_series_csv(tmp_path / "y.csv", y)
    assert np.array_equal(read_csv_columns(tmp_path / "y.csv")["fractional_frequency"], y.samples)


def test_estimators_follow_sklearn_conventions():
    counter = LambdaCounter(gate=2.0, tracking_bandwidth=1e3)
    assert clone(counter).get_params() == counter.get_params()
    x = PhaseTimeline(100.0, 0.0, 2 * np.pi * 0.5 * np.arange(4000) / 100.0)
    y = counter.fit_transform(x)
    assert y.gate == 2.0 and len(y) == 19
    dev = AllanDeviation("oadev").fit(y)
    assert dev.curve_.estimator == "oadev"
    with pytest.raises(ValueError):
        AllanDeviation("hdev").fit(y)
    psd = PhaseNoisePSD(segment_s=5.0).fit_transform(x)
    assert psd.freqs[0] == pytest.approx(0.2)


def test_power_law_model_fit_and_anchor_modes():
    f = np.logspace(-1, 3, 60)
    truth = 2.0 * f ** -2 + 1e-4
    model = PowerLawNoiseModel(exponents=(0, -2)).fit(f, truth)
    np.testing.assert_allclose(model.predict(f), truth, rtol=1e-3)
    anchored = PowerLawNoiseModel(exponents=(-2, -3), anchors=((1.0, 10.0), (1e3, 1e-6))).fit()
    np.testing.assert_allclose(anchored.predict([1.0, 1e3]), [10.0, 1e-6], rtol=1e-9)
    x = anchored.sample(1024, 100.0, seed=4)
    assert len(x) == 1024
