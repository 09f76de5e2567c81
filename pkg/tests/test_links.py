import numpy as np
import pytest
from scipy import signal as sps

from fibrenet.links import (
    FibreSpan,
    compensate,
    default_link_servo,
    extract_midpoint,
    link_transfer,
    nominal_frequency_map,
    predict_residual_psd,
    propagate,
    residual_noise_spec,
    secondary_link,
    segment_residual_factor,
)
from fibrenet.optics import DEFAULT_PLAN, local_oscillator
from fibrenet.signals import NoiseSpec, PhaseTimeline, spool_50km_noise

FS = 90e3


@pytest.fixture(scope="module")
def span():
    return FibreSpan(50.0, spool_50km_noise(seed=21))


@pytest.fixture(scope="module")
def link20s(span):
    inp = PhaseTimeline(FS, 0.0, np.zeros(int(20 * FS)))
    return compensate(inp, span, default_link_servo(span), DEFAULT_PLAN, extraction_km=25.0)


def test_span_delay_and_servo_limits(span):
    assert span.tau == pytest.approx(2.448e-4, rel=1e-3)
    servo = default_link_servo(span)
    assert servo.unity_gain_frequency == pytest.approx(0.15 / span.tau)
    assert servo.unity_gain_frequency < 1 / (4 * span.tau)
    with pytest.raises(ValueError, match="segment boundary"):
        span.boundary_index(10.0)
    assert span.boundary_index(25.0) == 8


def test_silent_fibre_passes_the_input(span):
    quiet = FibreSpan(50.0, NoiseSpec())
    inp = PhaseTimeline(FS, 0.0, np.full(9000, 0.3))
    link = compensate(inp, quiet, default_link_servo(quiet), DEFAULT_PLAN)
    np.testing.assert_array_equal(link.output.samples, 0.3)
    assert np.all(link.correction.samples == 0)
    ramp = PhaseTimeline(FS, 0.0, np.linspace(0, 1, 9000))
    for direction in ("forward", "backward"):
        y = propagate(ramp, quiet, direction)
        np.testing.assert_array_equal(y.samples[22:], ramp.samples[:-22])


def test_offsets_follow_the_frequency_map(link20s):
    m = nominal_frequency_map(DEFAULT_PLAN)
    assert link20s.output.nominal_offset == m["Out0_beat"]
    assert link20s.in_loop_beat.nominal_frequency == m["main_rt_beat"]
    ex = extract_midpoint(link20s, 25.0)
    assert ex.pd1_beat.nominal_frequency == m["pd1_beat"]
    assert ex.forward.nominal_offset + ex.pd1_beat.nominal_frequency / 2 == m["Out0_beat"]


def test_time_domain_residual_follows_delay_limit(link20s, span):
    seg = int(2 * FS)
    f, free = sps.welch(link20s.free_running_output.samples, FS, nperseg=seg)
    _, comp = sps.welch(link20s.output.samples, FS, nperseg=seg)
    for f0 in (2.0, 5.0, 10.0, 20.0):
        band = (f > f0 / 1.2) & (f < f0 * 1.2)
        ratio = comp[band].mean() / free[band].mean()
        theory = (2 * np.pi * f0 * span.tau) ** 2 / 3
        assert 1 / 3 < ratio / theory < 3, (f0, ratio, theory)


def test_regenerated_reference_is_free_of_main_noise(link20s):
    ex = extract_midpoint(link20s, 25.0)
    regen = ex.forward.samples + ex.pd1_beat.samples / 2
    assert np.std(regen) < 1e-2 * np.std(ex.forward.samples)
    # and tracks Out0 up to the residual
    assert np.std(regen - link20s.output.samples) < 1e-2 * np.std(ex.forward.samples)


def test_converged_transfer_matches_segment_oracle(span):
    f = np.logspace(-2, 2.5, 30)
    h = link_transfer(span, None, f, FS, converged=True)
    np.testing.assert_allclose(np.mean(np.abs(h["out"]) ** 2, axis=0), segment_residual_factor(span, f), rtol=1e-9)
    low = f <= 50
    approx = (2 * np.pi * f[low] * span.tau) ** 2 / 3
    np.testing.assert_allclose(segment_residual_factor(span, f[low]), approx, rtol=0.01)


def test_finite_gain_loop_converges_at_low_frequency(span):
    f = np.array([0.01, 0.1])
    servo = default_link_servo(span)
    h = link_transfer(span, servo, f, FS, extraction_km=25.0)
    hc = link_transfer(span, None, f, FS, extraction_km=25.0, converged=True)
    r = np.mean(np.abs(h["out"]) ** 2, axis=0) / np.mean(np.abs(hc["out"]) ** 2, axis=0)
    np.testing.assert_allclose(r, 1.0, rtol=0.05)
    assert np.all(np.mean(np.abs(h["regen"]) ** 2, axis=0) < 1e-6)
    assert np.all(np.mean(np.abs(h["forward"]) ** 2, axis=0) > 0.1)


def test_residual_oracles(span):
    f = np.array([0.1, 1.0, 1e4])
    free = span.noise.psd(f)
    res, f_bw = predict_residual_psd(span, f, free)
    assert f_bw == pytest.approx(1 / (4 * span.tau))
    assert res[-1] == free[-1]
    np.testing.assert_allclose(residual_noise_spec(span).psd(f[:2]), res[:2])


def test_secondary_loop_removes_lo_phase_carried_by_laser():
    fs, n = FS, int(10 * FS)
    quiet = FibreSpan(50.0, NoiseSpec())
    servo = default_link_servo(quiet, dividers=(30, 15), actuator="aom3")
    lo = local_oscillator(DEFAULT_PLAN.f_LO, NoiseSpec(((-2, 1e-2),), rng_seed=3), n, fs)
    # a laser locked through this LO carries -(signed LO phase)
    src = PhaseTimeline(fs, 0.0, -lo.samples, DEFAULT_PLAN.nu_LD - DEFAULT_PLAN.nu_0)
    out = secondary_link(src, quiet, servo, DEFAULT_PLAN, lo)
    assert out.output.nominal_offset == DEFAULT_PLAN.f_1 + DEFAULT_PLAN.f_2
    # noise above the loop bandwidth passes; below it the LO is gone
    f, p_out = sps.welch(out.output.samples, fs, nperseg=int(fs))
    _, p_lo = sps.welch(lo.samples, fs, nperseg=int(fs))
    low = (f >= 1) & (f <= 10)
    assert np.all(p_out[low] < 1e-3 * p_lo[low])
    assert np.std(out.output.samples) < 0.05 * np.std(lo.samples)
    with pytest.raises(ValueError, match="divided LO"):
        secondary_link(src, quiet, default_link_servo(quiet, dividers=(20, 15)), DEFAULT_PLAN, lo)
