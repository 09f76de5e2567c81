"""Fibre spans, round-trip compensated links, mid-link extraction, laser
regeneration, the secondary link and the analytic residual-noise oracle.

Time-domain runs (the "fast" engine) work on integer-sample delays. A span
is cut into ``K`` segments; each segment carries an independent share of the
span noise and is visited by forward and backward light at different times,
which is what limits round-trip cancellation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import fft as sfft

from .optics import BeatNote, FrequencyPlan, LaserDiode, beat, lock_laser
from .servo import ServoConfig, SimulationDivergence, inverse_controller_response, run_loop
from .signals import (
    SPEED_OF_LIGHT,
    NoiseSpec,
    PhaseTimeline,
    _check_grids,
    combine,
    delay_samples,
    snap_delay,
    synth_power_law_noise,
)

__all__ = [
    "FibreSpan",
    "ServoConfig",
    "SimulationDivergence",
    "CompensatedLink",
    "ExtractionSignals",
    "SpanRealization",
    "segment_delays",
    "propagate",
    "compensate",
    "extract_midpoint",
    "regenerate",
    "secondary_link",
    "predict_residual_psd",
    "residual_noise_spec",
    "segment_residual_factor",
    "link_transfer",
    "nominal_frequency_map",
    "default_link_servo",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FibreSpan:
    """A fibre span of ``length_km`` with noise spread over ``segments`` pieces."""

    length_km: float
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    group_index: float = 1.468
    segments: int = 16

    def __post_init__(self):
        if self.length_km < 0:
            raise ValueError("span length must be >= 0")
        if self.group_index <= 0:
            raise ValueError("group index must be positive")
        if int(self.segments) != self.segments or self.segments < 1:
            raise ValueError("segment count must be a positive integer")

    @property
    def tau(self) -> float:
        """One-way group delay in s."""
        return self.group_index * self.length_km * 1e3 / SPEED_OF_LIGHT

    def segment_noise(self, k: int | None = None) -> NoiseSpec:
        """Per-segment share: each of ``k`` segments gets 1/k of the PSD."""
        k = self.segments if k is None else k
        return self.noise.scaled(1.0 / k)

    def boundary_index(self, position_km: float, k: int | None = None) -> int:
        k = self.segments if k is None else k
        if self.length_km == 0:
            if position_km != 0:
                raise ValueError("position outside a zero-length span")
            return 0
        j = position_km / self.length_km * k
        jr = int(round(j))
        if abs(j - jr) > 1e-9 or not 0 <= jr <= k:
            raise ValueError(
                f"extraction at {position_km} km is not on a segment boundary "
                f"(boundaries every {self.length_km / k:g} km)"
            )
        return jr


def segment_delays(span: FibreSpan, fs: float):
    """Snap the span to the grid: ``(D, segment arrival delays, K)``.

    ``D`` is the one-way delay in samples (1% snapping rule). Segment ``i``
    is reached by forward light ``s_i`` samples after entering; when the grid
    cannot give ``K`` distinct arrival delays, ``K`` is halved until it can.
    """
    D = snap_delay(span.tau, fs)
    k = span.segments
    while True:
        s = np.rint(span.tau * fs * (np.arange(k) + 0.5) / k).astype(int)
        if k == 1 or np.all(np.diff(s) > 0):
            break
        log.warning("span of %.3g km: %d segments not resolvable at %g Hz, using %d", span.length_km, k, fs, k // 2)
        k //= 2
    return D, np.minimum(s, D), k


class SpanRealization:
    """One draw of a span's segment noise processes on a sample grid.

    Segments are regenerated on demand from their seeds, so memory stays at
    a few record lengths even for long runs. ``accumulate`` sums segment
    noise at per-segment delays for several named taps in one pass.
    """

    def __init__(self, span: FibreSpan, n: int, fs: float, start_time: float = 0.0):
        self.span = span
        self.n = int(n)
        self.fs = float(fs)
        self.start_time = float(start_time)
        self.D, self.s, self.k = segment_delays(span, fs)
        self.pad = 2 * self.D
        self.seg_spec = span.segment_noise(self.k)
        self._cache = {}

    def segment(self, i: int) -> np.ndarray:
        """Segment ``i`` noise, indexed so that element ``pad + t`` is sample ``t``."""
        m = self.n + self.pad
        if self.seg_spec.is_silent:
            return np.zeros(m)
        nfft = sfft.next_fast_len(m, real=True)
        x = synth_power_law_noise(self.seg_spec, nfft, self.fs, self.start_time - self.pad / self.fs, stream=i)
        return x.samples[:m]

    def accumulate(self, taps: dict) -> dict:
        """``taps`` maps a name to ``[(segment, delay_samples), ...]``."""
        key = tuple(sorted((name, tuple(v)) for name, v in taps.items()))
        if key in self._cache:
            return self._cache[key]
        out = {name: np.zeros(self.n) for name in taps}
        by_segment = {}
        for name, pairs in taps.items():
            for i, d in pairs:
                if not 0 <= d <= self.pad:
                    raise ValueError(f"tap delay {d} outside [0, {self.pad}]")
                by_segment.setdefault(i, []).append((name, d))
        for i in sorted(by_segment):
            x = self.segment(i)
            for name, d in by_segment[i]:
                out[name] += x[self.pad - d: self.pad - d + self.n]
        self._cache = {key: out}
        return out

    def forward_taps(self):
        """Forward light arriving at the far end."""
        return [(i, self.D - int(si)) for i, si in enumerate(self.s)]

    def backward_taps(self):
        """Backward light arriving at the near end."""
        return [(i, int(si)) for i, si in enumerate(self.s)]

    def round_trip_taps(self):
        return [(i, 2 * self.D - int(si)) for i, si in enumerate(self.s)] + self.backward_taps()

    def extraction_taps(self, j: int, DA: int):
        """Forward noise at boundary ``j`` and the downstream round-trip part."""
        DB = self.D - DA
        fwd = [(i, DA - int(self.s[i])) for i in range(j)]
        bwd = [(i, DB + self.D - int(self.s[i])) for i in range(j, self.k)]
        bwd += [(i, int(self.s[i]) - DA) for i in range(j, self.k)]
        return fwd, bwd


def propagate(x: PhaseTimeline, span: FibreSpan, direction: str = "forward",
              realization: SpanRealization | None = None) -> PhaseTimeline:
    """Carry ``x`` through ``span``; the carrier offset is unchanged.

    Forward and backward passes over the same grid share one noise draw and
    read each segment at the time the light crosses it.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    real = realization or SpanRealization(span, len(x), x.sample_rate, x.start_time)
    if (real.n, real.fs, real.start_time) != (len(x), x.sample_rate, x.start_time):
        raise ValueError("realization grid does not match the input timeline")
    taps = real.forward_taps() if direction == "forward" else real.backward_taps()
    noise = real.accumulate({"p": taps})["p"]
    return x.with_samples(delay_samples(x.samples, real.D) + noise)


def default_link_servo(span: FibreSpan, dividers=(2, 1), actuator="aom_input", unity_factor=0.15) -> ServoConfig:
    """Critically damped link servo with unity gain at ``0.15 / tau``."""
    tau = span.tau
    return ServoConfig.from_unity_gain(unity_factor / tau, transport_delay=2 * tau, dividers=dividers, actuator=actuator)


@dataclass(frozen=True, eq=False)
class CompensatedLink:
    """Result of one compensated-link run.

    ``output`` is the far-end signal, ``correction`` the actuator phase,
    ``in_loop_beat`` the detected round-trip beat and ``free_running_output``
    the same fibre draw with the servo disabled.
    """

    output: PhaseTimeline
    correction: PhaseTimeline
    in_loop_beat: BeatNote
    free_running_output: PhaseTimeline
    input: PhaseTimeline = None
    span: FibreSpan = None
    plan: FrequencyPlan = None
    realization: SpanRealization = None
    taps: dict = None


def _round_trip_loop(disturbance, servo: ServoConfig, fs: float, D: int):
    if disturbance.size:
        # locked at the starting phase: no acquisition transient
        disturbance = disturbance - disturbance[0]
    plant = np.zeros(2 * D + 1)
    plant[0] += 0.5
    plant[2 * D] += 0.5
    return run_loop(disturbance, servo, fs, plant)


def _floor(spec, n, fs, t0, stream):
    if spec is None or spec.is_silent:
        return np.zeros(n)
    return synth_power_law_noise(spec, n, fs, t0, stream=stream).samples


def compensate(input: PhaseTimeline, span: FibreSpan, servo: ServoConfig, plan: FrequencyPlan,
               extraction_km: float | None = None, in_loop_floor: NoiseSpec | None = None) -> CompensatedLink:
    """Round-trip noise compensation of the main link.

    Input AOM (+f_1, correction) -> fibre -> output AOM (+f_2) -> Faraday
    mirror -> fibre -> input AOM again; the round trip beats against the
    input at ``2 (f_1 + f_2)``, is divided by ``servo.dividers[0]`` and the PI
    updates the correction every sample. ``extraction_km`` pre-computes the
    noise needed by :func:`extract_midpoint` in the same pass.
    """
    fs, n, t0 = input.sample_rate, len(input), input.start_time
    real = SpanRealization(span, n, fs, t0)
    if servo.enabled and abs(servo.transport_delay - 2 * span.tau) > 0.01 * 2 * span.tau:
        raise ValueError("link servo transport delay must equal the round-trip delay 2*tau")
    D = real.D
    taps = {"out": real.forward_taps(), "rt": real.round_trip_taps()}
    if extraction_km is not None:
        j = span.boundary_index(extraction_km, real.k)
        DA = snap_delay(span.tau * j / real.k, fs)
        fwd, bwd = real.extraction_taps(j, DA)
        taps["ext_fwd"], taps["ext_bwd"] = fwd, bwd
    sums = dict(real.accumulate(taps))
    if extraction_km is not None:
        sums["ext_j"] = j
    x = input.samples
    rt_noise = sums["rt"] + delay_samples(x, 2 * D) - x
    rt_noise = rt_noise + _floor(in_loop_floor, n, fs, t0, ("main-loop",))
    nb = servo.dividers[0]
    # the PI sees the beat divided by nb, rescaled so that gains are per rad of correction
    u, _ = _round_trip_loop(rt_noise / 2.0, servo, fs, D)
    correction = PhaseTimeline(fs, t0, u)
    delayed_in = delay_samples(x, D)
    out_offset = input.nominal_offset + plan.f_1 + plan.f_2
    output = PhaseTimeline(fs, t0, delayed_in + delay_samples(u, D) + sums["out"], out_offset)
    free = PhaseTimeline(fs, t0, delayed_in + sums["out"], out_offset)
    rt_phase = u + delay_samples(u, 2 * D) + rt_noise
    in_loop = BeatNote(PhaseTimeline(fs, t0, rt_phase, 2 * (plan.f_1 + plan.f_2)))
    if np.max(np.abs(rt_phase / nb), initial=0.0) > 1e3:
        raise SimulationDivergence("main-link in-loop beat diverged")
    return CompensatedLink(output, correction, in_loop, free, input, span, plan, real, dict(sums))


@dataclass(frozen=True, eq=False)
class ExtractionSignals:
    """Forward and backward light tapped at the extraction coupler."""

    forward: PhaseTimeline
    backward: PhaseTimeline
    pd1_beat: BeatNote
    position_km: float = 0.0


def extract_midpoint(link: CompensatedLink, position_km: float, floor: NoiseSpec | None = None,
                     arm_phase=None) -> ExtractionSignals:
    """Tap forward and backward signals at ``position_km`` from the input.

    ``arm_phase`` is an optional differential phase of the two interferometer
    arms (backward arm minus forward arm) that lands on the PD1 beat.
    """
    span, real, plan = link.span, link.realization, link.plan
    fs, t0 = real.fs, real.start_time
    j = span.boundary_index(position_km, real.k)
    DA = snap_delay(span.tau * j / real.k, fs)
    DB = real.D - DA
    if link.taps is not None and "ext_fwd" in link.taps:
        fwd_noise, bwd_noise = link.taps["ext_fwd"], link.taps["ext_bwd"]
        if link.taps.get("ext_j") != j:
            fwd_taps, bwd_taps = real.extraction_taps(j, DA)
            sums = real.accumulate({"ext_fwd": fwd_taps, "ext_bwd": bwd_taps})
            fwd_noise, bwd_noise = sums["ext_fwd"], sums["ext_bwd"]
    else:
        fwd_taps, bwd_taps = real.extraction_taps(j, DA)
        sums = real.accumulate({"ext_fwd": fwd_taps, "ext_bwd": bwd_taps})
        fwd_noise, bwd_noise = sums["ext_fwd"], sums["ext_bwd"]
    x, u = link.input.samples, link.correction.samples
    fwd = delay_samples(x, DA) + delay_samples(u, DA) + fwd_noise
    bwd = delay_samples(fwd, 2 * DB) + bwd_noise
    forward = PhaseTimeline(fs, t0, fwd, link.input.nominal_offset + plan.f_1)
    backward = PhaseTimeline(fs, t0, bwd, link.input.nominal_offset + plan.f_1 + 2 * plan.f_2)
    pd1 = beat(backward, forward, floor, stream=("pd1",))
    if arm_phase is not None:
        pd1 = BeatNote(pd1.phase.with_samples(pd1.samples + np.asarray(arm_phase, dtype=float)))
    return ExtractionSignals(forward, backward, pd1, position_km)


def regenerate(ex: ExtractionSignals, ld: LaserDiode, plan: FrequencyPlan, lo: BeatNote | None = None,
               pd1_correction: bool = True, return_error: bool = False, floor: NoiseSpec | None = None):
    """Offset-lock the laser diode to the forward extracted light.

    Half of the PD1 beat is mixed into the lock error so the downstream fibre
    noise carried by the forward light drops out. The laser ends up at
    ``nu_0 + f_1 + f_2 + |f_LO|`` with the LO phase on top.
    """
    _check_grids([ex.forward, ex.pd1_beat.phase])
    if pd1_correction:
        reference = combine([(ex.forward, 1), (ex.pd1_beat.phase, Fraction(1, 2))])
    else:
        reference = ex.forward.with_samples(ex.forward.samples, ex.forward.nominal_offset + ex.pd1_beat.nominal_frequency / 2)
    return lock_laser(ld, reference, plan.f_LD, lo, return_error=return_error, floor=floor, stream=("pd2",))


def secondary_link(src: PhaseTimeline, span: FibreSpan, servo: ServoConfig, plan: FrequencyPlan,
                   lo: BeatNote | None = None, in_loop_floor: NoiseSpec | None = None) -> CompensatedLink:
    """Compensated secondary link fed by the regenerated laser.

    The Michelson round trip beats at ``2 (f_3 + f_4)``; it is divided by
    ``servo.dividers[0]`` and mixed against the LO divided by
    ``servo.dividers[1]``. The correction converges to minus the fibre noise
    minus the LO phase, so the output lands on ``nu_0 + f_1 + f_2`` free of
    both.
    """
    fs, n, t0 = src.sample_rate, len(src), src.start_time
    nb, nlo = servo.dividers
    if lo is None:
        lo = BeatNote(PhaseTimeline(fs, t0, np.zeros(n), plan.f_LO))
    _check_grids([src, lo.phase])
    rt_freq = 2 * (plan.f_3 + plan.f_4)
    if rt_freq / nb - lo.nominal_frequency / nlo != 0:
        raise ValueError(
            f"divided round-trip beat {rt_freq / nb} Hz does not match divided LO {lo.nominal_frequency / nlo} Hz"
        )
    real = SpanRealization(span, n, fs, t0)
    if servo.enabled and abs(servo.transport_delay - 2 * span.tau) > 0.01 * 2 * span.tau:
        raise ValueError("link servo transport delay must equal the round-trip delay 2*tau")
    D = real.D
    sums = real.accumulate({"out": real.forward_taps(), "rt": real.round_trip_taps()})
    x = src.samples
    rt_noise = sums["rt"] + delay_samples(x, 2 * D) - x
    rt_noise = rt_noise + _floor(in_loop_floor, n, fs, t0, ("secondary-loop",))
    # normalised error: (nb / 2) * (rt / nb - lo / nlo)
    disturbance = rt_noise / 2.0 - (nb / (2.0 * nlo)) * lo.samples
    u, _ = _round_trip_loop(disturbance, servo, fs, D)
    correction = PhaseTimeline(fs, t0, u)
    out_offset = src.nominal_offset + plan.f_3 + plan.f_4
    delayed = delay_samples(x, D)
    output = PhaseTimeline(fs, t0, delayed + delay_samples(u, D) + sums["out"], out_offset)
    free = PhaseTimeline(fs, t0, delayed + sums["out"], out_offset)
    rt_phase = u + delay_samples(u, 2 * D) + rt_noise
    in_loop = BeatNote(PhaseTimeline(fs, t0, rt_phase, rt_freq))
    return CompensatedLink(output, correction, in_loop, free, src, span, plan, real, dict(sums))


def predict_residual_psd(span: FibreSpan, freqs, free_psd):
    """Delay-limited residual of a round-trip compensated link.

    ``S_res = min(1, (2 pi f tau)^2 / 3) * S_free``. Returns ``(S_res, f_bw)``
    with ``f_bw = 1 / (4 tau)`` the correction bandwidth limit.
    """
    f = np.asarray(freqs, dtype=float)
    factor = np.minimum(1.0, (2 * np.pi * f * span.tau) ** 2 / 3.0)
    res = factor * np.asarray(free_psd, dtype=float)
    f_bw = math.inf if span.tau == 0 else 1.0 / (4 * span.tau)
    return res, f_bw


def residual_noise_spec(span: FibreSpan, noise: NoiseSpec | None = None) -> NoiseSpec:
    """Power-law spec of the converged residual, valid where (2 pi f tau)^2 / 3 < 1."""
    noise = span.noise if noise is None else noise
    c = (2 * np.pi * span.tau) ** 2 / 3.0
    terms = []
    for alpha, b in noise.terms:
        if alpha + 2 > 0:
            raise ValueError("residual of a term steeper than f^0 * f^2 is not a phase power law")
        terms.append((alpha + 2, b * c))
    return NoiseSpec(tuple(terms), noise.band, None, noise.rng_seed)


def segment_residual_factor(span: FibreSpan, freqs, k: int | None = None, delays=None) -> np.ndarray:
    """Exact infinite-gain residual / free PSD ratio for ``k`` discrete segments.

    Direct sum over segments of ``|exp(-i w (tau - t_i)) - exp(-i w tau)
    cos(w (tau - t_i)) / cos(w tau)|^2``; tends to ``(2 pi f tau)^2 / 3`` for
    many segments and low frequency.
    """
    k = span.segments if k is None else k
    tau = span.tau
    t_i = tau * (np.arange(k) + 0.5) / k if delays is None else np.asarray(delays, dtype=float)
    w = 2 * np.pi * np.asarray(freqs, dtype=float)[:, None]
    u = tau - t_i[None, :]
    h = np.exp(-1j * w * u) - np.exp(-1j * w * tau) * np.cos(w * u) / np.cos(w * tau)
    return np.mean(np.abs(h) ** 2, axis=1)


def link_transfer(span: FibreSpan, servo: ServoConfig | None, freqs, loop_rate: float,
                  extraction_km: float | None = None, converged: bool = False, segments=None):
    """Frequency response from each segment's noise to every link node.

    Continuous delays, the discrete PI evaluated at ``loop_rate``. Returns a
    dict of ``(K, F)`` complex arrays for ``out``, ``correction``, and with an
    extraction point ``forward``, ``backward`` and ``regen`` (the
    PD1-corrected forward phase), plus ``floor_*`` ``(F,)`` responses to a
    unit in-loop detection floor. ``segments`` restricts the rows to the
    given segment indices.
    """
    f = np.asarray(freqs, dtype=float)
    k = span.segments
    tau = span.tau
    idx = np.arange(k) if segments is None else np.atleast_1d(segments)
    t_i = tau * (idx + 0.5) / k
    w = 2 * np.pi * f[None, :]
    ti = t_i[:, None]
    n_rt = np.exp(-1j * w * ti) + np.exp(-1j * w * (2 * tau - ti))
    echo = 1 + np.exp(-2j * w[0] * tau)
    if converged:
        loop = -1.0 / echo
    elif servo is None or not servo.enabled or servo.gain_scale == 0:
        loop = np.zeros_like(f, dtype=complex)
    else:
        ci = inverse_controller_response(servo, f, loop_rate)
        loop = -0.5 / (ci + echo / 2)
    corr = loop[None, :] * n_rt
    out = np.exp(-1j * w * tau) * corr + np.exp(-1j * w * (tau - ti))
    res = {"correction": corr, "out": out, "floor_correction": loop, "floor_out": np.exp(-1j * w[0] * tau) * loop}
    if extraction_km is not None:
        j = span.boundary_index(extraction_km)
        ta = tau * j / k
        tb = tau - ta
        in_a = (idx < j)[:, None]
        fwd = np.exp(-1j * w * ta) * corr + np.where(in_a, np.exp(-1j * w * (ta - ti)), 0)
        down = np.where(~in_a, np.exp(-1j * w * (tb + tau - ti)) + np.exp(-1j * w * (ti - ta)), 0)
        bwd = np.exp(-2j * w * tb) * fwd + down
        res.update(forward=fwd, backward=bwd, regen=(fwd + bwd) / 2)
        ffwd = np.exp(-1j * w[0] * ta) * loop
        res["floor_regen"] = ffwd * (1 + np.exp(-2j * w[0] * tb)) / 2
    return res


def nominal_frequency_map(plan: FrequencyPlan, topology: str = "midpoint") -> dict:
    """Exact frequency (Hz) of every optical node and beat note.

    Optical nodes are absolute frequencies; beat notes are signed RF
    frequencies (first minus second input).
    """
    plan.validate()
    if topology not in ("midpoint", "input", "main"):
        raise ValueError(f"unknown topology {topology!r}")
    nu0 = plan.nu_0
    m = {
        "input": nu0,
        "main_after_aom1": plan.nu_plus,
        "Out0": nu0 + plan.f_1 + plan.f_2,
        "main_round_trip": nu0 + 2 * (plan.f_1 + plan.f_2),
        "main_rt_beat": 2 * (plan.f_1 + plan.f_2),
        "Out0_beat": plan.f_1 + plan.f_2,
    }
    if topology == "main":
        return m
    m.update({
        "extraction_forward": plan.nu_plus,
        "extraction_backward": plan.nu_minus,
        "pd1_beat": plan.nu_minus - plan.nu_plus,
        "pd1_half": (plan.nu_minus - plan.nu_plus) / 2,
        "laser_diode": plan.nu_LD,
        "pd2_beat": plan.nu_LD - plan.nu_plus,
        "lo": plan.f_LO,
    })
    if topology == "input":
        m["extraction_output_beat"] = plan.nu_LD - nu0
        return m
    m.update({
        "secondary_after_aom3": plan.nu_LD + plan.f_3,
        "Out1": plan.nu_LD + plan.f_3 + plan.f_4,
        "secondary_round_trip": plan.nu_LD + 2 * (plan.f_3 + plan.f_4),
        "secondary_rt_beat": 2 * (plan.f_3 + plan.f_4),
        "Out1_beat": plan.nu_LD + plan.f_3 + plan.f_4 - nu0,
    })
    return m
