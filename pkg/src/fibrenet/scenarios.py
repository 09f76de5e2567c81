"""Experiment presets and the two simulation engines.

A :class:`Scenario` describes one bench: the main link with an extraction
coupler, the regenerating laser diode and either a compensated secondary
link or an attenuator. Two engines run it:

* ``fast`` works sample by sample at tens of kHz, with real servo loops, for
  up to a few hundred seconds. It produces the phase-noise spectra.
* ``slow`` works at 10 Hz for days of simulated time. Each noise source is
  drawn once as a complex spectrum and sent to every output through the
  analytic closed-loop response of the network, evaluated with the same
  discrete controllers the fast engine runs. Spectral content above the
  slow Nyquist frequency is folded back as independent noise per output.
"""
from __future__ import annotations

import logging
import math
import zlib
from decimal import Decimal, localcontext
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from .links import (
    FibreSpan,
    compensate,
    default_link_servo,
    extract_midpoint,
    link_transfer,
    nominal_frequency_map,
    segment_delays,
    regenerate,
    secondary_link,
)
from .metrology import (
    NU_0,
    FreqSeries,
    Spectrum,
    StabilityReport,
    band_average,
    f_factor,
    mdev,
    stability_report,
    welch_psd,
)
from .optics import DEFAULT_PLAN, BeatNote, FrequencyPlan, LaserDiode, beat, local_oscillator
from .servo import ServoConfig, inverse_controller_response
from .signals import (
    DriftSpec,
    NoiseSpec,
    PhaseTimeline,
    _rng,
    delay_samples,
    drift_process,
    spool_50km_noise,
    spectral_draw,
    stream_key,
    synth_power_law_noise,
)

__all__ = [
    "Topology",
    "NoiseConfig",
    "FloorConfig",
    "ServoSettings",
    "EngineConfig",
    "MeasurementConfig",
    "ExperimentConfig",
    "Scenario",
    "EngineRun",
    "MidpointResult",
    "InputExtractionResult",
    "LoSensitivityResult",
    "ArmMatchingResult",
    "PRESETS",
    "PRESET_ALIASES",
    "preset_names",
    "simulate",
    "simulate_fast",
    "simulate_slow",
    "predict_output_psd",
    "run_midpoint",
    "run_input_extraction",
    "run_lo_sensitivity",
    "run_arm_matching",
    "run_scenario",
    "ConfigError",
    "scenario_from_dict",
    "scenario_to_dict",
    "load_preset",
]

log = logging.getLogger(__name__)

ENGINE_VERSIONS = {"fast": "fast-td/1", "slow": "slow-fd/1"}

FAST_MAX_DURATION = 1e3  # s


def _silent() -> NoiseSpec:
    return NoiseSpec()


@dataclass(frozen=True)
class Topology:
    main_length_km: float = 50.0
    extraction_km: float = 25.0
    secondary_length_km: float | None = 50.0
    attenuator: bool = False
    group_index: float = 1.468
    segments: int = 16

    def __post_init__(self):
        if self.attenuator == (self.secondary_length_km is not None):
            raise ValueError("give either a secondary span or the attenuator, not both")
        if not 0 <= self.extraction_km <= self.main_length_km:
            raise ValueError("extraction point must lie on the main span")


@dataclass(frozen=True)
class NoiseConfig:
    """Physical noise of every element. ``lo`` is the LO's own phase noise."""

    main: NoiseSpec = field(default_factory=spool_50km_noise)
    secondary: NoiseSpec = field(default_factory=spool_50km_noise)
    laser: NoiseSpec = field(default_factory=lambda: NoiseSpec(((-2, 30.0),)))
    lo: NoiseSpec = field(default_factory=_silent)
    upstream: NoiseSpec = field(default_factory=_silent)


@dataclass(frozen=True)
class FloorConfig:
    """Measurement floors.

    ``detection`` is white phase on every photodiode beat. ``reference_path``
    is the uncompensated input arm of the measurement interferometer; it is
    shared by the end-to-end beats.
    """

    enabled: bool = True
    detection: NoiseSpec = field(default_factory=lambda: NoiseSpec(((0, 1e-8),)))
    reference_path: NoiseSpec = field(default_factory=_silent)


@dataclass(frozen=True)
class ServoSettings:
    main_unity_factor: float = 0.15
    secondary_unity_factor: float = 0.15
    main_gain_scale: float = 1.0
    main_enabled: bool = True
    secondary_enabled: bool = True
    main_dividers: tuple = (2, 1)
    secondary_dividers: tuple = (30, 15)
    laser_bandwidth_hz: float = 100e3


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "both"
    fast_rate_hz: float = 90e3
    fast_duration_s: float = 100.0
    slow_rate_hz: float = 10.0
    slow_duration_s: float = 1e5
    warmup_s: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fast", "slow", "both"):
            raise ValueError("engine mode must be fast, slow or both")
        if self.fast_duration_s > FAST_MAX_DURATION:
            raise ValueError(f"fast engine is limited to {FAST_MAX_DURATION:g} s; use the slow engine")
        if self.fast_duration_s <= self.warmup_s or self.slow_duration_s <= 0:
            raise ValueError("durations must be positive and longer than the warm-up")
        if self.fast_rate_hz <= 0 or self.slow_rate_hz <= 0:
            raise ValueError("engine rates must be positive")


@dataclass(frozen=True)
class MeasurementConfig:
    gate_s: float = 1.0
    weighting: str = "lambda"
    tracking_bandwidth_hz: float = 100e3
    psd_segment_s: float = 20.0
    psd_overlap: float = 0.5
    f_factor_tau_s: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "midpoint"
    modes: tuple = ("free", "poor", "optimal")
    poor_gain_scale: float = 0.02
    lo_test_noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(((-2, 1.125e-6),)))
    arm_mismatches_m: tuple = (0.0, 0.1, 1.0, 10.0)
    arm_drift: DriftSpec = field(default_factory=DriftSpec)

    def __post_init__(self):
        if self.kind not in ("midpoint", "input_extraction", "lo_sensitivity", "arm_matching"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        for m in self.modes:
            if m not in ("free", "poor", "optimal"):
                raise ValueError(f"unknown compensation mode {m!r}")


@dataclass(frozen=True)
class Scenario:
    name: str = "custom"
    description: str = ""
    seed: int = 1
    topology: Topology = field(default_factory=Topology)
    plan: FrequencyPlan = DEFAULT_PLAN
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    floors: FloorConfig = field(default_factory=FloorConfig)
    servos: ServoSettings = field(default_factory=ServoSettings)
    engine: EngineConfig = field(default_factory=EngineConfig)
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        kind = self.experiment.kind
        if kind == "input_extraction":
            if self.topology.extraction_km != 0 or not self.topology.attenuator:
                raise ValueError("input-extraction runs need extraction_km = 0 and the attenuator in place")
        elif self.topology.attenuator:
            raise ValueError(f"{kind} runs need a secondary span")
        self.plan.validate()
        nominal_frequency_map(self.plan, "input" if self.topology.attenuator else "midpoint")

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))

    def with_engine(self, mode: str) -> "Scenario":
        return replace(self, engine=replace(self.engine, mode=mode))


def element_seed(seed: int, name: str) -> int:
    """Platform-independent per-element seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


# --- network resolution -------------------------------------------------------------


@dataclass(frozen=True)
class _Network:
    """Everything an engine needs, with seeds and modes resolved."""

    plan: FrequencyPlan
    main: FibreSpan
    secondary: FibreSpan | None
    extraction_km: float
    main_servo: ServoConfig
    secondary_servo: ServoConfig | None
    laser_noise: NoiseSpec
    laser_bandwidth: float
    lo_noise: NoiseSpec
    upstream: NoiseSpec
    detection: NoiseSpec | None
    reference_path: NoiseSpec | None
    arm_phase_drift: DriftSpec | None
    seed: int


def _network(scn: Scenario, main_mode: str = "optimal", lo_noise: NoiseSpec | None = None,
             secondary_enabled: bool | None = None, arm_mismatch_m: float = 0.0,
             arm_drift: DriftSpec | None = None, floors: bool | None = None) -> _Network:
    top, sv, nz, seed = scn.topology, scn.servos, scn.noise, scn.seed
    main = FibreSpan(top.main_length_km, nz.main.with_seed(element_seed(seed, "main")), top.group_index, top.segments)
    main_servo = default_link_servo(main, sv.main_dividers, "aom_input", sv.main_unity_factor)
    if main_mode == "free" or not sv.main_enabled:
        main_servo = main_servo.disabled()
    elif main_mode == "poor":
        main_servo = main_servo.scaled(scn.experiment.poor_gain_scale)
    else:
        main_servo = main_servo.scaled(sv.main_gain_scale)
    secondary = sec_servo = None
    if top.secondary_length_km is not None:
        secondary = FibreSpan(top.secondary_length_km, nz.secondary.with_seed(element_seed(seed, "secondary")),
                              top.group_index, top.segments)
        sec_servo = default_link_servo(secondary, sv.secondary_dividers, "aom3", sv.secondary_unity_factor)
        enabled = sv.secondary_enabled if secondary_enabled is None else secondary_enabled
        if not enabled:
            sec_servo = sec_servo.disabled()
    floors_on = scn.floors.enabled if floors is None else floors
    det = scn.floors.detection.with_seed(element_seed(seed, "detection")) if floors_on else None
    ref = scn.floors.reference_path.with_seed(element_seed(seed, "reference_path")) if floors_on else None
    lo = nz.lo if lo_noise is None else lo_noise
    drift = None
    if arm_mismatch_m:
        drift = (arm_drift or scn.experiment.arm_drift).scaled(arm_mismatch_m)
    return _Network(
        plan=scn.plan,
        main=main,
        secondary=secondary,
        extraction_km=top.extraction_km,
        main_servo=main_servo,
        secondary_servo=sec_servo,
        laser_noise=nz.laser.with_seed(element_seed(seed, "laser")),
        laser_bandwidth=sv.laser_bandwidth_hz,
        lo_noise=lo.with_seed(element_seed(seed, "lo")),
        upstream=nz.upstream.with_seed(element_seed(seed, "upstream")),
        detection=det,
        reference_path=ref,
        arm_phase_drift=drift,
        seed=seed,
    )


@dataclass(frozen=True, eq=False)
class EngineRun:
    """Outputs of one engine run.

    ``link`` holds the output phases relative to the input (no measurement
    floors), ``free`` the same with every link servo off (fast engine only),
    ``beats`` the end-to-end beat notes as counted, floors included.
    """

    engine: str
    sample_rate: float
    link: dict
    free: dict
    beats: dict


# --- fast engine --------------------------------------------------------------------


def _fast_laser(net: _Network, fs: float) -> LaserDiode:
    bw = min(net.laser_bandwidth, fs / 20)
    if bw < net.laser_bandwidth:
        log.info("laser lock narrowed from %g Hz to %g Hz for the %g Hz grid", net.laser_bandwidth, bw, fs)
    pll = ServoConfig.from_bandwidth(bw, dividers=(1, 1), actuator="current")
    return LaserDiode(net.laser_noise, pll)


def _open_loop(link, src: PhaseTimeline) -> PhaseTimeline:
    """Output of ``link``'s fibre draw for source ``src`` with its servo off."""
    D = link.realization.D
    return src.with_samples(delay_samples(src.samples, D) + link.taps["out"],
                            src.nominal_offset + link.plan.f_3 + link.plan.f_4)


def simulate_fast(net: _Network, fs: float, duration: float, warmup: float = 0.0, with_free: bool = True) -> EngineRun:
    plan = net.plan
    n = int(round((duration + warmup) * fs))
    w = int(round(warmup * fs))
    inp = PhaseTimeline(fs, -warmup, np.zeros(n), 0)
    link = compensate(inp, net.main, net.main_servo, plan, extraction_km=net.extraction_km, in_loop_floor=net.detection)
    lo = local_oscillator(plan.f_LO, net.lo_noise, n, fs, -warmup)
    ld = _fast_laser(net, fs)
    arm = None
    if net.arm_phase_drift is not None:
        arm = drift_process(net.arm_phase_drift, inp.times(), seed=[net.seed, 0xA2])

    def branch(main_link, with_servo=True):
        ex = extract_midpoint(main_link, net.extraction_km, floor=net.detection, arm_phase=arm)
        ld_out = regenerate(ex, ld, plan, lo, floor=net.detection)
        if net.secondary is None:
            return ld_out, None
        servo = net.secondary_servo if with_servo else net.secondary_servo.disabled()
        sec = secondary_link(ld_out, net.secondary, servo, plan, lo, in_loop_floor=net.detection)
        return sec.output, sec

    out1, sec = branch(link)
    outputs = {"out0": link.output, "out1": out1}
    free = {}
    if with_free:
        free_main = replace(link, correction=link.correction.with_samples(np.zeros(n)))
        ex = extract_midpoint(free_main, net.extraction_km, floor=net.detection, arm_phase=arm)
        ld_free = regenerate(ex, ld, plan, lo, floor=net.detection)
        free["out0"] = link.free_running_output
        free["out1"] = ld_free if sec is None else _open_loop(sec, ld_free)

    up = np.zeros(n)
    if not net.upstream.is_silent:
        up = synth_power_law_noise(net.upstream, n, fs, -warmup).samples
    ref = np.zeros(n)
    if net.reference_path is not None and not net.reference_path.is_silent:
        ref = synth_power_law_noise(net.reference_path, n, fs, -warmup).samples
    reference = inp.with_samples(inp.samples + up + ref)
    beats = {}
    for name, out in outputs.items():
        # the upstream feed rides on every copy of the input carrier
        b = beat(out.with_samples(out.samples + up), reference, net.detection, stream=(name,))
        beats[name] = b

    def trim(x):
        return PhaseTimeline(fs, 0.0, x.samples[w:], x.nominal_offset)

    return EngineRun(
        "fast", fs,
        {k: trim(v) for k, v in outputs.items()},
        {k: trim(v) for k, v in free.items()},
        {k: BeatNote(trim(v.phase)) for k, v in beats.items()},
    )


# --- slow engine --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Source:
    name: str
    spec: NoiseSpec
    stream: tuple
    transfers: dict  # output -> callable(freqs) -> complex array


def _pll_responses(net: _Network, loop_rate: float):
    rate = max(loop_rate, 20 * net.laser_bandwidth)
    pll = ServoConfig.from_bandwidth(net.laser_bandwidth, dividers=(1, 1), actuator="current")

    def t_and_s(f):
        ci = inverse_controller_response(pll, f, rate)
        return 1 / (1 + ci), ci / (1 + ci)

    return t_and_s


def _loop_gain(servo, span, f, loop_rate):
    if servo is None or not servo.enabled or servo.gain_scale == 0:
        return np.zeros(np.shape(f), dtype=complex)
    ci = inverse_controller_response(servo, f, loop_rate)
    echo = 1 + np.exp(-4j * np.pi * f * span.tau)
    return -0.5 / (ci + echo / 2)


def _sources(net: _Network, loop_rate: float) -> list:
    """Noise sources of the network with their responses at each output.

    Outputs ``out0``/``out1`` are link phases; ``meas_out0``/``meas_out1``
    collect the measurement floors of the end-to-end beats. The upstream
    feed is omitted: it enters input and outputs identically and cancels.
    """
    main, sec, xk = net.main, net.secondary, net.extraction_km
    pll = _pll_responses(net, loop_rate)
    lo_sign = -1 if net.plan.f_LO < 0 else 1
    lock_sign = 1 if net.plan.f_LD + net.plan.f_LO == 0 else -1

    def g2(f):
        """Secondary link: LD phase to Out1 (unity with the attenuator)."""
        if sec is None:
            return np.ones(np.shape(f), dtype=complex)
        loop = _loop_gain(net.secondary_servo, sec, f, loop_rate)
        d = np.exp(-2j * np.pi * f * sec.tau)
        return d * (1 + loop * (d * d - 1))

    def via_ld(h):
        return lambda f: g2(f) * pll(f)[0] * h(f)

    def seg_out(i):
        return lambda f: link_transfer(main, net.main_servo, f, loop_rate, segments=[i])["out"][0]

    def seg_regen(i):
        return lambda f: link_transfer(main, net.main_servo, f, loop_rate, xk, segments=[i])["regen"][0]

    seg_spec = main.segment_noise()
    srcs = []
    for i in range(main.segments):
        srcs.append(_Source(f"main[{i}]", seg_spec, ("main", i), {"out0": seg_out(i), "out1": via_ld(seg_regen(i))}))
    if net.secondary is not None:
        s_spec = sec.segment_noise()
        for i in range(sec.segments):
            def s_out(f, i=i):
                return link_transfer(sec, net.secondary_servo, f, loop_rate, segments=[i])["out"][0]
            srcs.append(_Source(f"secondary[{i}]", s_spec, ("secondary", i), {"out1": s_out}))
    srcs.append(_Source("laser", net.laser_noise, ("laser",), {"out1": lambda f: g2(f) * pll(f)[1]}))

    def lo_resp(f):
        h = -lock_sign * g2(f) * pll(f)[0]
        if sec is not None:
            nb, nlo = net.secondary_servo.dividers
            loop = _loop_gain(net.secondary_servo, sec, f, loop_rate)
            h = h - np.exp(-2j * np.pi * f * sec.tau) * loop * (nb / nlo)
        return lo_sign * h

    srcs.append(_Source("lo", net.lo_noise, ("lo",), {"out1": lo_resp}))
    det = net.detection
    if det is not None and not det.is_silent:
        def main_floor_out(f):
            return link_transfer(main, net.main_servo, f, loop_rate, segments=[0])["floor_out"]

        def main_floor_regen(f):
            return link_transfer(main, net.main_servo, f, loop_rate, xk, segments=[0])["floor_regen"]

        srcs.append(_Source("main-loop", det, ("main-loop",), {"out0": main_floor_out, "out1": via_ld(main_floor_regen)}))
        srcs.append(_Source("pd1", det, ("pd1",), {"out1": via_ld(lambda f: 0.5 + 0 * f)}))
        srcs.append(_Source("pd2", det, ("pd2",), {"out1": lambda f: -g2(f) * pll(f)[0]}))
        if sec is not None:
            def sec_floor(f):
                return np.exp(-2j * np.pi * f * sec.tau) * _loop_gain(net.secondary_servo, sec, f, loop_rate)
            srcs.append(_Source("secondary-loop", det, ("secondary-loop",), {"out1": sec_floor}))
        one = lambda f: np.ones(np.shape(f), dtype=complex)  # noqa: E731
        srcs.append(_Source("beat-out0", det, ("out0",), {"meas_out0": one}))
        srcs.append(_Source("beat-out1", det, ("out1",), {"meas_out1": one}))
    ref = net.reference_path
    if ref is not None and not ref.is_silent:
        minus = lambda f: -np.ones(np.shape(f), dtype=complex)  # noqa: E731
        srcs.append(_Source("reference-path", ref, ("reference-path",), {"meas_out0": minus, "meas_out1": minus}))
    return srcs


OUTPUTS = ("out0", "out1", "meas_out0", "meas_out1")


def predict_output_psd(net: _Network, output: str, freqs, loop_rate: float) -> np.ndarray:
    """Expected one-sided PSD (rad^2/Hz) of an output: sum of |H|^2 S over sources."""
    f = np.asarray(freqs, dtype=float)
    total = np.zeros(f.shape)
    for src in _sources(net, loop_rate):
        h = src.transfers.get(output)
        if h is None or src.spec.is_silent:
            continue
        s = src.spec.psd(f)
        if np.any(s):
            total += np.abs(h(f)) ** 2 * s
    return total


def _alias_excess(sources, output, fs, grid, n_alias):
    """Power folded into (0, fs/2] from above Nyquist, for bin-averaged samples."""
    m = np.concatenate((np.arange(-n_alias, 0), np.arange(1, n_alias + 1)))
    fa = np.abs(grid[:, None] + m[None, :] * fs).ravel()
    weight = np.sinc(fa / fs) ** 2
    total = np.zeros(fa.size)
    for src in sources:
        h = src.transfers.get(output)
        if h is None or not any(b for _, b in src.spec.terms):
            continue
        total += np.abs(h(fa)) ** 2 * src.spec.psd(fa) * weight
    return total.reshape(grid.size, m.size).sum(axis=1)


def simulate_slow(net: _Network, fs: float, duration: float, loop_rate: float, n_alias: int = 2000) -> EngineRun:
    """Frequency-domain run: samples are block averages over 1/fs."""
    n = int(round(duration * fs))
    if n < 16:
        raise ValueError("slow run too short")
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    fpos = freqs[1:]
    sinc = np.sinc(fpos / fs)
    sources = _sources(net, loop_rate)
    spectra = {o: np.zeros(freqs.size, dtype=complex) for o in OUTPUTS}
    for src in sources:
        targets = [o for o in OUTPUTS if o in src.transfers]
        if not targets or not any(b for _, b in src.spec.terms):
            continue
        draw = spectral_draw(_rng([src.spec.rng_seed, *stream_key(src.stream)]), fpos.size)
        amp = np.sqrt(src.spec.psd(fpos) * n * fs / 4.0) * sinc * draw
        for o in targets:
            spectra[o][1:] += src.transfers[o](fpos) * amp
    if n % 2 == 0:
        for o in OUTPUTS:
            spectra[o][-1] = 0.0
    grid = np.logspace(math.log10(fpos[0]), math.log10(fs / 2), 48)
    t = np.arange(n) / fs
    series = {}
    for k, o in enumerate(OUTPUTS):
        excess = _alias_excess(sources, o, fs, grid, n_alias)
        if np.any(excess > 0):
            ex = np.exp(np.interp(np.log(fpos), np.log(grid), np.log(np.maximum(excess, 1e-300))))
            draw = spectral_draw(_rng([net.seed, 0xA11A5, k]), fpos.size)
            spectra[o][1:] += np.sqrt(ex * n * fs / 4.0) * draw
            if n % 2 == 0:
                spectra[o][-1] = 0.0
        series[o] = np.fft.irfft(spectra[o], n)
    # deterministic drifts enter in the time domain with their DC response
    for src in sources:
        if src.spec.drift is None:
            continue
        d = drift_process(src.spec.drift, t, seed=[src.spec.rng_seed, *stream_key(src.stream)])
        for o, h in src.transfers.items():
            series[o] = series[o] + float(np.real(h(np.array([1e-9]))[0])) * d
    if net.arm_phase_drift is not None:
        # half of the arm phase reaches the laser through the PD1 correction
        series["out1"] = series["out1"] + 0.5 * drift_process(net.arm_phase_drift, t, seed=[net.seed, 0xA2])
    plan = net.plan
    out0_off = plan.f_1 + plan.f_2
    out1_off = out0_off + (plan.f_3 + plan.f_4 if net.secondary is not None else 0) + plan.f_LD
    link = {
        "out0": PhaseTimeline(fs, 0.0, series["out0"], out0_off),
        "out1": PhaseTimeline(fs, 0.0, series["out1"], out1_off),
    }
    beats = {
        "out0": BeatNote(PhaseTimeline(fs, 0.0, series["out0"] + series["meas_out0"], out0_off)),
        "out1": BeatNote(PhaseTimeline(fs, 0.0, series["out1"] + series["meas_out1"], out1_off)),
    }
    return EngineRun("slow", fs, link, {}, beats)


def simulate(scn: Scenario, engine: str, **network_kw) -> EngineRun:
    net = _network(scn, **network_kw)
    e = scn.engine
    if engine == "fast":
        return simulate_fast(net, e.fast_rate_hz, e.fast_duration_s, e.warmup_s)
    if engine == "slow":
        return simulate_slow(net, e.slow_rate_hz, e.slow_duration_s, e.fast_rate_hz)
    raise ValueError(f"engine must be fast or slow, got {engine!r}")


def _engines(scn: Scenario) -> list:
    return ["fast", "slow"] if scn.engine.mode == "both" else [scn.engine.mode]


def _stability_engine(scn: Scenario) -> str:
    return "slow" if scn.engine.mode in ("slow", "both") else "fast"


def _reports(scn: Scenario, run: EngineRun, names=("out0", "out1")):
    m = scn.measurement
    reports, series = {}, {}
    for name in names:
        reports[name], series[name] = stability_report(
            run.beats[name], m.gate_s, NU_0, m.weighting, m.tracking_bandwidth_hz
        )
    return reports, series


def _psd(scn: Scenario, x: PhaseTimeline) -> Spectrum:
    m = scn.measurement
    seg = min(len(x), int(round(m.psd_segment_s * x.sample_rate)))
    return welch_psd(x, seg, m.psd_overlap)


def _check_offsets(net: _Network, run: EngineRun):
    """Simulated carrier offsets must equal the frequency map exactly."""
    fmap = nominal_frequency_map(net.plan, "input" if net.secondary is None else "midpoint")
    want = {"out0": fmap["Out0_beat"],
            "out1": fmap["extraction_output_beat"] if net.secondary is None else fmap["Out1_beat"]}
    for name, b in run.beats.items():
        if b.nominal_frequency != want[name]:
            raise AssertionError(f"{name}: simulated offset {b.nominal_frequency} Hz != map {want[name]} Hz")
    return fmap


# --- experiments --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MidpointResult:
    scenario: Scenario
    psds: dict              # psd_main_free, psd_main_comp, psd_ext_free, psd_ext_comp (fast)
    reports: dict           # out0, out1 -> StabilityReport
    series: dict            # out0, out1 -> FreqSeries
    frequency_map: dict
    stability_engine: str
    runs: dict              # engine -> EngineRun
    slow_psds: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"scenario: {self.scenario.name}", f"stability engine: {self.stability_engine}"]
        lines.append(f"main end-to-end beat: {_hz(self.frequency_map['Out0_beat'])}")
        if "Out1_beat" in self.frequency_map:
            lines.append(f"extraction end-to-end beat: {_hz(self.frequency_map['Out1_beat'])}")
        for name, r in self.reports.items():
            lines.extend(_report_lines(name, r))
        if self.psds:
            p = self.psds
            lines.append(f"free-running main PSD at 1 Hz: {band_average(p['psd_main_free'], 1.0):.4g} rad^2/Hz")
            lines.append(f"free-running main PSD at 1 kHz: {band_average(p['psd_main_free'], 1e3):.4g} rad^2/Hz")
            lines.append(f"compensated main PSD at 1 Hz: {band_average(p['psd_main_comp'], 1.0):.4g} rad^2/Hz")
        if self.slow_psds:
            for f0 in (0.1, 0.3, 1.0):
                a = band_average(self.psds["psd_main_comp"], f0, 0.3)
                b = band_average(self.slow_psds["psd_main_comp"], f0, 0.3)
                lines.append(f"engine consistency at {f0:g} Hz: fast/slow compensated PSD ratio {a / b:.3g}")
        return "\n".join(lines) + "\n"


def _hz(v: Fraction) -> str:
    return f"{v} Hz" if v.denominator == 1 else f"{float(v)!r} Hz"


def _report_lines(name: str, r: StabilityReport) -> list:
    lines = [f"{name}: mean fractional offset {r.mean_offset:.3e} +- {r.offset_uncertainty:.3e}"
             f" (bias/uncertainty {abs(r.mean_offset) / r.offset_uncertainty if r.offset_uncertainty else 0:.2f})",
             f"{name}: cycle slips {r.slip_count}"]
    for tau in (1.0, 10.0, 100.0, 1000.0, 10000.0):
        try:
            lines.append(f"{name}: MDEV({tau:g} s) = {r.mdev.at(tau):.3e}  OADEV = {r.oadev.at(tau):.3e}")
        except KeyError:
            pass
    return lines


def run_midpoint(scn: Scenario, runs: dict | None = None) -> MidpointResult:
    """Extraction at mid-link feeding a compensated secondary link.

    Fast engine: the four spectra (free/compensated main and extraction
    outputs). Stability of Out0 and Out1 comes from the slow engine when it
    runs, else from the fast record. ``runs`` may hold engine runs already
    made with :func:`simulate` for this scenario.
    """
    if scn.topology.secondary_length_km is None:
        raise ValueError("midpoint runs need a secondary span")
    runs = dict(runs or {})
    psds, slow_psds = {}, {}
    for eng in _engines(scn):
        if eng not in runs:
            runs[eng] = simulate(scn, eng)
    net = _network(scn)
    fmap = None
    for run in runs.values():
        fmap = _check_offsets(net, run)
    if "fast" in runs:
        r = runs["fast"]
        psds = {
            "psd_main_free": _psd(scn, r.free["out0"]),
            "psd_main_comp": _psd(scn, r.link["out0"]),
            "psd_ext_free": _psd(scn, r.free["out1"]),
            "psd_ext_comp": _psd(scn, r.link["out1"]),
        }
    if "slow" in runs and "fast" in runs:
        x = runs["slow"].link["out0"]
        seg = int(round(min(1000.0, scn.engine.slow_duration_s / 4) * x.sample_rate))
        slow_psds["psd_main_comp"] = welch_psd(x, seg, 0.5)
    stab = _stability_engine(scn)
    reports, series = _reports(scn, runs[stab])
    return MidpointResult(scn, psds, reports, series, fmap, stab, runs, slow_psds)


@dataclass(frozen=True, eq=False)
class InputExtractionResult:
    scenario: Scenario
    reports: dict      # mode -> {"main": report, "ext": report}
    series: dict       # mode -> {"main": FreqSeries, "ext": FreqSeries}
    f_factors: dict    # mode -> F at the configured tau
    frequency_map: dict

    def summary(self) -> str:
        tau = self.scenario.measurement.f_factor_tau_s
        lines = [f"scenario: {self.scenario.name}", f"main end-to-end beat: {_hz(self.frequency_map['Out0_beat'])}"]
        for mode, f in self.f_factors.items():
            lines.append(f"F-factor ({mode}) at tau = {tau:g} s: {f:.3f}")
        for mode, pair in self.reports.items():
            for name, r in pair.items():
                lines.extend(_report_lines(f"{mode}/{name}", r))
        return "\n".join(lines) + "\n"


def run_input_extraction(scn: Scenario, modes=None, floors: bool | None = None) -> InputExtractionResult:
    """Extraction at the link input, attenuator in place of the secondary link.

    For each compensation mode the main-output and extraction-output
    stabilities are computed and F = (sigma_ext / sigma_main)^2 at the
    configured tau.
    """
    if scn.topology.extraction_km != 0 or not scn.topology.attenuator:
        raise ValueError("input extraction needs extraction_km = 0 and the attenuator")
    modes = tuple(scn.experiment.modes if modes is None else modes)
    eng = _stability_engine(scn)
    reports, series, ff = {}, {}, {}
    fmap = None
    for mode in modes:
        net = _network(scn, main_mode=mode, floors=floors)
        e = scn.engine
        if eng == "slow":
            run = simulate_slow(net, e.slow_rate_hz, e.slow_duration_s, e.fast_rate_hz)
        else:
            run = simulate_fast(net, e.fast_rate_hz, e.fast_duration_s, e.warmup_s, with_free=False)
        fmap = _check_offsets(net, run)
        rep, ser = _reports(scn, run)
        reports[mode] = {"main": rep["out0"], "ext": rep["out1"]}
        series[mode] = {"main": ser["out0"], "ext": ser["out1"]}
        ff[mode] = f_factor(rep["out1"].mdev, rep["out0"].mdev, scn.measurement.f_factor_tau_s)
    return InputExtractionResult(scn, reports, series, ff, fmap)


@dataclass(frozen=True, eq=False)
class LoSensitivityResult:
    scenario: Scenario
    with_lo: StabilityReport
    without_lo: StabilityReport
    servo_off: StabilityReport
    relative_change: np.ndarray   # |with/without - 1| per tau
    degradation: np.ndarray       # servo_off / with_lo per tau

    def summary(self) -> str:
        taus = self.with_lo.mdev.taus
        lines = [f"scenario: {self.scenario.name}",
                 f"largest Out1 MDEV change from LO noise (tau >= 1 s): {np.max(self.relative_change[taus >= 1]):.3%}",
                 f"smallest degradation with the secondary servo off: {np.min(self.degradation):.3g}x"]
        for t, c, d in zip(taus, self.relative_change, self.degradation):
            lines.append(f"tau {t:g} s: change {c:.3%}, servo-off degradation {d:.3g}x")
        return "\n".join(lines) + "\n"


def run_lo_sensitivity(scn: Scenario, lo_noise: NoiseSpec | None = None) -> LoSensitivityResult:
    """Out1 stability with and without LO noise, all other seeds shared, plus
    the same LO noise with the secondary servo ablated."""
    lo_noise = scn.experiment.lo_test_noise if lo_noise is None else lo_noise
    eng = _stability_engine(scn)
    out = {}
    for key, kw in (("with", dict(lo_noise=lo_noise)), ("without", dict(lo_noise=NoiseSpec())),
                    ("off", dict(lo_noise=lo_noise, secondary_enabled=False))):
        run = simulate(scn, eng, **kw)
        out[key] = _reports(scn, run, ("out1",))[0]["out1"]
    a, b, c = out["with"].mdev.values, out["without"].mdev.values, out["off"].mdev.values
    with np.errstate(divide="ignore", invalid="ignore"):
        change = np.where(b > 0, np.abs(a / b - 1), np.where(a > 0, np.inf, 0.0))
        degr = np.where(a > 0, c / a, np.inf)
    return LoSensitivityResult(scn, out["with"], out["without"], out["off"], change, degr)


@dataclass(frozen=True, eq=False)
class ArmMatchingResult:
    scenario: Scenario
    mismatches: tuple
    reports: dict            # mismatch -> Out1 report
    floor_tau: float
    floors: dict             # mismatch -> Out1 MDEV at floor_tau
    mismatch_component: dict  # mismatch -> MDEV of (y - y_control) at floor_tau

    def summary(self) -> str:
        lines = [f"scenario: {self.scenario.name}", f"Out1 floor evaluated at tau = {self.floor_tau:g} s"]
        for m in self.mismatches:
            r = self.reports[m]
            lines.append(f"mismatch {m:g} m: Out1 MDEV {self.floors[m]:.3e}, mismatch component "
                         f"{self.mismatch_component[m]:.3e}, mean offset {r.mean_offset:.3e}")
        return "\n".join(lines) + "\n"


def run_arm_matching(scn: Scenario, mismatches=None, drift: DriftSpec | None = None) -> ArmMatchingResult:
    """Out1 long-term stability versus arm-length mismatch of the extraction
    interferometer. Mismatch 0 is the control; every run shares seeds."""
    mismatches = tuple(scn.experiment.arm_mismatches_m if mismatches is None else mismatches)
    eng = _stability_engine(scn)
    control_run = simulate(scn, eng)
    control_rep, control_y = _reports(scn, control_run, ("out1",))
    taus = control_rep["out1"].mdev.taus
    floor_tau = float(taus[taus <= 1e4][-1]) if np.any(taus <= 1e4) else float(taus[-1])
    reports, floors, comp = {}, {}, {}
    for m in mismatches:
        if m == 0:
            rep, y = control_rep, control_y
        else:
            rep, y = _reports(scn, simulate(scn, eng, arm_mismatch_m=m, arm_drift=drift), ("out1",))
        reports[m] = rep["out1"]
        floors[m] = rep["out1"].mdev.at(floor_tau)
        diff = FreqSeries(y["out1"].gate, y["out1"].samples - control_y["out1"].samples)
        comp[m] = 0.0 if m == 0 else mdev(diff, [floor_tau]).values[0]
    return ArmMatchingResult(scn, mismatches, reports, floor_tau, floors, comp)


def run_scenario(scn: Scenario):
    kind = scn.experiment.kind
    if kind == "midpoint":
        return run_midpoint(scn)
    if kind == "input_extraction":
        return run_input_extraction(scn)
    if kind == "lo_sensitivity":
        return run_lo_sensitivity(scn)
    return run_arm_matching(scn)


# --- presets ------------------------------------------------------------------------

# Measurement-interferometer reference arm: white frequency noise, common to
# both end-to-end beats. Solved by scripts/calibrate_floors.py for F = 0.6 on
# the input-extraction bench and frozen here.
REFERENCE_PATH_WHITE_FM = 3.8e-6  # rad^2 Hz, b_-2

_BASE = {
    "seed": 1,
    "topology": {"main_length_km": 50.0, "extraction_km": 25.0, "secondary_length_km": 50.0, "attenuator": False},
    "floors": {
        "enabled": True,
        "reference_path": {"terms": [[-2, REFERENCE_PATH_WHITE_FM]]},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


PRESETS = {
    "midpoint-50km": _merge(_BASE, {
        "description": "Extraction at the mid-point of a 50 km main link feeding a 50 km compensated "
                       "secondary link; free-running and compensated PSDs, Out0/Out1 MDEV and OADEV.",
        "experiment": {"kind": "midpoint"},
    }),
    "input-extraction": _merge(_BASE, {
        "description": "Extraction at the main-link input with an attenuator instead of the secondary "
                       "link, free/poor/optimal compensation; stability curves and the F-factor.",
        "topology": {"extraction_km": 0.0, "secondary_length_km": None, "attenuator": True},
        "engine": {"mode": "slow", "slow_duration_s": 2e4},
        "experiment": {"kind": "input_extraction"},
    }),
    "lo-sensitivity": _merge(_BASE, {
        "description": "Out1 stability with and without local-oscillator noise and with the secondary "
                       "servo ablated; Out1 should not depend on the LO.",
        "engine": {"mode": "slow", "slow_duration_s": 2e4},
        "experiment": {"kind": "lo_sensitivity"},
    }),
    "arm-matching": _merge(_BASE, {
        "description": "Out1 long-term floor versus arm-length mismatch of the extraction interferometer.",
        "engine": {"mode": "slow", "slow_duration_s": 1e5},
        "experiment": {"kind": "arm_matching"},
    }),
}

PRESET_ALIASES = {"paper-50km": "midpoint-50km", "section5": "input-extraction"}


def preset_names() -> list:
    return list(PRESETS)


# --- config dictionaries ------------------------------------------------------------


class ConfigError(ValueError):
    """Invalid scenario configuration; the message starts with the key path."""


_SECTIONS = {
    "topology": Topology,
    "plan": FrequencyPlan,
    "noise": NoiseConfig,
    "floors": FloorConfig,
    "servos": ServoSettings,
    "engine": EngineConfig,
    "measurement": MeasurementConfig,
    "experiment": ExperimentConfig,
}
_TOP_LEVEL = ("name", "description", "seed")
_NOISE_KEYS = ("terms", "band", "drift")
_DRIFT_KEYS = ("linear_rate", "diurnal_amplitude", "diurnal_period")
_TUPLE_FIELDS = {"main_dividers", "secondary_dividers", "modes", "arm_mismatches_m"}
_PLAN_KEYS = ("nu_0", "f_1", "f_2", "f_3", "f_4", "f_LO", "f1_plus_f2")


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(d).__name__}")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path + '.' if path else ''}{k}: unknown key (allowed: {', '.join(allowed)})")


def _float(v, path):
    if isinstance(v, bool):
        raise ConfigError(f"{path}: expected a number")
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {v!r}") from None


def _drift_from(d, path):
    if d is None:
        return None
    _check_keys(d, _DRIFT_KEYS, path)
    return DriftSpec(**{k: _float(v, f"{path}.{k}") for k, v in d.items()})


def _noise_from(d, path):
    if d is None:
        return NoiseSpec()
    _check_keys(d, _NOISE_KEYS, path)
    kw = {}
    if "terms" in d:
        terms = d["terms"]
        if not isinstance(terms, (list, tuple)) or any(not isinstance(t, (list, tuple)) or len(t) != 2 for t in terms):
            raise ConfigError(f"{path}.terms: expected a list of [alpha, b] pairs")
        kw["terms"] = tuple((t[0], _float(t[1], f"{path}.terms")) for t in terms)
    if "band" in d:
        band = d["band"]
        if not isinstance(band, (list, tuple)) or len(band) != 2:
            raise ConfigError(f"{path}.band: expected [f_min, f_max]")
        kw["band"] = tuple(_float(v, f"{path}.band") for v in band)
    if "drift" in d:
        kw["drift"] = _drift_from(d["drift"], f"{path}.drift")
    try:
        return NoiseSpec(**kw)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def _plan_from(d, path):
    _check_keys(d, _PLAN_KEYS, path)
    kw = {}
    for k, v in d.items():
        if v is None:
            kw[k] = None
            continue
        if isinstance(v, float):
            raise ConfigError(f"{path}.{k}: give exact frequencies as integers or decimal strings, not floats")
        try:
            kw[k] = Fraction(v.strip()) if isinstance(v, str) else Fraction(v)
        except (TypeError, ValueError, ZeroDivisionError):
            raise ConfigError(f"{path}.{k}: not an exact frequency: {v!r}") from None
    base = {k: getattr(DEFAULT_PLAN, k) for k in _PLAN_KEYS}
    if "f_LO" in kw or "f_4" in kw:
        base["f_3"] = None  # recomputed from f_LO - f_4 unless given
    base.update(kw)
    try:
        return FrequencyPlan(**base)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def _section_from(cls, d, path):
    names = [f.name for f in fields(cls)]
    _check_keys(d, names, path)
    kw = {}
    for k, v in d.items():
        p = f"{path}.{k}"
        default = getattr(cls(), k) if cls is not FrequencyPlan else None
        if isinstance(default, NoiseSpec) or k == "lo_test_noise":
            kw[k] = _noise_from(v, p)
        elif isinstance(default, DriftSpec):
            kw[k] = _drift_from(v, p)
        elif k in _TUPLE_FIELDS:
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{p}: expected a list")
            kw[k] = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{p}: expected true or false")
            kw[k] = v
        elif isinstance(default, str):
            if not isinstance(v, str):
                raise ConfigError(f"{p}: expected a string")
            kw[k] = v
        elif isinstance(default, int) and k == "segments":
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{p}: expected an integer")
            kw[k] = v
        else:
            kw[k] = None if v is None else _float(v, p)
    try:
        return cls(**kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from None


def scenario_from_dict(d: dict) -> Scenario:
    """Build a :class:`Scenario` from a nested mapping; unknown keys are errors."""
    _check_keys(d, _TOP_LEVEL + tuple(_SECTIONS), "")
    kw = {}
    for k in _TOP_LEVEL:
        if k in d:
            v = d[k]
            if k == "seed":
                if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                    raise ConfigError("seed: expected a non-negative integer")
            elif not isinstance(v, str):
                raise ConfigError(f"{k}: expected a string")
            kw[k] = v
    for k, cls in _SECTIONS.items():
        if k in d:
            kw[k] = _plan_from(d[k], k) if cls is FrequencyPlan else _section_from(cls, d[k], k)
    try:
        scn = Scenario(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    validate_network(scn)
    return scn


def validate_network(scn: Scenario) -> None:
    """Resolve servos and, for the fast engine, delay snapping; raise ConfigError."""
    try:
        net = _network(scn)
        if scn.engine.mode in ("fast", "both"):
            for span in (net.main, net.secondary):
                if span is not None:
                    segment_delays(span, scn.engine.fast_rate_hz)
    except ValueError as e:
        raise ConfigError(f"servos/engine: {e}") from None
    eng = _stability_engine(scn)
    length = scn.engine.slow_duration_s if eng == "slow" else scn.engine.fast_duration_s
    if length < 5 * scn.measurement.gate_s:
        raise ConfigError(
            f"engine.{eng}_duration_s: {length:g} s is shorter than five gates "
            f"({5 * scn.measurement.gate_s:g} s), too short for any stability estimate"
        )


def _frac_str(v: Fraction) -> str:
    """Exact decimal string when the value terminates, else ``p/q``."""
    with localcontext() as ctx:
        ctx.prec = 60
        d = Decimal(v.numerator) / Decimal(v.denominator)
    if Fraction(d) == v:
        return format(d.normalize(), "f")
    return f"{v.numerator}/{v.denominator}"


def _plain(v):
    if isinstance(v, NoiseSpec):
        out = {"terms": [[a, b] for a, b in v.terms], "band": [v.band[0], v.band[1]]}
        if v.drift is not None:
            out["drift"] = _plain(v.drift)
        return out
    if isinstance(v, DriftSpec):
        return {k: getattr(v, k) for k in _DRIFT_KEYS}
    if isinstance(v, Fraction):
        return _frac_str(v)
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def scenario_to_dict(scn: Scenario) -> dict:
    """Inverse of :func:`scenario_from_dict` (every field spelled out)."""
    out = {k: getattr(scn, k) for k in _TOP_LEVEL}
    for k in _SECTIONS:
        sec = getattr(scn, k)
        keys = _PLAN_KEYS if k == "plan" else [f.name for f in fields(sec)]
        out[k] = {n: _plain(getattr(sec, n)) for n in keys}
    return out


def load_preset(name: str) -> Scenario:
    key = PRESET_ALIASES.get(name, name)
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(PRESETS)})")
    return scenario_from_dict({"name": key, **PRESETS[key]})
