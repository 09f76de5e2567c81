"""Ideal optical and RF components: AOMs, photodiode beats, dividers, mixers,
the local oscillator and the offset phase-locked laser diode.

Phases follow a signed-offset convention: a signal with negative nominal
frequency carries the negated phase of the physical RF tone at ``|f|``.
With that convention beat, divide and mix are plain linear algebra on phase
and exact algebra on nominal frequency.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .servo import ServoConfig, run_loop
from .signals import NoiseSpec, PhaseTimeline, _check_grids, as_fraction, synth_power_law_noise

__all__ = [
    "BeatNote",
    "FrequencyPlan",
    "LaserDiode",
    "aom",
    "beat",
    "divide",
    "mix",
    "local_oscillator",
    "lock_laser",
    "tracking_filter",
    "LockFailure",
    "DEFAULT_PLAN",
]


class LockFailure(RuntimeError):
    """The offset lock lost the phase detector range (error beyond +-pi)."""


@dataclass(frozen=True, eq=False)
class BeatNote:
    """RF beat note: a phase timeline at an exact nominal frequency (Hz)."""

    phase: PhaseTimeline
    nominal_frequency: Fraction = None

    def __post_init__(self):
        freq = self.phase.nominal_offset if self.nominal_frequency is None else as_fraction(self.nominal_frequency)
        if freq != self.phase.nominal_offset:
            object.__setattr__(self, "phase", self.phase.with_samples(self.phase.samples, freq))
        object.__setattr__(self, "nominal_frequency", freq)

    @property
    def samples(self) -> np.ndarray:
        return self.phase.samples

    @property
    def sample_rate(self) -> float:
        return self.phase.sample_rate

    @property
    def rf_frequency(self) -> Fraction:
        """Frequency a spectrum analyser would show."""
        return abs(self.nominal_frequency)

    @property
    def rf_phase(self) -> np.ndarray:
        """Phase of the physical tone at ``rf_frequency``."""
        return -self.samples if self.nominal_frequency < 0 else self.samples

    def __eq__(self, other):
        if not isinstance(other, BeatNote):
            return NotImplemented
        return self.phase == other.phase

    __hash__ = None


@dataclass(frozen=True)
class FrequencyPlan:
    """Exact frequency bookkeeping of the branching link.

    ``f_1``/``f_2`` are the main-link input/output AOM shifts, ``f_3``/``f_4``
    the secondary-link ones (negative), ``f_LO`` the local oscillator. The
    laser diode is locked ``|f_LO|`` above the corrected extracted carrier,
    which is what brings the secondary output back onto ``nu_0 + f_1 + f_2``.
    ``f1_plus_f2`` optionally pins the main end-to-end beat (75 MHz in the
    shipped presets).
    """

    nu_0: Fraction = Fraction(194_400_000_000_000)
    f_1: Fraction = Fraction(0)
    f_2: Fraction = Fraction(0)
    f_3: Fraction = None
    f_4: Fraction = Fraction(0)
    f_LO: Fraction = Fraction(0)
    f1_plus_f2: Fraction | None = None

    def __post_init__(self):
        for name in ("nu_0", "f_1", "f_2", "f_4", "f_LO"):
            object.__setattr__(self, name, as_fraction(getattr(self, name)))
        if self.f_3 is None:
            object.__setattr__(self, "f_3", self.f_LO - self.f_4)
        else:
            object.__setattr__(self, "f_3", as_fraction(self.f_3))
        if self.f1_plus_f2 is not None:
            object.__setattr__(self, "f1_plus_f2", as_fraction(self.f1_plus_f2))
        self.validate()

    def validate(self):
        if self.nu_0 <= 0:
            raise ValueError("nu_0 must be positive")
        if self.f_1 < 0 or self.f_2 < 0:
            raise ValueError("main-link AOM shifts f_1, f_2 must be positive (or zero)")
        if self.f_3 > 0 or self.f_4 > 0:
            raise ValueError("secondary-link AOM shifts f_3, f_4 must be negative (or zero)")
        if self.f_3 != self.f_LO - self.f_4:
            raise ValueError(
                f"inconsistent plan: f_3 = {self.f_3} Hz but f_LO - f_4 = {self.f_LO - self.f_4} Hz "
                "(constraint f3 = f_LO - f4)"
            )
        if self.f1_plus_f2 is not None and self.f_1 + self.f_2 != self.f1_plus_f2:
            raise ValueError(
                f"inconsistent plan: f_1 + f_2 = {self.f_1 + self.f_2} Hz violates the constraint "
                f"f1 + f2 = {self.f1_plus_f2} Hz"
            )

    @property
    def f_LD(self) -> Fraction:
        """Laser-diode lock offset above the corrected extracted carrier."""
        return -self.f_LO

    @property
    def nu_plus(self) -> Fraction:
        return self.nu_0 + self.f_1

    @property
    def nu_minus(self) -> Fraction:
        return self.nu_0 + self.f_1 + 2 * self.f_2

    @property
    def nu_LD(self) -> Fraction:
        return self.nu_0 + self.f_1 + self.f_2 + self.f_LD


DEFAULT_PLAN = FrequencyPlan(
    f_1=Fraction(40_000_000),
    f_2=Fraction(35_000_000),
    f_4=Fraction(-37_500_000),
    f_LO=Fraction(-75_000_000),
    f1_plus_f2=Fraction(75_000_000),
)


def aom(x: PhaseTimeline, shift, correction: PhaseTimeline | None = None) -> PhaseTimeline:
    """Shift the carrier by ``shift`` Hz and add the drive phase ``correction``."""
    shift = as_fraction(shift)
    samples = x.samples
    if correction is not None:
        _check_grids([x, correction])
        samples = samples + correction.samples
    return x.with_samples(samples, x.nominal_offset + shift)


def beat(a: PhaseTimeline, b: PhaseTimeline, floor: NoiseSpec | None = None, stream=None) -> BeatNote:
    """Photodiode beat of ``a`` against ``b``; optional additive detection floor."""
    _check_grids([a, b])
    phase = a.samples - b.samples
    if floor is not None and not floor.is_silent:
        phase = phase + synth_power_law_noise(floor, len(a), a.sample_rate, a.start_time, stream=stream).samples
    freq = a.nominal_offset - b.nominal_offset
    return BeatNote(PhaseTimeline(a.sample_rate, a.start_time, phase, freq))


def divide(b: BeatNote, n: int) -> BeatNote:
    if int(n) != n or n < 1:
        raise ValueError(f"divider ratio must be a positive integer, got {n!r}")
    n = int(n)
    return BeatNote(b.phase.with_samples(b.samples / n, b.nominal_frequency / n))


def mix(a: BeatNote, b: BeatNote, sign: int = -1) -> BeatNote:
    """Mixer product ``a + sign * b`` (sign is +1 or -1)."""
    if sign not in (1, -1):
        raise ValueError("mix sign must be +1 or -1")
    _check_grids([a.phase, b.phase])
    return BeatNote(a.phase.with_samples(a.samples + sign * b.samples, a.nominal_frequency + sign * b.nominal_frequency))


def local_oscillator(frequency, noise: NoiseSpec | None, n: int, fs: float, start_time: float = 0.0) -> BeatNote:
    """RF reference at signed ``frequency``; ``noise`` is the physical-tone phase noise."""
    frequency = as_fraction(frequency)
    if noise is None or noise.is_silent:
        phys = np.zeros(n)
    else:
        phys = synth_power_law_noise(noise, n, fs, start_time).samples
    signed = -phys if frequency < 0 else phys
    return BeatNote(PhaseTimeline(fs, start_time, signed, frequency))


@dataclass(frozen=True)
class LaserDiode:
    """Narrow-linewidth laser diode with an offset phase lock.

    ``pll`` bandwidth must stay below a tenth of the simulation rate; the
    physical lock is about 100 kHz wide.
    """

    free_running_noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(((-2, 30.0),), rng_seed=7))
    pll: ServoConfig = field(default_factory=lambda: ServoConfig.from_bandwidth(100e3, dividers=(1, 1), actuator="current"))
    loop_delay_samples: int = 0


def lock_laser(ld: LaserDiode, reference, offset, lo: BeatNote | None = None,
               return_error: bool = False, floor: NoiseSpec | None = None, stream=None):
    """Offset-lock ``ld`` to ``reference`` at ``offset`` Hz, referenced to ``lo``.

    The phase detector sees ``beat(ld, reference)`` mixed with the LO. In
    closed loop the laser phase follows ``reference`` plus the LO phase
    within the loop bandwidth; above it the free-running laser noise passes.

    ``floor`` is a detection floor on the lock photodiode; the loop writes
    it onto the laser within its bandwidth. Returns the laser output timeline
    (and the in-loop error beat if ``return_error``).
    """
    ref = reference.phase if isinstance(reference, BeatNote) else reference
    offset = as_fraction(offset)
    fs = ref.sample_rate
    if ld.pll.enabled and ld.pll.bandwidth >= fs / 10:
        raise ValueError(
            f"laser lock bandwidth {ld.pll.bandwidth:.4g} Hz is not below fs/10 = {fs / 10:.4g} Hz; "
            "raise the engine rate or narrow the lock"
        )
    n = len(ref)
    if lo is None:
        lo = BeatNote(PhaseTimeline(fs, ref.start_time, np.zeros(n), -offset))
    _check_grids([ref, lo.phase])
    if offset + lo.nominal_frequency == 0:
        sign = 1
    elif offset - lo.nominal_frequency == 0:
        sign = -1
    else:
        raise ValueError(f"LO at {lo.nominal_frequency} Hz cannot serve a {offset} Hz offset lock")
    target = ref.samples - sign * lo.samples
    free = synth_power_law_noise(ld.free_running_noise, n, fs, ref.start_time).samples
    det = np.zeros(n)
    if floor is not None and not floor.is_silent:
        det = synth_power_law_noise(floor, n, fs, ref.start_time, stream=stream).samples
    plant = np.zeros(ld.loop_delay_samples + 1)
    plant[-1] = 1.0
    dist = free - target + det
    if dist.size:
        # acquisition picks the lock point nearest the starting phase
        dist = dist - dist[0]
    _, err = run_loop(dist, ld.pll, fs, plant)
    if ld.pll.enabled and np.max(np.abs(err), initial=0.0) >= math.pi:
        k = int(np.argmax(np.abs(err) >= math.pi))
        raise LockFailure(
            f"laser lock error reached {err[k]:.3g} rad at t = {ref.start_time + k / fs:.6g} s; "
            "the reference moves faster than the loop can capture"
        )
    out = PhaseTimeline(fs, ref.start_time, target + err - det, ref.nominal_offset + offset)
    if not return_error:
        return out
    error = mix(beat(out, ref), lo, sign)
    return out, error


def tracking_filter(b: BeatNote, bandwidth: float = 100e3) -> BeatNote:
    """First-order low-pass on beat phase, as done by a tracking oscillator."""
    fs = b.sample_rate
    a = 1.0 - math.exp(-2 * math.pi * bandwidth / fs)
    x = b.samples
    if x.size == 0:
        return b
    y, _ = sps.lfilter([a], [1.0, a - 1.0], x, zi=[(1.0 - a) * x[0]])
    return BeatNote(b.phase.with_samples(y))
