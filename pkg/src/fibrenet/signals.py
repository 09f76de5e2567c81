"""Sampled phase timelines, power-law noise synthesis and timeline algebra.

Every signal in the simulator is a :class:`PhaseTimeline`: a uniformly
sampled phase deviation (rad) plus the exact frequency offset of the carrier
it rides on, relative to the reference optical carrier. Offsets are kept as
:class:`fractions.Fraction` so that AOM and LO bookkeeping never rounds.
"""
from __future__ import annotations

import functools
import math
import zlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from numbers import Rational
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "PhaseTimeline",
    "DriftSpec",
    "NoiseSpec",
    "as_fraction",
    "zeros_like",
    "synth_power_law_noise",
    "synth_from_psd",
    "drift_process",
    "noise_psd",
    "snap_delay",
    "delay",
    "delay_samples",
    "combine",
    "decimate",
    "fit_anchored_power_law",
    "fit_power_law",
    "spool_50km_noise",
    "SPEED_OF_LIGHT",
]

SPEED_OF_LIGHT = 299_792_458.0  # m/s

ALLOWED_EXPONENTS = (0, -1, -2, -3, -4)


def as_fraction(value) -> Fraction:
    """Exact rational from an int, Fraction, decimal string or float.

    Floats are converted exactly (binary expansion), strings are parsed as
    decimals, so ``as_fraction("37.5e6") == Fraction(37500000)``.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, Rational)):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite frequency {value!r}")
        return Fraction(value)
    raise TypeError(f"cannot convert {type(value).__name__} to an exact frequency")


@dataclass(frozen=True, eq=False)
class PhaseTimeline:
    """Uniformly sampled phase deviation riding on a carrier offset.

    Parameters
    ----------
    sample_rate : float
        Sampling rate in Hz.
    start_time : float
        Time of the first sample in s.
    samples : ndarray
        Phase deviation in rad. Stored read-only.
    nominal_offset : Fraction
        Exact frequency offset of the carrier from the reference (Hz).
    """

    sample_rate: float
    start_time: float
    samples: np.ndarray
    nominal_offset: Fraction = field(default=Fraction(0))

    def __post_init__(self):
        if not (self.sample_rate > 0 and math.isfinite(self.sample_rate)):
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate!r}")
        arr = np.array(self.samples, dtype=float, copy=True)
        if arr.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples contain NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "nominal_offset", as_fraction(self.nominal_offset))
        object.__setattr__(self, "start_time", float(self.start_time))
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.samples.size) / self.sample_rate

    def same_grid(self, other: "PhaseTimeline") -> bool:
        return (
            self.sample_rate == other.sample_rate
            and self.start_time == other.start_time
            and self.samples.size == other.samples.size
        )

    def with_samples(self, samples, nominal_offset=None) -> "PhaseTimeline":
        offset = self.nominal_offset if nominal_offset is None else nominal_offset
        return replace(self, samples=samples, nominal_offset=offset)

    def __eq__(self, other):
        if not isinstance(other, PhaseTimeline):
            return NotImplemented
        return (
            self.same_grid(other)
            and self.nominal_offset == other.nominal_offset
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


def zeros_like(x: PhaseTimeline, nominal_offset=0) -> PhaseTimeline:
    return PhaseTimeline(x.sample_rate, x.start_time, np.zeros(len(x)), as_fraction(nominal_offset))


def _check_grids(xs: Sequence[PhaseTimeline]):
    first = xs[0]
    for other in xs[1:]:
        if not first.same_grid(other):
            raise ValueError(
                "timelines are on different grids: "
                f"(fs={first.sample_rate}, t0={first.start_time}, n={len(first)}) vs "
                f"(fs={other.sample_rate}, t0={other.start_time}, n={len(other)})"
            )


@dataclass(frozen=True)
class DriftSpec:
    """Slow deterministic drift: linear rate plus one diurnal sinusoid.

    Units are those of the process it drives (rad for phase paths, K for a
    temperature process).
    """

    linear_rate: float = 1e-3
    diurnal_amplitude: float = 0.5
    diurnal_period: float = 86400.0

    def __post_init__(self):
        if self.diurnal_period <= 0:
            raise ValueError("diurnal_period must be positive")
        for name in ("linear_rate", "diurnal_amplitude"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def scaled(self, factor: float) -> "DriftSpec":
        return DriftSpec(self.linear_rate * factor, self.diurnal_amplitude * factor, self.diurnal_period)


@dataclass(frozen=True)
class NoiseSpec:
    """Power-law phase noise ``S(f) = sum(b * f**alpha)`` on a band, plus drift.

    ``terms`` holds ``(alpha, b)`` pairs with integer ``alpha`` in [-4, 0] and
    ``b`` in rad^2/Hz at 1 Hz. ``band`` limits the synthesized spectrum; the
    upper edge is clipped to Nyquist at synthesis time.
    """

    terms: tuple = ()
    band: tuple = (1e-6, math.inf)
    drift: DriftSpec | None = None
    rng_seed: int = 0

    def __post_init__(self):
        terms = []
        for alpha, b in self.terms:
            if isinstance(alpha, float) and alpha.is_integer():
                alpha = int(alpha)
            if not isinstance(alpha, (int, np.integer)) or int(alpha) not in ALLOWED_EXPONENTS:
                raise ValueError(f"exponent {alpha!r} outside the integer range [-4, 0]")
            b = float(b)
            if not (b >= 0 and math.isfinite(b)):
                raise ValueError(f"coefficient for alpha={alpha} must be finite and >= 0, got {b!r}")
            terms.append((int(alpha), b))
        object.__setattr__(self, "terms", tuple(terms))
        f_min, f_max = (float(v) for v in self.band)
        if not (0 <= f_min < f_max):
            raise ValueError(f"band must satisfy 0 <= f_min < f_max, got {self.band!r}")
        object.__setattr__(self, "band", (f_min, f_max))
        object.__setattr__(self, "rng_seed", int(self.rng_seed))

    @property
    def is_silent(self) -> bool:
        silent_drift = self.drift is None or (
            self.drift.linear_rate == 0 and self.drift.diurnal_amplitude == 0
        )
        return all(b == 0 for _, b in self.terms) and silent_drift

    def psd(self, freqs) -> np.ndarray:
        """Model PSD on ``freqs`` (zero outside the band)."""
        return noise_psd(self, freqs)

    def scaled(self, factor: float) -> "NoiseSpec":
        """PSD scaled by ``factor``; drift amplitude scales by sqrt(factor)."""
        drift = None if self.drift is None else self.drift.scaled(math.sqrt(factor))
        return replace(self, terms=tuple((a, b * factor) for a, b in self.terms), drift=drift)

    def with_seed(self, seed: int) -> "NoiseSpec":
        return replace(self, rng_seed=int(seed))


def noise_psd(spec: NoiseSpec, freqs) -> np.ndarray:
    f = np.asarray(freqs, dtype=float)
    out = np.zeros_like(f)
    f_min, f_max = spec.band
    inband = (f > 0) & (f >= f_min) & (f <= f_max)
    fi = f[inband]
    acc = np.zeros_like(fi)
    for alpha, b in spec.terms:
        if b:
            acc += b * fi ** float(alpha)
    out[inband] = acc
    return out


def stream_key(stream) -> list:
    """Integer words for a sub-stream label (ints, or strings via CRC-32)."""
    if stream is None:
        return []
    items = stream if isinstance(stream, (tuple, list)) else [stream]
    return [zlib.crc32(s.encode()) if isinstance(s, str) else int(s) for s in items]


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def spectral_draw(rng: np.random.Generator, n_bins: int) -> np.ndarray:
    """Unit circular complex Gaussian spectrum, E|Z|^2 = 2."""
    return rng.standard_normal(2 * n_bins).view(np.complex128)


def shaped_spectrum(psd_bins: np.ndarray, n: int, fs: float, draw: np.ndarray) -> np.ndarray:
    """Scale a unit draw so that ``irfft`` yields the one-sided PSD ``psd_bins``."""
    spec = draw * np.sqrt(psd_bins * n * fs / 4.0)
    spec[0] = 0.0
    if n % 2 == 0:
        spec[-1] = 0.0
    return spec


def synth_from_psd(psd, n: int, fs: float, seed=0) -> np.ndarray:
    """Gaussian samples with one-sided PSD ``psd(f)`` by frequency-domain shaping."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    bins = np.asarray(psd(freqs), dtype=float)
    draw = spectral_draw(_rng(seed), freqs.size)
    return np.fft.irfft(shaped_spectrum(bins, n, fs, draw), n)


@functools.lru_cache(maxsize=4)
def _spectral_amplitude(terms: tuple, band: tuple, n: int, fs: float) -> np.ndarray:
    # shared by every draw of one spectrum (all segments of a span, say)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    amp = np.sqrt(noise_psd(NoiseSpec(terms, band), freqs) * (n * fs / 4.0))
    amp[0] = 0.0
    if n % 2 == 0:
        amp[-1] = 0.0
    amp.flags.writeable = False
    return amp


def drift_process(drift: DriftSpec | None, t: np.ndarray, seed=0) -> np.ndarray:
    """Linear ramp plus diurnal sinusoid with a seeded starting phase."""
    if drift is None:
        return np.zeros_like(t)
    phase0 = _rng([*np.atleast_1d(seed).tolist(), 0xD1F7]).uniform(0, 2 * np.pi)
    out = drift.linear_rate * (t - t[0]) if t.size else np.zeros(0)
    if drift.diurnal_amplitude:
        out = out + drift.diurnal_amplitude * np.sin(2 * np.pi * t / drift.diurnal_period + phase0)
    return out


def _surviving_bins(spec: NoiseSpec, n: int, fs: float) -> int:
    """Number of positive rfft bins of an ``n``-point record inside the band."""
    df = fs / n
    f_min, f_max = spec.band
    lo = max(1, math.ceil(f_min / df - 1e-9))
    hi = min(n // 2, math.floor(min(f_max, fs / 2) / df + 1e-9))
    return max(0, hi - lo + 1)


def synth_power_law_noise(spec: NoiseSpec, n: int, fs: float, start_time: float = 0.0,
                          nominal_offset=0, stream=None) -> PhaseTimeline:
    """Synthesize ``n`` samples of the noise described by ``spec`` at rate ``fs``.

    A complex Gaussian spectrum is drawn, weighted by ``sqrt(S(f))`` and
    inverse transformed; drift terms are added in the time domain. The same
    ``(spec, n, fs, stream)`` always yields bit-identical samples. ``stream``
    selects an independent sub-stream of ``spec.rng_seed`` (e.g. a segment
    index).
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if fs <= 0:
        raise ValueError("fs must be positive")
    if _surviving_bins(spec, n, fs) == 0 and any(b for _, b in spec.terms):
        raise ValueError(
            f"no frequency bin of a {n}-sample record at {fs} Hz falls inside band {spec.band}"
        )
    seed = [spec.rng_seed, *stream_key(stream)]
    t = start_time + np.arange(n) / fs
    active = [(a, b) for a, b in spec.terms if b]
    if not active:
        x = np.zeros(n)
    elif len(active) == 1 and active[0][0] == 0 and spec.band[0] <= fs / n and spec.band[1] >= fs / 2:
        # flat over the whole grid: draw directly in time
        x = _rng(seed).standard_normal(n) * math.sqrt(active[0][1] * fs / 2.0)
    else:
        amp = _spectral_amplitude(spec.terms, spec.band, n, float(fs))
        draw = spectral_draw(_rng(seed), amp.size)
        draw *= amp
        x = np.fft.irfft(draw, n)
    if spec.drift is not None:
        x = x + drift_process(spec.drift, t, seed=seed)
    return PhaseTimeline(fs, start_time, x, as_fraction(nominal_offset))


def snap_delay(tau: float, fs: float, rel_tol: float = 0.01) -> int:
    """Number of samples representing ``tau``; refuse if snapping error > rel_tol."""
    if tau < 0:
        raise ValueError(f"delay must be >= 0, got {tau!r}")
    k = int(round(tau * fs))
    if tau == 0:
        return 0
    err = abs(k / fs - tau) / tau
    if err > rel_tol:
        raise ValueError(
            f"delay {tau:.6g} s is not resolvable at {fs:g} Hz: nearest grid value "
            f"{k / fs:.6g} s ({k} samples) is off by {100 * err:.2f}% (limit {100 * rel_tol:g}%)"
        )
    return k


def delay_samples(arr: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` samples, holding the first value at the start."""
    if k == 0:
        return arr.copy()
    out = np.empty_like(arr)
    if k >= arr.size:
        out[:] = arr[0]
        return out
    out[:k] = arr[0]
    out[k:] = arr[:-k]
    return out


def delay(x: PhaseTimeline, tau: float) -> PhaseTimeline:
    """Delay by ``tau`` seconds, which must sit on the sample grid."""
    if tau < 0:
        raise ValueError(f"delay must be >= 0, got {tau!r}")
    exact = tau * x.sample_rate
    k = int(round(exact))
    if abs(exact - k) > 1e-9 * max(1.0, abs(exact)):
        raise ValueError(
            f"delay {tau!r} s is not a multiple of the sample period; "
            f"nearest grid value is {k / x.sample_rate!r} s ({k} samples)"
        )
    return x.with_samples(delay_samples(x.samples, k))


def combine(xs: Iterable) -> PhaseTimeline:
    """Weighted pointwise sum of ``(timeline, scale)`` pairs.

    Offsets combine exactly; samples accumulate left to right.
    """
    pairs = list(xs)
    if not pairs:
        raise ValueError("combine needs at least one timeline")
    _check_grids([p[0] for p in pairs])
    first = pairs[0][0]
    acc = np.zeros(len(first))
    offset = Fraction(0)
    for x, scale in pairs:
        acc = acc + float(scale) * x.samples
        offset += as_fraction(scale) * x.nominal_offset
    return PhaseTimeline(first.sample_rate, first.start_time, acc, offset)


def decimate(x: PhaseTimeline, factor: int) -> PhaseTimeline:
    """Boxcar-average blocks of ``factor`` samples, then keep one per block."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"decimation factor must be a positive integer, got {factor!r}")
    factor = int(factor)
    if len(x) % factor:
        raise ValueError(f"factor {factor} does not divide the sample count {len(x)}")
    if factor == 1:
        return x
    y = x.samples.reshape(-1, factor).mean(axis=1)
    return PhaseTimeline(x.sample_rate / factor, x.start_time, y, x.nominal_offset)


def fit_power_law(freqs, psd, exponents=ALLOWED_EXPONENTS):
    """Non-negative integer-exponent mixture fitted by least squares in log-log.

    Returns a tuple of ``(alpha, b)`` terms (zero coefficients dropped).
    """
    from scipy.optimize import least_squares

    f = np.asarray(freqs, dtype=float)
    s = np.asarray(psd, dtype=float)
    if f.shape != s.shape or f.size < 2:
        raise ValueError("freqs and psd must be matching arrays with at least 2 points")
    if np.any(f <= 0) or np.any(s <= 0):
        raise ValueError("log-log fit requires positive frequencies and PSD values")
    alphas = np.array(exponents, dtype=float)
    basis = f[:, None] ** alphas[None, :]
    target = np.log10(s)

    def residual(logb):
        return np.log10(basis @ np.exp(logb)) - target

    # seed each coefficient from a single-term fit at its own geometric centre
    x0 = np.log(np.maximum(np.median(s / basis.T, axis=1), 1e-300)) - np.log(len(alphas))
    sol = least_squares(residual, x0, method="trf")
    b = np.exp(sol.x)
    share = (basis * b[None, :]) / (basis @ b)[:, None]
    keep = share.max(axis=0) > 1e-6
    return tuple((int(a), float(c)) for a, c, k in zip(alphas, b, keep) if k)


def fit_anchored_power_law(anchors, exponents=ALLOWED_EXPONENTS, n_grid: int = 61):
    """Two-term integer-exponent mixture passing exactly through two PSD anchors.

    Among all non-negative two-term mixtures that hit both anchors, the one
    with the smallest log-log squared deviation from the straight line
    through the anchors is returned as ``(alpha, b)`` terms.
    """
    (f1, s1), (f2, s2) = sorted(anchors)
    if not (0 < f1 < f2 and s1 > 0 and s2 > 0):
        raise ValueError("anchors must be two positive (freq, psd) points at distinct frequencies")
    slope = math.log(s2 / s1) / math.log(f2 / f1)
    grid = np.logspace(math.log10(f1), math.log10(f2), n_grid)
    line = np.log10(s1) + slope * np.log10(grid / f1)
    best = None
    for i, a in enumerate(exponents):
        for c in exponents[i:]:
            if a == c:
                if abs(slope - a) > 1e-12:
                    continue
                terms = ((a, s1 / f1 ** a),)
            else:
                m = np.array([[f1 ** a, f1 ** c], [f2 ** a, f2 ** c]], dtype=float)
                b = np.linalg.solve(m, [s1, s2])
                if np.any(b < 0):
                    continue
                terms = ((a, float(b[0])), (c, float(b[1])))
            model = sum(bb * grid ** float(aa) for aa, bb in terms)
            err = float(np.sum((np.log10(model) - line) ** 2))
            if best is None or err < best[0]:
                best = (err, terms)
    if best is None:
        raise ValueError(f"no non-negative mixture of exponents {exponents} fits slope {slope:.3f}")
    return tuple((int(a), b) for a, b in best[1] if b > 0)


FREE_RUNNING_ANCHORS = ((1.0, 10.0), (1000.0, 1e-6))


def spool_50km_noise(seed: int = 0, scale: float = 1.0) -> NoiseSpec:
    """Free-running 50-km spool noise: through 10 rad^2/Hz at 1 Hz and 1e-6 at 1 kHz.

    The slope between the two anchors is not measured; the shape is our fit.
    """
    terms = fit_anchored_power_law(FREE_RUNNING_ANCHORS)
    return NoiseSpec(terms=tuple((a, b * scale) for a, b in terms), band=(1e-6, math.inf), rng_seed=seed)
