"""Frequency counting, phase-noise spectra and Allan-family statistics.

Fractional quantities are referenced to the optical carrier. The functional
API (``lambda_count``, ``mdev``, ...) is what the simulator uses; the
estimator classes at the bottom wrap it for scikit-learn style pipelines.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin

from .optics import BeatNote, tracking_filter
from .signals import NoiseSpec, PhaseTimeline, fit_anchored_power_law, fit_power_law, synth_power_law_noise

__all__ = [
    "NU_0",
    "FreqSeries",
    "StabilityCurve",
    "StabilityReport",
    "Spectrum",
    "lambda_count",
    "welch_psd",
    "band_average",
    "oadev",
    "mdev",
    "octave_taus",
    "report_taus",
    "accuracy",
    "f_factor",
    "detect_cycle_slips",
    "stability_report",
    "predict_mdev",
    "loglog_slope",
    "write_stability_csv",
    "write_psd_csv",
    "write_freq_series_csv",
    "LambdaCounter",
    "AllanDeviation",
    "PhaseNoisePSD",
    "PowerLawNoiseModel",
]

log = logging.getLogger(__name__)

NU_0 = 194.4e12  # Hz, optical carrier all fractional values refer to

ACCURACY_WINDOW = (20000.0, 30000.0)


@dataclass(frozen=True, eq=False)
class FreqSeries:
    """Fractional frequency samples ``y_k`` taken every ``gate`` seconds."""

    gate: float
    samples: np.ndarray
    carrier: float = NU_0
    weighting: str = "lambda"
    start_time: float = 0.0

    def __post_init__(self):
        if not self.gate > 0:
            raise ValueError("gate must be positive")
        if not self.carrier > 0:
            raise ValueError("carrier must be positive")
        if self.weighting not in ("lambda", "pi"):
            raise ValueError("weighting must be 'lambda' or 'pi'")
        arr = np.array(self.samples, dtype=float, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.size

    def times(self) -> np.ndarray:
        return self.start_time + self.gate * np.arange(self.samples.size)

    def phase_time(self) -> np.ndarray:
        """Time-deviation series x_k (s) whose first difference over ``gate`` is y."""
        return np.concatenate(([0.0], np.cumsum(self.samples) * self.gate))


@dataclass(frozen=True, eq=False)
class StabilityCurve:
    taus: np.ndarray
    values: np.ndarray
    estimator: str
    counts: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float)
        if taus.size > 1 and np.any(np.diff(taus) <= 0):
            raise ValueError("taus must be strictly increasing")
        if np.any(np.asarray(self.values) < 0):
            raise ValueError("deviations must be non-negative")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=int))

    @property
    def errors(self) -> np.ndarray:
        """Rough 1-sigma bars, value / sqrt(count)."""
        return self.values / np.sqrt(np.maximum(self.counts, 1))

    def at(self, tau: float) -> float:
        idx = np.flatnonzero(np.isclose(self.taus, tau, rtol=1e-9, atol=0))
        if idx.size == 0:
            raise KeyError(f"tau = {tau:g} s not in the curve (have {self.taus.tolist()})")
        return float(self.values[idx[0]])


@dataclass(frozen=True, eq=False)
class StabilityReport:
    """Stability of one end-to-end beat."""

    mdev: StabilityCurve
    oadev: StabilityCurve
    mean_offset: float
    offset_uncertainty: float
    slip_count: int = 0
    f_factor: float | None = None

    @property
    def curves(self) -> dict:
        return {"mdev": self.mdev, "oadev": self.oadev}


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One-sided phase PSD in rad^2/Hz."""

    freqs: np.ndarray
    psd: np.ndarray

    def at(self, f0: float, rel_band: float = 0.12) -> float:
        return band_average(self, f0, rel_band)


def lambda_count(b, gate: float, carrier: float = NU_0, weighting: str = "lambda") -> FreqSeries:
    """Dead-time-free counter reading of a beat's phase, as fractional frequency.

    Lambda weighting: the phase is boxcar-averaged over each gate and
    consecutive block means are differenced, i.e. a triangular window of
    phase increments spanning two gates. Pi weighting differences the phase
    at gate edges.
    """
    phase = b.phase if isinstance(b, BeatNote) else b
    fs = phase.sample_rate
    m0 = int(round(gate * fs))
    if m0 < 1 or abs(m0 - gate * fs) > 1e-9 * max(1.0, gate * fs):
        raise ValueError(f"gate {gate!r} s is not a whole number of samples at {fs:g} Hz")
    x = phase.samples
    scale = 1.0 / (2 * math.pi * gate * carrier)
    if weighting == "lambda":
        nblocks = x.size // m0
        if nblocks < 2:
            raise ValueError(f"record of {x.size / fs:g} s is shorter than two gates ({2 * gate:g} s)")
        means = x[: nblocks * m0].reshape(nblocks, m0).mean(axis=1)
        y = np.diff(means) * scale
        t0 = phase.start_time + gate
    elif weighting == "pi":
        edges = x[::m0]
        if edges.size < 2:
            raise ValueError(f"record of {x.size / fs:g} s is shorter than one gate")
        y = np.diff(edges) * scale
        t0 = phase.start_time + gate / 2
    else:
        raise ValueError("weighting must be 'lambda' or 'pi'")
    return FreqSeries(gate, y, carrier, weighting, t0)


def welch_psd(x: PhaseTimeline, segment_len: int, overlap: float = 0.5) -> Spectrum:
    """One-sided Welch PSD of ``x`` (Hann window, linear detrend per segment)."""
    n = len(x)
    segment_len = int(segment_len)
    if segment_len < 8 or segment_len > n:
        raise ValueError(f"segment length {segment_len} must be in [8, {n}]")
    if not 0 <= overlap <= 0.9:
        raise ValueError("overlap must be in [0, 0.9]")
    f, p = sps.welch(
        x.samples, fs=x.sample_rate, window="hann", nperseg=segment_len,
        noverlap=int(overlap * segment_len), detrend="linear", scaling="density",
    )
    return Spectrum(f[1:], p[1:])


def band_average(spec: Spectrum, f0: float, rel_band: float = 0.12) -> float:
    """Mean PSD over ``[f0 / (1 + rel_band), f0 * (1 + rel_band)]``."""
    sel = (spec.freqs >= f0 / (1 + rel_band)) & (spec.freqs <= f0 * (1 + rel_band))
    if not np.any(sel):
        sel = np.array([np.argmin(np.abs(spec.freqs - f0))])
    return float(np.mean(spec.psd[sel]))


def _resolve_m(y: FreqSeries, taus):
    ms = []
    for tau in np.atleast_1d(np.asarray(taus, dtype=float)):
        m = int(round(tau / y.gate))
        if m < 1 or abs(m * y.gate - tau) > 1e-9 * tau:
            raise ValueError(f"tau = {tau:g} s is not a positive multiple of the gate {y.gate:g} s")
        ms.append(m)
    return ms


def _curve(y, taus, estimator, fn, min_terms):
    x = y.phase_time()
    out_t, out_v, out_c = [], [], []
    for m in _resolve_m(y, taus):
        value, count = fn(x, m)
        if count < min_terms:
            log.info("%s: dropping tau = %g s (%d terms)", estimator, m * y.gate, count)
            continue
        out_t.append(m * y.gate)
        out_v.append(math.sqrt(value) / (m * y.gate))
        out_c.append(count)
    if not out_t:
        raise ValueError(f"{estimator}: no requested tau has enough data in a {len(y)}-sample series")
    return StabilityCurve(np.array(out_t), np.array(out_v), estimator, np.array(out_c))


def _oavar_sum(x, m):
    n = x.size
    if n - 2 * m < 1:
        return 0.0, 0
    d = x[2 * m:] - 2 * x[m:n - m] + x[: n - 2 * m]
    return float(np.dot(d, d)) / (2 * d.size), d.size


def _mvar_sum(x, m):
    n = x.size
    terms = n - 3 * m + 1
    if terms < 1:
        return 0.0, 0
    d = x[2 * m:] - 2 * x[m:n - m] + x[: n - 2 * m]
    c = np.concatenate(([0.0], np.cumsum(d)))
    s = c[m:m + terms] - c[:terms]
    return float(np.dot(s, s)) / (2 * m * m * terms), terms


def oadev(y: FreqSeries, taus, min_terms: int = 1) -> StabilityCurve:
    """Overlapping Allan deviation at each ``tau`` (multiples of the gate)."""
    return _curve(y, taus, "oadev", _oavar_sum, min_terms)


def mdev(y: FreqSeries, taus, min_terms: int = 1) -> StabilityCurve:
    """Modified Allan deviation at each ``tau`` (multiples of the gate)."""
    return _curve(y, taus, "mdev", _mvar_sum, min_terms)


def octave_taus(gate: float, record: float) -> np.ndarray:
    """gate, 2 gate, 4 gate, ... up to record / 5."""
    k = int(math.floor(math.log2(record / 5 / gate) + 1e-12)) if record >= 5 * gate else -1
    return gate * 2.0 ** np.arange(k + 1)


def report_taus(gate: float, record: float) -> np.ndarray:
    """Octave grid, decades of tau up to record / 5, and the accuracy-window
    taus the record can support (>= 3 tau)."""
    taus = set(octave_taus(gate, record).tolist())
    tau = 1.0
    while tau <= record / 5:
        if tau >= gate and abs(tau / gate - round(tau / gate)) < 1e-9:
            taus.add(tau)
        tau *= 10
    for tau in ACCURACY_WINDOW:
        if 3 * tau <= record and abs(tau / gate - round(tau / gate)) < 1e-9:
            taus.add(tau)
    return np.array(sorted(taus))


def accuracy(y: FreqSeries, curve: StabilityCurve):
    """``(mean fractional offset, uncertainty)``; the uncertainty is the OADEV
    at the largest tau inside [20000, 30000] s, else at the largest tau."""
    if len(y) == 0:
        raise ValueError("empty frequency series")
    mean = float(np.mean(y.samples))
    lo, hi = ACCURACY_WINDOW
    inside = np.flatnonzero((curve.taus >= lo) & (curve.taus <= hi))
    if inside.size:
        unc = float(curve.values[inside[-1]])
    else:
        log.info("no tau in [%g, %g] s; uncertainty taken at tau = %g s", lo, hi, curve.taus[-1])
        unc = float(curve.values[-1])
    return mean, unc


def f_factor(ext: StabilityCurve, main: StabilityCurve, tau: float = 1.0) -> float:
    """Squared ratio of extraction to main-link deviation at ``tau``."""
    return (ext.at(tau) / main.at(tau)) ** 2


def detect_cycle_slips(b: BeatNote, threshold: float = math.pi, tracking_bandwidth: float | None = 100e3) -> np.ndarray:
    """Sample indices where the (tracked) phase jumps by more than ``threshold``.

    A record sampled below the tracking bandwidth is taken as linear between
    samples, so the tracker only has to follow ``dphi * fs / bandwidth``
    within its response time.
    """
    if tracking_bandwidth is not None:
        b = tracking_filter(b, tracking_bandwidth)
        threshold = threshold * max(1.0, tracking_bandwidth / b.sample_rate)
    return np.flatnonzero(np.abs(np.diff(b.samples)) > threshold) + 1


def stability_report(beat: BeatNote, gate: float = 1.0, carrier: float = NU_0, weighting: str = "lambda",
                     tracking_bandwidth: float | None = 100e3) -> tuple:
    """Count the beat and compute MDEV, OADEV, accuracy and slips.

    Returns ``(report, freq_series)``.
    """
    tracked = beat if tracking_bandwidth is None else tracking_filter(beat, tracking_bandwidth)
    y = lambda_count(tracked, gate, carrier, weighting)
    taus = report_taus(gate, len(y) * gate)
    if taus.size == 0:
        raise ValueError(f"record too short for any tau (need >= {5 * gate:g} s)")
    md = mdev(y, taus)
    ad = oadev(y, taus)
    mean, unc = accuracy(y, ad)
    slips = detect_cycle_slips(beat, tracking_bandwidth=tracking_bandwidth).size
    return StabilityReport(md, ad, mean, unc, slips), y


def folded_block_psd(psd, freqs, gate: float, n_alias: int = 2000) -> np.ndarray:
    """PSD of gate-averaged phase sampled once per gate, on ``freqs`` in (0, 1/(2 gate)].

    All aliases up to ``n_alias / gate`` are folded in.
    """
    f = np.asarray(freqs, dtype=float)[:, None]
    k = np.arange(-n_alias, n_alias + 1)[None, :]
    fa = np.abs(f + k / gate)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(fa > 0, psd(fa), 0.0)
    return np.sum(s * np.sinc(fa * gate) ** 2, axis=1)


def predict_mdev(psd, taus, gate: float = 1.0, carrier: float = NU_0, n_alias: int = 2000) -> np.ndarray:
    """Expected MDEV of Lambda-counted data for a phase PSD ``psd(f)`` (rad^2/Hz).

    The gate-averaged phase is folded to the counter's Nyquist band, then the
    estimator response is integrated on a grid fine enough for each tau.
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    f_nyq = 0.5 / gate
    f_lo = 1e-3 / taus.max()
    grid = np.logspace(math.log10(f_lo), math.log10(f_nyq), 1500)
    folded = folded_block_psd(psd, grid, gate, n_alias)
    pos = folded > 0
    if not np.any(pos):
        return np.zeros(taus.size)
    lg, ls = np.log(grid[pos]), np.log(folded[pos])
    out = []
    for tau in taus:
        m = tau / gate
        f = np.linspace(f_lo, f_nyq, int(max(40 * m, 4000)))
        s = np.exp(np.interp(np.log(f), lg, ls))
        avg = (np.sin(np.pi * f * tau) / (m * np.sin(np.pi * f * gate))) ** 2
        diff2 = 16 * np.sin(np.pi * f * tau) ** 4
        var = np.trapezoid(s * avg * diff2, f) / (2 * tau * tau * (2 * np.pi * carrier) ** 2)
        out.append(math.sqrt(var))
    return np.array(out)


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log10(x), np.log10(y), 1)[0])


def _fmt(v) -> str:
    return repr(float(v))


def write_stability_csv(path, md: StabilityCurve, ad: StabilityCurve):
    """Columns ``tau_s, mdev, oadev, count`` on the MDEV grid (count = MDEV terms)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau_s", "mdev", "oadev", "count"])
        for tau, v, c in zip(md.taus, md.values, md.counts):
            try:
                a = ad.at(tau)
            except KeyError:
                a = float("nan")
            w.writerow([_fmt(tau), _fmt(v), _fmt(a), int(c)])


def write_psd_csv(path, spec: Spectrum):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz", "psd_rad2_hz"])
        for f, p in zip(spec.freqs, spec.psd):
            w.writerow([_fmt(f), _fmt(p)])


def write_freq_series_csv(path, y: FreqSeries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "fractional_frequency"])
        for t, v in zip(y.times(), y.samples):
            w.writerow([_fmt(t), _fmt(v)])


def read_csv_columns(path) -> dict:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}


class LambdaCounter(BaseEstimator, TransformerMixin):
    """Counter as a transformer: beat note (or phase timeline) -> FreqSeries."""

    def __init__(self, gate=1.0, carrier=NU_0, weighting="lambda", tracking_bandwidth=None):
        self.gate = gate
        self.carrier = carrier
        self.weighting = weighting
        self.tracking_bandwidth = tracking_bandwidth

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        if self.tracking_bandwidth is not None:
            b = X if isinstance(X, BeatNote) else BeatNote(X)
            X = tracking_filter(b, self.tracking_bandwidth)
        return lambda_count(X, self.gate, self.carrier, self.weighting)


class AllanDeviation(BaseEstimator, TransformerMixin):
    """MDEV or OADEV of a FreqSeries; ``taus=None`` uses the octave grid."""

    def __init__(self, estimator="mdev", taus=None):
        self.estimator = estimator
        self.taus = taus

    def fit(self, X, y=None):
        if self.estimator not in ("mdev", "oadev"):
            raise ValueError("estimator must be 'mdev' or 'oadev'")
        self.curve_ = self.transform(X)
        return self

    def transform(self, X):
        taus = octave_taus(X.gate, len(X) * X.gate) if self.taus is None else self.taus
        fn = mdev if self.estimator == "mdev" else oadev
        return fn(X, taus)


class PhaseNoisePSD(BaseEstimator, TransformerMixin):
    """Welch PSD with the segment given in seconds."""

    def __init__(self, segment_s=20.0, overlap=0.5):
        self.segment_s = segment_s
        self.overlap = overlap

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        x = X.phase if isinstance(X, BeatNote) else X
        return welch_psd(x, int(round(self.segment_s * x.sample_rate)), self.overlap)


class PowerLawNoiseModel(BaseEstimator):
    """Integer-exponent power-law phase noise, fitted to a spectrum or anchors.

    ``fit(freqs, psd)`` does a log-log least-squares fit; with ``anchors``
    set, the model is forced through the two anchor points instead and
    ``fit`` ignores its data.
    """

    def __init__(self, exponents=(0, -1, -2, -3, -4), anchors=None, band=(1e-6, math.inf)):
        self.exponents = exponents
        self.anchors = anchors
        self.band = band

    def fit(self, X=None, y=None):
        if self.anchors is not None:
            self.terms_ = fit_anchored_power_law(self.anchors, tuple(self.exponents))
        else:
            if isinstance(X, Spectrum):
                X, y = X.freqs, X.psd
            self.terms_ = fit_power_law(X, y, tuple(self.exponents))
        return self

    def noise_spec(self, seed: int = 0) -> NoiseSpec:
        return NoiseSpec(self.terms_, self.band, rng_seed=seed)

    def predict(self, freqs) -> np.ndarray:
        return self.noise_spec().psd(freqs)

    def sample(self, n: int, fs: float, seed: int = 0) -> PhaseTimeline:
        return synth_power_law_noise(self.noise_spec(seed), n, fs)
