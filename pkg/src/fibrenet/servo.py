"""Discrete-time PI servo loops acting on phase.

Every loop in the simulator (fibre-noise compensation, laser-diode offset
lock) uses the same law: a PI filter on the detected phase error produces a
frequency command, and the actuator phase is its running integral. The
command computed from sample ``k`` acts from sample ``k + 1`` on.

In z-domain the controller from error to actuator phase is::

    C(z) = dt z^-1 (Kp (1 - z^-1) + Ki dt) / (1 - z^-1)^2

Loops are linear and time invariant, so a closed loop is one rational filter
and runs through :func:`scipy.signal.lfilter`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps

__all__ = [
    "ServoConfig",
    "SimulationDivergence",
    "controller_polynomials",
    "run_loop",
    "controller_response",
    "inverse_controller_response",
]

DIVERGENCE_LIMIT = 1e3  # rad

# Unity-gain and -3 dB frequencies of a critically damped type-2 loop, in units of w_n.
_UNITY_OVER_WN = math.sqrt(2 + math.sqrt(5))
_BW3DB_OVER_WN = math.sqrt(3 + math.sqrt(10))


class SimulationDivergence(RuntimeError):
    """A servo loop ran away (error beyond the divergence limit or unstable poles)."""


@dataclass(frozen=True)
class ServoConfig:
    """Gains and wiring of one phase servo.

    ``kp`` (1/s) and ``ki`` (1/s^2) act on the divided, normalised phase
    error. ``transport_delay`` is the loop path delay in s (2*tau for a
    round-trip link servo). ``dividers`` is ``(beat divider, LO divider)``.
    ``gain_scale`` multiplies both gains (a detuned loop uses 0.02).
    """

    kp: float
    ki: float
    transport_delay: float = 0.0
    dividers: tuple = (2, 1)
    actuator: str = "aom_input"
    enabled: bool = True
    gain_scale: float = 1.0

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.gain_scale < 0:
            raise ValueError("servo gains must be non-negative")
        if self.transport_delay < 0:
            raise ValueError("transport_delay must be >= 0")
        nb, nlo = self.dividers
        if int(nb) != nb or int(nlo) != nlo or nb < 1 or nlo < 1:
            raise ValueError(f"dividers must be positive integers, got {self.dividers!r}")
        object.__setattr__(self, "dividers", (int(nb), int(nlo)))
        if self.enabled and self.transport_delay > 0:
            limit = 1.0 / (2.0 * self.transport_delay)
            if self.unity_gain_frequency > limit * (1 + 1e-9):
                raise ValueError(
                    f"unity-gain frequency {self.unity_gain_frequency:.4g} Hz exceeds the "
                    f"delay limit 1/(4 tau) = {limit:.4g} Hz"
                )

    @classmethod
    def from_unity_gain(cls, unity_gain_hz: float, **kwargs) -> "ServoConfig":
        """Critically damped PI whose open loop crosses unity at ``unity_gain_hz``."""
        wn = 2 * math.pi * unity_gain_hz / _UNITY_OVER_WN
        return cls(kp=2 * wn, ki=wn * wn, **kwargs)

    @classmethod
    def from_bandwidth(cls, bandwidth_hz: float, **kwargs) -> "ServoConfig":
        """Critically damped PI with closed-loop -3 dB bandwidth ``bandwidth_hz``."""
        wn = 2 * math.pi * bandwidth_hz / _BW3DB_OVER_WN
        return cls(kp=2 * wn, ki=wn * wn, **kwargs)

    @property
    def effective_gains(self):
        g = self.gain_scale if self.enabled else 0.0
        return self.kp * g, self.ki * g

    @property
    def unity_gain_frequency(self) -> float:
        """Where |(Kp s + Ki) / s^2| = 1, ignoring delay (Hz)."""
        kp, ki = self.effective_gains
        if kp == 0 and ki == 0:
            return 0.0
        w2 = (kp * kp + math.sqrt(kp ** 4 + 4 * ki * ki)) / 2
        return math.sqrt(w2) / (2 * math.pi)

    @property
    def bandwidth(self) -> float:
        """Closed-loop -3 dB bandwidth of the delay-free type-2 loop (Hz)."""
        kp, ki = self.effective_gains
        if ki == 0:
            return kp / (2 * math.pi)
        wn = math.sqrt(ki)
        zeta = kp / (2 * wn)
        a = 2 * zeta * zeta + 1
        return wn * math.sqrt(a + math.sqrt(a * a + 1)) / (2 * math.pi)

    def scaled(self, gain_scale: float) -> "ServoConfig":
        return replace(self, gain_scale=gain_scale)

    def disabled(self) -> "ServoConfig":
        return replace(self, enabled=False)


def controller_polynomials(servo: ServoConfig, fs: float):
    """Numerator and denominator of C(z) in powers of z^-1."""
    kp, ki = servo.effective_gains
    dt = 1.0 / fs
    num = np.array([0.0, dt * (kp + ki * dt), -dt * kp])
    den = np.array([1.0, -2.0, 1.0])
    return num, den


def _response_parts(servo: ServoConfig, freqs, fs: float):
    kp, ki = servo.effective_gains
    dt = 1.0 / fs
    zinv = np.exp(-2j * np.pi * np.asarray(freqs, dtype=float) / fs)
    one_minus = -np.expm1(-2j * np.pi * np.asarray(freqs, dtype=float) / fs)
    num = dt * zinv * (kp * one_minus + ki * dt)
    return num, one_minus * one_minus


def controller_response(servo: ServoConfig, freqs, fs: float) -> np.ndarray:
    """C(exp(i 2 pi f / fs)) on ``freqs``; infinite at multiples of ``fs``."""
    num, den = _response_parts(servo, freqs, fs)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den == 0, np.inf + 0j, num / np.where(den == 0, 1, den))


def inverse_controller_response(servo: ServoConfig, freqs, fs: float) -> np.ndarray:
    """1 / C on ``freqs``; zero where C has its poles, infinite when C = 0."""
    num, den = _response_parts(servo, freqs, fs)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(num == 0, np.inf + 0j, den / np.where(num == 0, 1, num))


def _poly_mul(a, b):
    return np.convolve(a, b)


def _poly_add(a, b):
    n = max(len(a), len(b))
    out = np.zeros(n)
    out[: len(a)] += a
    out[: len(b)] += b
    return out


def run_loop(disturbance: np.ndarray, servo: ServoConfig, fs: float, plant_fir, check_stability=True):
    """Close a PI loop around a FIR measurement path.

    The detected error is ``e = d + P(z) u`` with ``u = -C(z) e`` the actuator
    phase. Returns ``(u, e)``.

    Raises
    ------
    SimulationDivergence
        If the closed loop has a pole on or outside the unit circle or the
        error leaves +-1e3 rad.
    """
    d = np.asarray(disturbance, dtype=float)
    plant = np.asarray(plant_fir, dtype=float)
    if not servo.enabled or servo.gain_scale == 0:
        return np.zeros_like(d), d.copy()
    num, den = controller_polynomials(servo, fs)
    char = _poly_add(den, _poly_mul(num, plant))
    char = np.trim_zeros(char, "b")
    if check_stability:
        radius = np.max(np.abs(np.roots(char))) if char.size > 1 else 0.0
        if radius >= 1.0:
            raise SimulationDivergence(
                f"closed loop is unstable (largest pole radius {radius:.6f}); "
                f"kp={servo.kp * servo.gain_scale:.4g}, ki={servo.ki * servo.gain_scale:.4g}, "
                f"delay={servo.transport_delay:.4g} s at fs={fs:g} Hz"
            )
    e = sps.lfilter(den, char, d)
    if not np.all(np.isfinite(e)) or np.max(np.abs(e), initial=0.0) > DIVERGENCE_LIMIT:
        worst = int(np.argmax(~np.isfinite(e) | (np.abs(e) > DIVERGENCE_LIMIT)))
        raise SimulationDivergence(
            f"servo error exceeded {DIVERGENCE_LIMIT:g} rad at sample {worst} (t = {worst / fs:.6g} s)"
        )
    u = -sps.lfilter(num, char, d)
    return u, e
