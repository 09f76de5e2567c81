"""Calibrate the reference-path white-FM level of the presets.

The floor is common to both end-to-end beats and, being white FM, adds
``b / (4 tau nu0^2)`` to each MDEV^2 of Lambda-counted data. The other
contributions are predicted once from the analytic output spectra, then
``b`` is solved so that the input-extraction F-factor (optimal mode, floors
on) hits the target. The midpoint figures implied by that level are printed.

    python scripts/calibrate_floors.py [--target 0.6]
"""
import argparse
from dataclasses import replace

import numpy as np

from fibrenet.metrology import NU_0, predict_mdev
from fibrenet.scenarios import _network, load_preset, predict_output_psd
from fibrenet.signals import NoiseSpec


def base_mdev(scn, taus):
    """Predicted beat MDEV with the reference-path floor removed."""
    scn = replace(scn, floors=replace(scn.floors, reference_path=NoiseSpec()))
    net = _network(scn)
    rate = scn.engine.fast_rate_hz
    out = {}
    for o in ("out0", "out1"):
        def psd(f, o=o):
            return predict_output_psd(net, o, f, rate) + predict_output_psd(net, "meas_" + o, f, rate)
        out[o] = predict_mdev(psd, taus)
    return out


def floor_var(b, taus):
    return b / (4 * np.asarray(taus) * NU_0 ** 2)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--target", type=float, default=0.6)
    args = ap.parse_args()
    s5 = load_preset("input-extraction")
    tau = s5.measurement.f_factor_tau_s
    p = base_mdev(s5, [tau])
    m2, e2 = p["out0"][0] ** 2, p["out1"][0] ** 2
    print(f"input extraction without the floor: main {p['out0'][0]:.3e}, extraction {p['out1'][0]:.3e}")
    # F = (e2 + v) / (m2 + v)  ->  v = (F m2 - e2) / (1 - F)
    v = (args.target * m2 - e2) / (1 - args.target)
    b = v * 4 * tau * NU_0 ** 2
    print(f"reference-path b_-2 = {b:.4g} rad^2 Hz")
    mid = load_preset("midpoint-50km")
    taus = np.array([1.0, 10.0, 100.0, 1e3, 1e4])
    p = base_mdev(mid, taus)
    fv = floor_var(b, taus)
    for t, a, c, f in zip(taus, p["out0"], p["out1"], fv):
        a, c = np.sqrt(a * a + f), np.sqrt(c * c + f)
        print(f"midpoint tau {t:g} s: Out0 {a:.3e}  Out1 {c:.3e}  ratio {c / a:.3f}")


if __name__ == "__main__":
    main()
