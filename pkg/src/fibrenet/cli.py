"""``sim`` command: parse a scenario, run it, write CSVs, a summary and a manifest."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from . import scenarios as sc
from .metrology import write_freq_series_csv, write_psd_csv, write_stability_csv
from .optics import LockFailure
from .servo import SimulationDivergence

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

MANIFEST_NAME = "manifest.json"


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(text: str, preset: str | None = None) -> sc.Scenario:
    """Scenario from a YAML document, optionally layered over a preset.

    The document may name its own base with a top-level ``preset`` key;
    ``preset`` given here wins. Unknown keys are errors.
    """
    try:
        doc = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        raise sc.ConfigError(f"<document>: not valid YAML ({e})") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise sc.ConfigError("<root>: expected a mapping at the top level")
    doc = dict(doc)
    base_name = preset or doc.pop("preset", None)
    doc.pop("preset", None)
    if base_name is not None:
        if not isinstance(base_name, str):
            raise sc.ConfigError("preset: expected a preset name")
        key = sc.PRESET_ALIASES.get(base_name, base_name)
        if key not in sc.PRESETS:
            raise sc.ConfigError(f"preset: unknown preset {base_name!r} (available: {', '.join(sc.PRESETS)})")
        doc = _deep_merge({"name": key, **sc.PRESETS[key]}, doc)
    return sc.scenario_from_dict(doc)


def serialize_config(scn: sc.Scenario) -> str:
    """YAML text that parses back to an equal scenario."""
    return yaml.safe_dump(sc.scenario_to_dict(scn), sort_keys=False)


def canonical_json(scn: sc.Scenario) -> str:
    return json.dumps(sc.scenario_to_dict(scn), sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(scn: sc.Scenario) -> str:
    return hashlib.sha256(canonical_json(scn).encode()).hexdigest()


@dataclass
class RunManifest:
    scenario_id: str
    config_hash: str
    seeds: list
    engine_versions: dict
    outputs: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_json(self) -> str:
        # wall-clock time is left out so repeated runs give identical files
        d = {
            "scenario_id": self.scenario_id,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "engine_versions": self.engine_versions,
            "outputs": self.outputs,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def deterministic() -> bool:
    return os.environ.get("SIM_DETERMINISTIC", "") not in ("", "0")


def _write_result(result, out: Path, suffix: str = "") -> list:
    """Write the CSVs and summary of one result; return the file names."""
    files = []

    def name(stem, ext="csv"):
        n = f"{stem}{suffix}.{ext}"
        files.append(n)
        return out / n

    if isinstance(result, sc.MidpointResult):
        for key, spec in result.psds.items():
            write_psd_csv(name(key), spec)
        for o, r in result.reports.items():
            write_stability_csv(name(f"stability_{o}"), r.mdev, r.oadev)
            write_freq_series_csv(name(f"freq_series_{o}"), result.series[o])
    elif isinstance(result, sc.InputExtractionResult):
        for mode, pair in result.reports.items():
            for which, r in pair.items():
                write_stability_csv(name(f"stability_{mode}_{which}"), r.mdev, r.oadev)
                write_freq_series_csv(name(f"freq_series_{mode}_{which}"), result.series[mode][which])
    elif isinstance(result, sc.LoSensitivityResult):
        for key, r in (("with_lo", result.with_lo), ("without_lo", result.without_lo),
                       ("servo_off", result.servo_off)):
            write_stability_csv(name(f"stability_out1_{key}"), r.mdev, r.oadev)
    elif isinstance(result, sc.ArmMatchingResult):
        for m, r in result.reports.items():
            write_stability_csv(name(f"stability_out1_mismatch_{m:g}m"), r.mdev, r.oadev)
    name("summary", "txt").write_text(result.summary())
    return files


def _run_one(scn: sc.Scenario):
    with threadpool_limits(limits=1):
        return sc.run_scenario(scn)


def run(scn: sc.Scenario, out_dir, jobs: int = 1) -> RunManifest:
    """Run ``scn`` (``jobs`` consecutive seeds when > 1) and write outputs."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [scn.seed + k for k in range(max(1, jobs))]
    variants = [scn.with_seed(s) for s in seeds]
    if len(variants) == 1 or deterministic():
        results = [_run_one(v) for v in variants]
    else:
        with ProcessPoolExecutor(max_workers=len(variants)) as pool:
            results = list(pool.map(_run_one, variants))
    engines = ["fast", "slow"] if scn.engine.mode == "both" else [scn.engine.mode]
    manifest = RunManifest(scn.name, config_hash(scn), seeds, {e: sc.ENGINE_VERSIONS[e] for e in engines})
    (out / "config.yaml").write_text(serialize_config(scn))
    manifest.outputs.append("config.yaml")
    for s, res in zip(seeds, results):
        manifest.outputs.extend(_write_result(res, out, "" if len(seeds) == 1 else f"_seed{s}"))
    manifest.outputs.append(MANIFEST_NAME)
    (out / MANIFEST_NAME).write_text(manifest.to_json())
    manifest.wall_clock_s = time.perf_counter() - t0
    return manifest


def list_presets() -> list:
    return [(n, sc.PRESETS[n]["description"]) for n in sc.PRESETS]


def _load(args) -> sc.Scenario:
    text = sys.stdin.read() if args.config == "-" else Path(args.config).read_text()
    scn = parse_config(text, getattr(args, "preset", None))
    overrides = {}
    if getattr(args, "engine", None):
        scn = scn.with_engine(args.engine)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return replace(scn, **overrides) if overrides else scn


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description="Simulate compensated, branching fibre links.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("config", help="YAML scenario file ('-' for stdin)")
    r.add_argument("--preset", help="preset the config is layered over")
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--engine", choices=("fast", "slow", "both"))
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int, default=1, help="run this many consecutive seeds")
    sub.add_parser("presets", help="list shipped presets")
    c = sub.add_parser("check", help="validate a config without running it")
    c.add_argument("config")
    c.add_argument("--preset")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for n, desc in list_presets():
            print(f"{n}: {desc}")
        return EXIT_OK
    try:
        scn = _load(args)
    except sc.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_IO
    if args.command == "check":
        print(f"ok: {scn.name} ({scn.experiment.kind}, engine {scn.engine.mode}), config hash {config_hash(scn)}")
        return EXIT_OK
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(scn, args.out, args.jobs)
    except (SimulationDivergence, LockFailure) as e:
        print(f"simulation diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as e:
        print(f"output error: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(manifest.outputs)} files to {args.out} in {manifest.wall_clock_s:.1f} s", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
