"""Discrete-time simulator of compensated, branching optical-frequency fibre links."""
from .links import FibreSpan, compensate, extract_midpoint, nominal_frequency_map, regenerate, secondary_link
from .metrology import (
    AllanDeviation,
    LambdaCounter,
    PhaseNoisePSD,
    PowerLawNoiseModel,
    lambda_count,
    mdev,
    oadev,
    welch_psd,
)
from .optics import DEFAULT_PLAN, BeatNote, FrequencyPlan, LaserDiode
from .scenarios import PRESETS, Scenario, load_preset, run_scenario
from .signals import DriftSpec, NoiseSpec, PhaseTimeline

__version__ = "0.1.0"

__all__ = [
    "AllanDeviation",
    "BeatNote",
    "DriftSpec",
    "FibreSpan",
    "FrequencyPlan",
    "LambdaCounter",
    "LaserDiode",
    "NoiseSpec",
    "DEFAULT_PLAN",
    "PRESETS",
    "PhaseNoisePSD",
    "PhaseTimeline",
    "PowerLawNoiseModel",
    "Scenario",
    "compensate",
    "extract_midpoint",
    "lambda_count",
    "load_preset",
    "mdev",
    "nominal_frequency_map",
    "oadev",
    "regenerate",
    "run_scenario",
    "secondary_link",
    "welch_psd",
]
