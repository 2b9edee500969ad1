"""Photometric-perturbation evidence for vision-language-action inputs.

Modules: ``imgcore`` (colour maths), ``perturb`` (seeded transforms),
``evidence`` (three-metric detector), ``explain`` (cue and explanation
rendering), ``vlatoy`` (small action-prediction experiment) and ``cli``.
"""

from .evidence import Evidence3Detector, EvidenceReport, detect
from .explain import render_cue, render_explanation
from .perturb import PerturbationSpec, SamplerConfig, apply_perturbation, sample_spec
from .vlatoy import ActionPolicy, TrainConfig, run_experiment, run_experiments

__version__ = "0.1.0"

__all__ = [
    "ActionPolicy",
    "Evidence3Detector",
    "EvidenceReport",
    "PerturbationSpec",
    "SamplerConfig",
    "TrainConfig",
    "apply_perturbation",
    "detect",
    "render_cue",
    "render_explanation",
    "run_experiment",
    "run_experiments",
    "sample_spec",
]
