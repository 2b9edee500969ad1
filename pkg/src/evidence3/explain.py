"""Deterministic cue strings and natural-language explanations.

Text is rendered from a fixed template table shipped as
``resources/explanations.json``. Because the output only depends on the
flags and on metric values rounded to three decimals, a reference
explanation can be compared token by token with a predicted one.
"""

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .exceptions import ScoringError
from .perturb import PerturbationSpec

# canonical rendering order; the cue letter for each flag
FLAG_ORDER = ("color", "noise", "spatial")
CUE_LETTERS = {"color": "C", "noise": "N", "spatial": "S"}

# bit encoding of the transform subset
CLASS_BITS = {"color": 1, "illum": 2, "noise": 4}
N_CLASSES = 8


@lru_cache(maxsize=None)
def load_templates():
    """Template table as ``{flag: template}``, including the ``"clean"`` entry."""
    text = resources.files("evidence3").joinpath("resources/explanations.json").read_text("utf-8")
    doc = json.loads(text)
    table = {entry["flag"]: entry["template"] for entry in doc["templates"]}
    missing = set(FLAG_ORDER + ("clean",)) - set(table)
    if missing:
        raise ValueError(f"template table is missing entries: {sorted(missing)}")
    return table


@dataclass(frozen=True)
class Explanation:
    cause_set: frozenset
    text: str

    @property
    def tokens(self):
        return self.text.split()


def _fmt(x):
    return f"{x:.3f}"


def render_cue(report):
    """``[EVIDENCE mahal=... hf=... entstd=... flags=...]`` for a report."""
    flags = "".join(
        CUE_LETTERS[name] for name, on in zip(FLAG_ORDER, report.flags) if on
    ) or "-"
    return (
        f"[EVIDENCE mahal={_fmt(report.d_mahal)} hf={_fmt(report.hf_ratio)} "
        f"entstd={_fmt(report.ent_std)} flags={flags}]"
    )


def _render(causes, metrics):
    table = load_templates()
    if not causes:
        return table["clean"]
    parts = [
        table[name].replace("<metric>", _fmt(value))
        for name, value in zip(FLAG_ORDER, metrics)
        if name in causes
    ]
    return " ".join(parts)


def render_explanation(report):
    """One sentence per raised flag, in colour, noise, spatial order."""
    causes = frozenset(name for name, on in zip(FLAG_ORDER, report.flags) if on)
    return Explanation(cause_set=causes, text=_render(causes, report.metrics))


def causes_for_spec(spec):
    """Flags a perfect detector would raise for the transforms in ``spec``.

    Illumination has no dedicated metric; it is explained by the spatial
    template.
    """
    causes = set()
    if spec.use_color:
        causes.add("color")
    if spec.use_noise:
        causes.add("noise")
    if spec.use_illum:
        causes.add("spatial")
    return frozenset(causes)


def reference_explanation(spec, report):
    """Ground-truth explanation: templates chosen by ``spec``, values by ``report``."""
    causes = causes_for_spec(spec)
    return Explanation(cause_set=causes, text=_render(causes, report.metrics))


def token_accuracy(predicted, reference):
    """Fraction of reference positions where ``predicted`` has the same token."""
    predicted = list(predicted)
    reference = list(reference)
    if not reference:
        raise ScoringError("reference token list must not be empty")
    hits = sum(p == r for p, r in zip(predicted, reference))
    return hits / len(reference)


def explanation_class(spec):
    """Encode the transform subset of ``spec`` as an integer in ``[0, 7]``."""
    return (
        CLASS_BITS["color"] * bool(spec.use_color)
        + CLASS_BITS["illum"] * bool(spec.use_illum)
        + CLASS_BITS["noise"] * bool(spec.use_noise)
    )


def class_subset(cls):
    """Inverse of :func:`explanation_class` on the transform flags."""
    if not 0 <= int(cls) < N_CLASSES:
        raise ValueError(f"class id must lie in [0, {N_CLASSES - 1}], got {cls}")
    return frozenset(name for name, bit in CLASS_BITS.items() if int(cls) & bit)


def spec_for_class(cls):
    """A representative spec whose transform subset is ``class_subset(cls)``."""
    subset = class_subset(cls)
    return PerturbationSpec(
        use_color="color" in subset,
        use_illum="illum" in subset,
        use_noise="noise" in subset,
    )
