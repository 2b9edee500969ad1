import itertools
import json
from importlib import resources

import pytest
from hypothesis import given
from hypothesis import strategies as st

from evidence3.evidence import EvidenceReport
from evidence3.exceptions import ScoringError
from evidence3.explain import (
    causes_for_spec,
    class_subset,
    explanation_class,
    load_templates,
    reference_explanation,
    render_cue,
    render_explanation,
    spec_for_class,
    token_accuracy,
)
from evidence3.perturb import CLEAN, PerturbationSpec

CLEAN_SENTENCE = "No photometric perturbation detected; inputs are consistent with the calibration corpus."


def report(d=0.1234, r=0.05, e=0.2, flags=(False, False, False)):
    return EvidenceReport(d, r, e, *flags)


def test_cue_no_flags():
    assert render_cue(report()) == "[EVIDENCE mahal=0.123 hf=0.050 entstd=0.200 flags=-]"


@pytest.mark.parametrize(
    "flags, field",
    [
        ((True, True, False), "CN"),
        ((True, False, True), "CS"),
        ((False, False, True), "S"),
        ((True, True, True), "CNS"),
    ],
)
def test_cue_flag_field(flags, field):
    assert render_cue(report(flags=flags)).endswith(f"flags={field}]")


def test_cue_is_deterministic():
    a = report(3.14159, 0.61234, 0.0, (True, False, False))
    b = report(3.14159, 0.61234, 0.0, (True, False, False))
    assert render_cue(a).encode() == render_cue(b).encode()


def test_explanation_clean_sentence():
    exp = render_explanation(report())
    assert exp.text == CLEAN_SENTENCE
    assert exp.cause_set == frozenset()


def test_explanation_color_template_text():
    exp = render_explanation(report(d=7.5, flags=(True, False, False)))
    assert exp.text == (
        "Hue distribution deviates from the clean reference (Mahalanobis distance 7.500); "
        "object colors may be misread, risking wrong target selection."
    )


def test_explanation_noise_only():
    exp = render_explanation(report(r=0.6049, flags=(False, True, False)))
    assert exp.text == load_templates()["noise"].replace("<metric>", "0.605")
    assert exp.cause_set == {"noise"}


def test_explanation_all_flags_in_order():
    rep = report(d=1.0, r=0.5, e=0.25, flags=(True, True, True))
    t = load_templates()
    expected = " ".join([
        t["color"].replace("<metric>", "1.000"),
        t["noise"].replace("<metric>", "0.500"),
        t["spatial"].replace("<metric>", "0.250"),
    ])
    assert render_explanation(rep).text == expected


def test_explanation_depends_only_on_rounded_values():
    a = render_explanation(report(d=2.00001, flags=(True, False, False)))
    b = render_explanation(report(d=1.99999, flags=(True, False, False)))
    assert a == b
    assert a.tokens == a.text.split() and a.tokens


def test_template_resource_schema():
    text = resources.files("evidence3").joinpath("resources/explanations.json").read_text()
    doc = json.loads(text)
    assert isinstance(doc["version"], int)
    flags = [entry["flag"] for entry in doc["templates"]]
    assert sorted(flags) == ["clean", "color", "noise", "spatial"]
    assert all("<metric>" in e["template"] for e in doc["templates"] if e["flag"] != "clean")


def test_reference_explanation_uses_spec():
    spec = PerturbationSpec(use_illum=True, gain=2.0)
    rep = report(e=0.3)
    assert causes_for_spec(spec) == {"spatial"}
    assert reference_explanation(spec, rep).text == load_templates()["spatial"].replace("<metric>", "0.300")
    assert reference_explanation(CLEAN, rep).text == CLEAN_SENTENCE


def test_token_accuracy_identity():
    assert token_accuracy(["a", "b"], ["a", "b"]) == 1.0


def test_token_accuracy_half():
    assert token_accuracy(["a", "b", "x", "y"], ["a", "b", "c", "d"]) == 0.5


def test_token_accuracy_empty_prediction():
    assert token_accuracy([], ["a"]) == 0.0


def test_token_accuracy_longer_prediction_ignored_tail():
    assert token_accuracy(["a", "b", "c"], ["a", "b"]) == 1.0


def test_token_accuracy_empty_reference():
    with pytest.raises(ScoringError):
        token_accuracy(["a"], [])


@given(st.lists(st.text(min_size=1), min_size=1, max_size=30), st.data())
def test_token_accuracy_monotone_under_corruption(ref, data):
    pred = list(ref)
    assert token_accuracy(pred, ref) == 1.0
    last = 1.0
    order = data.draw(st.permutations(range(len(ref))))
    for i in order:
        pred[i] = pred[i] + "\x00"
        acc = token_accuracy(pred, ref)
        assert acc <= last
        last = acc
    assert last == 0.0


@pytest.mark.parametrize(
    "flags, cls",
    [((False, False, False), 0), ((True, False, True), 5), ((True, True, True), 7), ((False, True, False), 2)],
)
def test_explanation_class(flags, cls):
    spec = PerturbationSpec(use_color=flags[0], use_illum=flags[1], use_noise=flags[2])
    assert explanation_class(spec) == cls


def test_explanation_class_is_bijection():
    seen = set()
    for flags in itertools.product([False, True], repeat=3):
        spec = PerturbationSpec(use_color=flags[0], use_illum=flags[1], use_noise=flags[2])
        cls = explanation_class(spec)
        seen.add(cls)
        assert explanation_class(spec_for_class(cls)) == cls
        assert class_subset(cls) == set(spec.active)
    assert seen == set(range(8))
    with pytest.raises(ValueError):
        class_subset(8)
