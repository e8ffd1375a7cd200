import json
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from etchsim import engine, rules
from etchsim.lattice import Face
from etchsim.rules import BULK, FALLBACK_110, P100, P110, P111, RuleTable


def truth_table(n1, n2, n3):
    """Plane rules written out by hand."""
    if n1 == 4:
        return BULK
    if n1 == 2:
        return P100
    if n1 == 3:
        if n2 < 9:
            return P110
        if n2 == 9 and n3 < 3:
            return P110
        if n2 >= 10:
            return P111
        if n2 == 9 and n3 >= 9:
            return P111
    return FALLBACK_110


def test_exhaustive_truth_table():
    for n1 in range(5):
        for n2 in range(13):
            for n3 in range(13):
                assert rules.classify((n1, n2, n3)) == truth_table(n1, n2, n3)


def test_rule_gap_falls_back_to_110_probability():
    t = RuleTable(probabilities={P100: 0.5, P110: 1.0, P111: 0.01})
    for n3 in range(3, 9):
        assert t.classify((3, 9, n3)) == FALLBACK_110
    assert t.probabilities[FALLBACK_110] == t.probabilities[P110]


@pytest.mark.parametrize("counts,label", [((2, 6, 4), P100), ((3, 8, 5), P110), ((3, 10, 7), P111),
                                          ((3, 9, 9), P111), ((4, 12, 12), BULK)])
def test_classify_examples(counts, label):
    assert rules.classify(counts) == label


def test_bulk_never_removable():
    with pytest.raises(ValueError):
        RuleTable(probabilities={BULK: 0.1})
    t = RuleTable(probabilities={P100: 1, P110: 1, P111: 1})
    assert t.site_probabilities()[4 * 169 + 12 * 13 + 12] == 0.0


def test_lookup_table_agrees_with_classify():
    t = RuleTable(probabilities={P100: 0.25, P110: 0.5, P111: 0.125})
    lut = t.site_probabilities()
    assert lut.shape == (845,)
    for n1 in range(5):
        for n2 in range(13):
            for n3 in range(13):
                assert lut[n1 * 169 + n2 * 13 + n3] == t.probabilities[t.classify((n1, n2, n3))]


@pytest.mark.parametrize("rates,expected", [
    ({P100: 3.0, P110: 3.0, P111: 3.0}, {P100: 1.0, P110: 1.0, P111: 1.0}),
    ({P100: 1.0, P111: 0.01}, {P100: 1.0, P111: 0.01}),
    ({P100: 1.0, P110: 2.0, P111: 0.005}, {P100: 0.5, P110: 1.0, P111: 0.0025}),
])
def test_rates_to_probabilities_examples(rates, expected):
    probs, _ = rules.rates_to_probabilities(rates)
    assert probs == pytest.approx(expected, rel=1e-15)


def test_rates_to_probabilities_rejects_zero():
    with pytest.raises(ValueError):
        rules.rates_to_probabilities({P100: 0.0, P110: 0.0})


def test_step_duration_formula():
    _, dt = rules.rates_to_probabilities({P100: 1.0, P110: 2.0}, lattice_constant=0.5, kappa=3.0)
    assert dt == pytest.approx(3.0 * 0.125 / 2.0)


@given(st.floats(0.01, 10), st.floats(0.0, 10), st.floats(0.0, 1), st.floats(0.1, 100))
def test_scale_invariance(r100, r110, r111, c):
    rates = {P100: r100, P110: r110, P111: r111}
    p1, d1 = rules.rates_to_probabilities(rates)
    p2, d2 = rules.rates_to_probabilities({k: v * c for k, v in rates.items()})
    for k in p1:
        assert p2[k] == pytest.approx(p1[k], rel=1e-12, abs=1e-15)
    assert d2 == pytest.approx(d1 / c, rel=1e-12)


def test_custom_rules_empty_document():
    assert rules.load_custom_rules({}) is rules._DEFAULT_TABLE
    assert rules.load_custom_rules({"rules": []}).rules == rules.BUILTIN_RULES


def test_custom_rule_fills_gap():
    t = rules.load_custom_rules({"rules": [{"n1": 3, "n2": 9, "n3": [3, 8], "class": "C1", "p": 0.3}]})
    assert t.classify((3, 9, 5)) == "C1"
    assert t.probabilities["C1"] == 0.3
    assert t.classify((3, 9, 9)) == P111
    assert t.site_probabilities()[3 * 169 + 9 * 13 + 5] == 0.3


def test_custom_rules_from_json_file(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps({"rules": [{"n1": [3, 3], "n2": [9, 9], "n3": [3, 8], "class": "C1", "p": 0.3}]}))
    assert rules.load_custom_rules(str(p)).classify((3, 9, 4)) == "C1"


@pytest.mark.parametrize("doc", [
    {"rules": [{"n1": 3, "n2": 9, "n3": [3, 8], "class": "C1", "p": 1.5}]},
    {"rules": [{"n1": 3, "n2": 9, "n3": [3, 8], "class": "C1"}]},
    {"rules": [{"n1": 3, "n2": 9, "n3": [3, 8], "class": "C1", "p": 0.2},
               {"n1": 3, "n2": 9, "n3": [5, 6], "class": "C2", "p": 0.4}]},
    {"rules": [{"n1": [3, 2], "class": "C1", "p": 0.2}]},
])
def test_custom_rules_rejected(doc):
    with pytest.raises(ValueError):
        rules.load_custom_rules(doc)


def test_custom_rule_priority_orders_overlap():
    t = rules.load_custom_rules({"rules": [
        {"n1": 3, "n2": 9, "n3": [3, 8], "class": "low", "p": 0.2, "priority": 0},
        {"n1": 3, "n2": 9, "n3": [5, 6], "class": "high", "p": 0.4, "priority": 5},
    ]})
    assert t.classify((3, 9, 5)) == "high"
    assert t.classify((3, 9, 4)) == "low"


def test_totality():
    t = rules.load_custom_rules({"rules": [{"n1": 0, "class": "X", "p": 0.1}]})
    labels = set(t.labels)
    for n1 in range(5):
        for n2 in range(13):
            for n3 in range(13):
                assert t.classify((n1, n2, n3)) in labels


def _step_time(table, reps=3):
    faces = (Face.PERIODIC,) * 4 + (Face.SOLID, Face.EXPOSED)
    best = float("inf")
    for _ in range(reps):
        st_ = engine.init((16, 16, 8), 1.0, faces=faces, seed=1)
        spec = engine.StepSpec(table, 1.0)
        t0 = time.perf_counter()
        for _ in range(4):
            engine.step_once(st_, spec)
        best = min(best, time.perf_counter() - t0)
    return best


def test_rule_table_length_cost_is_coarsely_monotone():
    # rules are compiled into a lookup table, so extra rules cost (nearly) nothing per step
    probs = {P100: 0.5, P110: 1.0, P111: 0.01}
    small = RuleTable(probabilities=probs)
    big = rules.load_custom_rules({"rules": [{"n1": 0, "n2": [0, 0], "n3": [k, k], "class": f"c{k}", "p": 0.1}
                                             for k in range(13)]}, base=small)
    assert len(big) > len(small)
    big.site_probabilities()
    _step_time(small, 1)
    assert _step_time(big) >= 0.5 * _step_time(small)
