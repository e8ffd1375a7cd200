import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from etchsim import procdb as P
from etchsim.procdb import DatabaseError, ProcessStepDef
from etchsim.rules import DEFAULT_KAPPA

KOH = [
    {"etchant": "KOH", "concentration_wt_pct": 30, "temperature_C": 70,
     "rates_um_per_min": {"100": 0.6, "110": 1.2, "111": 0.003}},
    {"etchant": "KOH", "concentration_wt_pct": 30, "temperature_C": 80,
     "rates_um_per_min": {"100": 1.1, "110": 2.2, "111": 0.0055}, "tolerance_rel": {"100": 0.05}},
]


@pytest.fixture
def db():
    return P.load_db({"records": KOH})


def test_empty_database():
    empty = P.load_db({"records": []})
    assert len(empty) == 0
    with pytest.raises(DatabaseError, match="unknown etchant"):
        P.lookup(empty, "KOH", 30, 70)


def test_exact_lookup(db):
    assert P.lookup(db, "KOH", 30, 80) == {"100": 1.1, "110": 2.2, "111": 0.0055}
    assert db.get("KOH", 30, 80).tolerances["100"] == 0.05


def test_midpoint_in_inverse_temperature_is_geometric_mean(db):
    x = 0.5 * (1 / (70 + P.KELVIN) + 1 / (80 + P.KELVIN))
    t_mid = 1 / x - P.KELVIN
    r = P.lookup(db, "KOH", 30, t_mid)
    for plane in ("100", "110", "111"):
        expect = math.sqrt(KOH[0]["rates_um_per_min"][plane] * KOH[1]["rates_um_per_min"][plane])
        assert r[plane] == pytest.approx(expect, rel=1e-12)


def test_interpolation_bounded_by_neighbours(db):
    for t in (70.5, 72, 75, 79.99):
        r = P.lookup(db, "KOH", 30, t)
        for plane in r:
            lo, hi = sorted((KOH[0]["rates_um_per_min"][plane], KOH[1]["rates_um_per_min"][plane]))
            assert lo <= r[plane] <= hi


@given(st.floats(0.1, 10.0))
def test_interpolation_scales_with_rates(c):
    scaled = [dict(r, rates_um_per_min={k: v * c for k, v in r["rates_um_per_min"].items()}) for r in KOH]
    base = P.lookup(P.load_db({"records": KOH}), "KOH", 30, 74.0)
    other = P.lookup(P.load_db({"records": scaled}), "KOH", 30, 74.0)
    for k in base:
        assert other[k] == pytest.approx(base[k] * c, rel=1e-9)


def test_zero_rate_interpolates_linearly():
    recs = [dict(KOH[0], rates_um_per_min={"100": 0.0}), dict(KOH[1], rates_um_per_min={"100": 1.0})]
    r = P.lookup(P.load_db({"records": recs}), "KOH", 30, 75)
    assert 0.0 < r["100"] < 1.0


@pytest.mark.parametrize("args,match", [(("TMAH", 25, 80), "unknown etchant"),
                                        (("KOH", 30, 90), "no extrapolation"),
                                        (("KOH", 30, 60), "no extrapolation"),
                                        (("KOH", 35, 80), "wt%")])
def test_lookup_errors(db, args, match):
    with pytest.raises(DatabaseError, match=match):
        P.lookup(db, *args)


def test_duplicate_key_rejected():
    with pytest.raises(DatabaseError, match="duplicate"):
        P.load_db({"records": [KOH[0], KOH[0]]})


@pytest.mark.parametrize("patch,field", [({"concentration_wt_pct": 0}, "concentration"),
                                         ({"temperature_C": 250}, "temperature"),
                                         ({"rates_um_per_min": {"100": -1}}, "rates"),
                                         ({"rates_um_per_min": {}}, "rates"),
                                         ({"tolerance_rel": {"100": 2}}, "tolerance"),
                                         ({"colour": "blue"}, "unknown"),
                                         ({"etchant": ""}, "etchant")])
def test_schema_errors_name_the_field(patch, field):
    with pytest.raises(DatabaseError, match=field):
        P.load_db({"records": [dict(KOH[0], **patch)]})


def test_invalid_json_file(tmp_path):
    p = tmp_path / "db.json"
    p.write_text("{not json")
    with pytest.raises(DatabaseError, match="db.json"):
        P.load_db(p)


def test_save_load_roundtrip(db, tmp_path):
    P.save_db(db, tmp_path / "db.json")
    back = P.load_db(tmp_path / "db.json")
    assert back.records == db.records
    for t in (70, 73.3, 80):
        a, b = P.lookup(db, "KOH", 30, t), P.lookup(back, "KOH", 30, t)
        assert all(abs(a[k] - b[k]) <= 1e-12 for k in a)
    assert json.loads((tmp_path / "db.json").read_text()) == db.to_doc()


def test_parse_step_forms():
    s = P.parse_step({"duration_min": 2, "rates_um_per_min": {"100": 1}})
    assert s.rates == {"100": 1.0} and s.duration == 2.0
    s = P.parse_step({"duration_min": 1, "etchant": "KOH", "concentration_wt_pct": 30, "temperature_C": 75})
    assert s.rates is None and s.etchant == "KOH"
    with pytest.raises(DatabaseError, match="duration_min"):
        P.parse_step({"rates_um_per_min": {"100": 1}})
    with pytest.raises(DatabaseError):
        P.parse_step({"duration_min": 1})
    with pytest.raises(DatabaseError):
        P.parse_step({"duration_min": -1, "rates_um_per_min": {"100": 1}})


def test_resolve_inline_step_exact_multiple():
    dt = DEFAULT_KAPPA * 0.25 / 2.0
    steps = [ProcessStepDef(7 * dt, {"100": 1.0, "110": 2.0, "111": 0.0})]
    (spec,) = P.resolve_recipe(None, steps)
    assert spec.n_steps == 7
    assert spec.step_duration == pytest.approx(dt)
    assert spec.table.probabilities["110"] == 1.0 and spec.table.probabilities["100"] == 0.5


def test_resolve_rounds_up_partial_steps():
    dt = DEFAULT_KAPPA * 0.25
    (spec,) = P.resolve_recipe(None, [ProcessStepDef(2.5 * dt, {"100": 1.0})])
    assert spec.n_steps == 3


def test_resolve_zero_duration_and_zero_rates():
    specs = P.resolve_recipe(None, [ProcessStepDef(0.0, {"100": 1.0}), ProcessStepDef(3.0, {"100": 0.0})])
    assert specs[0].n_steps == 0
    assert specs[1].n_steps == 1 and specs[1].step_duration == 3.0
    assert all(v == 0.0 for k, v in specs[1].table.probabilities.items() if k != "bulk")


def test_resolve_database_step(db):
    (spec,) = P.resolve_recipe(db, [ProcessStepDef(1.0, None, "KOH", 30, 80)], lattice_constant=0.5431)
    assert spec.step_duration == pytest.approx(DEFAULT_KAPPA * 0.5431 / 4 / 2.2)
    with pytest.raises(DatabaseError, match="step 0"):
        P.resolve_recipe(None, [ProcessStepDef(1.0, None, "KOH", 30, 80)])


def test_resolve_step_masks():
    m = np.ones((4, 4), np.uint8)
    (spec,) = P.resolve_recipe(None, [ProcessStepDef(1.0, {"100": 1.0}, top_mask="m1")], masks={"m1": m})
    assert spec.top_mask is m and spec.bottom_mask is None
