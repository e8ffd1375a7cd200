"""File-based process database: etch-rate records, recipes, tolerance data.

Rates for temperatures between two stored records (same etchant and
concentration) are interpolated with ln(R) linear in 1/T [K]. There is no
extrapolation and no interpolation across concentrations.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from types import MappingProxyType

from .engine import StepSpec, steps_for
from .rules import BULK, DEFAULT_KAPPA, RuleTable, rates_to_probabilities

KELVIN = 273.15
T_RANGE_C = (-50.0, 200.0)


class DatabaseError(ValueError):
    """Schema or lookup failure; the message carries the offending location."""


def _as_rates(obj, where):
    if not isinstance(obj, dict) or not obj:
        raise DatabaseError(f"{where}: expected a non-empty object of plane -> rate")
    out = {}
    for k, v in obj.items():
        if str(k) == BULK:
            raise DatabaseError(f"{where}.{k}: bulk has no etch rate")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
            raise DatabaseError(f"{where}.{k}: rate must be a finite number >= 0, got {v!r}")
        out[str(k)] = float(v)
    return MappingProxyType(out)


@dataclass(frozen=True)
class RateRecord:
    etchant: str
    concentration: float  # wt %
    temperature: float  # deg C
    rates: MappingProxyType  # plane -> um/min
    tolerances: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    @property
    def key(self):
        return (self.etchant, self.concentration, self.temperature)

    def to_doc(self):
        doc = {"etchant": self.etchant, "concentration_wt_pct": self.concentration,
               "temperature_C": self.temperature, "rates_um_per_min": dict(self.rates)}
        if self.tolerances:
            doc["tolerance_rel"] = dict(self.tolerances)
        return doc


def _number(rec, name, where):
    if name not in rec:
        raise DatabaseError(f"{where}: missing field {name!r}")
    v = rec[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise DatabaseError(f"{where}.{name}: expected a finite number, got {v!r}")
    return float(v)


def parse_record(rec, where="record") -> RateRecord:
    if not isinstance(rec, dict):
        raise DatabaseError(f"{where}: expected an object")
    unknown = set(rec) - {"etchant", "concentration_wt_pct", "temperature_C", "rates_um_per_min", "tolerance_rel"}
    if unknown:
        raise DatabaseError(f"{where}: unknown field(s) {sorted(unknown)}")
    etchant = rec.get("etchant")
    if not isinstance(etchant, str) or not etchant:
        raise DatabaseError(f"{where}.etchant: expected a non-empty string")
    conc = _number(rec, "concentration_wt_pct", where)
    if not 0.0 < conc <= 100.0:
        raise DatabaseError(f"{where}.concentration_wt_pct: {conc} outside (0, 100]")
    temp = _number(rec, "temperature_C", where)
    if not T_RANGE_C[0] <= temp <= T_RANGE_C[1]:
        raise DatabaseError(f"{where}.temperature_C: {temp} outside [{T_RANGE_C[0]}, {T_RANGE_C[1]}]")
    if "rates_um_per_min" not in rec:
        raise DatabaseError(f"{where}: missing field 'rates_um_per_min'")
    rates = _as_rates(rec["rates_um_per_min"], f"{where}.rates_um_per_min")
    tol = {}
    for k, v in (rec.get("tolerance_rel") or {}).items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
            raise DatabaseError(f"{where}.tolerance_rel.{k}: expected a fraction in [0, 1], got {v!r}")
        tol[str(k)] = float(v)
    return RateRecord(etchant, conc, temp, rates, MappingProxyType(tol))


class ProcessDB:
    """Immutable collection of rate records keyed by (etchant, conc, temp)."""

    def __init__(self, records=()):
        by_key = {}
        for i, r in enumerate(records):
            if r.key in by_key:
                raise DatabaseError(f"records[{i}]: duplicate key {r.key}")
            by_key[r.key] = r
        self._records = tuple(records)
        self._by_key = MappingProxyType(by_key)

    @property
    def records(self):
        return self._records

    def __len__(self):
        return len(self._records)

    def __contains__(self, key):
        return tuple(key) in self._by_key

    def get(self, etchant, concentration, temperature):
        return self._by_key.get((etchant, float(concentration), float(temperature)))

    def to_doc(self):
        return {"records": [r.to_doc() for r in self._records]}


def load_db(source) -> ProcessDB:
    """Load a database from a path, JSON text or an already parsed dict."""
    where = "db"
    if isinstance(source, (str, os.PathLike)) and not str(source).lstrip().startswith("{"):
        where = os.fspath(source)
        try:
            with open(source) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DatabaseError(f"{where}: invalid JSON ({e})") from None
    elif isinstance(source, str):
        doc = json.loads(source)
    else:
        doc = source
    if not isinstance(doc, dict) or not isinstance(doc.get("records", None), list):
        raise DatabaseError(f"{where}: expected an object with a 'records' list")
    recs = [parse_record(r, f"{where}: records[{i}]") for i, r in enumerate(doc["records"])]
    try:
        return ProcessDB(recs)
    except DatabaseError as e:
        raise DatabaseError(f"{where}: {e}") from None


def save_db(db: ProcessDB, path):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(db.to_doc(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def lookup(db: ProcessDB, etchant, concentration, temperature):
    """Per-plane rates at (etchant, concentration, temperature)."""
    concentration, temperature = float(concentration), float(temperature)
    exact = db.get(etchant, concentration, temperature)
    if exact is not None:
        return dict(exact.rates)
    same_etchant = [r for r in db.records if r.etchant == etchant]
    if not same_etchant:
        raise DatabaseError(f"unknown etchant {etchant!r}")
    series = sorted((r for r in same_etchant if r.concentration == concentration), key=lambda r: r.temperature)
    if not series:
        have = sorted({r.concentration for r in same_etchant})
        raise DatabaseError(f"no {etchant} records at {concentration} wt% (available: {have})")
    lo = [r for r in series if r.temperature < temperature]
    hi = [r for r in series if r.temperature > temperature]
    if not lo or not hi:
        span = (series[0].temperature, series[-1].temperature)
        raise DatabaseError(f"{etchant} {concentration} wt%: temperature {temperature} C outside "
                            f"tabulated range {span}; no extrapolation")
    r1, r2 = lo[-1], hi[0]
    x1, x2, x = 1.0 / (r1.temperature + KELVIN), 1.0 / (r2.temperature + KELVIN), 1.0 / (temperature + KELVIN)
    t = (x - x1) / (x2 - x1)
    planes = set(r1.rates) & set(r2.rates)
    out = {}
    for p in sorted(planes):
        a, b = r1.rates[p], r2.rates[p]
        if a == 0.0 or b == 0.0:
            # log-linear is undefined at zero; fall back to linear in 1/T
            out[p] = a + t * (b - a)
        else:
            out[p] = math.exp(math.log(a) + t * (math.log(b) - math.log(a)))
        out[p] = min(max(out[p], min(a, b)), max(a, b))
    return out


@dataclass(frozen=True)
class ProcessStepDef:
    """One recipe step: either an inline rate set or a database selector."""

    duration: float  # minutes
    rates: dict | None = None
    etchant: str | None = None
    concentration: float | None = None
    temperature: float | None = None
    top_mask: object = None
    bottom_mask: object = None
    name: str = ""

    def __post_init__(self):
        if not self.duration >= 0:
            raise DatabaseError(f"step duration must be >= 0, got {self.duration}")
        if self.rates is None and (self.etchant is None or self.concentration is None or self.temperature is None):
            raise DatabaseError("step needs inline 'rates' or etchant/concentration/temperature")


def parse_step(doc, where="step") -> ProcessStepDef:
    if not isinstance(doc, dict):
        raise DatabaseError(f"{where}: expected an object")
    try:
        duration = float(doc["duration_min"])
    except (KeyError, TypeError, ValueError):
        raise DatabaseError(f"{where}.duration_min: required number") from None
    rates = doc.get("rates_um_per_min")
    if rates is not None:
        rates = dict(_as_rates(rates, f"{where}.rates_um_per_min"))
    try:
        return ProcessStepDef(duration, rates, doc.get("etchant"), doc.get("concentration_wt_pct"),
                              doc.get("temperature_C"), doc.get("top_mask"), doc.get("bottom_mask"),
                              str(doc.get("name", "")))
    except DatabaseError as e:
        raise DatabaseError(f"{where}: {e}") from None


def step_rates(db, step: ProcessStepDef):
    if step.rates is not None:
        return dict(step.rates)
    if db is None:
        raise DatabaseError("no process database loaded")
    return lookup(db, step.etchant, step.concentration, step.temperature)


def resolve_recipe(db, steps, lattice_constant=1.0, kappa=DEFAULT_KAPPA, table: RuleTable | None = None,
                   masks=None):
    """Turn process steps into engine StepSpecs.

    ``masks`` optionally maps a step's mask reference to a column bitmap.
    A step whose rates are all zero becomes an idle step with the duration
    still accounted for one step at a time of length ``duration``.
    """
    base = table or RuleTable()
    specs = []
    for i, st in enumerate(steps):
        try:
            rates = step_rates(db, st)
        except DatabaseError as e:
            raise DatabaseError(f"recipe step {i}: {e}") from None
        top = masks.get(st.top_mask) if (masks and st.top_mask is not None) else None
        bot = masks.get(st.bottom_mask) if (masks and st.bottom_mask is not None) else None
        if max(rates.values(), default=0.0) <= 0.0:
            zero = base.with_probabilities({k: 0.0 for k in base.probabilities if k != BULK})
            n = 1 if st.duration > 0 else 0
            specs.append(StepSpec(zero, float(st.duration), top, bot, n))
            continue
        probs, dt = rates_to_probabilities(rates, lattice_constant, kappa)
        specs.append(StepSpec(base.with_probabilities(probs), dt, top, bot, steps_for(st.duration, dt)))
    return specs
