"""Plane classification from neighbor counts, and removal probabilities.

Built-in rules (first-shell count n1, second n2, third n3):

* n1 == 2                                  -> (100)
* n1 == 3 and (n2 < 9 or n2 == 9, n3 < 3)  -> (110)
* n1 == 3 and (n2 >= 10 or n2 == 9, n3 >= 9) -> (111)
* n1 == 4                                  -> bulk (never removed)

Everything else falls through to ``FALLBACK_110``, which is etched with the
(110) probability. This includes the gap n1 == 3, n2 == 9, 3 <= n3 <= 8 that
neither the (110) nor the (111) rule covers, and under-coordinated atoms
with n1 <= 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .lattice import NeighborCounts

P100 = "100"
P110 = "110"
P111 = "111"
BULK = "bulk"
FALLBACK_110 = "fallback_110"
BUILTIN_CLASSES = (BULK, P100, P110, P111, FALLBACK_110)

# calibration factor for the time length of one step, fixed from blanket
# (100) etches at rate ratios 100:110:111 = 1:2:1/200
DEFAULT_KAPPA = 2.0

N_COUNTS = 5 * 13 * 13


@dataclass(frozen=True)
class Rule:
    n1: tuple
    n2: tuple
    n3: tuple
    label: str
    priority: int = 0

    def matches(self, n1, n2, n3):
        return (self.n1[0] <= n1 <= self.n1[1] and self.n2[0] <= n2 <= self.n2[1]
                and self.n3[0] <= n3 <= self.n3[1])

    def overlaps(self, other):
        return all(max(a[0], b[0]) <= min(a[1], b[1])
                   for a, b in ((self.n1, other.n1), (self.n2, other.n2), (self.n3, other.n3)))


BUILTIN_RULES = (
    Rule((2, 2), (0, 12), (0, 12), P100),
    Rule((3, 3), (0, 8), (0, 12), P110),
    Rule((3, 3), (9, 9), (0, 2), P110),
    Rule((3, 3), (10, 12), (0, 12), P111),
    Rule((3, 3), (9, 9), (9, 12), P111),
    Rule((4, 4), (0, 12), (0, 12), BULK),
)


class RuleTable:
    """Ordered rules (first match wins) plus per-class removal probabilities.

    Custom rules are evaluated before the built-ins. Immutable.
    """

    def __init__(self, custom_rules=(), probabilities=None, fallback=FALLBACK_110):
        self.custom_rules = tuple(custom_rules)
        self.rules = self.custom_rules + BUILTIN_RULES
        self.fallback = fallback
        given = dict(probabilities or {})
        if given.get(BULK, 0.0) != 0.0:
            raise ValueError("bulk sites cannot have a nonzero removal probability")
        probs = {P100: 0.0, P110: 0.0, P111: 0.0}
        probs.update(given)
        probs[BULK] = 0.0
        if FALLBACK_110 not in given:
            probs[FALLBACK_110] = probs[P110]
        for label, p in probs.items():
            if not (0.0 <= float(p) <= 1.0) or math.isnan(float(p)):
                raise ValueError(f"probability for class {label!r} must be in [0, 1], got {p}")
        for r in self.custom_rules:
            if r.label not in probs:
                raise ValueError(f"no probability given for custom class {r.label!r}")
        self.probabilities = MappingProxyType({k: float(v) for k, v in probs.items()})
        self._lut = None

    @property
    def labels(self):
        seen = list(BUILTIN_CLASSES)
        for r in self.custom_rules:
            if r.label not in seen:
                seen.append(r.label)
        return tuple(seen)

    def classify(self, counts):
        n1, n2, n3 = counts
        for rule in self.rules:
            if rule.matches(n1, n2, n3):
                return rule.label
        return self.fallback

    def with_probabilities(self, probabilities):
        merged = dict(self.probabilities)
        merged.pop(FALLBACK_110, None)
        merged.update(probabilities)
        return RuleTable(self.custom_rules, merged, self.fallback)

    def lookup_tables(self):
        """(class_lut, prob_of_class): class id per packed count n1*169 + n2*13 + n3."""
        if self._lut is None:
            labels = self.labels
            ids = {lab: i for i, lab in enumerate(labels)}
            lut = np.empty(N_COUNTS, dtype=np.int64)
            for n1 in range(5):
                for n2 in range(13):
                    for n3 in range(13):
                        lut[n1 * 169 + n2 * 13 + n3] = ids[self.classify((n1, n2, n3))]
            probs = np.array([self.probabilities.get(lab, 0.0) for lab in labels], dtype=np.float64)
            lut.setflags(write=False)
            probs.setflags(write=False)
            self._lut = (lut, probs)
        return self._lut

    def site_probabilities(self):
        """Removal probability per packed count triple (length 845)."""
        lut, probs = self.lookup_tables()
        return probs[lut]

    def __len__(self):
        return len(self.rules)

    def __repr__(self):
        return f"RuleTable({len(self.custom_rules)} custom rules, p={dict(self.probabilities)})"


def classify(counts, table=None):
    """Plane class of a site with neighbor counts ``counts``."""
    if table is None:
        table = _DEFAULT_TABLE
    return table.classify(NeighborCounts(*counts))


def rates_to_probabilities(rates, lattice_constant=1.0, kappa=DEFAULT_KAPPA):
    """Map per-plane etch rates (um/min) to per-step probabilities.

    p(class) = rate / max_rate, and one step lasts
    ``kappa * (lattice_constant / 4) / max_rate`` minutes.
    """
    rates = {str(k): float(v) for k, v in rates.items()}
    for k, v in rates.items():
        if v < 0 or math.isnan(v):
            raise ValueError(f"etch rate for {k!r} must be non-negative, got {v}")
    rmax = max(rates.values(), default=0.0)
    if rmax <= 0.0:
        raise ValueError("at least one etch rate must be positive")
    probs = {k: v / rmax for k, v in rates.items()}
    step_duration = kappa * (lattice_constant / 4.0) / rmax
    return probs, step_duration


def _range(value, name):
    if isinstance(value, int):
        return (value, value)
    if isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(v, int) for v in value):
        lo, hi = value
        if lo > hi:
            raise ValueError(f"{name}: empty range [{lo}, {hi}]")
        return (lo, hi)
    raise ValueError(f"{name}: expected an integer or [lo, hi] pair, got {value!r}")


def load_custom_rules(doc, base=None):
    """Build a RuleTable from a custom-rule document (dict, JSON text or path).

    Schema: {"rules": [{"n1": [lo, hi], "n2": [lo, hi], "n3": [lo, hi],
    "class": label, "p": prob, "priority": int}]}. Rules are tried by
    descending priority, then document order, before the built-in rules.
    """
    if base is None:
        base = _DEFAULT_TABLE
    if isinstance(doc, str):
        doc = json.loads(doc) if doc.lstrip().startswith("{") else json.loads(open(doc).read())
    if not doc:
        return base
    entries = doc.get("rules", [])
    if not isinstance(entries, list):
        raise ValueError("'rules' must be a list")

    probs = dict(base.probabilities)
    probs.pop(FALLBACK_110, None)
    rules = []
    for i, e in enumerate(entries):
        where = f"rules[{i}]"
        if not isinstance(e, dict) or "class" not in e:
            raise ValueError(f"{where}: needs a 'class' entry")
        label = str(e["class"])
        if label == BULK and float(e.get("p", 0.0)) != 0.0:
            raise ValueError(f"{where}: bulk cannot have a nonzero probability")
        r = Rule(_range(e.get("n1", [0, 4]), f"{where}.n1"), _range(e.get("n2", [0, 12]), f"{where}.n2"),
                 _range(e.get("n3", [0, 12]), f"{where}.n3"), label, int(e.get("priority", 0)))
        if "p" in e:
            p = float(e["p"])
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{where}: probability {p} outside [0, 1]")
            if label in probs and label not in BUILTIN_CLASSES and probs[label] != p:
                raise ValueError(f"{where}: class {label!r} given two different probabilities")
            probs[label] = p
        elif label not in probs:
            raise ValueError(f"{where}: custom class {label!r} needs a probability 'p'")
        rules.append((r, probs[label]))

    for i, (a, pa) in enumerate(rules):
        for b, pb in rules[i + 1:]:
            if a.priority == b.priority and a.overlaps(b) and (a.label != b.label or pa != pb):
                raise ValueError(f"custom rules for {a.label!r} and {b.label!r} overlap at equal priority")

    order = sorted(range(len(rules)), key=lambda k: -rules[k][0].priority)
    custom = tuple(base.custom_rules) + tuple(rules[k][0] for k in order)
    return RuleTable(custom, probs, base.fallback)


_DEFAULT_TABLE = RuleTable()


def default_table(probabilities=None):
    return RuleTable(probabilities=probabilities)
