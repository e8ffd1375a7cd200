"""Monte Carlo tolerance analysis over process parameters.

Parameters are addressed by id:

* ``rate.<plane>`` : etch rate of a plane class in every step
* ``duration``     : duration of every step
* ``rotation_deg`` : mask misalignment added to the layout rotation

Each range is either relative (value * (1 + d)) or absolute (value + d),
with d drawn from [lo, hi].
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine
from .lattice import DEFAULT_FACES
from .layout import MaskSet
from .procdb import ProcessStepDef, resolve_recipe, step_rates
from .rng import derive_seed, draw
from .rules import DEFAULT_KAPPA

METRICS = ("max_depth", "undercut", "removed_volume")
STAT_FIELDS = ("mean", "std", "min", "max", "p5", "p25", "p75", "p95")
_SAMPLE_STREAM = 11


@dataclass(frozen=True)
class ParamRange:
    lo: float
    hi: float
    kind: str = "rel"  # "rel" or "abs"

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo > self.hi:
            raise ValueError(f"malformed range [{self.lo}, {self.hi}]")
        if self.kind not in ("rel", "abs"):
            raise ValueError(f"range kind must be 'rel' or 'abs', got {self.kind!r}")

    @property
    def width(self):
        return self.hi - self.lo

    def apply(self, base, d):
        return base * (1.0 + d) if self.kind == "rel" else base + d


@dataclass
class ToleranceSpec:
    base: list  # ProcessStepDef
    perturbations: dict = field(default_factory=dict)  # param id -> ParamRange
    n_samples: int = 1
    seed: int = 0
    distribution: str = "uniform"  # or "normal"
    pin_seed: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("sample count must be >= 1")
        if self.distribution not in ("uniform", "normal"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        for pid in self.perturbations:
            if not (pid in ("duration", "rotation_deg") or pid.startswith("rate.")):
                raise ValueError(f"unknown tolerance parameter {pid!r}")

    @property
    def param_ids(self):
        return tuple(sorted(self.perturbations))


@dataclass
class Sample:
    index: int
    deltas: dict
    steps: list
    rotation_offset: float
    ca_seed: int


def _uniform_to_normal(u1, u2):
    # Box-Muller; u1 in [0, 1) is shifted off zero
    return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)


def _deviation(spec, k, j, rng: ParamRange):
    if rng.width == 0.0:
        return rng.lo
    key = derive_seed(spec.seed, k, j, _SAMPLE_STREAM)
    if spec.distribution == "uniform":
        return rng.lo + draw(key, 0, 0) * rng.width
    # normal centred on the range, range = +-2 sigma, clipped to the range
    z = _uniform_to_normal(draw(key, 0, 0), draw(key, 0, 1))
    mid, sigma = 0.5 * (rng.lo + rng.hi), rng.width / 4.0
    return min(max(mid + sigma * z, rng.lo), rng.hi)


def _float_bits(x):
    return struct.unpack("<q", struct.pack("<d", float(x)))[0]


def sample_params(spec: ToleranceSpec, k: int, db=None) -> Sample:
    """Perturbed recipe for sample ``k``.

    The simulation seed is derived from the base seed and the sampled
    values, so identical parameter draws share a seed (zero-width ranges
    collapse to a single deterministic run) while distinct draws also
    sample process noise. With ``pin_seed`` every sample uses ``seed``.
    """
    if not 0 <= k < spec.n_samples:
        raise IndexError(f"sample index {k} outside [0, {spec.n_samples})")
    deltas = {pid: _deviation(spec, k, j, spec.perturbations[pid]) for j, pid in enumerate(spec.param_ids)}
    steps = []
    for st in spec.base:
        new = st
        rate_ids = [p for p in deltas if p.startswith("rate.")]
        if rate_ids:
            rates = step_rates(db, st)
            for pid in rate_ids:
                plane = pid[5:]
                if plane in rates:
                    rates[plane] = max(0.0, spec.perturbations[pid].apply(rates[plane], deltas[pid]))
            new = replace(new, rates=rates)
        if "duration" in deltas:
            new = replace(new, duration=max(0.0, spec.perturbations["duration"].apply(st.duration, deltas["duration"])))
        steps.append(new)
    rot = 0.0
    if "rotation_deg" in deltas:
        rot = spec.perturbations["rotation_deg"].apply(0.0, deltas["rotation_deg"])
    if spec.pin_seed:
        ca_seed = spec.seed
    else:
        ca_seed = derive_seed(spec.seed, *(_float_bits(deltas[p]) for p in spec.param_ids))
    return Sample(k, deltas, steps, rot, ca_seed)


@dataclass
class SimulationContext:
    dims: tuple
    lattice_constant: float = 1.0
    masks: MaskSet | None = None
    faces: tuple = DEFAULT_FACES
    db: object = None
    table: object = None
    kappa: float = DEFAULT_KAPPA
    backend: str | None = None


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {f: float("nan") for f in STAT_FIELDS}
    if np.all(v == v[0]):
        c = float(v[0])
        return {"mean": c, "std": 0.0, "min": c, "max": c, "p5": c, "p25": c, "p75": c, "p95": c}
    p5, p25, p75, p95 = np.percentile(v, [5, 25, 75, 95])
    mean = float(np.clip(v.mean(), v.min(), v.max()))
    return {"mean": mean, "std": float(v.std()), "min": float(v.min()), "max": float(v.max()),
            "p5": float(p5), "p25": float(p25), "p75": float(p75), "p95": float(p95)}


@dataclass
class StatsReport:
    stats: dict  # metric -> {stat: value}
    rows: list  # one dict per sample
    failed: list  # sample indices that raised
    param_ids: tuple = ()

    @property
    def n_failed(self):
        return len(self.failed)

    def iqr(self, metric):
        s = self.stats[metric]
        return s["p75"] - s["p25"]

    def to_dict(self):
        return {"n_samples": len(self.rows), "n_failed": self.n_failed, "failed": list(self.failed),
                "stats": self.stats, "samples": self.rows}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            _write_text(path, text)
        return text

    def to_csv(self, path=None):
        cols = ["sample", "ca_seed"] + [f"d_{p}" for p in self.param_ids] + list(METRICS) + ["error"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            out = {"sample": r["sample"], "ca_seed": r["ca_seed"], "error": r.get("error") or ""}
            out.update({f"d_{p}": repr(r["deltas"][p]) for p in self.param_ids})
            out.update({m: ("" if r.get(m) is None else repr(r[m])) for m in METRICS})
            w.writerow(out)
        text = buf.getvalue()
        if path is not None:
            _write_text(path, text)
        return text


def _write_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def run_sample(sample: Sample, ctx: SimulationContext):
    recipe = resolve_recipe(ctx.db, sample.steps, ctx.lattice_constant, ctx.kappa, ctx.table)
    masks = ctx.masks
    if masks is not None and sample.rotation_offset:
        masks = replace(masks, rotation_deg=(masks.rotation_deg + sample.rotation_offset) % 360.0)
    st = engine.init(ctx.dims, ctx.lattice_constant, masks, seed=sample.ca_seed, faces=ctx.faces,
                     backend=ctx.backend)
    st, _ = engine.run(st, recipe)
    return engine.metrics(st)


def tolerance_run(spec: ToleranceSpec, ctx: SimulationContext, on_sample=None) -> StatsReport:
    """Simulate every sample; failures are recorded and the run continues."""
    rows, failed = [], []
    for k in range(spec.n_samples):
        row = {"sample": k}
        try:
            s = sample_params(spec, k, ctx.db)
            row.update(ca_seed=s.ca_seed, deltas=s.deltas)
            row.update(run_sample(s, ctx).as_dict())
            row["error"] = None
        except Exception as exc:  # noqa: BLE001
            row.setdefault("ca_seed", None)
            row.setdefault("deltas", {p: None for p in spec.param_ids})
            row.update({m: None for m in METRICS})
            row["error"] = f"{type(exc).__name__}: {exc}"
            failed.append(k)
        rows.append(row)
        if on_sample is not None:
            on_sample(k, row)
    ok = [r for r in rows if r["error"] is None]
    stats = {m: _stats([r[m] for r in ok]) for m in METRICS}
    return StatsReport(stats, rows, failed, spec.param_ids)


def parse_tolerance(doc, base_steps) -> ToleranceSpec:
    """Build a ToleranceSpec from its JSON form.

    {"n_samples": N, "seed": s, "distribution": "uniform",
     "pin_seed": false, "ranges": {"rate.100": {"rel": [-0.05, 0.05]},
     "duration": {"abs": [-0.5, 0.5]}}}
    """
    ranges = {}
    for pid, r in (doc.get("ranges") or {}).items():
        if not isinstance(r, dict) or len(r) != 1 or next(iter(r)) not in ("rel", "abs"):
            raise ValueError(f"ranges.{pid}: expected {{'rel': [lo, hi]}} or {{'abs': [lo, hi]}}")
        kind, (lo, hi) = next(iter(r.items()))
        ranges[pid] = ParamRange(float(lo), float(hi), kind)
    return ToleranceSpec(list(base_steps), ranges, int(doc.get("n_samples", 1)), int(doc.get("seed", 0)),
                         str(doc.get("distribution", "uniform")), bool(doc.get("pin_seed", False)))


def ranges_from_record(record, planes=None):
    """Relative +-tolerance ranges taken from a database record."""
    out = {}
    for plane, tol in record.tolerances.items():
        if planes is None or plane in planes:
            out[f"rate.{plane}"] = ParamRange(-tol, tol, "rel")
    return out


__all__ = ["ParamRange", "ToleranceSpec", "Sample", "SimulationContext", "StatsReport", "sample_params",
           "tolerance_run", "parse_tolerance", "ranges_from_record", "run_sample", "ProcessStepDef"]
