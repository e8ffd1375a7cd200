"""Batch command line: simulate | optimize | tolerance | export | validate-db.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
Relative paths inside a config file are resolved against the file's directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import _accel, analysis, engine, layout, mesh, optimizer, procdb, rules
from .lattice import DEFAULT_FACES, Face

log = logging.getLogger("etchsim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
EXPORT_FORMATS = ("stl", "obj")
_FACE_NAMES = {"solid": Face.SOLID, "exposed": Face.EXPOSED, "periodic": Face.PERIODIC}
_FACE_KEYS = ("x_min", "x_max", "y_min", "y_max", "bottom", "top")


class ConfigError(Exception):
    """Invalid or missing configuration; maps to exit code 1."""


@dataclass
class RunConfig:
    dims: tuple
    lattice_constant: float = 1.0
    faces: tuple = DEFAULT_FACES
    layout_path: str | None = None
    db_path: str | None = None
    rules_path: str | None = None
    output_dir: str = "out"
    steps: list = field(default_factory=list)
    kappa: float = rules.DEFAULT_KAPPA
    snapshot_stride: int = 0
    seed: int = 0
    threads: int = 1
    voxel_threshold: int = 4
    simplify: bool = False
    base_dir: str = "."
    raw: dict = field(default_factory=dict, repr=False)

    def masks(self):
        if self.layout_path is None:
            return None
        try:
            return layout.parse_layout(self.layout_path)
        except OSError as e:
            raise ConfigError(f"layout: cannot read {self.layout_path}: {e.strerror}") from None
        except layout.LayoutError as e:
            raise ConfigError(f"layout: {e}") from None

    def db(self):
        if self.db_path is None:
            return None
        try:
            return procdb.load_db(self.db_path)
        except OSError as e:
            raise ConfigError(f"process_db: cannot read {self.db_path}: {e.strerror}") from None
        except procdb.DatabaseError as e:
            raise ConfigError(f"process_db: {e}") from None

    def table(self):
        if self.rules_path is None:
            return rules.RuleTable()
        try:
            return rules.load_custom_rules(self.rules_path)
        except OSError as e:
            raise ConfigError(f"rules: cannot read {self.rules_path}: {e.strerror}") from None
        except ValueError as e:
            raise ConfigError(f"rules: {e}") from None

    def recipe(self, db=None, table=None):
        db = self.db() if db is None else db
        table = self.table() if table is None else table
        try:
            return procdb.resolve_recipe(db, self.steps, self.lattice_constant, self.kappa, table)
        except (procdb.DatabaseError, ValueError) as e:
            raise ConfigError(f"recipe: {e}") from None


def _resolve(base, path, name, must_exist=True):
    if path is None:
        return None
    if not isinstance(path, str):
        raise ConfigError(f"{name}: expected a path string")
    full = path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))
    if must_exist and not os.path.exists(full):
        raise ConfigError(f"{name}: file not found: {full}")
    return full


def _faces(spec):
    if spec is None:
        return DEFAULT_FACES
    if isinstance(spec, list) and len(spec) == 6:
        names = spec
    elif isinstance(spec, dict):
        unknown = set(spec) - set(_FACE_KEYS) - {"lateral"}
        if unknown:
            raise ConfigError(f"domain.faces: unknown face(s) {sorted(unknown)}")
        lateral = spec.get("lateral", "periodic")
        names = [spec.get(k, lateral if k.startswith(("x", "y")) else "exposed") for k in _FACE_KEYS]
    else:
        raise ConfigError("domain.faces: expected an object or a list of 6 policies")
    try:
        return tuple(_FACE_NAMES[str(n).lower()] for n in names)
    except KeyError as e:
        raise ConfigError(f"domain.faces: unknown policy {e.args[0]!r} (expected solid|exposed|periodic)") from None


def _int(v, name, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name}: expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{name}: must be >= {lo}, got {v}")
    return v


def _num(v, name, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(f"{name}: expected a number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(f"{name}: must be > 0, got {v}")
    return float(v)


def read_json(path, name="config"):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{name}: file not found: {path}") from None
    except OSError as e:
        raise ConfigError(f"{name}: cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{name}: {path}: invalid JSON at line {e.lineno}: {e.msg}") from None


def load_config(path, args=None) -> RunConfig:
    """Parse a run config file, applying command-line overrides from ``args``."""
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    base = os.path.dirname(os.path.abspath(path))
    dom = doc.get("domain")
    if not isinstance(dom, dict):
        raise ConfigError("domain: required object with 'dims'")
    dims = dom.get("dims")
    if not isinstance(dims, list) or len(dims) != 3:
        raise ConfigError("domain.dims: expected [nx, ny, nz]")
    dims = tuple(_int(d, f"domain.dims[{i}]", 1) for i, d in enumerate(dims))
    a = _num(dom.get("lattice_constant_um", 1.0), "domain.lattice_constant_um", positive=True)

    steps_doc = doc.get("recipe", [])
    if not isinstance(steps_doc, list):
        raise ConfigError("recipe: expected a list of steps")
    steps = []
    for i, s in enumerate(steps_doc):
        try:
            steps.append(procdb.parse_step(s, f"recipe[{i}]"))
        except procdb.DatabaseError as e:
            raise ConfigError(str(e)) from None

    cfg = RunConfig(
        dims=dims,
        lattice_constant=a,
        faces=_faces(dom.get("faces")),
        layout_path=_resolve(base, doc.get("layout"), "layout"),
        db_path=_resolve(base, doc.get("process_db"), "process_db"),
        rules_path=_resolve(base, doc.get("rules"), "rules"),
        output_dir=_resolve(base, doc.get("output_dir", "out"), "output_dir", must_exist=False),
        steps=steps,
        kappa=_num(doc.get("kappa", rules.DEFAULT_KAPPA), "kappa", positive=True),
        snapshot_stride=_int(doc.get("snapshot_stride", 0), "snapshot_stride", 0),
        seed=_int(doc.get("seed", 0), "seed", 0),
        threads=_int(doc.get("threads", 1), "threads", 1),
        voxel_threshold=_int(doc.get("voxel_threshold", 4), "voxel_threshold", 1),
        simplify=bool(doc.get("simplify", False)),
        base_dir=base,
        raw=doc,
    )
    if cfg.voxel_threshold > 8:
        raise ConfigError("voxel_threshold: must be <= 8")
    if args is not None:
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "out", None) is not None:
            cfg.output_dir = os.path.abspath(args.out)
        if getattr(args, "snapshot_stride", None) is not None:
            cfg.snapshot_stride = args.snapshot_stride
        cfg.threads = _threads(args, cfg.threads)
    return cfg


def _threads(args, fallback):
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        try:
            n = _accel.threads_from_env(fallback)
        except ValueError:
            raise ConfigError(f"ETCHSIM_THREADS: expected an integer, got {os.environ.get('ETCHSIM_THREADS')!r}") from None
    if n < 1:
        raise ConfigError(f"threads: must be >= 1, got {n}")
    return n


def _outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"output_dir: cannot create {path}: {e.strerror}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output_dir: not writable: {path}")
    return path


def _write_json(path, obj):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _export_mesh(vol, out, stem, simplify):
    m = mesh.extract_surface(vol)
    if simplify:
        m = mesh.simplify(m)
    mesh.write_stl(m, os.path.join(out, f"{stem}.stl"))
    mesh.write_obj(m, os.path.join(out, f"{stem}.obj"))
    return m


# -- commands ----------------------------------------------------------------------

def cmd_simulate(args):
    cfg = load_config(args.config, args)
    masks = cfg.masks()
    recipe = cfg.recipe()
    out = _outdir(cfg.output_dir)
    try:
        state = engine.init(cfg.dims, cfg.lattice_constant, masks, seed=cfg.seed, faces=cfg.faces)
    except (ValueError, layout.LayoutError) as e:
        raise ConfigError(f"domain/layout: {e}") from None

    snapdir = os.path.join(out, "snapshots")
    if cfg.snapshot_stride:
        os.makedirs(snapdir, exist_ok=True)

    def on_snapshot(count, vol):
        mesh.write_voxel(vol, os.path.join(snapdir, f"step_{count:08d}.suzv"))

    t0 = time.perf_counter()
    state, _ = engine.run(state, recipe, snapshot_stride=cfg.snapshot_stride, threads=cfg.threads,
                          on_snapshot=on_snapshot if cfg.snapshot_stride else None)
    wall = time.perf_counter() - t0
    vol = mesh.voxelize(state, cfg.voxel_threshold)
    mesh.write_voxel(vol, os.path.join(out, "final.suzv"))
    m = _export_mesh(vol, out, "final", cfg.simplify)
    met = engine.metrics(state).as_dict()
    met.update(steps=state.step_index, elapsed_time_min=state.elapsed_time, removed_sites=state.removed_count,
               solid_voxels=vol.solid_count(), triangles=m.n_triangles, seed=cfg.seed)
    _write_json(os.path.join(out, "metrics.json"), met)
    log.info("simulated %d steps in %.2f s (%d threads); outputs in %s", state.step_index, wall, cfg.threads, out)
    return EXIT_OK


def _load_volume(path, name):
    try:
        return mesh.read_voxel(path)
    except OSError as e:
        raise ConfigError(f"{name}: cannot read {path}: {e.strerror}") from None
    except mesh.FormatError as e:
        raise ConfigError(f"{name}: {e}") from None


def _load_gene_mask(path, spec, name):
    try:
        bm = layout.load_bitmap(path, spec.gene_pitch)
    except OSError as e:
        raise ConfigError(f"{name}: cannot read {path}: {e.strerror}") from None
    except layout.LayoutError as e:
        raise ConfigError(f"{name}: {e}") from None
    if bm.bits.shape != spec.genome_shape:
        raise ConfigError(f"{name}: bitmap {bm.bits.shape} does not match genome {spec.genome_shape}")
    return optimizer.Individual(bm)


def cmd_optimize(args):
    cfg = load_config(args.config, args)
    doc = cfg.raw.get("optimize")
    if not isinstance(doc, dict):
        raise ConfigError("optimize: required object")
    recipe = cfg.recipe()
    out = _outdir(cfg.output_dir)
    block = _int(doc.get("block", 8), "optimize.block", 1)
    fp = layout.footprint_pixels(cfg.dims)
    if fp[0] % block or fp[1] % block:
        raise ConfigError(f"optimize.block: {block} does not divide the column footprint {fp}")

    ga_doc = doc.get("ga", {})
    try:
        ga = optimizer.GAConfig(**{**ga_doc, "seed": ga_doc.get("seed", cfg.seed)})
    except TypeError as e:
        raise ConfigError(f"optimize.ga: {e}") from None
    except ValueError as e:
        raise ConfigError(f"optimize.ga: {e}") from None

    bottom = None
    masks = cfg.masks()
    if masks is not None:
        bottom = layout.to_lattice_bitmaps(masks, cfg.dims, cfg.lattice_constant)[1]

    with engine.kernel_threads(cfg.threads):
        if "reference" in doc:
            ref = _load_volume(_resolve(cfg.base_dir, doc["reference"], "optimize.reference"), "optimize.reference")
        elif "reference_layout" in doc:
            lp = _resolve(cfg.base_dir, doc["reference_layout"], "optimize.reference_layout")
            try:
                rmask = layout.parse_layout(lp)
            except layout.LayoutError as e:
                raise ConfigError(f"optimize.reference_layout: {e}") from None
            st = engine.init(cfg.dims, cfg.lattice_constant, rmask, seed=cfg.seed, faces=cfg.faces)
            st, _ = engine.run(st, recipe)
            ref = mesh.voxelize(st, cfg.voxel_threshold)
        else:
            raise ConfigError("optimize: needs 'reference' (SUZV path) or 'reference_layout'")
        if ref.dims != cfg.dims:
            raise ConfigError(f"optimize.reference: dims {ref.dims} differ from domain dims {cfg.dims}")
        weights = None
        if "weights" in doc:
            wv = _load_volume(_resolve(cfg.base_dir, doc["weights"], "optimize.weights"), "optimize.weights")
            if wv.dims != cfg.dims:
                raise ConfigError(f"optimize.weights: dims {wv.dims} differ from domain dims {cfg.dims}")
            weights = wv.occupancy.astype(np.float64)
        try:
            spec = optimizer.FitnessSpec(ref, recipe, weights, cfg.seed, cfg.lattice_constant, block, cfg.faces,
                                         bottom)
        except ValueError as e:
            raise ConfigError(f"optimize: {e}") from None

        init_doc = doc.get("initial", {"random": ga.population})
        if isinstance(init_doc, list):
            initial = [_load_gene_mask(_resolve(cfg.base_dir, p, f"optimize.initial[{i}]"), spec,
                                       f"optimize.initial[{i}]") for i, p in enumerate(init_doc)]
        elif isinstance(init_doc, dict):
            initial = optimizer.random_population(_int(init_doc.get("random", ga.population), "optimize.initial.random", 1),
                                                  spec, _num(init_doc.get("density", 0.5), "optimize.initial.density"),
                                                  seed=init_doc.get("seed", cfg.seed))
        else:
            raise ConfigError("optimize.initial: expected a list of PGM paths or {'random': N}")
        if not initial:
            raise ConfigError("optimize.initial: empty population")

        def progress(gen, best, ranked):
            log.info("generation %d: best %.6f", gen, best.score)

        best, trace = optimizer.evolve(initial, spec, ga, on_generation=progress)

    layout.write_bitmap(best.mask, os.path.join(out, "winner_genes.pgm"))
    cols = layout.MaskBitmap(spec.column_mask(best.mask.bits), cfg.lattice_constant / 4.0)
    layout.write_bitmap(cols, os.path.join(out, "winner.pgm"))
    lay = layout.MaskSet(top=cols)
    _write_json(os.path.join(out, "winner_layout.json"), layout.layout_to_doc(lay, {"top": "winner.pgm"}))
    with open(os.path.join(out, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_score"])
        for g, s in enumerate(trace):
            w.writerow([g, repr(s)])
    _write_json(os.path.join(out, "winner.json"), {"score": best.score, "generations": len(trace)})
    return EXIT_OK


def cmd_tolerance(args):
    cfg = load_config(args.config, args)
    doc = cfg.raw.get("tolerance")
    if not isinstance(doc, dict):
        raise ConfigError("tolerance: required object")
    n = doc.get("n_samples", 1)
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError(f"tolerance.n_samples: must be an integer >= 1, got {n!r}")
    try:
        spec = analysis.parse_tolerance({**doc, "seed": doc.get("seed", cfg.seed)}, cfg.steps)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"tolerance: {e}") from None
    db = cfg.db()
    ctx = analysis.SimulationContext(cfg.dims, cfg.lattice_constant, cfg.masks(), cfg.faces, db, cfg.table(),
                                     cfg.kappa)
    cfg.recipe(db, ctx.table)  # validate selectors before sampling
    out = _outdir(cfg.output_dir)
    with engine.kernel_threads(cfg.threads):
        report = analysis.tolerance_run(spec, ctx)
    report.to_json(os.path.join(out, "tolerance_report.json"))
    report.to_csv(os.path.join(out, "tolerance_samples.csv"))
    if report.n_failed:
        log.warning("%d of %d samples failed", report.n_failed, spec.n_samples)
    return EXIT_OK


def cmd_export(args):
    fmt = (args.format or "").lower()
    if fmt not in EXPORT_FORMATS:
        raise ConfigError(f"--format: unknown format {args.format!r} (expected one of {', '.join(EXPORT_FORMATS)})")
    vol = _load_volume(args.volume, "volume")
    m = mesh.extract_surface(vol)
    if args.simplify:
        m = mesh.simplify(m)
    out = args.out or os.path.splitext(args.volume)[0] + "." + fmt
    parent = os.path.dirname(os.path.abspath(out))
    if not os.path.isdir(parent):
        raise ConfigError(f"--out: directory does not exist: {parent}")
    (mesh.write_stl if fmt == "stl" else mesh.write_obj)(m, out)
    return EXIT_OK


def cmd_validate_db(args):
    path = args.db or args.config
    if path is None:
        raise ConfigError("validate-db: give a database path")
    if args.db is None:
        # allow pointing at a run config that references a database
        doc = read_json(path)
        if isinstance(doc, dict) and "process_db" in doc and "records" not in doc:
            path = _resolve(os.path.dirname(os.path.abspath(path)), doc["process_db"], "process_db")
    try:
        db = procdb.load_db(path)
    except FileNotFoundError:
        raise ConfigError(f"process_db: file not found: {path}") from None
    except procdb.DatabaseError as e:
        raise ConfigError(str(e)) from None
    print(f"{path}: {len(db)} record(s) OK")
    for r in db.records:
        rates = ", ".join(f"{k}={v:g}" for k, v in sorted(r.rates.items()))
        print(f"  {r.etchant} {r.concentration:g} wt% {r.temperature:g} C: {rates}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(required_config=True):
    p = _Parser(add_help=False)
    p.add_argument("--config", required=required_config, metavar="PATH", help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="override the random seed")
    p.add_argument("--threads", type=int, help="kernel threads (default: $ETCHSIM_THREADS or config)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--snapshot-stride", type=int, dest="snapshot_stride", help="save a voxel snapshot every N steps")
    return p


def build_parser():
    p = _Parser(prog="etchsim", description="Cellular-automaton anisotropic silicon etch simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[_common()], help="run a recipe and export the result").set_defaults(
        func=cmd_simulate)
    sub.add_parser("optimize", parents=[_common()], help="evolve a top mask towards a reference").set_defaults(
        func=cmd_optimize)
    sub.add_parser("tolerance", parents=[_common()], help="Monte Carlo tolerance analysis").set_defaults(
        func=cmd_tolerance)
    ex = sub.add_parser("export", parents=[_common(False)], help="convert a SUZV volume to STL or OBJ")
    ex.add_argument("volume", help="input .suzv file")
    ex.add_argument("--format", default="stl", help="stl or obj")
    ex.add_argument("--simplify", action="store_true", help="merge coplanar faces")
    ex.set_defaults(func=cmd_export)
    vd = sub.add_parser("validate-db", parents=[_common(False)], help="check a process database file")
    vd.add_argument("db", nargs="?", help="database JSON (or use --config)")
    vd.set_defaults(func=cmd_validate_db)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print(f"etchsim: error: --threads must be >= 1, got {args.threads}", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "snapshot_stride", None) is not None and args.snapshot_stride < 0:
        print("etchsim: error: --snapshot-stride must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"etchsim: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"etchsim: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
