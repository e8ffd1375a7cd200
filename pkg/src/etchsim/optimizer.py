"""Evolutionary synthesis of top-mask layouts against a 3-D reference volume.

The genotype is a protected/open bitmap. Each gene pixel covers a square
block of atom columns (``FitnessSpec.block``, default two unit cells), which
keeps the genome small and means single-gene flips actually change the
etched shape. Fitness is the weighted fraction of voxels that agree with
the reference after simulating the fixed recipe with a fixed seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .lattice import DEFAULT_FACES
from .layout import MaskBitmap, footprint_pixels
from .mesh import VoxelVolume, voxelize
from .rng import derive_seed, draw

# stream tags so different uses of the draw never share keys
_MUTATE, _TOURNAMENT, _CROSS, _INIT = 1, 2, 3, 4


@dataclass
class Individual:
    mask: MaskBitmap
    score: float | None = None

    @property
    def key(self):
        return self.mask.bits.tobytes()


@dataclass
class FitnessSpec:
    reference: VoxelVolume
    recipe: list
    weights: np.ndarray | None = None
    seed: int = 0
    lattice_constant: float = 1.0
    block: int = 8
    faces: tuple = DEFAULT_FACES
    bottom_mask: np.ndarray | None = None
    backend: str | None = None

    def __post_init__(self):
        nx, ny, nz = self.reference.dims
        if self.weights is None:
            self.weights = np.ones(nx * ny * nz)
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.size != nx * ny * nz:
            raise ValueError(f"weight volume has {w.size} entries, reference has {nx * ny * nz}")
        if (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
            raise ValueError("weights must be finite, non-negative and not all zero")
        self.weights = w
        fp = footprint_pixels(self.reference.dims)
        if self.block < 1 or fp[0] % self.block or fp[1] % self.block:
            raise ValueError(f"gene block {self.block} does not divide the column footprint {fp}")

    @property
    def dims(self):
        return self.reference.dims

    @property
    def genome_shape(self):
        fp = footprint_pixels(self.reference.dims)
        return (fp[0] // self.block, fp[1] // self.block)

    @property
    def gene_pitch(self):
        return self.lattice_constant / 4.0 * self.block

    def column_mask(self, bits):
        """Expand a gene bitmap to the (4nx, 4ny) atom-column mask."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != self.genome_shape:
            raise ValueError(f"mask shape {bits.shape} does not match genome shape {self.genome_shape}")
        return np.kron(bits, np.ones((self.block, self.block), dtype=np.uint8))


@dataclass
class GAConfig:
    population: int = 24
    generations: int = 40
    mutation_rate: float = 0.02
    elite: int = 2
    tournament: int = 3
    crossover: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if not 0 <= self.elite < self.population:
            raise ValueError("elite count must be in [0, population)")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation rate must be in [0, 1]")
        if self.tournament < 1:
            raise ValueError("tournament size must be >= 1")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")


class EvaluationError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"simulation of individual {index} failed: {cause}")
        self.index = index


def score(result: VoxelVolume, spec: FitnessSpec) -> float:
    """Weighted fraction of voxels whose occupancy equals the reference."""
    if tuple(result.dims) != tuple(spec.reference.dims):
        raise ValueError(f"result dims {result.dims} differ from reference dims {spec.reference.dims}")
    agree = result.occupancy == spec.reference.occupancy
    w = spec.weights
    return float(np.dot(w, agree) / w.sum())


def simulate(bits, spec: FitnessSpec) -> VoxelVolume:
    nx, ny, nz = spec.dims
    st = engine.init((nx, ny, nz), spec.lattice_constant, seed=spec.seed, faces=spec.faces,
                     top_mask=spec.column_mask(bits), bottom_mask=spec.bottom_mask, backend=spec.backend)
    st, _ = engine.run(st, spec.recipe)
    return voxelize(st)


def mutate(ind: Individual, rate, seed=0, generation=0, index=0) -> Individual:
    """Flip each pixel independently with probability ``rate``."""
    bits = ind.mask.bits
    if rate <= 0.0:
        return Individual(ind.mask, ind.score)
    key = derive_seed(seed, generation, index, _MUTATE)
    u = draw(key, 0, np.arange(bits.size, dtype=np.uint64)).reshape(bits.shape)
    flip = u < rate
    if not flip.any():
        return Individual(ind.mask, ind.score)
    return Individual(MaskBitmap(np.where(flip, 1 - bits, bits).astype(np.uint8), ind.mask.pitch))


def crossover(a: Individual, b: Individual, seed=0, generation=0, index=0) -> Individual:
    """Uniform crossover: each pixel taken from ``a`` or ``b`` with equal odds."""
    key = derive_seed(seed, generation, index, _CROSS)
    u = draw(key, 0, np.arange(a.mask.bits.size, dtype=np.uint64)).reshape(a.mask.bits.shape)
    return Individual(MaskBitmap(np.where(u < 0.5, a.mask.bits, b.mask.bits).astype(np.uint8), a.mask.pitch))


def random_population(n, spec: FitnessSpec, density=0.5, seed=0):
    """``n`` random gene bitmaps with roughly ``density`` protected pixels."""
    shape = spec.genome_shape
    out = []
    for i in range(n):
        u = draw(derive_seed(seed, i, _INIT), 0, np.arange(shape[0] * shape[1], dtype=np.uint64))
        out.append(Individual(MaskBitmap((u < density).astype(np.uint8).reshape(shape), spec.gene_pitch)))
    return out


def _tournament(ranked, k, seed, generation, slot, which):
    n = len(ranked)
    key = derive_seed(seed, generation, slot, _TOURNAMENT, which)
    picks = np.minimum((draw(key, 0, np.arange(k, dtype=np.uint64)) * n).astype(np.int64), n - 1)
    # ranked is sorted best first, so the smallest rank wins
    return ranked[int(np.min(picks))]


@dataclass
class EvolveStats:
    evaluations: int = 0
    cache_hits: int = 0
    generation_best: list = field(default_factory=list)


def evolve(initial, spec: FitnessSpec, cfg: GAConfig | None = None, on_generation=None, stats=None):
    """Generational GA with elitism; returns (best individual, best-ever score trace)."""
    cfg = cfg or GAConfig()
    if not initial:
        raise ValueError("initial population must not be empty")
    stats = stats if stats is not None else EvolveStats()
    for ind in initial:
        if ind.mask.bits.shape != spec.genome_shape:
            raise ValueError(f"initial mask shape {ind.mask.bits.shape} does not match {spec.genome_shape}")

    pop = [Individual(ind.mask, None) for ind in initial[:cfg.population]]
    for i in range(len(pop), cfg.population):
        pop.append(mutate(initial[i % len(initial)], cfg.mutation_rate, cfg.seed, -1, i))

    cache = {}
    best = None
    trace = []
    for gen in range(cfg.generations):
        for i, ind in enumerate(pop):
            if ind.score is not None:
                continue
            k = ind.key
            if k in cache:
                stats.cache_hits += 1
            else:
                try:
                    cache[k] = score(simulate(ind.mask.bits, spec), spec)
                except Exception as exc:  # noqa: BLE001
                    raise EvaluationError(i, exc) from exc
                stats.evaluations += 1
            ind.score = cache[k]
        order = sorted(range(len(pop)), key=lambda i: -pop[i].score)
        ranked = [pop[i] for i in order]
        if best is None or ranked[0].score > best.score:
            best = Individual(ranked[0].mask, ranked[0].score)
        trace.append(best.score)
        stats.generation_best.append(ranked[0].score)
        if on_generation is not None:
            on_generation(gen, best, ranked)
        if gen == cfg.generations - 1:
            break

        nxt = [Individual(r.mask, r.score) for r in ranked[:cfg.elite]]
        for slot in range(cfg.elite, cfg.population):
            p1 = _tournament(ranked, cfg.tournament, cfg.seed, gen, slot, 0)
            if cfg.crossover:
                p2 = _tournament(ranked, cfg.tournament, cfg.seed, gen, slot, 1)
                child = crossover(p1, p2, cfg.seed, gen, slot)
            else:
                child = Individual(p1.mask, p1.score)
            child = mutate(child, cfg.mutation_rate, cfg.seed, gen, slot)
            if child.mask is not p1.mask:
                child.score = None
            nxt.append(child)
        pop = nxt
    return best, trace
