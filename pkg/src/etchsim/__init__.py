"""Cellular-automaton simulator for anisotropic wet etching of silicon."""
from .engine import Metrics, SimulationState, StepSpec, init, metrics, run, step
from .lattice import Face, LatticeGrid, SiteState
from .mesh import SurfaceMesh, VoxelVolume, extract_surface, simplify, voxelize
from .rules import RuleTable, classify, rates_to_probabilities

__version__ = "0.1.0"

__all__ = [
    "Face", "LatticeGrid", "Metrics", "RuleTable", "SimulationState", "SiteState", "StepSpec", "SurfaceMesh",
    "VoxelVolume", "classify", "extract_surface", "init", "metrics", "rates_to_probabilities", "run", "simplify",
    "step", "voxelize",
]
