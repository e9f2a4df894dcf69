"""Perturbation-based saliency attribution with Voronoi occlusion meshes.

The package builds randomized occlusion masks (square-grid and Voronoi-mesh
flavored), scores them through a pluggable classifier interface, composes
weighted saliency maps, and evaluates map quality with alteration games,
pointing games, and structural-similarity consistency measures.
"""

from .geometry import InspectedArea, VoronoiMesh, build_mesh, generate_seeds
from .gridgen import GeneratorKind, OcclusionSelector
from .masking import BlurSpec, Mask, gaussian_blur, rise_mask
from .saliency import ParamSet, SaliencyMap, generate_map
from .classifier import RegionOracle, RegionOracleSpec

__version__ = "0.1.0"

__all__ = [
    "InspectedArea",
    "VoronoiMesh",
    "build_mesh",
    "generate_seeds",
    "GeneratorKind",
    "OcclusionSelector",
    "BlurSpec",
    "Mask",
    "gaussian_blur",
    "rise_mask",
    "ParamSet",
    "SaliencyMap",
    "generate_map",
    "RegionOracle",
    "RegionOracleSpec",
    "__version__",
]
