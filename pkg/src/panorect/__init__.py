"""Panorama stitching with piecewise rectangular boundaries."""

__version__ = "0.1.0"

from .errors import PanorectError
from .mesh import GridMesh, BilinearAnchor, build_grid_mesh, bilinear_anchor, anchor_position, mesh_outline
from .scene import Scene, load_project, save_project, build_match_graph, estimate_global_similarity
from .polygon import polygon_union
from .pipeline import PipelineConfig, Stitcher, initial_stitch, run, selfie_stitch
from .render import blend, largest_interior_rectangle, render_at_full_resolution, warp_image
from .video import stitch_video

__all__ = [
    "PanorectError",
    "GridMesh",
    "BilinearAnchor",
    "build_grid_mesh",
    "bilinear_anchor",
    "anchor_position",
    "mesh_outline",
    "Scene",
    "load_project",
    "save_project",
    "build_match_graph",
    "estimate_global_similarity",
    "polygon_union",
    "PipelineConfig",
    "Stitcher",
    "initial_stitch",
    "run",
    "selfie_stitch",
    "blend",
    "largest_interior_rectangle",
    "render_at_full_resolution",
    "warp_image",
    "stitch_video",
]
