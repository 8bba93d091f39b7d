"""speckle-forge: unsupervised distortion correction for EBSD maps.

Matches a segmented feature speckle extracted from EBSD data against an
undistorted reference speckle by evolving a control mesh with CMA-ES; the
mesh parameterizes a polynomial warp fitted by least squares, and the
corrected map is regenerated on the original grid with phase data
backfilled from the reference.
"""

__version__ = "0.1.0"

from .errors import FormatError, SpeckleForgeError, StageError, ValidationError
from .raster import (
    BinaryRaster,
    GrayRaster,
    load_speckle,
    read_raster,
    rescale_nearest,
    threshold,
    write_raster,
)
from .similarity import dice
from .geometry import AffineParams, ControlMesh, RangeSpec, apply_affine, grid_search_align, regular_mesh
from .polywarp import PolyWarp, fit, load_warp, save_warp, warp_dice, warp_raster
from .cmaes import CmaParams, CmaState, OptimizeResult, ask, init, optimize, tell
from .ebsdmap import EbsdMap, EbsdRecord, SpeckleRule, ebsd_speckle, read_ebsd, regenerate, write_ebsd
from .pipeline import (
    RunConfig,
    RunReport,
    SynthSpec,
    render_overlay,
    run_correction,
    run_repeat,
    synth,
)

__all__ = [
    "__version__",
    "AffineParams",
    "BinaryRaster",
    "CmaParams",
    "CmaState",
    "ControlMesh",
    "EbsdMap",
    "EbsdRecord",
    "FormatError",
    "GrayRaster",
    "OptimizeResult",
    "PolyWarp",
    "RangeSpec",
    "RunConfig",
    "RunReport",
    "SpeckleForgeError",
    "SpeckleRule",
    "StageError",
    "SynthSpec",
    "ValidationError",
    "apply_affine",
    "ask",
    "dice",
    "ebsd_speckle",
    "fit",
    "grid_search_align",
    "init",
    "load_speckle",
    "load_warp",
    "optimize",
    "read_ebsd",
    "read_raster",
    "regenerate",
    "regular_mesh",
    "render_overlay",
    "rescale_nearest",
    "run_correction",
    "run_repeat",
    "save_warp",
    "synth",
    "tell",
    "threshold",
    "warp_dice",
    "warp_raster",
    "write_ebsd",
    "write_raster",
]
