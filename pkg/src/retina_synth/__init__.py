"""Synthetic retinal vasculature and OCTA images with matched labels."""

from .vessel_graph import PlexusConfig, VesselForest, dvc_config, svc_config
from .angiogenesis import ScalarField3D, run_plexus
from .retina import LayerSurfaces, RetinaSpec, build_retina, simulate_retina
from .raster import RasterPair, depth_slab, enface_projection, rasterize_volume
from .artifacts import ArtifactSpec, AugmentationPipeline, apply_pipeline
from .morphometry import MorphometryReport, analyze_forest, compare_complexes, vessel_density
from .config import RunConfig, parse_config
from .dataset import generate_dataset

__version__ = "0.1.0"
