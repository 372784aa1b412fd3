"""Language-conditioned 6D pose regression on synthetic block scenes."""

from .geometry import (
    BBox2D,
    CameraIntrinsics,
    Pose,
    Rotation3,
    SiteTranslation,
    compose,
    geodesic_angle,
    invert,
    project,
    rot6d_to_matrix,
    site_decode,
    site_encode,
    sym_align,
)
from .blocks import BlockModel, block_catalog, catalog_by_id, ray_intersect
from .grammar import (
    AssemblyAction,
    Command,
    ObjectDescriptor,
    generate_expression,
    ground,
    parse,
    phrase_lexicon,
    tokenize,
)
from .maps import GeomMaps, NoiseConfig, perturb_maps, render_maps, square_roi
from .metrics import add_metric, adds_metric, deg_cm, recall_table
from .scene import (
    DatasetRecord,
    GenConfig,
    Scene,
    assembly_pose,
    generate_dataset,
    load_records,
    sample_scene,
    tight_bbox,
)
from .training import TrainConfig, train

__version__ = "0.1.0"
