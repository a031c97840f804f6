"""Whole-image training of max-pooling convolutional networks for per-pixel segmentation."""

from .errors import ConsistencyError, DataError, FragnetError, InvalidInputError, ShapeError
from .network import (
    MPF,
    ArchSpec,
    Conv,
    FCHead,
    GeometryPlan,
    Model,
    backward_dense,
    defragment,
    forward_dense,
    plan_geometry,
    validate_arch,
)
from .oracle import dense_via_patches, forward_patch, grad_patch
from .serialize import load_model, save_model
from .tensor import Fragment, Storage, expected_fragment_count, lineage_to_pixel, storage_from_image

__version__ = "0.1.0"
