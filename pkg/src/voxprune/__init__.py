"""Sparse voxel 3D detection with dynamic spatial pruning."""

from .decoder import decoder_forward
from .modelio import PipelineConfig, init_weights, load_config, load_weights, save_weights
from .pipeline import Model, run, scene_tensor
from .postproc import Detection, fuse_levels, nms
from .targets import Box3D
from .voxgrid import SparseTensor, quantize

__all__ = [
    "Box3D", "Detection", "Model", "PipelineConfig", "SparseTensor", "decoder_forward",
    "fuse_levels", "init_weights", "load_config", "load_weights", "nms", "quantize", "run",
    "save_weights", "scene_tensor",
]

__version__ = "0.1.0"
