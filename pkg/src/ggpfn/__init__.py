"""Globally guided progressive fusion network for volumetric segmentation, in numpy."""
from .config import GgpfnConfig
from .model import ParamStore, build_model, receptive_field, required_depth
from .tensor import Tensor, backward

__all__ = ["GgpfnConfig", "ParamStore", "Tensor", "backward", "build_model", "receptive_field", "required_depth"]
__version__ = "0.1.0"
