"""Video super-resolution temporal-modelling toolkit."""

from .dataio import DegradationSpec, bicubic_upsample, degrade, gaussian_kernel
from .models import ModelSpec, Variant, build_model, forward_video

__version__ = "0.1.0"

__all__ = ["DegradationSpec", "bicubic_upsample", "degrade", "gaussian_kernel",
           "ModelSpec", "Variant", "build_model", "forward_video"]
