"""autobox3d: 3D bounding-box autolabeling from posed multi-view instance
masks via differentiable volumetric silhouette rendering."""

from .config import FieldConfig, InitConfig, LossWeights, RenderConfig, RunConfig, desk_profile
from .geometry import Box2D, CameraFrame, InstanceBox, Ray
from .matching import PseudoLabel

__version__ = "0.1.0"

__all__ = [
    "Box2D",
    "CameraFrame",
    "FieldConfig",
    "InitConfig",
    "InstanceBox",
    "LossWeights",
    "PseudoLabel",
    "Ray",
    "RenderConfig",
    "RunConfig",
    "desk_profile",
    "__version__",
]
