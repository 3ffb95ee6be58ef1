import numpy as np
import pytest

from autobox3d import fields
from autobox3d.config import FieldConfig
from autobox3d.geometry import InstanceBox


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar f at vector/scalar x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return (f(x + h) - f(x - h)) / (2.0 * h)
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        g.ravel()[i] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2.0 * h)
    return g


@pytest.fixture
def tiny_field_cfg():
    return FieldConfig(residual_hidden=(8,), hyper_hidden=(8,), embed_dim=8)


@pytest.fixture
def two_box_scene(tiny_field_cfg):
    """Two separated static boxes ahead of the origin, generic pose values so
    subgradient kinks are not hit by finite differences."""
    boxes = [
        InstanceBox(np.array([2.1, 1.05, 1.55]), np.array([0.31, -0.07, 10.13]), 0.23, np.zeros(3), False),
        InstanceBox(np.array([1.7, 1.35, 1.25]), np.array([-1.62, 0.11, 14.57]), -0.51, np.zeros(3), False),
    ]
    return fields.make_scene(boxes, ref_time=0.0, cfg=tiny_field_cfg, seed=11)
