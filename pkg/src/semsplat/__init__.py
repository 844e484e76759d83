"""Gaussian splatting with distilled semantic features, open-vocabulary queries
and render-and-compare scene updates, on numpy/numba.
"""

from .core import Camera, PcaModel, Scene
from .raster import Gradients, RenderOutput, render, render_backward, render_reference, render_subset

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Gradients",
    "PcaModel",
    "RenderOutput",
    "Scene",
    "render",
    "render_backward",
    "render_reference",
    "render_subset",
]
