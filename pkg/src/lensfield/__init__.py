"""Thin-lens volume rendering and radiance-field reconstruction from defocused images."""

from .field import OccupancyGrid, VoxelField, rebuild_occupancy
from .optics import (
    ApertureSample,
    Camera,
    Ray,
    RayBounds,
    circle_of_confusion,
    coc_pixels,
    lens_ray,
    pinhole_ray,
    sample_aperture_disk,
    sample_aperture_ring,
    sobol_2d,
    stratified_t,
)
from .render import (
    PixelColor,
    RenderConfig,
    linear_to_srgb,
    render_image,
    render_pixel,
    render_ray,
    render_ring_pixel,
    srgb_to_linear,
)

__version__ = "0.1.0"
