"""Reverse-mode gradients of rendered pixels.

Field parameters and ray inputs get exact gradients of the discrete
quadrature. The focus distance is reached through the ray-direction adjoints.
The aperture radius gradient never differentiates sample positions; it is the
boundary estimate ``2/a_R * (C_ring - C)``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .field import VoxelField
from .optics import DEGENERATE_EPS, Camera
from .render import (
    PixelBatch,
    PixelColor,
    RayTape,
    RenderConfig,
    _geometry,
    _occupancy_flags,
    render_pixels,
    render_ring_pixel,
)


class StaleTapeError(RuntimeError):
    """A tape was recorded against different field parameters."""


@dataclass
class RayGrads:
    params: np.ndarray
    d_origin: np.ndarray
    d_direction: np.ndarray


def backward_ray(tape: RayTape, adjoint, field: VoxelField, out: np.ndarray | None = None) -> RayGrads:
    """Gradient of ``adjoint . color`` for one recorded ray.

    Works from the tape records alone plus :meth:`VoxelField.query_grad`.
    """
    if tape.version != field.version:
        raise StaleTapeError(
            f"tape recorded at field version {tape.version}, field is at {field.version}")
    g = np.asarray(adjoint, dtype=np.float64).reshape(3)
    grad = np.zeros_like(field.params) if out is None else out
    if tape.t.size == 0 or not g.any():
        return RayGrads(grad, np.zeros(3), np.zeros(3))
    w = tape.T * tape.alpha
    T_next = tape.T * (1.0 - tape.alpha)
    prefix = np.cumsum(w[:, None] * tape.rgb, axis=0)
    after = tape.color - prefix
    d_sigma = tape.step * ((T_next[:, None] * tape.rgb - after) @ g)
    d_color = w[:, None] * g
    idx, pg, d_x = field.query_grad(tape.x, d_sigma, d_color)
    field.accumulate(grad, idx, pg)
    return RayGrads(grad, d_x.sum(axis=0), (tape.t[:, None] * d_x).sum(axis=0))


def backward_pixels(field: VoxelField, batch: PixelBatch, adjoint, cfg: RenderConfig,
                    grad: np.ndarray | None = None, spatial: bool = True):
    """Fused reverse pass for a pixel batch.

    ``adjoint`` is dL/dC per pixel, shape ``(B, 3)``. Field gradients are
    added into ``grad`` (allocated if None). Returns ``(grad, d_origin, d_dir)``
    where the ray gradients have shape ``(B, n, 3)`` and already include the
    1/n aperture-average weight.
    """
    b, n = batch.offsets.shape
    adj = np.asarray(adjoint, dtype=np.float64).reshape(b, 1, 3) / n
    ray_adj = np.ascontiguousarray(np.broadcast_to(adj, (b, n, 3)).reshape(-1, 3))
    if grad is None:
        grad = np.zeros_like(field.params)
    d_origin = np.empty((b * n, 3))
    d_dir = np.empty((b * n, 3))
    occ, use_occ = _occupancy_flags(field, cfg)
    _kernels.march_backward(
        *_geometry(field), occ, use_occ,
        np.ascontiguousarray(batch.origins.reshape(-1, 3)),
        np.ascontiguousarray(batch.dirs.reshape(-1, 3)),
        np.ascontiguousarray(batch.offsets.reshape(-1)),
        float(cfg.bounds.t_near), float(cfg.bounds.t_far), float(cfg.step_size),
        int(cfg.max_samples_per_ray), float(cfg.cutoff),
        np.ascontiguousarray(batch.ray_rgb.reshape(-1, 3)), ray_adj,
        grad.reshape(-1), spatial, d_origin, d_dir,
    )
    return grad, d_origin.reshape(b, n, 3), d_dir.reshape(b, n, 3)


def focus_direction_jacobian(base_origins, base_dirs, apoints, focus_distance: float):
    """d(lens ray direction)/d(focus distance), shape ``(B, n, 3)``."""
    o = np.asarray(base_origins)[..., None, :]
    d = np.asarray(base_dirs)[..., None, :]
    v = o + d * focus_distance - apoints
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < DEGENERATE_EPS):
        raise FloatingPointError("aperture sample coincides with the focus point")
    u = v / norm
    jac = (d - u * np.sum(u * d, axis=-1, keepdims=True)) / norm
    # rays from the lens center keep the base direction for every focus distance
    at_center = np.all(apoints == o, axis=-1, keepdims=True)
    return np.where(at_center, 0.0, jac)


def focus_gradient(camera: Camera, base_origins, base_dirs, apoints, d_dirs) -> np.ndarray:
    """dL/dz_f per pixel from per-ray direction adjoints.

    ``d_dirs`` are the ray-direction gradients returned by
    :func:`backward_pixels`, which carry the 1/n weight, so summing over rays
    averages the per-ray chain terms. Origins do not depend on z_f.
    """
    jac = focus_direction_jacobian(base_origins, base_dirs, apoints, camera.focus_distance)
    return np.sum(np.asarray(d_dirs) * jac, axis=(-1, -2))


def ring_identity(ring_color, color, aperture_radius: float):
    """Per-channel ``2/a_R (C_ring - C)``."""
    return 2.0 / aperture_radius * (np.asarray(ring_color) - np.asarray(color))


def aperture_gradients(field: VoxelField, camera: Camera, xs, ys, seeds, cfg: RenderConfig,
                       colors, adjoint) -> np.ndarray:
    """dL/da_R per pixel, contracting the per-channel ring identity with ``adjoint``.

    ``colors`` must come from :func:`render_pixels` with the same seeds.
    """
    adjoint = np.asarray(adjoint, dtype=np.float64).reshape(-1, 3)
    if camera.aperture_radius <= 0:
        warnings.warn("aperture gradient undefined at a_R = 0; returning 0", RuntimeWarning,
                      stacklevel=2)
        return np.zeros(adjoint.shape[0])
    ring = render_pixels(field, camera, xs, ys, seeds, cfg, ring=True)
    per_channel = ring_identity(ring.colors, colors, camera.aperture_radius)
    return np.sum(per_channel * adjoint, axis=-1)


def aperture_gradient(field: VoxelField, camera: Camera, px, cfg: RenderConfig, color: PixelColor,
                      adjoint=(1.0, 1.0, 1.0), view: int = 0, salt: int = 0) -> float:
    """Scalar dL/da_R for one pixel rendered by :func:`render_pixel`."""
    if camera.aperture_radius <= 0:
        warnings.warn("aperture gradient undefined at a_R = 0; returning 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    ring = render_ring_pixel(field, camera, px, cfg, view=view, salt=salt)
    per_channel = ring_identity(ring.rgb, color.rgb, camera.aperture_radius)
    return float(per_channel @ np.asarray(adjoint, dtype=np.float64))


def fd_oracle(func: Callable[[float], float], x: float, step: float) -> float:
    """Central difference ``(f(x+h) - f(x-h)) / 2h``.

    ``func`` must be deterministic (fixed seeds) so both evaluations share
    their random numbers.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    return (func(x + step) - func(x - step)) / (2.0 * step)


def relative_error(analytic: float, fd: float) -> float:
    return abs(analytic - fd) / (abs(fd) + 1e-8)


def pixel_loss_closure(field: VoxelField, camera: Camera, px, cfg: RenderConfig, adjoint,
                       view: int = 0, salt: int = 0):
    """``L(camera) = adjoint . C(px)`` with pixel seeds held fixed."""
    from .optics import pixel_seeds

    seeds = pixel_seeds(view, [px[0]], [px[1]], salt)
    g = np.asarray(adjoint, dtype=np.float64)

    def loss(cam: Camera, fld: VoxelField = field) -> float:
        batch = render_pixels(fld, cam, [px[0] + 0.5], [px[1] + 0.5], seeds, cfg)
        return float(batch.colors[0] @ g)

    return loss, seeds


def write_gradcheck_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_id", "kind", "analytic", "fd", "rel_err"])
        for r in rows:
            w.writerow([r["probe_id"], r["kind"], repr(r["analytic"]), repr(r["fd"]),
                        repr(r["rel_err"])])
