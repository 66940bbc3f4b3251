"""Dense voxel radiance field with trilinear interpolation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import expit

MAGIC = b"LFVF0001"
ACT_SOFTPLUS = 1
ACT_SIGMOID = 2

# corner offsets in (x, y, z) ordering used everywhere, bit 2 = x
CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


def softplus(u):
    return np.logaddexp(0.0, u)


def softplus_inv(s):
    s = np.asarray(s, dtype=np.float64)
    # log(expm1(s)) without overflow for large s
    return np.where(s > 30.0, s + np.log1p(-np.exp(-np.minimum(s, 700.0))),
                    np.log(np.expm1(np.minimum(s, 30.0))))


def logit(c):
    c = np.asarray(c, dtype=np.float64)
    return np.log(c) - np.log1p(-c)


class VoxelField:
    """Density and color parameters stored at the corners of a voxel grid.

    ``params`` has shape ``(Nx+1, Ny+1, Nz+1, 4)``: channel 0 is raw density
    (softplus activation), channels 1-3 raw linear RGB (sigmoid activation).
    ``version`` increments on every in-place parameter change so that stale
    render tapes can be detected.
    """

    def __init__(self, resolution=(128, 128, 128), bbox_min=(-1.0, -1.0, -1.0),
                 bbox_max=(1.0, 1.0, 1.0), params=None):
        self.resolution = tuple(int(n) for n in np.broadcast_to(resolution, 3))
        if min(self.resolution) < 1:
            raise ValueError("resolution must be >= 1 along every axis")
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("empty bounding box")
        shape = tuple(n + 1 for n in self.resolution) + (4,)
        if params is None:
            params = np.zeros(shape)
            params[..., 0] = -1.0
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != shape:
            raise ValueError(f"params shape {params.shape} != {shape}")
        self.params = params
        self.version = 0
        self.occupancy: OccupancyGrid | None = None

    @property
    def density_params(self) -> np.ndarray:
        return self.params[..., 0]

    @property
    def color_params(self) -> np.ndarray:
        return self.params[..., 1:]

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.asarray(self.resolution)

    @property
    def dims(self) -> np.ndarray:
        return np.asarray(self.resolution, dtype=np.int64)

    def touch(self):
        """Mark parameters as modified."""
        self.version += 1

    def copy(self) -> "VoxelField":
        out = VoxelField(self.resolution, self.bbox_min, self.bbox_max, self.params.copy())
        return out

    def upsample(self, resolution) -> "VoxelField":
        """Same bbox at a finer grid; exact when each new axis count is a multiple of the old."""
        new = VoxelField(resolution, self.bbox_min, self.bbox_max)
        new.params[...] = resample_corners(self.params, new.resolution)
        return new

    def corner_position(self, ix, iy, iz) -> np.ndarray:
        return self.bbox_min + np.array([ix, iy, iz]) * self.cell_size

    def flat_index(self, ix, iy, iz, channel=0):
        ny, nz = self.resolution[1] + 1, self.resolution[2] + 1
        return ((np.asarray(ix) * ny + iy) * nz + iz) * 4 + channel

    def inside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.bbox_min) & (x <= self.bbox_max), axis=-1)

    def _locate(self, x):
        g = (x - self.bbox_min) / self.cell_size
        dims = self.dims
        i0 = np.clip(np.floor(g).astype(np.int64), 0, dims - 1)
        f = np.clip(g - i0, 0.0, 1.0)
        idx = i0[:, None, :] + CORNERS[None]  # (M, 8, 3)
        wsel = np.where(CORNERS[None], f[:, None, :], 1.0 - f[:, None, :])  # (M, 8, 3)
        w = wsel.prod(axis=-1)
        return idx, w, f

    def _raw(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite query position")
        idx, w, f = self._locate(x)
        corner = self.params[idx[..., 0], idx[..., 1], idx[..., 2]]  # (M, 8, 4)
        raw = np.einsum("mc,mck->mk", w, corner)
        return x, idx, w, f, corner, raw

    def query(self, x):
        """Activated (sigma, rgb) at world points; zero outside the bbox."""
        single = np.ndim(x) == 1
        x, _, _, _, _, raw = self._raw(x)
        sigma = softplus(raw[:, 0])
        color = expit(raw[:, 1:])
        out = ~self.inside(x)
        sigma[out] = 0.0
        color[out] = 0.0
        if single:
            return float(sigma[0]), color[0]
        return sigma, color

    def query_grad(self, x, d_sigma, d_color):
        """Backward of :meth:`query` for adjoints on activated sigma and rgb.

        Returns ``(corner_index, param_grad, d_x)`` with shapes ``(M, 8, 3)``,
        ``(M, 8, 4)`` and ``(M, 3)`` (leading axis dropped for a single point).
        """
        single = np.ndim(x) == 1
        x, idx, w, f, corner, raw = self._raw(x)
        d_sigma = np.atleast_1d(np.asarray(d_sigma, dtype=np.float64))
        d_color = np.atleast_2d(np.asarray(d_color, dtype=np.float64))
        c = expit(raw[:, 1:])
        d_raw = np.empty_like(raw)
        d_raw[:, 0] = d_sigma * expit(raw[:, 0])
        d_raw[:, 1:] = d_color * c * (1.0 - c)
        d_raw[~self.inside(x)] = 0.0
        param_grad = w[:, :, None] * d_raw[:, None, :]
        # d w_c / d f_axis
        sign = np.where(CORNERS, 1.0, -1.0)[None]  # (1, 8, 3)
        fac = np.where(CORNERS[None], f[:, None, :], 1.0 - f[:, None, :])
        dw = np.empty((x.shape[0], 8, 3))
        dw[..., 0] = sign[..., 0] * fac[..., 1] * fac[..., 2]
        dw[..., 1] = sign[..., 1] * fac[..., 0] * fac[..., 2]
        dw[..., 2] = sign[..., 2] * fac[..., 0] * fac[..., 1]
        draw_dx = np.einsum("mca,mck->mka", dw, corner) / self.cell_size  # (M, 4, 3)
        d_x = np.einsum("mk,mka->ma", d_raw, draw_dx)
        if single:
            return idx[0], param_grad[0], d_x[0]
        return idx, param_grad, d_x

    def accumulate(self, grad: np.ndarray, idx, param_grad):
        """Scatter ``query_grad`` contributions into a params-shaped buffer."""
        idx = np.asarray(idx).reshape(-1, 3)
        pg = np.asarray(param_grad).reshape(-1, 4)
        np.add.at(grad, (idx[:, 0], idx[:, 1], idx[:, 2]), pg)
        return grad

    # -- checkpoint ----------------------------------------------------------

    def save(self, path):
        path = Path(path)
        header = MAGIC + struct.pack("<3I6d2I", *self.resolution, *self.bbox_min,
                                     *self.bbox_max, ACT_SOFTPLUS, ACT_SIGMOID)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.params[..., 0].astype("<f4").tobytes())
            fh.write(np.ascontiguousarray(self.params[..., 1:]).astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "VoxelField":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not a voxel field checkpoint")
        fmt = "<3I6d2I"
        off = 8 + struct.calcsize(fmt)
        vals = struct.unpack(fmt, data[8:off])
        res, bmin, bmax, acts = vals[:3], vals[3:6], vals[6:9], vals[9:]
        if acts != (ACT_SOFTPLUS, ACT_SIGMOID):
            raise ValueError(f"{path}: unsupported activations {acts}")
        ncorner = int(np.prod([n + 1 for n in res]))
        arr = np.frombuffer(data, dtype="<f4", offset=off)
        if arr.size != ncorner * 4:
            raise ValueError(f"{path}: truncated parameter block")
        params = np.empty(tuple(n + 1 for n in res) + (4,))
        params[..., 0] = arr[:ncorner].reshape(params.shape[:3])
        params[..., 1:] = arr[ncorner:].reshape(params.shape[:3] + (3,))
        return cls(res, bmin, bmax, params)


def resample_corners(values, resolution) -> np.ndarray:
    """Trilinearly resample a corner array ``(Nx+1, Ny+1, Nz+1, C)`` to a new grid."""
    values = np.asarray(values, dtype=np.float64)
    old = [np.linspace(0.0, 1.0, n) for n in values.shape[:3]]
    new = [np.linspace(0.0, 1.0, int(n) + 1) for n in np.broadcast_to(resolution, 3)]
    interp = RegularGridInterpolator(old, values, method="linear")
    pts = np.stack(np.meshgrid(*new, indexing="ij"), axis=-1)
    return interp(pts.reshape(-1, 3)).reshape(pts.shape[:3] + values.shape[3:])


@dataclass
class OccupancyGrid:
    """Per-cell flags; ``occupied[i, j, k]`` is False only for provably empty cells."""

    resolution: tuple
    occupied: np.ndarray
    threshold: float

    @property
    def empty(self) -> np.ndarray:
        return ~self.occupied

    def kernel_flags(self) -> np.ndarray:
        if getattr(self, "_flags", None) is None:
            self._flags = np.ascontiguousarray(self.occupied.reshape(-1), dtype=np.uint8)
        return self._flags


def rebuild_occupancy(field: VoxelField, threshold: float) -> OccupancyGrid:
    if not threshold >= 0:
        raise ValueError("threshold must be >= 0")
    sigma = softplus(field.params[..., 0])
    nx, ny, nz = field.resolution
    cellmax = np.full((nx, ny, nz), -np.inf)
    for a, b, c in CORNERS:
        np.maximum(cellmax, sigma[a:a + nx, b:b + ny, c:c + nz], out=cellmax)
    return OccupancyGrid(field.resolution, cellmax > threshold, float(threshold))
