"""Numba kernels for ray marching the voxel field and its reverse pass.

Forward and backward share the same marching rule so that the backward pass
revisits exactly the samples the forward pass composited:

    t_k = t_near + (k + offset) * step,   k >= 0,  t_k inside [bbox entry, bbox exit)

Marching stops when transmittance drops below ``cutoff`` or after
``max_samples`` marched positions.
"""

import math

import numba as nb
import numpy as np

_JIT = dict(nogil=True, cache=True, error_model="numpy")


@nb.njit(**_JIT)
def softplus(u):
    if u > 30.0:
        return u + math.log1p(math.exp(-u))
    return math.log1p(math.exp(u))


@nb.njit(**_JIT)
def sigmoid(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


@nb.njit(**_JIT)
def ray_box(ox, oy, oz, dx, dy, dz, bmin, bmax, t0, t1):
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] != 0.0:
            ta = (bmin[a] - o[a]) / d[a]
            tb = (bmax[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        elif o[a] < bmin[a] or o[a] > bmax[a]:
            return 1.0, 0.0
    return t0, t1


@nb.njit(**_JIT)
def locate(g, n):
    i = int(math.floor(g))
    if i < 0:
        i = 0
    elif i > n - 1:
        i = n - 1
    f = g - i
    if f < 0.0:
        f = 0.0
    elif f > 1.0:
        f = 1.0
    return i, f


@nb.njit(**_JIT)
def march_forward(params, dims, bmin, bmax, inv_cell, occ, use_occ,
                  origins, dirs, offsets, t_near, t_far, step, max_samples, bg, cutoff,
                  out_rgb, out_alpha, out_count, out_bad,
                  record, rec_t, rec_sigma, rec_rgb, rec_alpha, rec_T):
    nx, ny, nz = dims[0], dims[1], dims[2]
    sz = 4
    sy = (nz + 1) * 4
    sx = (ny + 1) * sy
    nrays = origins.shape[0]
    for r in range(nrays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        off = offsets[r]
        ta, tb = ray_box(ox, oy, oz, dx, dy, dz, bmin, bmax, t_near, t_far)
        T = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        n_eval = 0
        out_bad[r, 0] = 0.0
        if ta < tb:
            k = math.ceil((ta - t_near) / step - off)
            if k < 0:
                k = 0
            marched = 0
            while marched < max_samples:
                t = t_near + (k + off) * step
                if t >= tb:
                    break
                k += 1
                marched += 1
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                i, fx = locate((px - bmin[0]) * inv_cell[0], nx)
                j, fy = locate((py - bmin[1]) * inv_cell[1], ny)
                l, fz = locate((pz - bmin[2]) * inv_cell[2], nz)
                if use_occ and occ[(i * ny + j) * nz + l] == 0:
                    continue
                u = 0.0
                v0 = 0.0
                v1 = 0.0
                v2 = 0.0
                for c in range(8):
                    a = (c >> 2) & 1
                    b = (c >> 1) & 1
                    e = c & 1
                    w = (fx if a else 1.0 - fx) * (fy if b else 1.0 - fy) * (fz if e else 1.0 - fz)
                    base = (i + a) * sx + (j + b) * sy + (l + e) * sz
                    u += w * params[base]
                    v0 += w * params[base + 1]
                    v1 += w * params[base + 2]
                    v2 += w * params[base + 3]
                sigma = softplus(u)
                c0 = sigmoid(v0)
                c1 = sigmoid(v1)
                c2 = sigmoid(v2)
                if not (math.isfinite(sigma) and math.isfinite(c0)
                        and math.isfinite(c1) and math.isfinite(c2)):
                    out_bad[r, 0] = 1.0
                    out_bad[r, 1] = px
                    out_bad[r, 2] = py
                    out_bad[r, 3] = pz
                    break
                alpha = 1.0 - math.exp(-sigma * step)
                wgt = T * alpha
                if record:
                    rec_t[r, n_eval] = t
                    rec_sigma[r, n_eval] = sigma
                    rec_rgb[r, n_eval, 0] = c0
                    rec_rgb[r, n_eval, 1] = c1
                    rec_rgb[r, n_eval, 2] = c2
                    rec_alpha[r, n_eval] = alpha
                    rec_T[r, n_eval] = T
                cr += wgt * c0
                cg += wgt * c1
                cb += wgt * c2
                T *= 1.0 - alpha
                n_eval += 1
                if T < cutoff:
                    break
        out_rgb[r, 0] = cr + T * bg[0]
        out_rgb[r, 1] = cg + T * bg[1]
        out_rgb[r, 2] = cb + T * bg[2]
        out_alpha[r] = 1.0 - T
        out_count[r] = n_eval


@nb.njit(**_JIT)
def march_backward(params, dims, bmin, bmax, inv_cell, occ, use_occ,
                   origins, dirs, offsets, t_near, t_far, step, max_samples, cutoff,
                   ray_rgb, adjoint, grad, spatial, d_origin, d_dir):
    """Reverse pass of :func:`march_forward` for loss adjoints on ray colors.

    Uses dC/dsigma_k = step * (T_{k+1} c_k - S_k) where S_k is the color
    contributed after sample k (background included), and dC/dc_k = T_k alpha_k.
    Parameter gradients are added into ``grad``; spatial gradients of the ray
    origin and direction are written to ``d_origin``/``d_dir`` when ``spatial``.
    """
    nx, ny, nz = dims[0], dims[1], dims[2]
    sz = 4
    sy = (nz + 1) * 4
    sx = (ny + 1) * sy
    nrays = origins.shape[0]
    for r in range(nrays):
        ga, gb, gc = adjoint[r, 0], adjoint[r, 1], adjoint[r, 2]
        d_origin[r, 0] = 0.0
        d_origin[r, 1] = 0.0
        d_origin[r, 2] = 0.0
        d_dir[r, 0] = 0.0
        d_dir[r, 1] = 0.0
        d_dir[r, 2] = 0.0
        if ga == 0.0 and gb == 0.0 and gc == 0.0:
            continue
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        off = offsets[r]
        ta, tb = ray_box(ox, oy, oz, dx, dy, dz, bmin, bmax, t_near, t_far)
        if not ta < tb:
            continue
        C0, C1, C2 = ray_rgb[r, 0], ray_rgb[r, 1], ray_rgb[r, 2]
        T = 1.0
        p0 = 0.0
        p1 = 0.0
        p2 = 0.0
        k = math.ceil((ta - t_near) / step - off)
        if k < 0:
            k = 0
        marched = 0
        while marched < max_samples:
            t = t_near + (k + off) * step
            if t >= tb:
                break
            k += 1
            marched += 1
            px = ox + t * dx
            py = oy + t * dy
            pz = oz + t * dz
            i, fx = locate((px - bmin[0]) * inv_cell[0], nx)
            j, fy = locate((py - bmin[1]) * inv_cell[1], ny)
            l, fz = locate((pz - bmin[2]) * inv_cell[2], nz)
            if use_occ and occ[(i * ny + j) * nz + l] == 0:
                continue
            u = 0.0
            v0 = 0.0
            v1 = 0.0
            v2 = 0.0
            for c in range(8):
                a = (c >> 2) & 1
                b = (c >> 1) & 1
                e = c & 1
                w = (fx if a else 1.0 - fx) * (fy if b else 1.0 - fy) * (fz if e else 1.0 - fz)
                base = (i + a) * sx + (j + b) * sy + (l + e) * sz
                u += w * params[base]
                v0 += w * params[base + 1]
                v1 += w * params[base + 2]
                v2 += w * params[base + 3]
            sigma = softplus(u)
            c0 = sigmoid(v0)
            c1 = sigmoid(v1)
            c2 = sigmoid(v2)
            alpha = 1.0 - math.exp(-sigma * step)
            wgt = T * alpha
            T_next = T * (1.0 - alpha)
            p0 += wgt * c0
            p1 += wgt * c1
            p2 += wgt * c2
            d_sigma = step * (ga * (T_next * c0 - (C0 - p0))
                              + gb * (T_next * c1 - (C1 - p1))
                              + gc * (T_next * c2 - (C2 - p2)))
            du = d_sigma * sigmoid(u)
            dv0 = ga * wgt * c0 * (1.0 - c0)
            dv1 = gb * wgt * c1 * (1.0 - c1)
            dv2 = gc * wgt * c2 * (1.0 - c2)
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for c in range(8):
                a = (c >> 2) & 1
                b = (c >> 1) & 1
                e = c & 1
                wx = fx if a else 1.0 - fx
                wy = fy if b else 1.0 - fy
                wz = fz if e else 1.0 - fz
                w = wx * wy * wz
                base = (i + a) * sx + (j + b) * sy + (l + e) * sz
                grad[base] += w * du
                grad[base + 1] += w * dv0
                grad[base + 2] += w * dv1
                grad[base + 3] += w * dv2
                if spatial:
                    q = (du * params[base] + dv0 * params[base + 1]
                         + dv1 * params[base + 2] + dv2 * params[base + 3])
                    gx += (1.0 if a else -1.0) * wy * wz * q
                    gy += (1.0 if b else -1.0) * wx * wz * q
                    gz += (1.0 if e else -1.0) * wx * wy * q
            if spatial:
                gx *= inv_cell[0]
                gy *= inv_cell[1]
                gz *= inv_cell[2]
                d_origin[r, 0] += gx
                d_origin[r, 1] += gy
                d_origin[r, 2] += gz
                d_dir[r, 0] += t * gx
                d_dir[r, 1] += t * gy
                d_dir[r, 2] += t * gz
            T = T_next
            if T < cutoff:
                break


@nb.njit(**_JIT)
def adam_update(params, grad, m, v, lr, b1, b2, eps, bc1, bc2):
    for i in range(params.shape[0]):
        g = grad[i]
        mi = b1 * m[i] + (1.0 - b1) * g
        vi = b2 * v[i] + (1.0 - b2) * g * g
        m[i] = mi
        v[i] = vi
        params[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)
