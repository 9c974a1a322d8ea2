"""Numba kernels for splatting and ray tracing.

Parallel scatter-add strategy: writers never share memory.  Work is split
into chunks, each chunk accumulates into its own float64 buffer, and the
buffers are merged in fixed chunk order afterwards.  Within a chunk the
iteration order is fixed, so the result is independent of thread
scheduling; with a fixed chunk count it is bitwise reproducible.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

# Chunk count used when bitwise reproducibility across thread settings is
# requested.  Otherwise the runtime thread count is used.
DETERMINISTIC_CHUNKS = 8


@njit(cache=True, parallel=True, fastmath=True)
def splat_decomposed(mu, sigma, intensity, hx, hy, hz, w, h, c, bufs):
    """Fast splatting path.

    The squared distance for offset b and residual dmu splits per axis into
    b*b - 2*b*dmu + dmu*dmu, so the exponential factorizes into one 1D
    table per axis.  Each Gaussian then needs kx+ky+kz exponentials instead
    of kx*ky*kz, and each box voxel costs a single fused multiply.
    """
    n = mu.shape[0]
    n_chunks = bufs.shape[0]
    chunk = (n + n_chunks - 1) // n_chunks
    kx, ky, kz = 2 * hx + 1, 2 * hy + 1, 2 * hz + 1
    for ci in prange(n_chunks):
        vol = bufs[ci]
        ex = np.empty(kx, dtype=np.float64)
        ey = np.empty(ky, dtype=np.float64)
        ez = np.empty(kz, dtype=np.float64)
        start = ci * chunk
        stop = min(n, start + chunk)
        for i in range(start, stop):
            s = sigma[i]
            inv2 = 0.5 / (s * s)
            fx = math.floor(mu[i, 0])
            fy = math.floor(mu[i, 1])
            fz = math.floor(mu[i, 2])
            dx = mu[i, 0] - fx
            dy = mu[i, 1] - fy
            dz = mu[i, 2] - fz
            for k in range(kx):
                b = k - hx
                ex[k] = math.exp(-inv2 * (b * b - 2.0 * b * dx + dx * dx))
            for k in range(ky):
                b = k - hy
                ey[k] = math.exp(-inv2 * (b * b - 2.0 * b * dy + dy * dy))
            for k in range(kz):
                b = k - hz
                ez[k] = math.exp(-inv2 * (b * b - 2.0 * b * dz + dz * dz))
            amp = intensity[i]
            ix = int(fx)
            iy = int(fy)
            iz = int(fz)
            for oz in range(kz):
                z = iz + oz - hz
                if z < 0 or z >= c:
                    continue
                gz = amp * ez[oz]
                for oy in range(ky):
                    y = iy + oy - hy
                    if y < 0 or y >= h:
                        continue
                    gyz = gz * ey[oy]
                    x0 = ix - hx
                    for ox in range(kx):
                        x = x0 + ox
                        if 0 <= x < w:
                            vol[z, y, x] += gyz * ex[ox]


@njit(cache=True, parallel=True, fastmath=True)
def splat_plain(mu, sigma, intensity, offsets, hx, hy, hz, w, h, c, bufs):
    """Reference splatting path without the decomposition.

    Materializes the floor-aligned box (offsets minus the fractional
    residual) per Gaussian and evaluates the full squared distance and one
    exponential per box voxel.  Same clipping and accumulation as the fast
    path; kept for validation and benchmarking.
    """
    n = mu.shape[0]
    n_chunks = bufs.shape[0]
    chunk = (n + n_chunks - 1) // n_chunks
    n_off = offsets.shape[0]
    for ci in prange(n_chunks):
        vol = bufs[ci]
        shifted = np.empty((n_off, 3), dtype=np.float64)
        gam = np.empty(n_off, dtype=np.float64)
        start = ci * chunk
        stop = min(n, start + chunk)
        for i in range(start, stop):
            s = sigma[i]
            inv = 1.0 / (s * s)
            fx = math.floor(mu[i, 0])
            fy = math.floor(mu[i, 1])
            fz = math.floor(mu[i, 2])
            dx = mu[i, 0] - fx
            dy = mu[i, 1] - fy
            dz = mu[i, 2] - fz
            for k in range(n_off):
                shifted[k, 0] = offsets[k, 0] - dx
                shifted[k, 1] = offsets[k, 1] - dy
                shifted[k, 2] = offsets[k, 2] - dz
            amp = intensity[i]
            for k in range(n_off):
                d2 = (
                    shifted[k, 0] * shifted[k, 0]
                    + shifted[k, 1] * shifted[k, 1]
                    + shifted[k, 2] * shifted[k, 2]
                ) * inv
                gam[k] = math.exp(-0.5 * d2) * amp
            ix = int(fx)
            iy = int(fy)
            iz = int(fz)
            for k in range(n_off):
                x = ix + offsets[k, 0]
                y = iy + offsets[k, 1]
                z = iz + offsets[k, 2]
                if 0 <= x < w and 0 <= y < h and 0 <= z < c:
                    vol[z, y, x] += gam[k]


@njit(cache=True, parallel=True, fastmath=True)
def splat_backward(mu, sigma, intensity, hx, hy, hz, w, h, c, upstream,
                   d_mu, d_sigma, d_intensity):
    """Adjoint of the splat: per-Gaussian gradients from dL/dV.

    Each Gaussian owns its output rows, so the loop is race-free and
    deterministic without buffering.
    """
    n = mu.shape[0]
    kx, ky, kz = 2 * hx + 1, 2 * hy + 1, 2 * hz + 1
    for i in prange(n):
        ex = np.empty(kx, dtype=np.float64)
        ey = np.empty(ky, dtype=np.float64)
        ez = np.empty(kz, dtype=np.float64)
        s = sigma[i]
        inv_s2 = 1.0 / (s * s)
        inv2 = 0.5 * inv_s2
        inv_s3 = inv_s2 / s
        fx = math.floor(mu[i, 0])
        fy = math.floor(mu[i, 1])
        fz = math.floor(mu[i, 2])
        dx = mu[i, 0] - fx
        dy = mu[i, 1] - fy
        dz = mu[i, 2] - fz
        for k in range(kx):
            b = k - hx
            ex[k] = math.exp(-inv2 * (b * b - 2.0 * b * dx + dx * dx))
        for k in range(ky):
            b = k - hy
            ey[k] = math.exp(-inv2 * (b * b - 2.0 * b * dy + dy * dy))
        for k in range(kz):
            b = k - hz
            ez[k] = math.exp(-inv2 * (b * b - 2.0 * b * dz + dz * dz))
        amp = intensity[i]
        ix = int(fx)
        iy = int(fy)
        iz = int(fz)
        gi = 0.0
        gmx = 0.0
        gmy = 0.0
        gmz = 0.0
        gs = 0.0
        for oz in range(kz):
            z = iz + oz - hz
            if z < 0 or z >= c:
                continue
            rz = (oz - hz) - dz
            for oy in range(ky):
                y = iy + oy - hy
                if y < 0 or y >= h:
                    continue
                ry = (oy - hy) - dy
                gzy = ez[oz] * ey[oy]
                for ox in range(kx):
                    x = ix + ox - hx
                    if x < 0 or x >= w:
                        continue
                    u = upstream[z, y, x]
                    if u == 0.0:
                        continue
                    rx = (ox - hx) - dx
                    g = gzy * ex[ox]
                    ug = u * g
                    gi += ug
                    coef = ug * amp * inv_s2
                    gmx += coef * rx
                    gmy += coef * ry
                    gmz += coef * rz
                    gs += ug * amp * (rx * rx + ry * ry + rz * rz) * inv_s3
        d_intensity[i] = gi
        d_mu[i, 0] = gmx
        d_mu[i, 1] = gmy
        d_mu[i, 2] = gmz
        d_sigma[i] = gs


@njit(cache=True, inline="always")
def _clip_ray(px, py, dx, dy, t0, t1, xlo, xhi, ylo, yhi):
    """Intersect ray p + t*d with the box [xlo,xhi] x [ylo,yhi]."""
    if dx != 0.0:
        ta = (xlo - px) / dx
        tb = (xhi - px) / dx
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    elif px < xlo or px > xhi:
        return 1.0, 0.0
    if dy != 0.0:
        ta = (ylo - py) / dy
        tb = (yhi - py) / dy
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    elif py < ylo or py > yhi:
        return 1.0, 0.0
    return t0, t1


@njit(cache=True, inline="always")
def _ray_geometry(cos_a, sin_a, u, is_fan, rs, rd, cx, cy, w, h):
    """Origin, unit direction and clipped t-range for one detector ray.

    Rays are clipped against the bilinear support box [-1, w] x [-1, h] in
    sample-point coordinates; forward and adjoint both call this helper so
    their sample enumerations match exactly.
    """
    if is_fan:
        sx = cx - rs * cos_a
        sy = cy - rs * sin_a
        px = cx + rd * cos_a - u * sin_a
        py = cy + rd * sin_a + u * cos_a
        dx = px - sx
        dy = py - sy
        length = math.sqrt(dx * dx + dy * dy)
        dx /= length
        dy /= length
        t0, t1 = 0.0, length
        ox, oy = sx, sy
    else:
        ox = cx - u * sin_a
        oy = cy + u * cos_a
        dx, dy = cos_a, sin_a
        reach = math.hypot(w, h)
        t0, t1 = -reach, reach
    t0, t1 = _clip_ray(ox, oy, dx, dy, t0, t1, -1.0, float(w), -1.0, float(h))
    return ox, oy, dx, dy, t0, t1


@njit(cache=True, parallel=True, fastmath=True)
def project_forward(vol, sino, cos_t, sin_t, spacing, step, is_fan, rs, rd):
    """Line integrals by bilinear sampling at uniform steps (Joseph style).

    vol is (c, h, w); sino is (m, n, p).  Each (slice, view) pair owns its
    sinogram row, so the parallel loop is race-free.
    """
    c, h, w = vol.shape
    m, n_det, p = sino.shape
    cx = 0.5 * (w - 1)
    cy = 0.5 * (h - 1)
    for job in prange(p * m):
        z = job // m
        v = job % m
        cos_a = cos_t[v]
        sin_a = sin_t[v]
        img = vol[z]
        for d in range(n_det):
            u = (d - 0.5 * (n_det - 1)) * spacing
            ox, oy, dx, dy, t0, t1 = _ray_geometry(
                cos_a, sin_a, u, is_fan, rs, rd, cx, cy, w, h
            )
            total = 0.0
            if t1 > t0:
                n_steps = int((t1 - t0) / step)
                for k in range(n_steps):
                    t = t0 + (k + 0.5) * step
                    sx = ox + t * dx
                    sy = oy + t * dy
                    x0 = int(math.floor(sx))
                    y0 = int(math.floor(sy))
                    fx = sx - x0
                    fy = sy - y0
                    if 0 <= x0 < w and 0 <= y0 < h:
                        total += (1 - fx) * (1 - fy) * img[y0, x0]
                    if 0 <= x0 + 1 < w and 0 <= y0 < h:
                        total += fx * (1 - fy) * img[y0, x0 + 1]
                    if 0 <= x0 < w and 0 <= y0 + 1 < h:
                        total += (1 - fx) * fy * img[y0 + 1, x0]
                    if 0 <= x0 + 1 < w and 0 <= y0 + 1 < h:
                        total += fx * fy * img[y0 + 1, x0 + 1]
            sino[v, d, z] = total * step


@njit(cache=True, parallel=True, fastmath=True)
def project_adjoint(sino, bufs, n_chunks, cos_t, sin_t, spacing, step,
                    is_fan, rs, rd):
    """Exact transpose of :func:`project_forward`.

    Every ray sample scatters its bilinear weights times the sinogram value.
    Views are chunked per slice into private buffers (bufs has shape
    (p, n_chunks, h, w)) that the caller merges in fixed order.
    """
    m, n_det, p = sino.shape
    h = bufs.shape[2]
    w = bufs.shape[3]
    cx = 0.5 * (w - 1)
    cy = 0.5 * (h - 1)
    chunk = (m + n_chunks - 1) // n_chunks
    for job in prange(p * n_chunks):
        z = job // n_chunks
        ci = job % n_chunks
        img = bufs[z, ci]
        v0 = ci * chunk
        v1 = min(m, v0 + chunk)
        for v in range(v0, v1):
            cos_a = cos_t[v]
            sin_a = sin_t[v]
            for d in range(n_det):
                val = sino[v, d, z]
                if val == 0.0:
                    continue
                u = (d - 0.5 * (n_det - 1)) * spacing
                ox, oy, dx, dy, t0, t1 = _ray_geometry(
                    cos_a, sin_a, u, is_fan, rs, rd, cx, cy, w, h
                )
                if t1 <= t0:
                    continue
                amp = val * step
                n_steps = int((t1 - t0) / step)
                for k in range(n_steps):
                    t = t0 + (k + 0.5) * step
                    sx = ox + t * dx
                    sy = oy + t * dy
                    x0 = int(math.floor(sx))
                    y0 = int(math.floor(sy))
                    fx = sx - x0
                    fy = sy - y0
                    if 0 <= x0 < w and 0 <= y0 < h:
                        img[y0, x0] += amp * (1 - fx) * (1 - fy)
                    if 0 <= x0 + 1 < w and 0 <= y0 < h:
                        img[y0, x0 + 1] += amp * fx * (1 - fy)
                    if 0 <= x0 < w and 0 <= y0 + 1 < h:
                        img[y0 + 1, x0] += amp * (1 - fx) * fy
                    if 0 <= x0 + 1 < w and 0 <= y0 + 1 < h:
                        img[y0 + 1, x0 + 1] += amp * fx * fy


@njit(cache=True, parallel=True, fastmath=True)
def backproject_parallel_beam(filtered, out, cos_t, sin_t, spacing, dbeta):
    """Pixel-driven backprojection of ramp-filtered parallel views.

    filtered is (m, n) for one slice; out is (h, w).  Gather formulation:
    each pixel interpolates every view's filtered row, so rows of ``out``
    parallelize without races.
    """
    m, n_det = filtered.shape
    h, w = out.shape
    cx = 0.5 * (w - 1)
    cy = 0.5 * (h - 1)
    u0 = -0.5 * (n_det - 1) * spacing
    for y in prange(h):
        ry = y - cy
        for x in range(w):
            rx = x - cx
            acc = 0.0
            for v in range(m):
                u = -rx * sin_t[v] + ry * cos_t[v]
                q = (u - u0) / spacing
                j = int(math.floor(q))
                if j < 0 or j >= n_det - 1:
                    continue
                f = q - j
                acc += (1 - f) * filtered[v, j] + f * filtered[v, j + 1]
            out[y, x] = acc * dbeta


@njit(cache=True, parallel=True, fastmath=True)
def backproject_fan_beam(filtered, out, cos_t, sin_t, spacing_iso, dbeta, rs):
    """Distance-weighted backprojection of filtered fan views.

    ``filtered`` rows are indexed by the detector coordinate rescaled to
    the isocenter line (spacing_iso); the 1/U^2 weight uses the source
    distance along the central ray.
    """
    m, n_det = filtered.shape
    h, w = out.shape
    cx = 0.5 * (w - 1)
    cy = 0.5 * (h - 1)
    u0 = -0.5 * (n_det - 1) * spacing_iso
    for y in prange(h):
        ry = y - cy
        for x in range(w):
            rx = x - cx
            acc = 0.0
            for v in range(m):
                along = rs + rx * cos_t[v] + ry * sin_t[v]
                if along <= 1e-6:
                    continue
                u_iso = rs * (-rx * sin_t[v] + ry * cos_t[v]) / along
                q = (u_iso - u0) / spacing_iso
                j = int(math.floor(q))
                if j < 0 or j >= n_det - 1:
                    continue
                f = q - j
                val = (1 - f) * filtered[v, j] + f * filtered[v, j + 1]
                acc += val * (rs * rs) / (along * along)
            out[y, x] = acc * dbeta
