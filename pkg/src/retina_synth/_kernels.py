"""Compiled inner loops shared by the field and raster code."""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _seg_dist(px, py, pz, ax, ay, az, bx, by, bz):
    dx, dy, dz = bx - ax, by - ay, bz - az
    ll = dx * dx + dy * dy + dz * dz
    t = 0.0
    if ll > 0.0:
        t = ((px - ax) * dx + (py - ay) * dy + (pz - az) * dz) / ll
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    qx = ax + t * dx - px
    qy = ay + t * dy - py
    qz = az + t * dz - pz
    return math.sqrt(qx * qx + qy * qy + qz * qz)


@njit(cache=True, inline="always")
def _index_range(lo_um, hi_um, origin, h, n):
    # cells whose centre origin + (i + 0.5) h lies in [lo_um, hi_um]
    i0 = int(math.ceil((lo_um - origin) / h - 0.5))
    i1 = int(math.floor((hi_um - origin) / h - 0.5))
    if i0 < 0:
        i0 = 0
    if i1 > n - 1:
        i1 = n - 1
    return i0, i1


EXP_TABLE_SIZE = 32768


def exp_table(span: float) -> np.ndarray:
    """exp(-x) sampled on [0, span] for linear interpolation."""
    return np.exp(-np.linspace(0.0, span, EXP_TABLE_SIZE + 1))


@njit(cache=True)
def accumulate_oxygen(acc, origin, h, a, b, weight, radius, ell, cutoff, table):
    """Add each segment's exp(-d/ell) kernel (scaled by weight) into acc.

    d is the distance to the segment surface; lumen cells get max(1, weight)
    so that the clamped field reads 1 there. Cells already at 1 are skipped:
    only min(acc, 1) is meaningful. ``table`` holds exp(-x) on
    [0, cutoff/ell] (see exp_table).
    """
    nx, ny, nz = acc.shape
    per_um = (table.shape[0] - 1) / cutoff
    for s in range(a.shape[0]):
        r = radius[s]
        reach = r + cutoff
        lim2 = reach * reach
        ax, ay, az = a[s, 0], a[s, 1], a[s, 2]
        dx, dy, dz = b[s, 0] - ax, b[s, 1] - ay, b[s, 2] - az
        ll = dx * dx + dy * dy + dz * dz
        inv_ll = 1.0 / ll if ll > 0.0 else 0.0
        i0, i1 = _index_range(min(ax, b[s, 0]) - reach, max(ax, b[s, 0]) + reach, origin[0], h, nx)
        j0, j1 = _index_range(min(ay, b[s, 1]) - reach, max(ay, b[s, 1]) + reach, origin[1], h, ny)
        k0, k1 = _index_range(min(az, b[s, 2]) - reach, max(az, b[s, 2]) + reach, origin[2], h, nz)
        w = weight[s]
        inside = max(1.0, w)
        xlo, xhi = min(ax, ax + dx), max(ax, ax + dx)
        ylo, yhi = min(ay, ay + dy), max(ay, ay + dy)
        for i in range(i0, i1 + 1):
            cx = origin[0] + (i + 0.5) * h
            gap = max(0.0, xlo - cx, cx - xhi)
            if gap >= reach:
                continue
            # rows of this column that can lie within reach of the segment
            half = math.sqrt(reach * reach - gap * gap)
            ja, jb = _index_range(ylo - half, yhi + half, origin[1], h, ny)
            px = cx - ax
            for j in range(max(j0, ja), min(j1, jb) + 1):
                py = origin[1] + (j + 0.5) * h - ay
                for k in range(k0, k1 + 1):
                    if acc[i, j, k] >= 1.0:
                        continue
                    pz = origin[2] + (k + 0.5) * h - az
                    t = (px * dx + py * dy + pz * dz) * inv_ll
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                    qx = t * dx - px
                    qy = t * dy - py
                    qz = t * dz - pz
                    d2 = qx * qx + qy * qy + qz * qz
                    if d2 >= lim2:
                        continue
                    d = math.sqrt(d2) - r
                    if d <= 0.0:
                        acc[i, j, k] += inside
                    else:
                        x = d * per_um
                        m = int(x)
                        f = x - m
                        acc[i, j, k] += w * (table[m] * (1.0 - f) + table[m + 1] * f)


@njit(cache=True)
def rasterize_capsules(image, label, origin, spacing, a, b, radius, edge):
    """Union of capsules: binary label plus a linear one-edge-width falloff image."""
    nx, ny, nz = image.shape
    for s in range(a.shape[0]):
        r = radius[s]
        reach = r + edge
        ax, ay, az = a[s, 0], a[s, 1], a[s, 2]
        bx, by, bz = b[s, 0], b[s, 1], b[s, 2]
        i0, i1 = _index_range(min(ax, bx) - reach, max(ax, bx) + reach, origin[0], spacing[0], nx)
        j0, j1 = _index_range(min(ay, by) - reach, max(ay, by) + reach, origin[1], spacing[1], ny)
        k0, k1 = _index_range(min(az, bz) - reach, max(az, bz) + reach, origin[2], spacing[2], nz)
        for i in range(i0, i1 + 1):
            px = origin[0] + (i + 0.5) * spacing[0]
            for j in range(j0, j1 + 1):
                py = origin[1] + (j + 0.5) * spacing[1]
                for k in range(k0, k1 + 1):
                    pz = origin[2] + (k + 0.5) * spacing[2]
                    d = _seg_dist(px, py, pz, ax, ay, az, bx, by, bz)
                    if d <= r:
                        label[i, j, k] = 1
                    v = 1.0 - (d - r) / edge
                    if v > 1.0:
                        v = 1.0
                    if v > image[i, j, k]:
                        image[i, j, k] = v


@njit(cache=True)
def sphere_max(values, origin, h, points, offsets):
    """Largest value among the cells at ``offsets`` around each point's cell."""
    nx, ny, nz = values.shape
    out = np.zeros(points.shape[0])
    for p in range(points.shape[0]):
        ci = int(math.floor((points[p, 0] - origin[0]) / h))
        cj = int(math.floor((points[p, 1] - origin[1]) / h))
        ck = int(math.floor((points[p, 2] - origin[2]) / h))
        best = 0.0
        for o in range(offsets.shape[0]):
            i = ci + offsets[o, 0]
            j = cj + offsets[o, 1]
            k = ck + offsets[o, 2]
            if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
                if values[i, j, k] > best:
                    best = values[i, j, k]
        out[p] = best
    return out


@njit(cache=True, inline="always")
def _trilinear(values, fi, fj, fk):
    nx, ny, nz = values.shape
    fi = min(max(fi, 0.0), nx - 1.0)
    fj = min(max(fj, 0.0), ny - 1.0)
    fk = min(max(fk, 0.0), nz - 1.0)
    i0 = min(int(fi), nx - 2) if nx > 1 else 0
    j0 = min(int(fj), ny - 2) if ny > 1 else 0
    k0 = min(int(fk), nz - 2) if nz > 1 else 0
    i1 = min(i0 + 1, nx - 1)
    j1 = min(j0 + 1, ny - 1)
    k1 = min(k0 + 1, nz - 1)
    ti, tj, tk = fi - i0, fj - j0, fk - k0
    c00 = values[i0, j0, k0] * (1 - ti) + values[i1, j0, k0] * ti
    c10 = values[i0, j1, k0] * (1 - ti) + values[i1, j1, k0] * ti
    c01 = values[i0, j0, k1] * (1 - ti) + values[i1, j0, k1] * ti
    c11 = values[i0, j1, k1] * (1 - ti) + values[i1, j1, k1] * ti
    c0 = c00 * (1 - tj) + c10 * tj
    c1 = c01 * (1 - tj) + c11 * tj
    return c0 * (1 - tk) + c1 * tk


@njit(cache=True)
def gradient_at(values, origin, h, points):
    """Central differences of the trilinear interpolant, one cell each way.

    At interior cell centres this equals (v[i+1] - v[i-1]) / (2 h).
    """
    out = np.zeros((points.shape[0], 3))
    for p in range(points.shape[0]):
        fi = (points[p, 0] - origin[0]) / h - 0.5
        fj = (points[p, 1] - origin[1]) / h - 0.5
        fk = (points[p, 2] - origin[2]) / h - 0.5
        out[p, 0] = (_trilinear(values, fi + 1, fj, fk) - _trilinear(values, fi - 1, fj, fk)) / (2 * h)
        out[p, 1] = (_trilinear(values, fi, fj + 1, fk) - _trilinear(values, fi, fj - 1, fk)) / (2 * h)
        out[p, 2] = (_trilinear(values, fi, fj, fk + 1) - _trilinear(values, fi, fj, fk - 1)) / (2 * h)
    return out


@njit(cache=True)
def run_lengths(order, parent, n_children):
    """Segments since the last branch point (or root) along each path."""
    run = np.zeros(parent.shape[0], dtype=np.int64)
    for idx in range(order.shape[0]):
        n = order[idx]
        p = parent[n]
        if p < 0:
            run[n] = 0
        elif n_children[p] == 1:
            run[n] = run[p] + 1
        else:
            run[n] = 1
    return run



@njit(cache=True)
def blur3(src, w):
    """Separable blur with weights ``w`` along each axis, edges repeated
    (scipy's "nearest" mode). Loops keep the innermost index contiguous."""
    nx, ny, nz = src.shape
    rad = (w.shape[0] - 1) // 2
    a = np.zeros_like(src)
    for i in range(nx):
        for t in range(-rad, rad + 1):
            q = min(max(i + t, 0), nx - 1)
            wt = w[t + rad]
            for j in range(ny):
                for k in range(nz):
                    a[i, j, k] += wt * src[q, j, k]
    b = np.zeros_like(src)
    for i in range(nx):
        for j in range(ny):
            for t in range(-rad, rad + 1):
                q = min(max(j + t, 0), ny - 1)
                wt = w[t + rad]
                for k in range(nz):
                    b[i, j, k] += wt * a[i, q, k]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                acc = 0.0
                for t in range(-rad, rad + 1):
                    q = min(max(k + t, 0), nz - 1)
                    acc += w[t + rad] * b[i, j, q]
                a[i, j, k] = acc
    return a


@njit(cache=True)
def secretion(oxygen, mask):
    """mask * max(0, 1 - oxygen), elementwise."""
    out = np.empty_like(oxygen)
    o = oxygen.ravel()
    m = mask.ravel()
    r = out.ravel()
    for i in range(o.shape[0]):
        r[i] = m[i] * max(0.0, 1.0 - o[i])
    return out


@njit(cache=True)
def mask_clip(values, mask):
    """values = clip(values * mask, 0, 1) in place."""
    v = values.ravel()
    m = mask.ravel()
    for i in range(v.shape[0]):
        x = v[i] * m[i]
        v[i] = 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)
