"""Numba inner loops for mesh distance and winding-number queries.

These are the only hot loops in the toolkit that pure numpy cannot carry:
voxelizing a signed distance field evaluates point-triangle distance for
every (node, triangle) pair, and the sign needs exact solid angles.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _point_tri_dist2(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # Closest point on a triangle via barycentric region tests
    # (Ericson, Real-Time Collision Detection, 5.1.5). Returns squared
    # distance; exact for degenerate query positions as well.
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        qx, qy, qz = apx - t * abx, apy - t * aby, apz - t * abz
        return qx * qx + qy * qy + qz * qz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        qx, qy, qz = apx - t * acx, apy - t * acy, apz - t * acz
        return qx * qx + qy * qy + qz * qz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bpx - t * (cx - bx)
        qy = bpy - t * (cy - by)
        qz = bpz - t * (cz - bz)
        return qx * qx + qy * qy + qz * qz
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = apx - (v * abx + w * acx)
    qy = apy - (v * aby + w * acy)
    qz = apz - (v * abz + w * acz)
    return qx * qx + qy * qy + qz * qz


@njit(cache=True)
def min_distance_to_triangles(points, va, vb, vc):
    """Exact unsigned distance and nearest-triangle index per point."""
    n = points.shape[0]
    m = va.shape[0]
    dist = np.empty(n, dtype=np.float64)
    index = np.empty(n, dtype=np.int64)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = 1.0e300
        best_j = -1
        for j in range(m):
            d2 = _point_tri_dist2(px, py, pz,
                                  va[j, 0], va[j, 1], va[j, 2],
                                  vb[j, 0], vb[j, 1], vb[j, 2],
                                  vc[j, 0], vc[j, 1], vc[j, 2])
            if d2 < best:
                best = d2
                best_j = j
        dist[i] = np.sqrt(best)
        index[i] = best_j
    return dist, index


@njit(cache=True)
def winding_numbers(points, va, vb, vc):
    """Generalized winding number per point (1 inside, 0 outside).

    Exact per-triangle solid angles, Van Oosterom-Strackee formula.
    """
    n = points.shape[0]
    m = va.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        total = 0.0
        for j in range(m):
            ax, ay, az = va[j, 0] - px, va[j, 1] - py, va[j, 2] - pz
            bx, by, bz = vb[j, 0] - px, vb[j, 1] - py, vb[j, 2] - pz
            cx, cy, cz = vc[j, 0] - px, vc[j, 1] - py, vc[j, 2] - pz
            la = np.sqrt(ax * ax + ay * ay + az * az)
            lb = np.sqrt(bx * bx + by * by + bz * bz)
            lc = np.sqrt(cx * cx + cy * cy + cz * cz)
            num = (ax * (by * cz - bz * cy)
                   + ay * (bz * cx - bx * cz)
                   + az * (bx * cy - by * cx))
            den = (la * lb * lc
                   + (ax * bx + ay * by + az * bz) * lc
                   + (bx * cx + by * cy + bz * cz) * la
                   + (cx * ax + cy * ay + cz * az) * lb)
            total += np.arctan2(num, den)
        out[i] = total / (2.0 * np.pi)
    return out
