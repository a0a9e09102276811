"""Dense voxel signed distance fields built from watertight meshes.

Grid layout: values[i, j, k] is the signed distance at node
origin + (i, j, k) * voxel_size; negative inside. Values are stored as
float32 (the serialized precision) and promoted to float64 for queries.
Outside the node box, query() returns the boundary value plus the
distance to the box: monotone in how far out the point sits and a lower
bound on the true distance up to the boundary interpolation error (at
most a voxel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GradientOutOfBandError
from .mesh import TriangleMesh, winding_numbers
from . import _kernels

DEFAULT_VOXEL_SIZE = 0.002
DEFAULT_PADDING = 0.01

_MAGIC_DTYPE_HEADER = np.dtype([("dims", "<i4", 3), ("origin", "<f4", 3),
                                ("voxel_size", "<f4")])


@dataclass
class VoxelSdf:
    origin: np.ndarray      # (3,) node (0,0,0) position, metres
    voxel_size: float
    values: np.ndarray      # (nx, ny, nz) float32, negative inside

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(self.voxel_size)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("SDF grid needs at least 2 nodes per axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def node_box(self) -> tuple[np.ndarray, np.ndarray]:
        """(lower corner, upper corner) spanned by the grid nodes."""
        hi = self.origin + (np.array(self.dims) - 1) * self.voxel_size
        return self.origin.copy(), hi

    def _gather_cell(self, points: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cell corner values (N,2,2,2), fractional coords, outside distance."""
        lo, hi = self.node_box()
        clamped = np.clip(points, lo, hi)
        outside = np.linalg.norm(points - clamped, axis=1)
        rel = (clamped - self.origin) / self.voxel_size
        # snap float residue so queries at grid nodes return stored values exactly
        nearest = np.rint(rel)
        snap = np.abs(rel - nearest) < 1e-9
        rel[snap] = nearest[snap]
        idx = np.minimum(rel.astype(np.int64), np.array(self.dims) - 2)
        idx = np.maximum(idx, 0)
        frac = rel - idx
        vals = np.empty((len(points), 2, 2, 2), dtype=np.float64)
        v = self.values
        i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    vals[:, di, dj, dk] = v[i + di, j + dj, k + dk]
        return vals, frac, outside

    def query(self, points: np.ndarray) -> np.ndarray:
        """Trilinear signed distance; exact at grid nodes."""
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        points = points.reshape(-1, 3)
        vals, frac, outside = self._gather_cell(points)
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        c00 = vals[:, 0, 0, 0] * (1 - fx) + vals[:, 1, 0, 0] * fx
        c10 = vals[:, 0, 1, 0] * (1 - fx) + vals[:, 1, 1, 0] * fx
        c01 = vals[:, 0, 0, 1] * (1 - fx) + vals[:, 1, 0, 1] * fx
        c11 = vals[:, 0, 1, 1] * (1 - fx) + vals[:, 1, 1, 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out = c0 * (1 - fz) + c1 * fz + outside
        return out[0] if single else out

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Central-difference gradient, stencil spanning one voxel.

        Requires every point to sit at least one voxel inside the node
        box; raises GradientOutOfBandError otherwise.
        """
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        points = points.reshape(-1, 3)
        lo, hi = self.node_box()
        margin = self.voxel_size
        bad = np.any((points < lo + margin) | (points > hi - margin), axis=1)
        if np.any(bad):
            raise GradientOutOfBandError(
                f"{int(bad.sum())} point(s) within one voxel of the grid boundary")
        h = 0.5 * self.voxel_size
        grad = np.empty_like(points)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h
            grad[:, axis] = (self.query(points + step) - self.query(points - step)) \
                / self.voxel_size
        return grad[0] if single else grad

    def gradient_trilinear(self, points: np.ndarray) -> np.ndarray:
        """Exact spatial gradient of the trilinear interpolant.

        This is what the pose and hand solvers differentiate: piecewise
        multilinear inside each cell, so finite differences of query()
        with steps smaller than a voxel reproduce it.
        """
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        points = points.reshape(-1, 3)
        vals, frac, _ = self._gather_cell(points)
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        d = vals[:, 1] - vals[:, 0]  # (N,2,2) differences along x
        gx = (d[:, 0, 0] * (1 - fy) * (1 - fz) + d[:, 1, 0] * fy * (1 - fz)
              + d[:, 0, 1] * (1 - fy) * fz + d[:, 1, 1] * fy * fz)
        d = vals[:, :, 1, :] - vals[:, :, 0, :]
        gy = (d[:, 0, 0] * (1 - fx) * (1 - fz) + d[:, 1, 0] * fx * (1 - fz)
              + d[:, 0, 1] * (1 - fx) * fz + d[:, 1, 1] * fx * fz)
        d = vals[:, :, :, 1] - vals[:, :, :, 0]
        gz = (d[:, 0, 0] * (1 - fx) * (1 - fy) + d[:, 1, 0] * fx * (1 - fy)
              + d[:, 0, 1] * (1 - fx) * fy + d[:, 1, 1] * fx * fy)
        grad = np.stack([gx, gy, gz], axis=1) / self.voxel_size
        return grad[0] if single else grad

    def node_points(self) -> np.ndarray:
        """All node positions, shaped like values plus a trailing 3."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return self.origin + idx * self.voxel_size

    def save(self, path) -> None:
        header = np.zeros(1, dtype=_MAGIC_DTYPE_HEADER)
        header["dims"] = self.dims
        header["origin"] = self.origin.astype(np.float32)
        header["voxel_size"] = np.float32(self.voxel_size)
        with open(path, "wb") as f:
            f.write(header.tobytes())
            f.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @staticmethod
    def load(path) -> "VoxelSdf":
        with open(path, "rb") as f:
            header = np.frombuffer(f.read(_MAGIC_DTYPE_HEADER.itemsize),
                                   dtype=_MAGIC_DTYPE_HEADER)[0]
            dims = tuple(int(d) for d in header["dims"])
            count = dims[0] * dims[1] * dims[2]
            values = np.frombuffer(f.read(4 * count), dtype="<f4", count=count)
        return VoxelSdf(origin=np.asarray(header["origin"], dtype=np.float64),
                        voxel_size=float(header["voxel_size"]),
                        values=values.reshape(dims).copy())


def build_sdf(mesh: TriangleMesh, voxel_size: float = DEFAULT_VOXEL_SIZE,
              padding: float = DEFAULT_PADDING) -> VoxelSdf:
    """Voxelize the signed distance of a watertight mesh.

    Unsigned distances are exact (nearest triangle per node); the sign
    comes from generalized winding numbers, evaluated directly on a thin
    shell of nodes and propagated outward with a Lipschitz argument: an
    edge between nodes where either distance exceeds the node spacing
    cannot cross the surface, so the sign is constant across it.
    """
    if voxel_size <= 0 or padding < 0:
        raise ValueError("voxel_size must be positive and padding non-negative")
    mesh = mesh.drop_degenerate_triangles()
    mesh.assert_watertight()
    lo, hi = mesh.aabb()
    lo = lo - padding
    hi = hi + padding
    # snap the stored metadata to float32 so save/load round-trips bit-exact
    voxel = float(np.float32(voxel_size))
    origin = lo.astype(np.float32).astype(np.float64)
    dims = np.ceil((hi - origin) / voxel).astype(np.int64) + 1
    dims = np.maximum(dims, 2)

    nx, ny, nz = (int(d) for d in dims)
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    nodes = origin + np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) * voxel
    nodes = np.ascontiguousarray(nodes)

    va, vb, vc = (np.ascontiguousarray(x) for x in mesh.triangle_corners())
    dist, _ = _kernels.min_distance_to_triangles(nodes, va, vb, vc)
    dist = dist.reshape(nx, ny, nz)

    sign = _grid_signs(nodes.reshape(nx, ny, nz, 3), dist, voxel, mesh)
    return VoxelSdf(origin=origin, voxel_size=voxel,
                    values=(sign * dist).astype(np.float32))


def _grid_signs(nodes: np.ndarray, dist: np.ndarray, voxel: float,
                mesh: TriangleMesh) -> np.ndarray:
    """Inside/outside signs (-1/+1) for every grid node, winding-exact."""
    dims = dist.shape
    far = dist > voxel * (1.0 + 1e-9)
    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
    labels, n_components = ndimage.label(far, structure=structure)

    sign = np.zeros(dims, dtype=np.int8)
    if n_components:
        flat_labels = labels.ravel()
        order = np.argsort(flat_labels, kind="stable")
        first_of = np.searchsorted(flat_labels[order], np.arange(1, n_components + 1))
        rep_flat = order[first_of]
        rep_points = nodes.reshape(-1, 3)[rep_flat]
        w = winding_numbers(rep_points, mesh)
        comp_sign = np.where(w > 0.5, -1, 1).astype(np.int8)
        sign[far] = comp_sign[labels[far] - 1]

    # propagate across edges whose far endpoint guarantees no crossing
    for axis in range(3):
        for direction in (1, -1):
            shifted_sign = np.roll(sign, direction, axis=axis)
            shifted_far = np.roll(far, direction, axis=axis)
            # roll wraps around; mask off the wrapped slab
            edge = [slice(None)] * 3
            edge[axis] = 0 if direction == 1 else -1
            shifted_far[tuple(edge)] = False
            take = (sign == 0) & shifted_far
            sign[take] = shifted_sign[take]

    leftover = sign == 0
    if np.any(leftover):
        w = winding_numbers(nodes[leftover].reshape(-1, 3), mesh)
        sign[leftover] = np.where(w > 0.5, -1, 1).astype(np.int8)
    return sign.astype(np.float64)
