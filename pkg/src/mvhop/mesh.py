"""Triangle meshes, PLY io, primitives, and exact point-to-surface queries.

PLY files are kept deliberately small: ascii or binary_little_endian,
float32 x/y/z vertices, optional uchar red/green/blue, optional int32
`entity` labels on point clouds, and uchar-counted int32 triangle lists.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import OpenMeshError

_AREA_EPS = 1e-16


@dataclass
class TriangleMesh:
    """Indexed triangle set. Vertices in metres, float64 in memory."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of vertex range")

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v, t = self.vertices, self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, pose) -> "TriangleMesh":
        """Mesh with vertices mapped through a RigidTransform."""
        return TriangleMesh(pose.apply(self.vertices), self.triangles.copy())

    def drop_degenerate_triangles(self) -> "TriangleMesh":
        keep = self.triangle_areas() > _AREA_EPS
        return TriangleMesh(self.vertices, self.triangles[keep])

    def boundary_edge_count(self) -> tuple[int, int]:
        """(edges with incidence 1, edges with incidence > 2)."""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return int(np.sum(counts == 1)), int(np.sum(counts > 2))

    def is_watertight(self) -> bool:
        boundary, nonmanifold = self.boundary_edge_count()
        return boundary == 0 and nonmanifold == 0

    def assert_watertight(self) -> None:
        boundary, nonmanifold = self.boundary_edge_count()
        if boundary or nonmanifold:
            raise OpenMeshError(
                f"open mesh: {boundary} boundary edge(s), "
                f"{nonmanifold} non-manifold edge(s)")


def point_mesh_distance(points: np.ndarray,
                        mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    """Exact unsigned distance from each point to the mesh surface.

    Returns (distances, nearest triangle index per point).
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    va, vb, vc = (np.ascontiguousarray(x) for x in mesh.triangle_corners())
    return _kernels.min_distance_to_triangles(points, va, vb, vc)


def closest_points_on_triangles(points: np.ndarray, va: np.ndarray,
                                vb: np.ndarray, vc: np.ndarray
                                ) -> tuple[np.ndarray, np.ndarray]:
    """Closest point on triangle i to points[i], vectorized over pairs.

    Returns (closest points, barycentric coordinates (w_a, w_b, w_c)).
    Same region logic as the distance kernel, so results agree with
    point_mesh_distance on the reported nearest triangle.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    n = p.shape[0]
    ab = vb - va
    ac = vc - va
    ap = p - va
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - vb
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - vc
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc_ = d1 * d4 - d3 * d2
    vb_ = d5 * d2 - d1 * d6
    va_ = d3 * d6 - d5 * d4

    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    region_a = (d1 <= 0) & (d2 <= 0)
    bary[region_a] = [1.0, 0.0, 0.0]
    done |= region_a

    region_b = ~done & (d3 >= 0) & (d4 <= d3)
    bary[region_b] = [0.0, 1.0, 0.0]
    done |= region_b

    region_ab = ~done & (vc_ <= 0) & (d1 >= 0) & (d3 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
    bary[region_ab, 0] = 1.0 - t_ab[region_ab]
    bary[region_ab, 1] = t_ab[region_ab]
    done |= region_ab

    region_c = ~done & (d6 >= 0) & (d5 <= d6)
    bary[region_c] = [0.0, 0.0, 1.0]
    done |= region_c

    region_ac = ~done & (vb_ <= 0) & (d2 >= 0) & (d6 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ac = d2 / (d2 - d6)
    bary[region_ac, 0] = 1.0 - t_ac[region_ac]
    bary[region_ac, 2] = t_ac[region_ac]
    done |= region_ac

    region_bc = ~done & (va_ <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    bary[region_bc, 1] = 1.0 - t_bc[region_bc]
    bary[region_bc, 2] = t_bc[region_bc]
    done |= region_bc

    interior = ~done
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va_ + vb_ + vc_)
    v = vb_ * denom
    w = vc_ * denom
    bary[interior, 0] = 1.0 - v[interior] - w[interior]
    bary[interior, 1] = v[interior]
    bary[interior, 2] = w[interior]

    closest = bary[:, [0]] * va + bary[:, [1]] * vb + bary[:, [2]] * vc
    return closest, bary


def closest_points_on_mesh(points: np.ndarray, mesh: TriangleMesh
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(distance, nearest triangle, closest surface point, barycentric)."""
    dist, tri_idx = point_mesh_distance(points, mesh)
    tris = mesh.triangles[tri_idx]
    va = mesh.vertices[tris[:, 0]]
    vb = mesh.vertices[tris[:, 1]]
    vc = mesh.vertices[tris[:, 2]]
    closest, bary = closest_points_on_triangles(points, va, vb, vc)
    return dist, tri_idx, closest, bary


def winding_numbers(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Generalized winding number of each point with respect to the mesh."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    va, vb, vc = (np.ascontiguousarray(x) for x in mesh.triangle_corners())
    return _kernels.winding_numbers(points, va, vb, vc)


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform surface samples."""
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    picks = rng.choice(len(areas), size=count, p=probs)
    va, vb, vc = mesh.triangle_corners()
    # sqrt trick keeps the in-triangle distribution uniform
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    return (a[:, None] * va[picks] + b[:, None] * vb[picks] + c[:, None] * vc[picks])


# ---------------------------------------------------------------------------
# primitives


def make_box(extents=(0.1, 0.1, 0.1), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned closed box with outward-facing triangles."""
    ex, ey, ez = (float(e) / 2.0 for e in extents)
    cx, cy, cz = center
    v = np.array([
        [-ex, -ey, -ez], [ex, -ey, -ez], [ex, ey, -ez], [-ex, ey, -ez],
        [-ex, -ey, ez], [ex, -ey, ez], [ex, ey, ez], [-ex, ey, ez],
    ]) + np.array([cx, cy, cz])
    f = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom (-z)
        [4, 5, 6], [4, 6, 7],  # top (+z)
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [3, 0, 4], [3, 4, 7],  # -x
    ], dtype=np.int64)
    return TriangleMesh(v, f)


def make_icosphere(radius: float = 0.05, subdivisions: int = 2) -> TriangleMesh:
    """Unit icosahedron subdivided and projected onto a sphere."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        new_v = list(v)
        new_f = []

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                cache[key] = len(new_v)
                new_v.append((v[i] + v[j]) / 2.0)
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_f += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        v = np.asarray(new_v, dtype=float)
        f = np.asarray(new_f, dtype=np.int64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    return TriangleMesh(v, f)


def make_capsule(p0, p1, radius: float, segments: int = 10,
                 cap_rings: int = 4) -> TriangleMesh:
    """Closed capsule (cylinder with hemispherical caps) from p0 to p1."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    axis = p1 - p0
    length = float(np.linalg.norm(axis))
    if length < 1e-12:
        raise ValueError("capsule endpoints coincide")
    z = axis / length
    # any stable frame perpendicular to z
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)

    thetas = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    ring_dirs = np.outer(np.cos(thetas), x) + np.outer(np.sin(thetas), y)

    verts: list[np.ndarray] = [p0 - radius * z]  # bottom pole
    rings: list[np.ndarray] = []
    # bottom hemisphere rings (excluding pole), then both cylinder rims,
    # then top hemisphere rings (excluding pole)
    for k in range(1, cap_rings + 1):
        phi = -np.pi / 2 + (np.pi / 2) * k / (cap_rings + 1)
        center = p0 + radius * np.sin(phi) * z
        rings.append(center + radius * np.cos(phi) * ring_dirs)
    rings.append(p0 + radius * ring_dirs)
    rings.append(p1 + radius * ring_dirs)
    for k in range(1, cap_rings + 1):
        phi = (np.pi / 2) * k / (cap_rings + 1)
        center = p1 + radius * np.sin(phi) * z
        rings.append(center + radius * np.cos(phi) * ring_dirs)

    ring_start = []
    for ring in rings:
        ring_start.append(len(verts))
        verts.extend(ring)
    top_pole = len(verts)
    verts.append(p1 + radius * z)

    faces: list[list[int]] = []
    s0 = ring_start[0]
    for i in range(segments):
        faces.append([0, s0 + (i + 1) % segments, s0 + i])
    for r in range(len(rings) - 1):
        sa, sb = ring_start[r], ring_start[r + 1]
        for i in range(segments):
            j = (i + 1) % segments
            faces.append([sa + i, sb + j, sb + i])
            faces.append([sa + i, sa + j, sb + j])
    s_last = ring_start[-1]
    for i in range(segments):
        faces.append([top_pole, s_last + i, s_last + (i + 1) % segments])

    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# PLY io


def _parse_ply_header(f) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]], int]:
    magic = f.readline().strip()
    if magic != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    header_len = len(magic) + 1
    while True:
        line = f.readline()
        if not line:
            raise ValueError("unterminated PLY header")
        header_len += len(line)
        parts = line.strip().decode("ascii").split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((" ".join(parts[2:4]), parts[4]))
            else:
                elements[-1][2].append((parts[1], parts[2]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, header_len


_PLY_DTYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def load_ply(path) -> dict:
    """Read a PLY file into {'vertices', optional 'triangles', 'entity', 'rgb'}."""
    with open(path, "rb") as f:
        fmt, elements, _ = _parse_ply_header(f)
        out: dict = {}
        for name, count, props in elements:
            is_list = any(" " in p[0] for p in props)
            if name == "vertex":
                dtype = np.dtype([(pname, _PLY_DTYPES[ptype])
                                  for ptype, pname in props])
                if fmt == "ascii":
                    rows = [f.readline().split() for _ in range(count)]
                    arr = np.zeros(count, dtype=dtype)
                    for i, row in enumerate(rows):
                        for (pname, _), tok in zip(dtype.fields.items(), row):
                            arr[pname][i] = float(tok)
                else:
                    arr = np.frombuffer(f.read(dtype.itemsize * count), dtype=dtype,
                                        count=count)
                pts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                out["vertices"] = pts
                if "entity" in (arr.dtype.names or ()):
                    out["entity"] = arr["entity"].astype(np.int64)
                if "red" in (arr.dtype.names or ()):
                    out["rgb"] = np.stack([arr["red"], arr["green"], arr["blue"]],
                                          axis=1).astype(np.uint8)
            elif name == "face" and is_list:
                (count_type, index_type), _pname = props[0][0].split(" "), props[0][1]
                cdt = np.dtype(_PLY_DTYPES[count_type])
                idt = np.dtype(_PLY_DTYPES[index_type])
                tris = np.empty((count, 3), dtype=np.int64)
                if fmt == "ascii":
                    for i in range(count):
                        toks = f.readline().split()
                        if int(toks[0]) != 3:
                            raise ValueError("only triangle faces are supported")
                        tris[i] = [int(toks[1]), int(toks[2]), int(toks[3])]
                else:
                    for i in range(count):
                        n = int(np.frombuffer(f.read(cdt.itemsize), dtype=cdt)[0])
                        if n != 3:
                            raise ValueError("only triangle faces are supported")
                        tris[i] = np.frombuffer(f.read(idt.itemsize * 3), dtype=idt)
                out["triangles"] = tris
            else:
                raise ValueError(f"unsupported PLY element {name!r}")
    return out


def load_mesh(path) -> TriangleMesh:
    """Load a triangle mesh; zero-area triangles are dropped."""
    data = load_ply(path)
    if "triangles" not in data:
        raise ValueError(f"{path}: no face element; not a mesh")
    return TriangleMesh(data["vertices"], data["triangles"]).drop_degenerate_triangles()


def load_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Load a point cloud; returns (points, entity labels or None)."""
    data = load_ply(path)
    return data["vertices"], data.get("entity")


def save_mesh(path, mesh: TriangleMesh, binary: bool = True) -> None:
    _save_ply(path, mesh.vertices, triangles=mesh.triangles, binary=binary)


def save_cloud(path, points: np.ndarray, entity: np.ndarray | None = None,
               binary: bool = True) -> None:
    _save_ply(path, points, entity=entity, binary=binary)


def _save_ply(path, vertices, triangles=None, entity=None, binary=True) -> None:
    vertices = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(vertices)}",
              "property float x", "property float y", "property float z"]
    if entity is not None:
        entity = np.asarray(entity, dtype=np.int32).reshape(-1)
        if len(entity) != len(vertices):
            raise ValueError("entity labels must match vertex count")
        header.append("property int entity")
    if triangles is not None:
        triangles = np.asarray(triangles, dtype=np.int32).reshape(-1, 3)
        header.append(f"element face {len(triangles)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if entity is not None:
                dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                  ("entity", "<i4")])
                arr = np.empty(len(vertices), dtype=dtype)
                arr["x"], arr["y"], arr["z"] = vertices.T
                arr["entity"] = entity
                f.write(arr.tobytes())
            else:
                f.write(np.ascontiguousarray(vertices, dtype="<f4").tobytes())
            if triangles is not None:
                for tri in triangles:
                    f.write(struct.pack("<B3i", 3, *tri))
        else:
            for i, v in enumerate(vertices):
                row = f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
                if entity is not None:
                    row += f" {int(entity[i])}"
                f.write((row + "\n").encode("ascii"))
            if triangles is not None:
                for tri in triangles:
                    f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode("ascii"))
