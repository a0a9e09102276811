"""Articulated hand model: kinematics, skinning, and shape handling.

The model follows the common landmark layout: 21 joints, wrist first,
then thumb/index/middle/ring/pinky chains of four joints each ending in
a fingertip. A hand state is a 51-vector

    [global rotation (3, axis-angle) |
     articulation (45 = 15 internal joints x 3, axis-angle) |
     global translation (3)]

Fingertips carry no rotation parameters. The global rotation acts about
the wrist; the template is built with the rest wrist at the origin, so
the posed wrist is exactly the global translation.

Rest geometry is linear in a 10-vector of shape coefficients through a
per-vertex displacement basis. Joints are tied to the surface by a
sparse regressor (rest joints = regressor @ rest vertices), and posing
uses linear blend skinning written as a displacement from the template
so the zero state reproduces the template bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CalibrationUnderconstrainedError, EmptyCloudError
from .geometry import skew, so3_exp, so3_right_jacobian
from .mesh import (TriangleMesh, closest_points_on_mesh, make_capsule,
                   point_mesh_distance)
from .optim import damped_gauss_newton

N_JOINTS = 21
N_SHAPE = 10
N_POSE = 51

PARENTS = np.array(
    [-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19],
    dtype=np.int64,
)

JOINT_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)

# joints with their own rotation parameters (besides the global rotation)
ARTICULATED_JOINTS = (1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19)

GLOBAL_ROT_COLS = slice(0, 3)
TRANSLATION_COLS = slice(48, 51)

_COLS_BY_JOINT = {0: GLOBAL_ROT_COLS}
for _i, _j in enumerate(ARTICULATED_JOINTS):
    _COLS_BY_JOINT[_j] = slice(3 + 3 * _i, 6 + 3 * _i)

# per joint, the ancestors (self included) that carry rotation columns,
# ordered leaf to root
_PARAM_CHAIN: List[Tuple[int, ...]] = []
for _j in range(N_JOINTS):
    chain = []
    k = _j
    while k >= 0:
        if k in _COLS_BY_JOINT:
            chain.append(k)
        k = int(PARENTS[k])
    _PARAM_CHAIN.append(tuple(chain))


@dataclass(frozen=True)
class HandModelData:
    """Rest template plus everything needed to pose it."""

    template_verts: np.ndarray     # (V, 3)
    faces: np.ndarray              # (F, 3) int
    joint_regressor: np.ndarray    # (21, V), rows sum to 1
    skin_weights: np.ndarray       # (V, 21), rows sum to 1
    shape_basis: np.ndarray        # (V, 3, 10)
    parents: np.ndarray = field(default_factory=lambda: PARENTS.copy())
    handedness: str = "right"

    def __post_init__(self):
        object.__setattr__(self, "template_verts",
                           np.asarray(self.template_verts, dtype=float))
        object.__setattr__(self, "faces",
                           np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "joint_regressor",
                           np.asarray(self.joint_regressor, dtype=float))
        object.__setattr__(self, "skin_weights",
                           np.asarray(self.skin_weights, dtype=float))
        object.__setattr__(self, "shape_basis",
                           np.asarray(self.shape_basis, dtype=float))
        object.__setattr__(self, "parents",
                           np.asarray(self.parents, dtype=np.int64))
        self.validate()

    @property
    def vertex_count(self) -> int:
        return self.template_verts.shape[0]

    def validate(self) -> None:
        V = self.template_verts.shape[0]
        if self.template_verts.shape != (V, 3):
            raise ValueError("template_verts must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if self.faces.min() < 0 or self.faces.max() >= V:
            raise ValueError("face index out of range")
        if self.joint_regressor.shape != (N_JOINTS, V):
            raise ValueError("joint_regressor must be (21, V)")
        if self.skin_weights.shape != (V, N_JOINTS):
            raise ValueError("skin_weights must be (V, 21)")
        if self.shape_basis.shape != (V, 3, N_SHAPE):
            raise ValueError("shape_basis must be (V, 3, 10)")
        if self.parents.shape != (N_JOINTS,) or self.parents[0] != -1:
            raise ValueError("parents must be (21,) with parents[0] == -1")
        if np.any(self.parents[1:] >= np.arange(1, N_JOINTS)):
            raise ValueError("parents must be topologically ordered")
        if self.handedness not in ("left", "right"):
            raise ValueError("handedness must be 'left' or 'right'")
        if np.any(self.skin_weights < -1e-9):
            raise ValueError("skin weights must be non-negative")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-5):
            raise ValueError("skin weight rows must sum to 1")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-5):
            raise ValueError("joint regressor rows must sum to 1")


@dataclass
class HandPose:
    """51-dof hand state; see the module docstring for the layout."""

    global_rot: np.ndarray        # (3,) axis-angle
    articulation: np.ndarray      # (45,)
    translation: np.ndarray       # (3,) metres

    def __post_init__(self):
        self.global_rot = np.asarray(self.global_rot, dtype=float).reshape(3)
        self.articulation = np.asarray(self.articulation, dtype=float).reshape(45)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "HandPose":
        return cls(np.zeros(3), np.zeros(45), np.zeros(3))

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "HandPose":
        vec = np.asarray(vec, dtype=float).reshape(N_POSE)
        return cls(vec[0:3], vec[3:48], vec[48:51])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.global_rot, self.articulation,
                               self.translation])

    def copy(self) -> "HandPose":
        return HandPose(self.global_rot.copy(), self.articulation.copy(),
                        self.translation.copy())

    def joint_rotvec(self, joint: int) -> np.ndarray:
        """Local axis-angle of one articulated joint (or the global rot)."""
        cols = _COLS_BY_JOINT.get(joint)
        if cols is None:
            raise ValueError(f"joint {joint} has no rotation parameters")
        return self.as_vector()[cols]


def rest_vertices(data: HandModelData, betas: np.ndarray) -> np.ndarray:
    betas = np.asarray(betas, dtype=float).reshape(N_SHAPE)
    if np.all(betas == 0.0):
        return data.template_verts.copy()
    return data.template_verts + data.shape_basis @ betas


def rest_joints(data: HandModelData, betas: np.ndarray) -> np.ndarray:
    return data.joint_regressor @ rest_vertices(data, betas)


def _local_rotations(pose: HandPose) -> np.ndarray:
    R = np.tile(np.eye(3), (N_JOINTS, 1, 1))
    R[0] = so3_exp(pose.global_rot)
    for i, j in enumerate(ARTICULATED_JOINTS):
        R[j] = so3_exp(pose.articulation[3 * i:3 * i + 3])
    return R


class _Chain:
    """Posed kinematic chain evaluated once and shared by FK helpers.

    Rbar[j] is the cumulative rotation of joint j's frame; delta[j] is
    the posed-minus-rest joint displacement before the global
    translation. delta is accumulated directly (not as a difference of
    absolute positions) so the zero state yields exact zeros.
    """

    def __init__(self, data: HandModelData, betas: np.ndarray, pose: HandPose):
        self.data = data
        self.pose = pose
        self.rest_v = rest_vertices(data, betas)
        self.rest_j = data.joint_regressor @ self.rest_v
        R_local = _local_rotations(pose)
        Rbar = np.empty((N_JOINTS, 3, 3))
        delta = np.zeros((N_JOINTS, 3))
        Rbar[0] = R_local[0]
        for j in range(1, N_JOINTS):
            p = int(data.parents[j])
            Rbar[j] = Rbar[p] @ R_local[j]
            delta[j] = delta[p] + (Rbar[p] - np.eye(3)) @ (self.rest_j[j] - self.rest_j[p])
        self.Rbar = Rbar
        self.delta = delta
        # posed joints before the global translation
        self.q = self.rest_j + delta

    def joints(self) -> np.ndarray:
        return self.q + self.pose.translation

    def rotation_column_maps(self) -> dict:
        """Per parametrized joint k: Rbar[k] @ J_r(w_k), the map from a
        parameter increment to the world-frame rotation increment."""
        maps = {}
        for k in _COLS_BY_JOINT:
            omega = self.pose.joint_rotvec(k)
            maps[k] = self.Rbar[k] @ so3_right_jacobian(omega)
        return maps

    def bone_vertex_positions(self, j: int, idx: np.ndarray) -> np.ndarray:
        """Rest vertices idx carried rigidly by bone j, before translation."""
        local = self.rest_v[idx] - self.rest_j[j]
        return local @ self.Rbar[j].T + self.rest_j[j] + self.delta[j]


def forward_kinematics(data: HandModelData, betas: np.ndarray,
                       pose: HandPose) -> np.ndarray:
    """Posed joint positions, (21, 3)."""
    return _Chain(data, betas, pose).joints()


def skin_mesh(data: HandModelData, betas: np.ndarray,
              pose: HandPose) -> TriangleMesh:
    """Posed surface by linear blend skinning."""
    chain = _Chain(data, betas, pose)
    posed = chain.rest_v.copy()
    eye = np.eye(3)
    for j in range(N_JOINTS):
        w = data.skin_weights[:, j]
        idx = np.nonzero(w)[0]
        if idx.size == 0:
            continue
        local = chain.rest_v[idx] - chain.rest_j[j]
        move = local @ (chain.Rbar[j] - eye).T + chain.delta[j]
        posed[idx] += w[idx, None] * move
    posed += pose.translation
    return TriangleMesh(posed, data.faces.copy())


def fk_jacobian(data: HandModelData, betas: np.ndarray,
                pose: HandPose) -> Tuple[np.ndarray, np.ndarray]:
    """Posed joints and their exact state jacobian.

    Returns (joints (21, 3), jac (21, 3, 51)).
    """
    chain = _Chain(data, betas, pose)
    maps = chain.rotation_column_maps()
    jac = np.zeros((N_JOINTS, 3, N_POSE))
    jac[:, :, TRANSLATION_COLS] = np.eye(3)
    for i in range(N_JOINTS):
        for k in _PARAM_CHAIN[i]:
            lever = chain.q[i] - chain.q[k]
            jac[i, :, _COLS_BY_JOINT[k]] = -skew(lever) @ maps[k]
    return chain.joints(), jac


def skinned_vertex_jacobian(data: HandModelData, betas: np.ndarray,
                            pose: HandPose) -> Tuple[np.ndarray, np.ndarray]:
    """Posed vertices and their exact state jacobian.

    Returns (verts (V, 3), jac (V, 3, 51)). Each vertex differentiates
    as the weight-blend of its rigidly attached per-bone positions, so
    this is the true derivative of skin_mesh, not an approximation.
    """
    chain = _Chain(data, betas, pose)
    maps = chain.rotation_column_maps()
    V = data.vertex_count
    posed = np.zeros((V, 3))
    jac = np.zeros((V, 3, N_POSE))
    jac[:, :, TRANSLATION_COLS] = np.eye(3)
    for j in range(N_JOINTS):
        w = data.skin_weights[:, j]
        idx = np.nonzero(w)[0]
        if idx.size == 0:
            continue
        p_j = chain.bone_vertex_positions(j, idx)
        posed[idx] += w[idx, None] * p_j
        for k in _PARAM_CHAIN[j]:
            lever = p_j - chain.q[k]
            n = idx.size
            S = np.zeros((n, 3, 3))
            S[:, 0, 1] = -lever[:, 2]
            S[:, 0, 2] = lever[:, 1]
            S[:, 1, 0] = lever[:, 2]
            S[:, 1, 2] = -lever[:, 0]
            S[:, 2, 0] = -lever[:, 1]
            S[:, 2, 1] = lever[:, 0]
            blocks = -np.einsum("nij,jk->nik", S, maps[k])
            jac[idx, :, _COLS_BY_JOINT[k]] += w[idx, None, None] * blocks
    posed += pose.translation
    return posed, jac


def skinned_shape_jacobian(data: HandModelData, betas: np.ndarray,
                           pose: HandPose) -> Tuple[np.ndarray, np.ndarray]:
    """Posed vertices and their exact shape jacobian at a fixed pose.

    Returns (verts (V, 3), jac (V, 3, 10)). All rotations are constant
    in the shape coefficients, so the posed surface is affine in them
    and this jacobian is exact.
    """
    chain = _Chain(data, betas, pose)
    basis = data.shape_basis                          # (V, 3, 10)
    joint_basis = np.einsum("jv,vck->jck", data.joint_regressor, basis)
    eye = np.eye(3)
    # derivative of the accumulated joint displacement
    ddelta = np.zeros((N_JOINTS, 3, N_SHAPE))
    for j in range(1, N_JOINTS):
        p = int(data.parents[j])
        ddelta[j] = ddelta[p] + np.einsum(
            "ab,bk->ak", chain.Rbar[p] - eye, joint_basis[j] - joint_basis[p])
    V = data.vertex_count
    posed = np.zeros((V, 3))
    jac = np.zeros((V, 3, N_SHAPE))
    for j in range(N_JOINTS):
        w = data.skin_weights[:, j]
        idx = np.nonzero(w)[0]
        if idx.size == 0:
            continue
        posed[idx] += w[idx, None] * chain.bone_vertex_positions(j, idx)
        local_basis = basis[idx] - joint_basis[j]     # (n, 3, 10)
        dpj = np.einsum("ab,nbk->nak", chain.Rbar[j], local_basis) \
            + joint_basis[j] + ddelta[j]
        jac[idx] += w[idx, None, None] * dpj
    posed += pose.translation
    return posed, jac


# ---------------------------------------------------------------------------
# synthetic model


def _wrap_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Re-center an axis-angle vector into magnitude <= pi."""
    theta = float(np.linalg.norm(rotvec))
    if theta <= np.pi:
        return rotvec
    wrapped = theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))
    return rotvec * (wrapped / theta)


def _finger_chain(base, direction, lengths):
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    pts = [np.asarray(base, dtype=float)]
    for L in lengths:
        pts.append(pts[-1] + L * direction)
    return pts


def make_synthetic_hand(handedness: str = "right",
                        segments: int = 10,
                        cap_rings: int = 3) -> HandModelData:
    """Capsule-tree hand with consistent regressor and skin weights.

    The skeleton is planar-ish with fingers along +x and (for a right
    hand) the thumb toward +y; the rest wrist sits exactly at the
    origin. Each bone is one capsule; vertices bind rigidly to the
    bone's proximal joint, and each joint's regressor row averages the
    capsule rim ring centred on it. A left hand is the exact x-mirror.
    """
    if handedness not in ("left", "right"):
        raise ValueError("handedness must be 'left' or 'right'")

    wrist = np.zeros(3)
    thumb = _finger_chain((0.025, 0.030, -0.005), (0.55, 0.80, -0.05),
                          (0.042, 0.031, 0.025))
    index = _finger_chain((0.088, 0.028, 0.0), (1.0, 0.10, 0.0),
                          (0.040, 0.024, 0.020))
    middle = _finger_chain((0.092, 0.006, 0.0), (1.0, 0.0, 0.0),
                           (0.044, 0.027, 0.021))
    ring = _finger_chain((0.088, -0.016, 0.0), (1.0, -0.09, 0.0),
                         (0.041, 0.025, 0.020))
    pinky = _finger_chain((0.080, -0.036, 0.0), (1.0, -0.20, 0.0),
                          (0.032, 0.020, 0.017))

    joints = np.vstack([wrist, *thumb, *index, *middle, *ring, *pinky])
    assert joints.shape == (N_JOINTS, 3)

    # capsules: (proximal joint index carrying the bone, p0, p1, radius)
    chains = {
        "thumb": (1, thumb, (0.011, 0.009, 0.008)),
        "index": (5, index, (0.0085, 0.0075, 0.0065)),
        "middle": (9, middle, (0.0090, 0.0078, 0.0066)),
        "ring": (13, ring, (0.0085, 0.0074, 0.0063)),
        "pinky": (17, pinky, (0.0075, 0.0065, 0.0055)),
    }
    palm_radius = {"thumb": 0.013, "index": 0.012, "middle": 0.013,
                   "ring": 0.012, "pinky": 0.011}

    capsules = []  # (bone_joint, p0, p1, radius, p0_joint, p1_joint)
    for name, (first, pts, radii) in chains.items():
        # palm capsule wrist -> chain base, carried by the wrist
        capsules.append((0, wrist, pts[0], palm_radius[name], 0, first))
        for s in range(3):
            bone = first + s
            capsules.append((bone, pts[s], pts[s + 1], radii[s],
                             bone, bone + 1))

    n_ring_rows = 2 * cap_rings + 2
    verts_per_capsule = 2 + n_ring_rows * segments

    all_verts = []
    all_faces = []
    weights_col = []
    # joint -> list of vertex indices of a rim ring centred on it
    ring_of_joint = {j: None for j in range(N_JOINTS)}

    offset = 0
    for bone, p0, p1, radius, j0, j1 in capsules:
        cap = make_capsule(p0, p1, radius, segments=segments,
                           cap_rings=cap_rings)
        assert cap.vertices.shape[0] == verts_per_capsule
        all_verts.append(cap.vertices)
        all_faces.append(cap.triangles + offset)
        weights_col.extend([bone] * verts_per_capsule)
        # capsule rim rings are centred exactly on the axis endpoints;
        # each joint takes a rim from a capsule bound to its own bone:
        # the wrist from the middle-finger palm capsule's base, interior
        # joints from their distal segment's base, tips from the last
        # segment's far rim
        p0_ring = offset + 1 + cap_rings * segments + np.arange(segments)
        p1_ring = offset + 1 + (cap_rings + 1) * segments + np.arange(segments)
        if j0 == 0 and j1 == 9:
            ring_of_joint[0] = p0_ring
        if j0 != 0:
            ring_of_joint[j0] = p0_ring
        if j1 in (4, 8, 12, 16, 20):
            ring_of_joint[j1] = p1_ring
        offset += verts_per_capsule

    vertices = np.vstack(all_verts)
    faces = np.vstack(all_faces)
    V = vertices.shape[0]

    regressor = np.zeros((N_JOINTS, V))
    for j in range(N_JOINTS):
        ring_idx = ring_of_joint[j]
        assert ring_idx is not None, f"no regressor ring for joint {j}"
        regressor[j, ring_idx] = 1.0 / len(ring_idx)

    weights = np.zeros((V, N_JOINTS))
    weights[np.arange(V), np.asarray(weights_col)] = 1.0

    basis = _shape_basis_fields(vertices)

    if handedness == "left":
        vertices = vertices.copy()
        vertices[:, 0] *= -1.0
        basis = basis.copy()
        basis[:, 0, :] *= -1.0
        faces = faces[:, [0, 2, 1]]

    return HandModelData(vertices, faces, regressor, weights, basis,
                         PARENTS.copy(), handedness)


def _shape_basis_fields(verts: np.ndarray) -> np.ndarray:
    """Smooth displacement fields of the rest positions, (V, 3, 10)."""
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    L = 0.17
    s = x / L
    sp = np.clip(s, 0.0, None)
    V = verts.shape[0]
    B = np.zeros((V, 3, N_SHAPE))
    B[:, :, 0] = 0.06 * verts                          # overall scale
    B[:, 0, 1] = 0.025 * s * s                         # finger length
    B[:, 2, 2] = 0.5 * z                               # thickness
    B[:, 1, 3] = 0.18 * y * sp                         # finger spread
    B[:, 1, 4] = 0.25 * y * (1.0 - np.clip(s, 0.0, 1.0))   # palm width
    B[:, 0, 5] = 0.003 * np.sin(np.pi * s)
    B[:, 1, 6] = 0.003 * np.sin(2.0 * np.pi * s)
    B[:, 2, 7] = 0.003 * np.cos(np.pi * s)
    B[:, 0, 8] = 0.002 * np.sin(np.pi * y / 0.06)
    B[:, :, 9] = 0.02 * verts * sp[:, None]            # distal scale
    return B


# ---------------------------------------------------------------------------
# model file io


def save_hand_model(path, data: HandModelData) -> None:
    """Write the model as an npz container of named little-endian arrays."""
    path = Path(path)
    np.savez(
        path,
        template_verts=data.template_verts.astype("<f4"),
        faces=data.faces.astype("<i4"),
        joint_regressor=data.joint_regressor.astype("<f4"),
        skin_weights=data.skin_weights.astype("<f4"),
        shape_basis=data.shape_basis.astype("<f4"),
        parents=data.parents.astype("<i4"),
        handedness=np.array(data.handedness),
    )


def load_hand_model(path) -> HandModelData:
    with np.load(Path(path), allow_pickle=False) as z:
        return HandModelData(
            template_verts=z["template_verts"],
            faces=z["faces"],
            joint_regressor=z["joint_regressor"],
            skin_weights=z["skin_weights"],
            shape_basis=z["shape_basis"],
            parents=z["parents"],
            handedness=str(z["handedness"]),
        )


# ---------------------------------------------------------------------------
# fitting to point clouds


def _cloud_residuals(points: np.ndarray, mesh_verts: np.ndarray,
                     faces: np.ndarray, vert_jac: Optional[np.ndarray]):
    """Scalar point-to-surface distances and their state jacobian."""
    mesh = TriangleMesh(mesh_verts, faces)
    dist, tri_idx, closest, bary = closest_points_on_mesh(points, mesh)
    n = points.shape[0]
    scale = 1.0 / np.sqrt(n)
    res = dist * scale
    if vert_jac is None:
        return res, None
    n_params = vert_jac.shape[2]
    jac = np.zeros((n, n_params))
    good = dist > 1e-9
    if np.any(good):
        normal = (points[good] - closest[good]) / dist[good, None]
        corners = faces[tri_idx[good]]                 # (m, 3)
        # d s / d theta = sum_i bary_i * d v_i / d theta
        Js = (bary[good][:, 0, None, None] * vert_jac[corners[:, 0]]
              + bary[good][:, 1, None, None] * vert_jac[corners[:, 1]]
              + bary[good][:, 2, None, None] * vert_jac[corners[:, 2]])
        jac[good] = -np.einsum("na,nak->nk", normal, Js) * scale
    return res, jac


def fit_pose_to_cloud(
    data: HandModelData,
    betas: np.ndarray,
    points: np.ndarray,
    init_pose: HandPose,
    *,
    lambda_reg: float = 1e-3,
    prev_pose: Optional[HandPose] = None,
    lambda_smooth: float = 0.0,
    max_iters: int = 40,
    step_tol: float = 1e-7,
) -> Tuple[HandPose, dict]:
    """Fit the 51-dof state to a point cloud of the hand surface.

    Minimizes mean squared point-to-surface distance plus
    lambda_reg * |articulation|^2, and optionally a smoothness penalty
    tying the global rotation/translation parameters to prev_pose.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyCloudError("empty hand cloud")
    betas = np.asarray(betas, dtype=float).reshape(N_SHAPE)
    faces = data.faces
    sqrt_reg = np.sqrt(lambda_reg) if lambda_reg > 0 else 0.0
    sqrt_smooth = np.sqrt(lambda_smooth) if lambda_smooth > 0 else 0.0

    def evaluate(vec, need_jac):
        pose = HandPose.from_vector(vec)
        if need_jac:
            verts, vjac = skinned_vertex_jacobian(data, betas, pose)
        else:
            verts = skin_mesh(data, betas, pose).vertices
            vjac = None
        res, jac = _cloud_residuals(points, verts, faces, vjac)
        rows = [res]
        jrows = [jac]
        if sqrt_reg > 0:
            rows.append(sqrt_reg * vec[3:48])
            if need_jac:
                jr = np.zeros((45, N_POSE))
                jr[:, 3:48] = sqrt_reg * np.eye(45)
                jrows.append(jr)
        if sqrt_smooth > 0 and prev_pose is not None:
            rows.append(sqrt_smooth * (vec[0:3] - prev_pose.global_rot))
            rows.append(sqrt_smooth * (vec[48:51] - prev_pose.translation))
            if need_jac:
                jg = np.zeros((3, N_POSE))
                jg[:, 0:3] = sqrt_smooth * np.eye(3)
                jt = np.zeros((3, N_POSE))
                jt[:, 48:51] = sqrt_smooth * np.eye(3)
                jrows.extend([jg, jt])
        r = np.concatenate(rows)
        loss = float(r @ r)
        if not need_jac:
            return loss, None, None
        return loss, r, np.vstack(jrows)

    def apply_step(vec, delta):
        out = vec + delta
        out[0:3] = _wrap_rotvec(out[0:3])
        return out

    best, info = damped_gauss_newton(
        init_pose.as_vector(), evaluate, apply_step,
        max_iters=max_iters, step_tol=step_tol)
    return HandPose.from_vector(best), info


def fit_shape_to_clouds(
    data: HandModelData,
    betas: np.ndarray,
    clouds: Sequence[np.ndarray],
    poses: Sequence[HandPose],
    *,
    ridge: float = 1e-3,
    max_iters: int = 15,
    step_tol: float = 1e-6,
) -> Tuple[np.ndarray, dict]:
    """One shape solve at fixed poses over several registered clouds.

    The ridge pins shape directions the clouds cannot see (pure
    tangential sliding of the surface). It is relative: the absolute
    weight is ridge times the mean data curvature at the initial
    coefficients, so observable modes stay essentially unbiased no
    matter how the basis is scaled.
    """
    betas = np.asarray(betas, dtype=float).reshape(N_SHAPE)
    faces = data.faces

    probe_rows = []
    for cloud, pose in zip(clouds, poses):
        verts, sjac = skinned_shape_jacobian(data, betas, pose)
        _, jac = _cloud_residuals(cloud, verts, faces, sjac)
        probe_rows.append(jac)
    probe = np.vstack(probe_rows)
    curvature = float((probe * probe).sum(axis=0).mean())
    sqrt_ridge = np.sqrt(ridge * max(curvature, 1e-30))

    def evaluate(b, need_jac):
        rows, jrows = [], []
        for cloud, pose in zip(clouds, poses):
            if need_jac:
                verts, sjac = skinned_shape_jacobian(data, b, pose)
            else:
                verts = skin_mesh(data, b, pose).vertices
                sjac = None
            res, jac = _cloud_residuals(cloud, verts, faces, sjac)
            rows.append(res)
            if need_jac:
                jrows.append(jac)
        rows.append(sqrt_ridge * b)
        if need_jac:
            jrows.append(sqrt_ridge * np.eye(N_SHAPE))
        r = np.concatenate(rows)
        loss = float(r @ r)
        if not need_jac:
            return loss, None, None
        return loss, r, np.vstack(jrows)

    def apply_step(b, delta):
        return b + delta

    return damped_gauss_newton(betas, evaluate, apply_step,
                               max_iters=max_iters, step_tol=step_tol)


def calibrate_shape(
    data: HandModelData,
    clouds: Sequence[np.ndarray],
    init_poses: Sequence[HandPose],
    *,
    max_rounds: int = 8,
    beta_tol: float = 1e-4,
    lambda_reg: float = 1e-6,
    support_radius: float = 0.02,
    min_support: int = 500,
) -> Tuple[np.ndarray, List[HandPose], dict]:
    """Alternate pose fits and shape solves over multiple frames.

    Requires at least one cloud with min_support points within
    support_radius of the mesh posed at its initialization; otherwise
    the problem is declared underconstrained. The articulation
    regularizer is kept near zero here: against the mean squared
    distance data term a tracking-strength prior would bias the poses
    and push the bias into the shape.
    """
    clouds = [np.asarray(c, dtype=float).reshape(-1, 3) for c in clouds]
    if len(clouds) != len(init_poses) or not clouds:
        raise ValueError("need one initial pose per cloud")
    zero = np.zeros(N_SHAPE)
    supported = 0
    for cloud, pose in zip(clouds, init_poses):
        if cloud.shape[0] == 0:
            continue
        mesh = skin_mesh(data, zero, pose)
        dist, _ = point_mesh_distance(cloud, mesh)
        if int(np.count_nonzero(dist <= support_radius)) >= min_support:
            supported += 1
    if supported == 0:
        raise CalibrationUnderconstrainedError(
            f"no cloud has {min_support} points within "
            f"{support_radius:.3f} m of its initialized mesh")

    betas = zero.copy()
    poses = [p.copy() for p in init_poses]
    rounds = 0
    for _ in range(max_rounds):
        rounds += 1
        # poses first: the shape solve needs registered clouds, or it
        # inflates the surface to cover the registration error
        for i, cloud in enumerate(clouds):
            if cloud.shape[0] == 0:
                continue
            poses[i], _ = fit_pose_to_cloud(
                data, betas, cloud, poses[i],
                lambda_reg=lambda_reg, max_iters=15)
        new_betas, _ = fit_shape_to_clouds(data, betas, clouds, poses)
        change = float(np.linalg.norm(new_betas - betas))
        betas = new_betas
        if change < beta_tol:
            break
    info = {"rounds": rounds, "supported_clouds": supported}
    return betas, poses, info
