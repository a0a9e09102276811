from __future__ import annotations

import numpy as np
import pytest

from mvhop.mesh import make_icosphere
from mvhop.sdf import build_sdf


@pytest.fixture(scope="session")
def fine_sphere_mesh():
    return make_icosphere(radius=0.05, subdivisions=4)


@pytest.fixture(scope="session")
def fine_sphere_sdf(fine_sphere_mesh):
    # The expensive fixture of the suite: ~230k nodes against 5120 triangles.
    return build_sdf(fine_sphere_mesh, voxel_size=0.002, padding=0.01)


@pytest.fixture(scope="session")
def coarse_sphere_sdf():
    return build_sdf(make_icosphere(radius=0.05, subdivisions=2),
                     voxel_size=0.004, padding=0.012)


@pytest.fixture(scope="session")
def right_hand_model():
    from mvhop.hand import make_synthetic_hand
    return make_synthetic_hand("right")


@pytest.fixture(scope="session")
def left_hand_model():
    from mvhop.hand import make_synthetic_hand
    return make_synthetic_hand("left")


def ring_rig(count=8, radius=1.0, height=0.6, look_at=(0.0, 0.0, 0.1),
             fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height_px=480):
    from mvhop.harness import RigSpec, generate_rig
    spec = RigSpec(camera_count=count, ring_radius=radius, ring_height=height,
                   look_at=np.asarray(look_at), fx=fx, fy=fy, cx=cx, cy=cy,
                   width=width, height=height_px)
    return generate_rig(spec)
