"""Exception types raised by the annotation pipeline."""


class MvhopError(Exception):
    """Base class for all toolkit errors."""


class BehindCameraError(MvhopError):
    """A point to be projected has non-positive depth in the camera frame."""


class DegeneratePairError(MvhopError):
    """Two rays are parallel or share an origin; no unique triangulation."""


class OpenMeshError(MvhopError):
    """A mesh required to be watertight has boundary or non-manifold edges."""


class GradientOutOfBandError(MvhopError):
    """A gradient query fell within one voxel of the grid boundary."""


class UntrackedFrameError(MvhopError):
    """No per-view poses and no previous pose are available for a frame."""


class EmptyCloudError(MvhopError):
    """A point cloud required for refinement contains no points."""


class JointUnobservedError(MvhopError):
    """Fewer than two views observe a joint in a frame."""


class JointInconsistentError(MvhopError):
    """No triangulation candidate for a joint has at least two inliers."""


class JointEmptyError(MvhopError):
    """A joint was never observed anywhere in a sequence."""


class CalibrationUnderconstrainedError(MvhopError):
    """Shape calibration lacks enough cloud support near the initial mesh."""


class NoObjectsError(MvhopError):
    """An operation that needs at least one tracked object got none."""


class StoreError(MvhopError):
    """A sequence store is missing files or violates its schema."""
