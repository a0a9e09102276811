"""Multi-view hand-object pose annotation toolkit.

Stages: multi-view object pose fusion and signed-distance refinement,
articulated hand fitting from 2D landmarks, joint hand-object refinement,
egocentric camera pose refinement, evaluation metrics, and a synthetic
ground-truth harness, tied together by the `mvhop` command line tool.
"""

__version__ = "0.1.0"
