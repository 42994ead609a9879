"""Symmetry-aware 6D object pose toolkit.

Grid-cell pose regression on depth images: synthetic scene generation with
exact annotations, multi-task losses with analytic gradients, a miniature
trainable regressor, and average-precision evaluation under a
symmetry-invariant pose distance.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    EulerAngles,
    ObjectModel,
    Pose,
    Symmetry,
    accept,
    euler_to_matrix,
    matrix_to_euler,
    pose_distance,
    representatives,
)
from .gridcodec import (  # noqa: F401
    CameraModel,
    DetectionHypothesis,
    GridTensor,
    Instance,
    SceneGroundTruth,
    decode,
    encode,
)
