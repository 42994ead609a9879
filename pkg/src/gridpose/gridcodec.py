"""Encode scene ground truth into grid target tensors and decode predictions.

The image is divided into S x S cells. An object instance is assigned to the
cell its body-frame origin projects into; each assigned cell stores an
8-channel vector (7 for revolution-symmetric objects):

    [p, v, x, y, z, a1, a2, (a3)]

where p is the occupancy probability (0/1 in targets), v the visibility,
(x, y) the fractional position of the projected origin inside its cell,
z the metric depth normalized between the clipping planes, and a1..a3 the
bounded z-y-z Euler angles divided by their ranges. Cells without an origin
hold a zero vector. If several origins land in one cell, the instance with
the higher visibility wins and the others are reported as displaced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .geometry import ObjectModel, Pose, Symmetry, angle_ranges, euler_to_matrix, matrix_to_euler

SCHEMA_VERSION = 1

# channel indices in the grid tensor
CH_P, CH_V, CH_X, CH_Y, CH_Z, CH_A1, CH_A2, CH_A3 = range(8)


class FormatError(ValueError):
    """Unreadable or wrong-version file content."""


class BehindCameraError(ValueError):
    """Point with non-positive depth cannot be projected."""


class DepthOutOfRangeError(ValueError):
    """Origin depth outside the camera clipping planes."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with near/far clipping planes (pixels and meters)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")


@dataclass(frozen=True, eq=False)
class Instance:
    """One object instance in a scene: identity, pose, visibility in [0, 1]."""

    object_id: str
    pose: Pose
    visibility: float

    def __post_init__(self):
        if not (0.0 <= self.visibility <= 1.0):
            raise ValueError(f"visibility {self.visibility} outside [0, 1]")


@dataclass
class SceneGroundTruth:
    instances: list[Instance] = field(default_factory=list)


@dataclass(eq=False)
class GridTensor:
    """S x S x C cell tensor; channel order [p, v, x, y, z, a1, a2, (a3)]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[0] != v.shape[1] or v.shape[2] not in (7, 8):
            raise ValueError(f"grid tensor must be (S, S, 7|8), got {v.shape}")
        self.values = v

    @property
    def grid_size(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @classmethod
    def zeros(cls, grid_size: int, channels: int) -> "GridTensor":
        return cls(np.zeros((grid_size, grid_size, channels)))


@dataclass(frozen=True, eq=False)
class DetectionHypothesis:
    """A decoded 6D pose hypothesis with its source cell and filter scores."""

    pose: Pose
    confidence: float
    visibility: float
    cell: tuple[int, int]


@dataclass
class DisplacedInstance:
    instance_index: int
    cell: tuple[int, int]
    kept_index: int


@dataclass
class EncodeReport:
    """Instances the target tensor could not represent."""

    displaced: list[DisplacedInstance] = field(default_factory=list)
    off_image: list[int] = field(default_factory=list)


def channel_count(symmetry: Symmetry) -> int:
    """7 for revolution objects (no a3 feature map), otherwise 8."""
    return 7 if symmetry.is_revolution else 8


def _resolve_object(objects, object_id: str | None = None) -> ObjectModel:
    if isinstance(objects, ObjectModel):
        if object_id is not None and objects.object_id != object_id:
            raise KeyError(f"unknown object {object_id!r}")
        return objects
    if isinstance(objects, Mapping):
        if object_id is None:
            if len(objects) != 1:
                raise ValueError("object id required with a multi-object catalog")
            return next(iter(objects.values()))
        if object_id not in objects:
            raise KeyError(f"unknown object {object_id!r}")
        return objects[object_id]
    raise TypeError("objects must be an ObjectModel or a mapping of them")


def project(point, camera: CameraModel) -> tuple[float, float, float]:
    """Perspective-project a camera-frame point to pixel (u, v) and depth."""
    x, y, z = np.asarray(point, dtype=float).reshape(3)
    if z <= 0.0:
        raise BehindCameraError(f"point depth {z} is not positive")
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, z


def unproject(u: float, v: float, depth: float, camera: CameraModel) -> np.ndarray:
    """Inverse of :func:`project` for a known metric depth."""
    if depth <= 0.0:
        raise BehindCameraError(f"depth {depth} is not positive")
    return np.array(
        [(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth]
    )


def cell_of(origin, camera: CameraModel, grid_size: int) -> tuple[int, int] | None:
    """Grid cell (row, col) of a projected origin, or None when off-image."""
    if grid_size < 1:
        raise ValueError("grid size must be >= 1")
    u, v, _ = project(origin, camera)
    if not (0.0 <= u < camera.width and 0.0 <= v < camera.height):
        return None
    return int(v / camera.height * grid_size), int(u / camera.width * grid_size)


def encode(
    scene: SceneGroundTruth,
    camera: CameraModel,
    grid_size: int,
    objects,
) -> tuple[GridTensor, EncodeReport]:
    """Build the target tensor for a single-object-type scene.

    Instances whose origin projects outside the image are skipped and listed
    in the report; an origin depth outside [near, far] is an error. When two
    origins share a cell the higher visibility wins (ties keep the lower
    instance index) and losers are reported as displaced.
    """
    report = EncodeReport()
    if scene.instances:
        obj = _resolve_object(objects, scene.instances[0].object_id)
        for inst in scene.instances:
            if inst.object_id != obj.object_id:
                raise ValueError("encode expects a single object type per scene")
    else:
        obj = _resolve_object(objects)
    ranges = angle_ranges(obj.symmetry)
    tensor = GridTensor.zeros(grid_size, channel_count(obj.symmetry))

    candidates: dict[tuple[int, int], list[int]] = {}
    for idx, inst in enumerate(scene.instances):
        z = inst.pose.translation[2]
        if not (camera.near <= z <= camera.far):
            raise DepthOutOfRangeError(
                f"instance {idx} origin depth {z:.6g} outside [{camera.near}, {camera.far}]"
            )
        cell = cell_of(inst.pose.translation, camera, grid_size)
        if cell is None:
            report.off_image.append(idx)
            continue
        candidates.setdefault(cell, []).append(idx)

    for cell in sorted(candidates):
        group = candidates[cell]
        winner = max(group, key=lambda i: (scene.instances[i].visibility, -i))
        for loser in group:
            if loser != winner:
                report.displaced.append(DisplacedInstance(loser, cell, winner))
        inst = scene.instances[winner]
        u, v, z = project(inst.pose.translation, camera)
        i, j = cell
        angles = matrix_to_euler(inst.pose.rotation, obj.symmetry)
        cellvec = [
            1.0,
            inst.visibility,
            u / camera.width * grid_size - j,
            v / camera.height * grid_size - i,
            (z - camera.near) / (camera.far - camera.near),
        ]
        cellvec.extend(np.asarray(angles[: len(ranges)]) / ranges)
        tensor.values[i, j, :] = cellvec
    report.displaced.sort(key=lambda d: d.instance_index)
    return tensor, report


def decode(
    tensor: GridTensor,
    camera: CameraModel,
    objects,
    p_min: float = 0.5,
    v_min: float = 0.5,
) -> list[DetectionHypothesis]:
    """Turn a prediction tensor into pose hypotheses.

    Cells pass the filter when probability >= p_min and visibility >= v_min.
    Hypotheses come out in row-major cell order.
    """
    if not (0.0 <= p_min <= 1.0 and 0.0 <= v_min <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    obj = _resolve_object(objects)
    if tensor.channels != channel_count(obj.symmetry):
        raise ValueError(
            f"tensor has {tensor.channels} channels, object {obj.object_id!r} "
            f"needs {channel_count(obj.symmetry)}"
        )
    ranges = angle_ranges(obj.symmetry)
    grid_size = tensor.grid_size
    out: list[DetectionHypothesis] = []
    for i in range(grid_size):
        for j in range(grid_size):
            cell = tensor.values[i, j]
            if cell[CH_P] < p_min or cell[CH_V] < v_min:
                continue
            depth = camera.near + cell[CH_Z] * (camera.far - camera.near)
            u = (j + cell[CH_X]) * camera.width / grid_size
            v = (i + cell[CH_Y]) * camera.height / grid_size
            translation = unproject(u, v, depth, camera)
            phis = cell[CH_A1 : CH_A1 + len(ranges)] * ranges
            if obj.symmetry.is_revolution:
                phis = np.append(phis, 0.0)
            pose = Pose(euler_to_matrix(phis), translation)
            out.append(
                DetectionHypothesis(
                    pose=pose,
                    confidence=float(cell[CH_P]),
                    visibility=float(cell[CH_V]),
                    cell=(i, j),
                )
            )
    return out


# ---------------------------------------------------------------------------
# scene ground-truth and prediction files (JSON, schema_version 1)
# ---------------------------------------------------------------------------


def _camera_to_dict(camera: CameraModel) -> dict:
    return {
        "width": camera.width,
        "height": camera.height,
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "near": camera.near,
        "far": camera.far,
    }


def camera_from_dict(raw: Mapping) -> CameraModel:
    try:
        return CameraModel(
            width=int(raw["width"]),
            height=int(raw["height"]),
            fx=float(raw["fx"]),
            fy=float(raw["fy"]),
            cx=float(raw["cx"]),
            cy=float(raw["cy"]),
            near=float(raw["near"]),
            far=float(raw["far"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad camera block: {exc}") from exc


def _check_schema(raw: Mapping, path) -> None:
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(
            f"{path}: schema_version {raw.get('schema_version')!r} != {SCHEMA_VERSION}"
        )


def save_scene(path, camera: CameraModel, scene: SceneGroundTruth) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "camera": _camera_to_dict(camera),
        "instances": [
            {
                "object_id": inst.object_id,
                "rotation": [float(x) for x in inst.pose.rotation.ravel()],
                "translation": [float(x) for x in inst.pose.translation],
                "visibility": inst.visibility,
            }
            for inst in scene.instances
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_scene(path) -> tuple[CameraModel, SceneGroundTruth]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read scene file {path}: {exc}") from exc
    _check_schema(raw, path)
    camera = camera_from_dict(raw["camera"])
    instances = []
    for entry in raw.get("instances", []):
        pose = Pose(
            np.asarray(entry["rotation"], dtype=float).reshape(3, 3),
            np.asarray(entry["translation"], dtype=float),
        )
        instances.append(Instance(entry["object_id"], pose, float(entry["visibility"])))
    return camera, SceneGroundTruth(instances)


def save_predictions(path, detections: list[DetectionHypothesis]) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "detections": [
            {
                "cell": [int(det.cell[0]), int(det.cell[1])],
                "confidence": det.confidence,
                "visibility": det.visibility,
                "rotation": [float(x) for x in det.pose.rotation.ravel()],
                "translation": [float(x) for x in det.pose.translation],
            }
            for det in detections
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_predictions(path) -> list[DetectionHypothesis]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read prediction file {path}: {exc}") from exc
    _check_schema(raw, path)
    out = []
    for entry in raw.get("detections", []):
        pose = Pose(
            np.asarray(entry["rotation"], dtype=float).reshape(3, 3),
            np.asarray(entry["translation"], dtype=float),
        )
        out.append(
            DetectionHypothesis(
                pose=pose,
                confidence=float(entry["confidence"]),
                visibility=float(entry["visibility"]),
                cell=(int(entry["cell"][0]), int(entry["cell"][1])),
            )
        )
    return out
