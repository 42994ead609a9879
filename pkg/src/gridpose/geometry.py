"""Rotation math, proper symmetry groups, and the symmetry-aware pose metric.

Conventions used throughout the package:

* rotation matrices are 3x3 row-major and act on column vectors,
* Euler angles are intrinsic z-y-z: ``R = Rz(phi1) @ Ry(phi2) @ Rz(phi3)``,
* the symmetry axis of cyclic and revolution objects is the body z axis,
* translations are meters in the camera frame.

A pose of a symmetric object maps to a *set* of Euclidean representative
vectors (translation concatenated with scaled rotation columns); the distance
between two poses is the minimum distance between their representative sets,
which makes it invariant under the object's proper symmetry group.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi
ROTATION_TOL = 1e-9
_GIMBAL_EPS = 1e-9

MESH_MAGIC_COUNT_BYTES = 4  # u32 triangle count, then 9 little-endian f32 per triangle


class ObjectSpecError(ValueError):
    """Malformed or unsupported object definition."""


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _drot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def _drot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def check_rotation(matrix, tol: float = ROTATION_TOL) -> np.ndarray:
    """Validate a 3x3 proper rotation matrix and return it as float64."""
    m = np.asarray(matrix, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("rotation contains non-finite entries")
    if np.abs(m.T @ m - np.eye(3)).max() > tol:
        raise ValueError("rotation columns are not orthonormal")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise ValueError("rotation determinant is not +1")
    return m


class EulerAngles(NamedTuple):
    """Intrinsic z-y-z angles in radians."""

    phi1: float
    phi2: float
    phi3: float


@dataclass(frozen=True)
class Symmetry:
    """Proper symmetry group of a rigid object about its body z axis.

    ``kind`` is one of ``"none"``, ``"cyclic"`` (finite order >= 2) or
    ``"revolution"`` (continuous). Anything else (reflections, spherical
    groups) is rejected.
    """

    kind: str
    order: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "cyclic", "revolution"):
            raise ObjectSpecError(f"unsupported symmetry kind {self.kind!r}")
        if self.kind == "cyclic":
            if not isinstance(self.order, int) or self.order < 2:
                raise ObjectSpecError("cyclic symmetry requires integer order k >= 2")
        elif self.order != 1:
            raise ObjectSpecError(f"{self.kind} symmetry takes no order")

    @classmethod
    def none(cls) -> "Symmetry":
        return cls("none")

    @classmethod
    def cyclic(cls, order: int) -> "Symmetry":
        return cls("cyclic", order)

    @classmethod
    def revolution(cls) -> "Symmetry":
        return cls("revolution")

    @property
    def is_revolution(self) -> bool:
        return self.kind == "revolution"

    def group_angles(self) -> np.ndarray:
        """Rotation angles about body z of the finite group elements."""
        if self.is_revolution:
            raise ValueError("revolution group is continuous")
        return TWO_PI * np.arange(self.order) / self.order


def angle_ranges(symmetry: Symmetry) -> np.ndarray:
    """Periods of the bounded Euler chart under the symmetry quotient.

    phi1 and phi2 live in [0, 2*pi); phi3 is reduced to [0, 2*pi/k) for a
    cyclic group of order k and dropped entirely for revolution objects.
    """
    if symmetry.is_revolution:
        return np.array([TWO_PI, TWO_PI])
    return np.array([TWO_PI, TWO_PI, TWO_PI / symmetry.order])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform of the body frame expressed in the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = check_rotation(self.rotation).copy()
        tr = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(tr)):
            raise ValueError("translation contains non-finite entries")
        rot.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Rigid object: symmetry class, bounding-sphere diameter, representative
    scale and (optionally) a triangle mesh in the body frame.

    ``rep_scale`` is the scale applied to rotation columns when building pose
    representatives; it defaults to half the diameter.
    """

    object_id: str
    diameter: float
    symmetry: Symmetry
    rep_scale: float | None = None
    mesh: np.ndarray | None = None

    def __post_init__(self):
        if not self.object_id:
            raise ObjectSpecError("object id must be non-empty")
        if not (self.diameter > 0.0):
            raise ObjectSpecError("diameter must be positive")
        scale = self.rep_scale if self.rep_scale is not None else 0.5 * self.diameter
        if not (scale > 0.0):
            raise ObjectSpecError("representative scale must be positive")
        object.__setattr__(self, "rep_scale", float(scale))
        if self.mesh is not None:
            mesh = np.asarray(self.mesh, dtype=float)
            if mesh.ndim != 3 or mesh.shape[1:] != (3, 3):
                raise ObjectSpecError("mesh must have shape (T, 3, 3)")
            radius = np.linalg.norm(mesh.reshape(-1, 3), axis=1).max() if mesh.size else 0.0
            if radius > 0.5 * self.diameter * (1.0 + 1e-9) + 1e-12:
                raise ObjectSpecError(
                    f"mesh vertex at radius {radius:.6g} exceeds diameter/2 = {0.5 * self.diameter:.6g}"
                )
            mesh = mesh.copy()
            mesh.setflags(write=False)
            object.__setattr__(self, "mesh", mesh)

    @property
    def accept_radius(self) -> float:
        """Distance below which an estimated pose counts as correct."""
        return 0.1 * self.diameter


def _wrap(value: float, period: float) -> float:
    r = value % period
    # float rounding can land exactly on the period for tiny negatives
    if r >= period or r < 0.0:
        return 0.0
    return r


def euler_to_matrix(angles) -> np.ndarray:
    """Build a rotation from intrinsic z-y-z angles."""
    phi1, phi2, phi3 = angles
    return rot_z(phi1) @ rot_y(phi2) @ rot_z(phi3)


def matrix_to_euler(matrix, symmetry: Symmetry = Symmetry.none()) -> EulerAngles:
    """Decompose a rotation into bounded intrinsic z-y-z angles.

    phi2 comes out in [0, pi] (the canonical branch of the double cover);
    phi3 is reduced modulo the symmetry quotient, and set to 0 both for
    revolution objects and in the gimbal-locked case |sin(phi2)| ~ 0, where
    phi1 absorbs the full z-rotation.
    """
    m = check_rotation(matrix)
    sy = math.hypot(m[0, 2], m[1, 2])
    if sy < _GIMBAL_EPS:
        phi3 = 0.0
        if m[2, 2] > 0.0:
            phi1, phi2 = math.atan2(m[1, 0], m[0, 0]), 0.0
        else:
            phi1, phi2 = math.atan2(-m[1, 0], -m[0, 0]), math.pi
    else:
        phi1 = math.atan2(m[1, 2], m[0, 2])
        phi2 = math.atan2(sy, m[2, 2])
        phi3 = math.atan2(m[2, 1], -m[2, 0])
    phi1 = _wrap(phi1, TWO_PI)
    phi2 = _wrap(phi2, TWO_PI)
    if symmetry.is_revolution:
        phi3 = 0.0
    else:
        phi3 = _wrap(phi3, TWO_PI / symmetry.order)
    return EulerAngles(phi1, phi2, phi3)


def rotation_with_derivatives(angles) -> tuple[np.ndarray, list[np.ndarray]]:
    """Rotation for z-y-z angles plus its partial derivatives d R / d phi_i."""
    phi1, phi2, phi3 = angles
    rz1, ry2, rz3 = rot_z(phi1), rot_y(phi2), rot_z(phi3)
    r = rz1 @ ry2 @ rz3
    d1 = _drot_z(phi1) @ ry2 @ rz3
    d2 = rz1 @ _drot_y(phi2) @ rz3
    d3 = rz1 @ ry2 @ _drot_z(phi3)
    return r, [d1, d2, d3]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    n = np.linalg.norm(q)
    while n < 1e-12:
        q = rng.normal(size=4)
        n = np.linalg.norm(q)
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def orientation_representatives(rotation, obj: ObjectModel) -> np.ndarray:
    """Orientation parts of the pose representatives, one row per group element.

    For objects with no proper symmetry or a cyclic group the row is the three
    rotation columns stacked and scaled (9 values, j-th row uses
    ``R @ Rz(2*pi*j/k)``); for revolution objects it is the scaled third
    column alone (3 values, single row).
    """
    r = np.asarray(rotation, dtype=float)
    lam = obj.rep_scale
    if obj.symmetry.is_revolution:
        return lam * r[:, 2][None, :]
    k = obj.symmetry.order
    out = np.empty((k, 9))
    for j, ang in enumerate(obj.symmetry.group_angles()):
        rj = r @ rot_z(ang)
        out[j] = lam * rj.T.ravel()  # columns stacked: r1, r2, r3
    return out


def representatives(pose: Pose, obj: ObjectModel) -> np.ndarray:
    """Full pose representatives: translation prepended to each orientation part."""
    ori = orientation_representatives(pose.rotation, obj)
    t = np.tile(pose.translation, (ori.shape[0], 1))
    return np.concatenate([t, ori], axis=1)


def pose_distance(pose_a: Pose, pose_b: Pose, obj: ObjectModel) -> float:
    """Minimum Euclidean distance between the two representative sets (meters)."""
    ra = representatives(pose_a, obj)
    rb = representatives(pose_b, obj)
    diff = ra[:, None, :] - rb[None, :, :]
    return float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).min()))


def accept(pose_est: Pose, pose_gt: Pose, obj: ObjectModel) -> bool:
    """True iff the estimate is strictly closer than 0.1 x diameter."""
    return pose_distance(pose_est, pose_gt, obj) < obj.accept_radius


# ---------------------------------------------------------------------------
# object definition files
#
# An object is a small JSON file:
#   { "schema_version": 1, "id": "brick", "diameter_m": 0.15,
#     "symmetry": {"type": "cyclic", "k": 2},
#     "lambda_m": 0.075,            # optional, defaults to diameter/2
#     "mesh": "brick.mesh" }        # optional, path relative to the JSON file
#
# The mesh file is binary little-endian: u32 triangle count followed by
# 9 x f32 per triangle (three vertices, meters, body frame).
# ---------------------------------------------------------------------------


def save_mesh(path, mesh: np.ndarray) -> None:
    tris = np.ascontiguousarray(np.asarray(mesh, dtype="<f4").reshape(-1, 3, 3))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", tris.shape[0]))
        fh.write(tris.tobytes())


def load_mesh(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < MESH_MAGIC_COUNT_BYTES:
        raise ObjectSpecError(f"mesh file {path} is truncated")
    (count,) = struct.unpack("<I", data[:4])
    expected = 4 + count * 9 * 4
    if len(data) != expected:
        raise ObjectSpecError(f"mesh file {path}: expected {expected} bytes, found {len(data)}")
    tris = np.frombuffer(data, dtype="<f4", count=count * 9, offset=4)
    return tris.astype(float).reshape(count, 3, 3)


def _parse_symmetry(raw) -> Symmetry:
    if not isinstance(raw, dict) or "type" not in raw:
        raise ObjectSpecError("symmetry must be an object with a 'type' key")
    kind = raw["type"]
    if kind == "cyclic":
        return Symmetry.cyclic(int(raw.get("k", 0)))
    if kind in ("none", "revolution"):
        return Symmetry(kind)
    raise ObjectSpecError(f"unsupported symmetry type {kind!r}")


def load_object(path) -> ObjectModel:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ObjectSpecError(f"cannot read object file {path}: {exc}") from exc
    for key in ("id", "diameter_m", "symmetry"):
        if key not in raw:
            raise ObjectSpecError(f"object file {path} is missing key {key!r}")
    mesh = None
    if raw.get("mesh"):
        mesh = load_mesh(path.parent / raw["mesh"])
    return ObjectModel(
        object_id=str(raw["id"]),
        diameter=float(raw["diameter_m"]),
        symmetry=_parse_symmetry(raw["symmetry"]),
        rep_scale=float(raw["lambda_m"]) if raw.get("lambda_m") is not None else None,
        mesh=mesh,
    )


def save_object(obj: ObjectModel, path, mesh_filename: str | None = None) -> None:
    """Write an object definition (and its mesh, if any) next to each other."""
    path = Path(path)
    spec = {
        "schema_version": 1,
        "id": obj.object_id,
        "diameter_m": obj.diameter,
        "symmetry": {"type": obj.symmetry.kind}
        | ({"k": obj.symmetry.order} if obj.symmetry.kind == "cyclic" else {}),
        "lambda_m": obj.rep_scale,
    }
    if obj.mesh is not None:
        mesh_name = mesh_filename or (path.stem + ".mesh")
        save_mesh(path.parent / mesh_name, obj.mesh)
        spec["mesh"] = mesh_name
    path.write_text(json.dumps(spec, indent=2) + "\n")
