"""Synthetic depth-scene generation with exact annotations.

A scene is a set of object instances sampled inside a bin volume in front of
the camera, rendered with a software perspective z-buffer into a depth image
and an instance label map. The per-instance visibility is the ratio of pixels
the instance keeps in the full scene to the pixels it covers when rendered
alone. Domain-randomization augmentations (noise, box blur, elastic warp,
dropout) operate on the depth image only; annotations stay exact.

File formats (all little-endian):

* depth image:   magic ``DPTH``, u32 version, u32 W, u32 H, f32 near,
  f32 far, then W*H f32 row-major meters with 0 marking missing depth;
* instance map:  magic ``IMAP``, u32 version, u32 W, u32 H, then W*H u16
  row-major labels with 0 = background and n = instance n (1-based);
* dataset manifest: JSON listing the per-scene file triplets together with
  the camera and object metadata needed to train and predict.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import ObjectModel, Pose, random_rotation
from .gridcodec import CameraModel, FormatError, Instance, SceneGroundTruth, project

DEPTH_MAGIC = b"DPTH"
IMAP_MAGIC = b"IMAP"
FILE_VERSION = 1
MISSING = 0.0

_MAX_SAMPLE_ATTEMPTS = 10_000
_ELASTIC_NODES = 4  # coarse displacement grid is 4x4 control points
_RASTER_CHUNK_ELEMS = 2_000_000  # triangles per chunk scaled by pixel count


class CongestionError(RuntimeError):
    """Rejection sampling could not place all instances."""


class EmptyDepthError(ValueError):
    """Operation needs at least one valid depth pixel."""


@dataclass(eq=False)
class DepthImage:
    """H x W metric depth, 0 = missing; valid values lie in [near, far]."""

    values: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError(f"depth image must be 2-D, got shape {v.shape}")
        valid = v != MISSING
        if valid.any():
            lo, hi = v[valid].min(), v[valid].max()
            if lo < self.near - 1e-9 or hi > self.far + 1e-9:
                raise ValueError(
                    f"depth values [{lo:.6g}, {hi:.6g}] outside clip range "
                    f"[{self.near}, {self.far}]"
                )
        self.values = v

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values != MISSING


@dataclass(eq=False)
class InstanceMap:
    """H x W labels; 0 = background, n = scene instance n (1-based)."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("instance map must be 2-D")
        self.labels = lab.astype(np.uint16)


@dataclass(frozen=True)
class SceneConfig:
    """Desk-scale sampling volume and camera for one object type."""

    object_id: str
    count_range: tuple[int, int]
    bin_center: tuple[float, float, float]
    bin_extents: tuple[float, float, float]
    camera: CameraModel
    seed: int = 0
    min_separation_factor: float = 0.5
    bin_jitter: float = 0.0
    distractor_plane: bool = False

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad instance count range {self.count_range}")
        if self.min_separation_factor < 0.0:
            raise ValueError("min separation factor must be >= 0")
        _check_bin_in_frustum(
            np.asarray(self.bin_center, dtype=float),
            np.asarray(self.bin_extents, dtype=float),
            self.camera,
        )


def _check_bin_in_frustum(center: np.ndarray, extents: np.ndarray, camera: CameraModel) -> None:
    half = extents / 2.0
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                corner = center + half * np.array([sx, sy, sz])
                if not (camera.near <= corner[2] <= camera.far):
                    raise ValueError(f"bin corner {corner} outside clip range")
                u, v, _ = project(corner, camera)
                if not (0.0 <= u < camera.width and 0.0 <= v < camera.height):
                    raise ValueError(f"bin corner {corner} projects outside the image")


@dataclass(frozen=True)
class AugmentParams:
    """Depth-image augmentation strengths; zeros mean identity."""

    noise_sigma: float = 0.0  # meters
    blur_radius: int = 0  # pixels, box kernel
    dropout_prob: float = 0.0
    elastic_amplitude: float = 0.0  # pixels

    def __post_init__(self):
        if min(self.noise_sigma, self.blur_radius, self.dropout_prob, self.elastic_amplitude) < 0:
            raise ValueError("augmentation parameters must be non-negative")
        if self.dropout_prob > 1.0:
            raise ValueError("dropout probability must be <= 1")


def _resolve_object(objects, object_id: str) -> ObjectModel:
    if isinstance(objects, ObjectModel):
        if objects.object_id != object_id:
            raise KeyError(f"unknown object {object_id!r}")
        return objects
    if isinstance(objects, Mapping):
        return objects[object_id]
    raise TypeError("objects must be an ObjectModel or a mapping of them")


def sample_scene(config: SceneConfig, objects, rng: np.random.Generator) -> list[Pose]:
    """Rejection-sample instance poses inside the bin volume.

    Origins keep a pairwise distance of at least
    ``min_separation_factor * diameter``; rotations are uniform. The result
    is sorted by descending camera depth so nearer instances occlude farther
    ones the way stacked parts do.
    """
    obj = _resolve_object(objects, config.object_id)
    count = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
    center = np.asarray(config.bin_center, dtype=float)
    if config.bin_jitter > 0.0:
        center = center + rng.uniform(-config.bin_jitter, config.bin_jitter, size=3)
    half = np.asarray(config.bin_extents, dtype=float) / 2.0
    min_sep = config.min_separation_factor * obj.diameter

    translations: list[np.ndarray] = []
    poses: list[Pose] = []
    attempts = 0
    while len(poses) < count:
        attempts += 1
        if attempts > _MAX_SAMPLE_ATTEMPTS:
            raise CongestionError(
                f"placed {len(poses)}/{count} instances of {obj.object_id!r} in "
                f"{_MAX_SAMPLE_ATTEMPTS} attempts; bin {tuple(config.bin_extents)} too "
                f"crowded for separation {min_sep:.4g} m"
            )
        t = center + rng.uniform(-half, half)
        if any(np.linalg.norm(t - prev) < min_sep for prev in translations):
            continue
        translations.append(t)
        poses.append(Pose(random_rotation(rng), t))
    poses.sort(key=lambda pose: -pose.translation[2])
    return poses


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _rasterize(tris_cam: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Z-buffer one triangle soup; returns (H, W) depth with +inf where empty.

    Pixel centers sit at (col + 0.5, row + 0.5). Depth is interpolated
    perspective-correctly (1/z is affine in screen space) and fragments
    outside [near, far] are discarded. Triangles with a vertex at or behind
    the camera plane are skipped, which is exact for scenes sampled inside
    the view frustum.
    """
    h, w = camera.height, camera.width
    buffer = np.full((h, w), np.inf)
    tris = np.asarray(tris_cam, dtype=float)
    if tris.size == 0:
        return buffer

    z = tris[:, :, 2]
    ok = (z > 1e-9).all(axis=1)
    tris = tris[ok]
    if tris.shape[0] == 0:
        return buffer
    z = tris[:, :, 2]
    u = camera.fx * tris[:, :, 0] / z + camera.cx
    v = camera.fy * tris[:, :, 1] / z + camera.cy
    inv_z = 1.0 / z

    # cull triangles whose screen bbox misses the image entirely
    keep = (u.max(1) >= 0) & (u.min(1) < w) & (v.max(1) >= 0) & (v.min(1) < h)
    u, v, inv_z = u[keep], v[keep], inv_z[keep]
    n = u.shape[0]
    if n == 0:
        return buffer

    px = (np.arange(w) + 0.5)[None, :].repeat(h, axis=0).ravel()
    py = (np.arange(h) + 0.5)[:, None].repeat(w, axis=1).ravel()
    flat = buffer.ravel()

    chunk = max(1, _RASTER_CHUNK_ELEMS // (h * w))
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        u0, u1, u2 = u[sl, 0:1], u[sl, 1:2], u[sl, 2:3]
        v0, v1, v2 = v[sl, 0:1], v[sl, 1:2], v[sl, 2:3]
        w0 = (u2 - u1) * (py - v1) - (v2 - v1) * (px - u1)
        w1 = (u0 - u2) * (py - v2) - (v0 - v2) * (px - u2)
        w2 = (u1 - u0) * (py - v0) - (v1 - v0) * (px - u0)
        area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
        degenerate = np.abs(area) < 1e-12
        area = np.where(degenerate, 1.0, area)
        l0, l1, l2 = w0 / area, w1 / area, w2 / area
        inside = (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12) & ~degenerate
        inv = l0 * inv_z[sl, 0:1] + l1 * inv_z[sl, 1:2] + l2 * inv_z[sl, 2:3]
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = 1.0 / inv
        depth = np.where(
            inside & (depth >= camera.near) & (depth <= camera.far), depth, np.inf
        )
        np.minimum(flat, depth.min(axis=0), out=flat)
    return buffer


def _instance_triangles(inst: Instance, objects) -> np.ndarray:
    obj = _resolve_object(objects, inst.object_id)
    if obj.mesh is None:
        raise ValueError(f"object {obj.object_id!r} has no mesh to render")
    verts = obj.mesh.reshape(-1, 3) @ inst.pose.rotation.T + inst.pose.translation
    return verts.reshape(-1, 3, 3)


def _composite(buffers: Sequence[np.ndarray], camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Merge per-instance z-buffers; ties keep the lowest buffer index."""
    h, w = camera.height, camera.width
    if not buffers:
        return np.full((h, w), np.inf), np.zeros((h, w), dtype=np.int64)
    stack = np.stack(buffers)
    return stack.min(axis=0), stack.argmin(axis=0)


def _solo_buffers(instances, objects, camera) -> list[np.ndarray]:
    return [_rasterize(_instance_triangles(inst, objects), camera) for inst in instances]


def _assemble(
    solo: list[np.ndarray], extra: list[np.ndarray], camera: CameraModel
) -> tuple[DepthImage, InstanceMap]:
    depth, winner = _composite(list(solo) + list(extra), camera)
    hit = np.isfinite(depth)
    labels = np.zeros(depth.shape, dtype=np.uint16)
    instance_hit = hit & (winner < len(solo))
    labels[instance_hit] = (winner[instance_hit] + 1).astype(np.uint16)
    values = np.where(hit, depth, MISSING)
    return DepthImage(values, camera.near, camera.far), InstanceMap(labels)


def render(instances: Sequence[Instance], objects, camera: CameraModel) -> tuple[DepthImage, InstanceMap]:
    """Z-buffer depth and instance labels for a list of posed instances."""
    return _assemble(_solo_buffers(instances, objects, camera), [], camera)


def visibility(instances: Sequence[Instance], objects, camera: CameraModel, index: int) -> float:
    """Visible-pixel fraction of one instance within the full scene.

    Defined as pixels owned in the full-scene instance map divided by pixels
    covered when rendered alone; 0/0 (off-screen object) is 0.
    """
    if not (0 <= index < len(instances)):
        raise IndexError(f"instance index {index} out of range")
    solo = _solo_buffers(instances, objects, camera)
    _, imap = _assemble(solo, [], camera)
    alone = int(np.isfinite(solo[index]).sum())
    if alone == 0:
        return 0.0
    return float((imap.labels == index + 1).sum() / alone)


def _distractor_triangles(config: SceneConfig, obj: ObjectModel, rng: np.random.Generator) -> np.ndarray:
    """A randomized background plane just behind the bin contents."""
    center = np.asarray(config.bin_center, dtype=float)
    half = np.asarray(config.bin_extents, dtype=float) / 2.0
    size = rng.uniform(1.2, 1.8)
    drop = rng.uniform(0.005, 0.05)
    z = min(center[2] + half[2] + obj.diameter / 2.0 + drop, config.camera.far)
    hx, hy = size * half[0], size * half[1]
    corners = [
        (center[0] - hx, center[1] - hy, z),
        (center[0] + hx, center[1] - hy, z),
        (center[0] + hx, center[1] + hy, z),
        (center[0] - hx, center[1] + hy, z),
    ]
    return np.asarray([[corners[0], corners[1], corners[2]], [corners[0], corners[2], corners[3]]])


def generate_scene(
    config: SceneConfig,
    objects,
    rng: np.random.Generator,
    augment_params: AugmentParams | None = None,
) -> tuple[DepthImage, InstanceMap, SceneGroundTruth]:
    """Sample, render and annotate one scene (optionally augmenting the depth).

    Ground-truth visibilities are computed before augmentation; the instance
    map and poses always describe the clean render.
    """
    obj = _resolve_object(objects, config.object_id)
    poses = sample_scene(config, objects, rng)
    placed = [Instance(config.object_id, pose, 1.0) for pose in poses]
    solo = _solo_buffers(placed, objects, config.camera)
    extra = [_rasterize(_distractor_triangles(config, obj, rng), config.camera)] if config.distractor_plane else []
    depth, imap = _assemble(solo, extra, config.camera)

    instances = []
    for idx, pose in enumerate(poses):
        alone = int(np.isfinite(solo[idx]).sum())
        seen = int((imap.labels == idx + 1).sum())
        instances.append(Instance(config.object_id, pose, seen / alone if alone else 0.0))
    if augment_params is not None:
        depth = augment(depth, augment_params, rng)
    return depth, imap, SceneGroundTruth(instances)


# ---------------------------------------------------------------------------
# augmentations
# ---------------------------------------------------------------------------


def _box_blur_masked(values: np.ndarray, valid: np.ndarray, radius: int) -> np.ndarray:
    """Box blur that averages only valid pixels; invalid pixels stay missing."""
    size = 2 * radius + 1
    padded = np.pad(values * valid, radius)
    counts = np.pad(valid.astype(float), radius)

    def box_sum(img):
        c = img.cumsum(axis=0).cumsum(axis=1)
        c = np.pad(c, ((1, 0), (1, 0)))
        h, w = values.shape
        return (
            c[size : size + h, size : size + w]
            - c[:h, size : size + w]
            - c[size : size + h, :w]
            + c[:h, :w]
        )

    num, den = box_sum(padded), box_sum(counts)
    out = np.where(valid & (den > 0), num / np.where(den > 0, den, 1.0), MISSING)
    return out


def _elastic_warp(values: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Coarse random displacement field, bilinearly upsampled, nearest resample."""
    h, w = values.shape
    nodes = rng.uniform(-amplitude, amplitude, size=(_ELASTIC_NODES, _ELASTIC_NODES, 2))
    gy = np.linspace(0.0, _ELASTIC_NODES - 1.0, h)
    gx = np.linspace(0.0, _ELASTIC_NODES - 1.0, w)
    y0 = np.clip(gy.astype(int), 0, _ELASTIC_NODES - 2)
    x0 = np.clip(gx.astype(int), 0, _ELASTIC_NODES - 2)
    fy, fx = gy - y0, gx - x0
    fy2, fx2 = fy[:, None, None], fx[None, :, None]
    field = (
        nodes[y0][:, x0] * (1 - fy2) * (1 - fx2)
        + nodes[y0 + 1][:, x0] * fy2 * (1 - fx2)
        + nodes[y0][:, x0 + 1] * (1 - fy2) * fx2
        + nodes[y0 + 1][:, x0 + 1] * fy2 * fx2
    )
    rows = np.clip(np.round(np.arange(h)[:, None] + field[..., 0]), 0, h - 1).astype(int)
    cols = np.clip(np.round(np.arange(w)[None, :] + field[..., 1]), 0, w - 1).astype(int)
    return values[rows, cols]


def augment(image: DepthImage, params: AugmentParams, rng: np.random.Generator) -> DepthImage:
    """Apply elastic warp, box blur, Gaussian noise and dropout, in that order.

    Noise and blur touch only valid pixels (blurred values are masked
    averages); dropout sets pixels to the missing sentinel. Noisy values are
    clamped to [near, far] to keep the depth image well-formed. Deterministic
    for a fixed generator state.
    """
    values = image.values.copy()
    if params.elastic_amplitude > 0.0:
        values = _elastic_warp(values, params.elastic_amplitude, rng)
    if params.blur_radius > 0:
        values = _box_blur_masked(values, values != MISSING, params.blur_radius)
    if params.noise_sigma > 0.0:
        noise = rng.normal(0.0, params.noise_sigma, size=values.shape)
        valid = values != MISSING
        values[valid] = np.clip(values[valid] + noise[valid], image.near, image.far)
    if params.dropout_prob > 0.0:
        drop = rng.random(size=values.shape) < params.dropout_prob
        values[drop] = MISSING
    return DepthImage(values, image.near, image.far)


def interpolate_missing(image: DepthImage) -> DepthImage:
    """Fill missing pixels with the nearest valid value (Euclidean metric).

    Equidistant candidates resolve to the smallest row-major scan index, so
    the result is deterministic. Valid pixels are never modified.
    """
    valid = image.valid_mask
    if not valid.any():
        raise EmptyDepthError("cannot interpolate an all-missing depth image")
    if valid.all():
        return DepthImage(image.values.copy(), image.near, image.far)
    vr, vc = np.nonzero(valid)  # row-major order, so argmin ties pick scan order
    vals = image.values[vr, vc]
    mr, mc = np.nonzero(~valid)
    out = image.values.copy()
    chunk = max(1, _RASTER_CHUNK_ELEMS // max(1, len(vr)))
    for start in range(0, len(mr), chunk):
        sl = slice(start, start + chunk)
        d2 = (mr[sl, None] - vr[None, :]) ** 2 + (mc[sl, None] - vc[None, :]) ** 2
        out[mr[sl], mc[sl]] = vals[np.argmin(d2, axis=1)]
    return DepthImage(out, image.near, image.far)


def normalize_depth(image: DepthImage) -> np.ndarray:
    """Map metric depth to [0, 1] between the clipping planes."""
    return (image.values - image.near) / (image.far - image.near)


# ---------------------------------------------------------------------------
# binary image files and the dataset manifest
# ---------------------------------------------------------------------------


def save_depth(path, image: DepthImage) -> None:
    h, w = image.values.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<IIIff", FILE_VERSION, w, h, image.near, image.far))
        fh.write(np.ascontiguousarray(image.values, dtype="<f4").tobytes())


def load_depth(path) -> DepthImage:
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: not a depth image file")
    version, w, h, near, far = struct.unpack("<IIIff", data[4:24])
    if version != FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) != 24 + w * h * 4:
        raise FormatError(f"{path}: truncated payload")
    values = np.frombuffer(data, dtype="<f4", count=w * h, offset=24).astype(float)
    return DepthImage(values.reshape(h, w), float(near), float(far))


def save_instance_map(path, imap: InstanceMap) -> None:
    h, w = imap.labels.shape
    with open(path, "wb") as fh:
        fh.write(IMAP_MAGIC)
        fh.write(struct.pack("<III", FILE_VERSION, w, h))
        fh.write(np.ascontiguousarray(imap.labels, dtype="<u2").tobytes())


def load_instance_map(path) -> InstanceMap:
    data = Path(path).read_bytes()
    if data[:4] != IMAP_MAGIC:
        raise FormatError(f"{path}: not an instance map file")
    version, w, h = struct.unpack("<III", data[4:16])
    if version != FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) != 16 + w * h * 2:
        raise FormatError(f"{path}: truncated payload")
    labels = np.frombuffer(data, dtype="<u2", count=w * h, offset=16)
    return InstanceMap(labels.reshape(h, w).copy())


@dataclass
class DatasetManifest:
    """Index of a generated dataset: scene files plus shared metadata."""

    camera: CameraModel
    object_meta: dict
    scenes: list[dict] = field(default_factory=list)  # {"depth", "instance_map", "ground_truth"}


def save_manifest(path, manifest: DatasetManifest) -> None:
    from .gridcodec import _camera_to_dict  # shared serialization

    doc = {
        "schema_version": FILE_VERSION,
        "camera": _camera_to_dict(manifest.camera),
        "object": manifest.object_meta,
        "scenes": manifest.scenes,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_manifest(path) -> DatasetManifest:
    from .gridcodec import camera_from_dict

    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if raw.get("schema_version") != FILE_VERSION:
        raise FormatError(f"{path}: unsupported schema_version {raw.get('schema_version')!r}")
    return DatasetManifest(
        camera=camera_from_dict(raw["camera"]),
        object_meta=dict(raw["object"]),
        scenes=list(raw["scenes"]),
    )


def object_meta(obj: ObjectModel) -> dict:
    """Metadata block embedded in manifests and checkpoints (mesh omitted)."""
    meta = {
        "id": obj.object_id,
        "diameter_m": obj.diameter,
        "symmetry": {"type": obj.symmetry.kind},
        "lambda_m": obj.rep_scale,
    }
    if obj.symmetry.kind == "cyclic":
        meta["symmetry"]["k"] = obj.symmetry.order
    return meta


def object_from_meta(meta: Mapping) -> ObjectModel:
    from .geometry import _parse_symmetry

    return ObjectModel(
        object_id=str(meta["id"]),
        diameter=float(meta["diameter_m"]),
        symmetry=_parse_symmetry(meta["symmetry"]),
        rep_scale=float(meta["lambda_m"]) if meta.get("lambda_m") is not None else None,
    )
