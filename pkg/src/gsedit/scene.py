"""Scene data model: Gaussian clouds, pinhole cameras, per-view bundles,
serialization, and synthetic-scene generation.

Conventions used throughout the toolkit:
  * world point X maps to camera frame as x_cam = R @ X + t, camera looks
    down +z (visible iff z > 0)
  * pixel = (fx * x / z + cx, fy * y / z + cy), pixel centers at integer
    coordinates
  * quaternions are (w, x, y, z), unit norm
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError, ValidationError
from .imgio import read_weights_sidecar, write_weights_sidecar

QUAT_NORM_TOL = 1e-6
ROT_ORTHO_TOL = 1e-4

# required PLY vertex properties, community 3DGS layout
_PLY_REQUIRED = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def normalize_quaternions(q):
    """Renormalize an (N, 4) quaternion array to unit norm (float64 math)."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DataError("zero or non-finite quaternion encountered")
    return q / norms


def quaternion_to_matrix(q):
    """(N, 4) unit quaternions -> (N, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class GaussianCloud:
    """Arrays of per-Gaussian parameters.

    positions: (N, 3) centers, world units
    rotations: (N, 4) unit quaternions (w, x, y, z)
    log_scales: (N, 3), exp gives per-axis standard deviation
    colors: (N, 3) degree-0 SH coefficients
    opacity_logits: (N,), sigmoid gives opacity in (0, 1)
    attention_weights: optional (N,) in [0, 1]
    frozen: optional (N,) bool gradient mask
    sh_rest: opaque higher-order SH payload preserved through PLY round trips
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    attention_weights: np.ndarray | None = None
    frozen: np.ndarray | None = None
    sh_rest: np.ndarray | None = None
    sh_rest_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float32))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float32))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float32))
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float32))
        self.opacity_logits = np.atleast_1d(np.asarray(self.opacity_logits, dtype=np.float32))
        if self.attention_weights is not None:
            self.attention_weights = np.atleast_1d(
                np.asarray(self.attention_weights, dtype=np.float32)
            )
        if self.frozen is not None:
            self.frozen = np.atleast_1d(np.asarray(self.frozen, dtype=bool))
        if self.sh_rest is not None:
            self.sh_rest = np.asarray(self.sh_rest, dtype=np.float32).reshape(self.count, -1)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def validate(self):
        n = self.count
        for name in ("rotations", "log_scales", "colors", "opacity_logits"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")
        for name, arr in (("attention_weights", self.attention_weights), ("frozen", self.frozen)):
            if arr is not None and arr.shape[0] != n:
                raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")
        if n == 0:
            return self
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("non-finite positions")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > QUAT_NORM_TOL):
            raise ValidationError("quaternions not unit norm within 1e-6")
        scales = np.exp(self.log_scales.astype(np.float64))
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValidationError("exp(log_scales) must be strictly positive and finite")
        if not np.all(np.isfinite(self.opacity_logits)):
            raise ValidationError("non-finite opacity logits")
        if self.attention_weights is not None:
            aw = self.attention_weights
            if np.any(aw < 0) or np.any(aw > 1) or not np.all(np.isfinite(aw)):
                raise ValidationError("attention_weights must lie in [0, 1]")
        return self

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            colors=self.colors.copy(),
            opacity_logits=self.opacity_logits.copy(),
            attention_weights=None if self.attention_weights is None else self.attention_weights.copy(),
            frozen=None if self.frozen is None else self.frozen.copy(),
            sh_rest=None if self.sh_rest is None else self.sh_rest.copy(),
            sh_rest_names=list(self.sh_rest_names),
        )

    def subset(self, indices) -> "GaussianCloud":
        """New cloud keeping the given Gaussian indices (order preserved)."""
        idx = np.asarray(indices)
        if idx.size == 0:
            idx = np.zeros(0, dtype=np.int64)
        return GaussianCloud(
            positions=self.positions[idx],
            rotations=self.rotations[idx],
            log_scales=self.log_scales[idx],
            colors=self.colors[idx],
            opacity_logits=self.opacity_logits[idx],
            attention_weights=None if self.attention_weights is None else self.attention_weights[idx],
            frozen=None if self.frozen is None else self.frozen[idx],
            sh_rest=None if self.sh_rest is None else self.sh_rest[idx],
            sh_rest_names=list(self.sh_rest_names),
        )

    @property
    def opacities(self) -> np.ndarray:
        """Sigmoid-activated opacities in (0, 1), float64."""
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))


def empty_cloud() -> GaussianCloud:
    z3 = np.zeros((0, 3), np.float32)
    return GaussianCloud(z3, np.zeros((0, 4), np.float32), z3, z3, np.zeros((0,), np.float32))


@dataclass
class CameraView:
    """Pinhole intrinsics plus world-to-camera rigid pose."""

    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3), world-to-camera, orthonormal
    translation: np.ndarray  # (3,), camera frame

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self, ortho_tol=ROT_ORTHO_TOL):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"camera {self.id}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"camera {self.id}: image size must be >= 1")
        R = self.rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) > ortho_tol:
            raise ValidationError(f"camera {self.id}: rotation not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValidationError(f"camera {self.id}: rotation is a reflection (det < 0)")
        return self

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, c = -R^T t."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction (+z of the camera frame) in world coordinates."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def world_to_camera(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def project(self, points_cam) -> np.ndarray:
        """Camera-frame points (N, 3) -> pixel coordinates (N, 2). No z check."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        return np.stack(
            [self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1
        )

    def unproject(self, pixels, depths) -> np.ndarray:
        """Pixel coords (N, 2) and camera-frame z (N,) -> world points (N, 3)."""
        px = np.asarray(pixels, dtype=np.float64)
        z = np.asarray(depths, dtype=np.float64)
        x = (px[..., 0] - self.cx) / self.fx * z
        y = (px[..., 1] - self.cy) / self.fy * z
        cam = np.stack([x, y, z], axis=-1)
        return (cam - self.translation) @ self.rotation


@dataclass
class ViewBundle:
    """Per-view package: image plus optional depth, object mask, and score."""

    camera_id: str
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray | None = None  # (H, W) camera-frame z
    mask: np.ndarray | None = None  # (H, W) bool, True = target object
    score: float | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)

    def validate(self, camera: CameraView | None = None):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValidationError(f"view {self.camera_id}: rgb must be H x W x 3")
        h, w = self.rgb.shape[:2]
        if camera is not None and (h != camera.height or w != camera.width):
            raise ValidationError(
                f"view {self.camera_id}: image {w}x{h} does not match camera "
                f"{camera.width}x{camera.height}"
            )
        if self.depth is not None:
            if self.depth.shape != (h, w):
                raise ValidationError(f"view {self.camera_id}: depth shape mismatch")
            finite = np.isfinite(self.depth)
            if np.any(self.depth[finite] <= 0):
                raise ValidationError(f"view {self.camera_id}: finite depths must be > 0")
        if self.mask is not None and self.mask.shape != (h, w):
            raise ValidationError(f"view {self.camera_id}: mask shape mismatch")
        return self


# --- PLY serialization -------------------------------------------------------


def _sidecar_paths(path):
    p = Path(path)
    return p.with_suffix(".weights.f32"), p.with_suffix(".frozen.f32")


def save_ply(cloud: GaussianCloud, path):
    """Write the cloud in the community 3DGS binary PLY layout.

    attention_weights and frozen flags, when present, go to sidecar files so
    the main file stays consumable by standard viewers.
    """
    cloud.validate()
    n = cloud.count
    names = (
        ["x", "y", "z", "nx", "ny", "nz"]
        + [f"f_dc_{i}" for i in range(3)]
        + list(cloud.sh_rest_names)
        + ["opacity"]
        + [f"scale_{i}" for i in range(3)]
        + [f"rot_{i}" for i in range(4)]
    )
    cols = [
        cloud.positions,
        np.zeros((n, 3), np.float32),  # normals, discarded on load
        cloud.colors,
    ]
    if cloud.sh_rest is not None:
        cols.append(cloud.sh_rest)
    cols += [
        cloud.opacity_logits.reshape(n, 1),
        cloud.log_scales,
        cloud.rotations,
    ]
    data = np.ascontiguousarray(np.concatenate(cols, axis=1).astype("<f4"))
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())
    weights_path, frozen_path = _sidecar_paths(path)
    if cloud.attention_weights is not None:
        write_weights_sidecar(weights_path, cloud.attention_weights)
    if cloud.frozen is not None:
        write_weights_sidecar(frozen_path, cloud.frozen.astype(np.float32))


def load_ply(path) -> GaussianCloud:
    """Load a 3DGS-layout binary PLY; quaternions renormalized, normals dropped.

    Unknown float properties (f_rest_*) are preserved as an opaque payload and
    echoed verbatim by save_ply.
    """
    with open(path, "rb") as f:
        first = f.readline().strip()
        if first != b"ply":
            raise FormatError("not a PLY file")
        fmt = None
        n = None
        names = []
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise FormatError("PLY header without end_header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] != "float":
                    raise FormatError(f"unsupported property type {tokens[1]}")
                names.append(tokens[2])
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise FormatError(f"unsupported PLY format {fmt!r}")
        if n is None:
            raise FormatError("PLY has no vertex element")
        missing = [p for p in _PLY_REQUIRED if p not in names]
        if missing:
            raise FormatError(f"missing required PLY property {missing[0]!r}")
        raw = f.read(n * len(names) * 4)
        if len(raw) != n * len(names) * 4:
            raise FormatError("PLY payload truncated")
    table = np.frombuffer(raw, dtype="<f4").reshape(n, len(names))
    col = {name: table[:, i] for i, name in enumerate(names)}

    for name in names:
        if name.startswith(("nx", "ny", "nz")):
            continue  # normals are discarded, NaN normals tolerated
        bad = np.flatnonzero(~np.isfinite(col[name]))
        if bad.size:
            raise DataError(f"non-finite value in property {name!r} at vertex {bad[0]}")

    rest_names = [p for p in names if p not in _PLY_REQUIRED]
    positions = np.stack([col["x"], col["y"], col["z"]], axis=1)
    colors = np.stack([col[f"f_dc_{i}"] for i in range(3)], axis=1)
    log_scales = np.stack([col[f"scale_{i}"] for i in range(3)], axis=1)
    rotations = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1)
    if n:
        rotations = normalize_quaternions(rotations).astype(np.float32)
    sh_rest = np.stack([col[p] for p in rest_names], axis=1) if rest_names else None

    cloud = GaussianCloud(
        positions=positions.reshape(n, 3),
        rotations=rotations.reshape(n, 4),
        log_scales=log_scales.reshape(n, 3),
        colors=colors.reshape(n, 3),
        opacity_logits=col["opacity"].copy().reshape(n),
        sh_rest=sh_rest,
        sh_rest_names=rest_names,
    )
    weights_path, frozen_path = _sidecar_paths(path)
    if weights_path.exists():
        w = read_weights_sidecar(weights_path)
        if w.shape[0] != n:
            raise DataError("weights sidecar length does not match vertex count")
        cloud.attention_weights = w
    if frozen_path.exists():
        fr = read_weights_sidecar(frozen_path)
        if fr.shape[0] != n:
            raise DataError("frozen sidecar length does not match vertex count")
        cloud.frozen = fr > 0.5
    return cloud.validate()


# --- camera serialization ----------------------------------------------------


def load_cameras(path) -> list[CameraView]:
    """Load a JSON array of cameras, preserving order."""
    with open(path) as f:
        entries = json.load(f)
    if not isinstance(entries, list):
        raise FormatError("cameras file must be a JSON array")
    cameras = []
    seen = set()
    for e in entries:
        cam = CameraView(
            id=str(e["id"]),
            fx=float(e["fx"]),
            fy=float(e["fy"]),
            cx=float(e["cx"]),
            cy=float(e["cy"]),
            width=int(e["width"]),
            height=int(e["height"]),
            rotation=np.asarray(e["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(e["translation"], dtype=np.float64),
        )
        cam.validate()
        if cam.id in seen:
            raise ValidationError(f"duplicate camera id {cam.id!r}")
        seen.add(cam.id)
        cameras.append(cam)
    return cameras


def save_cameras(cameras, path):
    entries = []
    for cam in cameras:
        entries.append(
            {
                "id": cam.id,
                "width": cam.width,
                "height": cam.height,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "rotation": [float(v) for v in cam.rotation.reshape(9)],
                "translation": [float(v) for v in cam.translation],
            }
        )
    with open(path, "w") as f:
        json.dump(entries, f, indent=2)
        f.write("\n")


def camera_extent(cameras) -> float:
    """Bounding-sphere diameter of the camera centers (scene extent proxy)."""
    centers = np.array([c.center for c in cameras])
    mid = centers.mean(axis=0)
    return 2.0 * float(np.max(np.linalg.norm(centers - mid, axis=1))) if len(cameras) else 0.0


# --- synthetic scenes --------------------------------------------------------


@dataclass
class SyntheticSceneSpec:
    count: int = 100
    extent: float = 2.0
    color_scheme: str = "random"  # "random" | "grey"
    camera_count: int = 8
    orbit_radius: float = 5.0
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0


def look_at_camera(cam_id, center, target, fx, fy, width, height) -> CameraView:
    """Build a camera at `center` looking at `target` (+z forward convention)."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ContractError("camera center coincides with look-at target")
    forward = forward / norm
    ref = np.array([0.0, 0.0, 1.0])
    if abs(forward @ ref) > 0.999:
        ref = np.array([0.0, 1.0, 0.0])
    right = np.cross(ref, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraView(
        id=str(cam_id),
        fx=fx,
        fy=fy,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        rotation=R,
        translation=-R @ center,
    )


def make_synthetic_scene(spec: SyntheticSceneSpec):
    """Deterministic test scene: a random cloud with cameras on a circular
    orbit around the cloud centroid."""
    if spec.camera_count < 1:
        raise ValidationError("camera_count must be >= 1")
    if spec.extent <= 0:
        raise ValidationError("extent must be positive")
    if spec.count < 0:
        raise ValidationError("count must be nonnegative")
    rng = np.random.default_rng(spec.seed)
    n = spec.count
    positions = rng.uniform(-spec.extent / 2, spec.extent / 2, size=(n, 3))
    rotations = normalize_quaternions(rng.normal(size=(n, 4))) if n else np.zeros((0, 4))
    log_scales = np.log(rng.uniform(0.03, 0.10, size=(n, 3)) * spec.extent)
    if spec.color_scheme == "grey":
        colors = np.repeat(rng.uniform(0.2, 0.8, size=(n, 1)), 3, axis=1)
    else:
        colors = rng.uniform(0.0, 1.0, size=(n, 3))
    opacity_logits = rng.uniform(0.0, 2.0, size=n)
    cloud = GaussianCloud(
        positions=positions.reshape(n, 3),
        rotations=rotations.reshape(n, 4),
        log_scales=log_scales.reshape(n, 3),
        colors=colors.reshape(n, 3),
        opacity_logits=opacity_logits,
    ).validate()

    # centroid of the stored (float32) positions so orbit geometry is exact
    # with respect to the cloud as serialized
    centroid = cloud.positions.astype(np.float64).mean(axis=0) if n else np.zeros(3)
    w, h = spec.image_size
    fx = w * spec.orbit_radius / (2.0 * spec.extent)
    cameras = []
    for i in range(spec.camera_count):
        theta = 2.0 * np.pi * i / spec.camera_count
        center = centroid + spec.orbit_radius * np.array([np.cos(theta), np.sin(theta), 0.0])
        cameras.append(look_at_camera(f"cam{i:03d}", center, centroid, fx, fx, w, h))
        cameras[-1].validate()
    return cloud, cameras
