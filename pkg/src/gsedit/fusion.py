"""Depth-guided multi-view fusion.

Builds the fused target-view image used as image conditioning during editing:
rank-filter edited views by alignment score, pick the nearest neighbor views,
reproject them into the target image plane via their depth maps, blend
overlapping contributions far-to-near, and fall back to the source image in
uncovered / background regions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .scene import CameraView, ViewBundle


@dataclass
class FusionConfig:
    n_adjacent: int = 5
    keep_fraction: float = 0.85
    orientation_weight: float = 1.0  # lambda in the view-distance metric
    z_near: float = 0.01


@dataclass
class SparseLayer:
    """One source view reprojected into the target image plane.

    color/depth are dense arrays; `present` marks pixels that received a
    contribution. Depths are target-camera-frame z.
    """

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    present: np.ndarray  # (H, W) bool


def rank_and_filter(bundles: list[ViewBundle], keep_fraction: float = 0.85) -> list[ViewBundle]:
    """Sort bundles by descending score and keep the top ceil(keep_fraction * n).

    Ties keep original order (stable sort)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ContractError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    missing = [b.camera_id for b in bundles if b.score is None]
    if missing:
        raise ContractError(f"bundles without a score: {missing}")
    n_keep = math.ceil(keep_fraction * len(bundles))
    order = sorted(range(len(bundles)), key=lambda i: (-bundles[i].score, i))
    return [bundles[i] for i in order[:n_keep]]


def select_adjacent_views(target_camera: CameraView, candidate_cameras: list[CameraView],
                          n: int = 5, orientation_weight: float = 1.0) -> list[int]:
    """Indices of the n candidates closest to the target view.

    Distance is position offset normalized by the bounding-sphere diameter of
    all camera centers plus an orientation penalty on the optical axes:
    d = |c_i - c_t| / E + lambda * (1 - <z_i, z_t>).
    """
    if not candidate_cameras:
        raise ContractError("empty candidate camera list")
    if n < 1:
        raise ContractError("n must be >= 1")
    centers = np.array([c.center for c in candidate_cameras] + [target_camera.center])
    mid = centers.mean(axis=0)
    extent = 2.0 * float(np.max(np.linalg.norm(centers - mid, axis=1)))
    if extent == 0.0:
        extent = 1.0  # all cameras colocated; only orientation matters
    zt = target_camera.optical_axis
    ct = target_camera.center
    d = [
        float(np.linalg.norm(c.center - ct)) / extent
        + orientation_weight * (1.0 - float(c.optical_axis @ zt))
        for c in candidate_cameras
    ]
    order = sorted(range(len(candidate_cameras)), key=lambda i: (d[i], i))
    return order[: min(n, len(candidate_cameras))]


def reproject_view(source: ViewBundle, source_camera: CameraView,
                   target_camera: CameraView, z_near: float = 0.01) -> SparseLayer:
    """Warp a source view into the target image plane through its depth map.

    Every source pixel with finite depth is unprojected to world, transformed
    into the target frame, and scattered to the nearest integer target pixel.
    Collisions within the layer keep the smaller target-frame depth."""
    if source.depth is None:
        raise ContractError(f"view {source.camera_id} has no depth map")
    h_t, w_t = target_camera.height, target_camera.width
    color = np.zeros((h_t, w_t, 3))
    depth = np.zeros((h_t, w_t))
    present = np.zeros((h_t, w_t), dtype=bool)

    finite = np.isfinite(source.depth)
    if not np.any(finite):
        return SparseLayer(color, depth, present)
    ys, xs = np.nonzero(finite)
    pix = np.stack([xs, ys], axis=1).astype(np.float64)
    world = source_camera.unproject(pix, source.depth[ys, xs])
    cam_t = target_camera.world_to_camera(world)
    z = cam_t[:, 2]
    front = z > z_near
    if not np.any(front):
        return SparseLayer(color, depth, present)
    cam_t, z = cam_t[front], z[front]
    rgb = source.rgb[ys[front], xs[front]]
    uv = np.rint(target_camera.project(cam_t)).astype(np.int64)
    inb = (uv[:, 0] >= 0) & (uv[:, 0] < w_t) & (uv[:, 1] >= 0) & (uv[:, 1] < h_t)
    uv, z, rgb = uv[inb], z[inb], rgb[inb]

    # z-buffer scatter: write far-to-near so the nearest contribution wins
    order = np.argsort(-z, kind="stable")
    ty, tx = uv[order, 1], uv[order, 0]
    color[ty, tx] = rgb[order]
    depth[ty, tx] = z[order]
    present[ty, tx] = True
    return SparseLayer(color, depth, present)


def blend_layers(layers: list[SparseLayer], target_size: tuple[int, int]):
    """Depth-ordered blending of reprojected layers.

    Per pixel, contributions are visited in descending depth. The farthest
    contribution initializes the accumulator; each nearer layer l then blends
    as I <- (1 - w) * I_l + w * I with w = D_l / (D_l + D_prev), D_prev being
    the previous (farther) contribution's depth. Returns the blended image and
    a coverage mask."""
    if not layers:
        raise ContractError("blend_layers needs at least one layer")
    h, w = target_size
    depths = np.stack([np.where(l.present, l.depth, -np.inf) for l in layers])
    colors = np.stack([l.color for l in layers])

    order = np.argsort(-depths, axis=0, kind="stable")  # (L, H, W)
    rows, cols = np.mgrid[0:h, 0:w]
    acc = np.zeros((h, w, 3))
    d_prev = np.zeros((h, w))
    started = np.zeros((h, w), dtype=bool)
    for l in range(len(layers)):
        li = order[l]
        dep = depths[li, rows, cols]
        col = colors[li, rows, cols]
        pres = np.isfinite(dep)
        first = pres & ~started
        cont = pres & started
        acc[first] = col[first]
        d_prev[first] = dep[first]
        if np.any(cont):
            wgt = dep[cont] / (dep[cont] + d_prev[cont])
            acc[cont] = (1.0 - wgt[:, None]) * col[cont] + wgt[:, None] * acc[cont]
            d_prev[cont] = dep[cont]
        started |= pres
    return acc, started


def refine_background(fused_image, coverage_mask, source_bundle: ViewBundle, object_mask):
    """Composite the fused object over the source background.

    Output is the fused image where the object mask is set (and covered), the
    source image elsewhere; masked-but-uncovered pixels also fall back to the
    source."""
    fused = np.asarray(fused_image, dtype=np.float64)
    coverage = np.asarray(coverage_mask, dtype=bool)
    mask = np.asarray(object_mask, dtype=bool)
    src = source_bundle.rgb
    if fused.shape != src.shape or mask.shape != fused.shape[:2] or coverage.shape != mask.shape:
        raise ContractError(
            f"shape mismatch: fused {fused.shape}, source {src.shape}, "
            f"mask {mask.shape}, coverage {coverage.shape}"
        )
    out = src.copy()
    use_fused = mask & coverage
    out[use_fused] = fused[use_fused]
    return out


def fuse_views(target_bundle: ViewBundle, target_camera: CameraView,
               sources: list[tuple[ViewBundle, CameraView]],
               config: FusionConfig | None = None) -> np.ndarray:
    """Full fusion for one target view: neighbor selection, reprojection,
    depth-ordered blending, and background refinement.

    `sources` must already be rank-filtered. The object mask comes from
    target_bundle.mask; without one, every covered pixel keeps the fused color
    and uncovered pixels fall back to the target's own image."""
    config = config or FusionConfig()
    if not sources:
        raise ContractError("fuse_views needs at least one source view")
    cams = [cam for _, cam in sources]
    chosen = select_adjacent_views(
        target_camera, cams, n=config.n_adjacent, orientation_weight=config.orientation_weight
    )
    layers = [
        reproject_view(sources[i][0], sources[i][1], target_camera, z_near=config.z_near)
        for i in chosen
    ]
    fused, coverage = blend_layers(layers, (target_camera.height, target_camera.width))
    mask = target_bundle.mask
    if mask is None:
        mask = np.ones(coverage.shape, dtype=bool)
    return refine_background(fused, coverage, target_bundle, mask)
