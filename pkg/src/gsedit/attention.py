"""Attention-map normalization, unprojection onto Gaussians, freeze-mask
thresholding, and top-k% pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .render import RenderOptions, render
from .scene import CameraView, GaussianCloud


@dataclass
class AttentionStack:
    """Per-view attention maps, normalized to [0, 1], at render resolution."""

    maps: dict[str, np.ndarray]  # camera id -> (H, W)


def bilinear_resize(image: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Resize an H x W map to (height, width) with bilinear interpolation."""
    image = np.asarray(image, np.float64)
    h, w = image.shape
    th, tw = target_size
    if (h, w) == (th, tw):
        return image.copy()
    ys = np.linspace(0, h - 1, th)
    xs = np.linspace(0, w - 1, tw)
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(image, grid, order=1, mode="nearest")


def normalize_attention(raw_maps: dict[str, list[np.ndarray]],
                        target_size: tuple[int, int]) -> AttentionStack:
    """Per view: bilinear-resize each raw map to target_size, average them,
    then min-max normalize to [0, 1]. A constant map normalizes to zeros."""
    maps = {}
    for view_id, stack in raw_maps.items():
        if not stack:
            raise ContractError(f"view {view_id!r} has an empty attention-map list")
        resized = [bilinear_resize(m, target_size) for m in stack]
        mean = np.mean(resized, axis=0)
        lo, hi = float(mean.min()), float(mean.max())
        maps[view_id] = (mean - lo) / (hi - lo) if hi > lo else np.zeros_like(mean)
    return AttentionStack(maps=maps)


def accumulate_attention(cloud: GaussianCloud, cameras: list[CameraView],
                         stack: AttentionStack,
                         render_opts: RenderOptions | None = None) -> np.ndarray:
    """Per-Gaussian weight: mean attention value over every pixel the Gaussian
    touched, pooled across all views. Gaussians with no footprint get 0."""
    opts = render_opts or RenderOptions()
    by_id = {c.id: c for c in cameras}
    missing = [vid for vid in stack.maps if vid not in by_id]
    if missing:
        raise ContractError(f"attention maps without a camera: {missing}")

    # extended-precision accumulator: scatter-add is sequential, and the extra
    # mantissa bits keep the pooled mean at the correctly rounded double
    sums = np.zeros(cloud.count, dtype=np.longdouble)
    counts = np.zeros(cloud.count, dtype=np.int64)
    for view_id, attn in stack.maps.items():
        cam = by_id[view_id]
        if attn.shape != (cam.height, cam.width):
            raise ContractError(
                f"attention map for {view_id!r} is {attn.shape}, camera renders "
                f"{(cam.height, cam.width)}"
            )
        ropts = RenderOptions(
            background=opts.background,
            tile_size=opts.tile_size,
            transmittance_floor=opts.transmittance_floor,
            alpha_clamp=opts.alpha_clamp,
            record_contribs=True,
            z_near=opts.z_near,
            cov_blur=opts.cov_blur,
            radius_sigmas=opts.radius_sigmas,
        )
        contribs = render(cloud, cam, ropts).contribs
        vals = attn.reshape(-1)[contribs.pixel_index].astype(np.longdouble)
        np.add.at(sums, contribs.gaussian_index, vals)
        np.add.at(counts, contribs.gaussian_index, 1)
    weights = np.zeros(cloud.count)
    seen = counts > 0
    weights[seen] = (sums[seen] / counts[seen]).astype(np.float64)
    return weights


def threshold_weights(weights: np.ndarray, w_thres: float = 0.1):
    """Zero weights below the threshold; the freeze mask marks exactly the
    zeroed entries. The boundary w == w_thres is kept."""
    if not 0.0 <= w_thres <= 1.0:
        raise ContractError(f"w_thres must be in [0, 1], got {w_thres}")
    w = np.asarray(weights, np.float64)
    keep = w >= w_thres
    w_out = np.where(keep, w, 0.0)
    return w_out, ~keep


def prune_topk(cloud: GaussianCloud, weights: np.ndarray, k_percent: float = 0.15):
    """Remove the top-k% of Gaussians by thresholded attention weight.

    The cut weight tau is the smallest weight among the top ceil(k% * N)
    ranked entries; every Gaussian with weight >= tau goes, so ties at tau may
    prune more than ceil(k% * N). Returns (surviving cloud, pruned indices)."""
    if not 0.0 <= k_percent <= 100.0:
        raise ContractError(f"k_percent must be in [0, 100], got {k_percent}")
    w = np.asarray(weights, np.float64)
    if w.shape[0] != cloud.count:
        raise ContractError("weights length does not match cloud count")
    n = cloud.count
    m = math.ceil(k_percent / 100.0 * n)
    if m == 0 or n == 0:
        return cloud.copy(), np.zeros(0, dtype=np.int64)
    tau = np.sort(w)[::-1][m - 1]
    if tau <= 0.0:  # zero-weight Gaussians are never edit-relevant, keep them
        return cloud.copy(), np.zeros(0, dtype=np.int64)
    pruned = np.flatnonzero(w >= tau)
    keep = np.flatnonzero(w < tau)
    return cloud.subset(keep), pruned
