"""Library walkthrough: recolor a region of a synthetic scene.

Builds a small Gaussian scene, renders it, "edits" the renders by recoloring
a patch, localizes the edit with attention weights, trims the most
edit-relevant Gaussians, and selectively optimizes the survivors toward the
edited views. Writes before/after images into demos/out/.

Run from the repository root:

    python demos/recolor_walkthrough.py
"""

import pathlib

import numpy as np

from gsedit import (
    AttentionStack,
    OptimizeConfig,
    SyntheticSceneSpec,
    accumulate_attention,
    make_synthetic_scene,
    normalize_attention,
    optimize_scene,
    prune_topk,
    render,
    threshold_weights,
    write_png,
)

out_dir = pathlib.Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

# ---------------------------------------------------------------------------
# 1. a synthetic scene and its source renders
# ---------------------------------------------------------------------------
spec = SyntheticSceneSpec(count=40, camera_count=4, image_size=(48, 48), seed=1)
cloud, cameras = make_synthetic_scene(spec)
source = {cam.id: render(cloud, cam) for cam in cameras}
print(f"scene: {cloud.count} Gaussians, {len(cameras)} cameras")

# ---------------------------------------------------------------------------
# 2. a stand-in for the diffusion edit: push the top-left quarter of every
#    render toward red. A real deployment would route the renders through a
#    text-conditioned editor via edit_image + ExternalProcessProvider.
# ---------------------------------------------------------------------------
edited = {}
for cam in cameras:
    img = source[cam.id].rgb.copy()
    qh, qw = img.shape[0] // 2, img.shape[1] // 2
    img[:qh, :qw, 0] = np.clip(img[:qh, :qw, 0] + 0.5, 0.0, 1.0)
    edited[cam.id] = img
    write_png(out_dir / f"{cam.id}_source.png", source[cam.id].rgb)
    write_png(out_dir / f"{cam.id}_edited.png", img)

# ---------------------------------------------------------------------------
# 3. localize the edit: per-view change maps -> per-Gaussian weights
# ---------------------------------------------------------------------------
raw = {cam.id: [np.abs(edited[cam.id] - source[cam.id].rgb).mean(axis=2)]
       for cam in cameras}
stack = normalize_attention(raw, spec.image_size)
weights = accumulate_attention(cloud, cameras, stack)
weights, freeze = threshold_weights(weights, 0.1)
print(f"{int(freeze.sum())} Gaussians frozen (below the 0.1 weight threshold)")

# ---------------------------------------------------------------------------
# 4. trim the very top of the weight ranking, then optimize the rest
# ---------------------------------------------------------------------------
trimmed, pruned = prune_topk(cloud, weights, k_percent=0.15)
survivors = np.setdiff1d(np.arange(cloud.count), pruned)
print(f"pruned {len(pruned)} Gaussians, {trimmed.count} remain")

targets = [edited[cam.id] for cam in cameras]
final, history = optimize_scene(
    trimmed, cameras, targets,
    freeze_mask=freeze[survivors],
    cfg=OptimizeConfig(epochs=40, densify_interval=0, lr_color=1e-2),
)
print(f"loss {history[0].total:.4f} -> {history[-1].total:.4f} "
      f"over {len(history)} iterations")

for cam in cameras:
    write_png(out_dir / f"{cam.id}_final.png", render(final, cam).rgb)
print(f"wrote renders to {out_dir}/")
