"""Acceptance gate: one test per release criterion, each printing a single
PASS/FAIL line. Run with `pytest tests/test_acceptance.py -v -s`."""

import json
import time

import numpy as np
import pytest

from gsedit import (
    AttentionStack,
    CameraView,
    FusionConfig,
    GaussianCloud,
    GuidanceScales,
    OptimizeConfig,
    SamplerConfig,
    TrueNoiseOracle,
    ViewBundle,
    accumulate_attention,
    combine_fused_guidance,
    combine_image_text,
    edit_image,
    fuse_views,
    load_cameras,
    load_ply,
    normalize_quaternions,
    optimize_scene,
    prune_topk,
    render,
    save_cameras,
    save_ply,
    threshold_weights,
)
from gsedit.cli import PipelineConfig, main
from gsedit.render import RenderOptions, arrays_from_cloud, backward_arrays, render_arrays
from oracles import naive_attention_weights, naive_fuse, naive_render


def _report(num, desc, ok):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {desc}")
    assert ok, f"criterion {num}: {desc}"


def test_criterion_1_guidance_reduction_identity():
    # with the fused and source conditions collapsed to one image condition,
    # scales (7.5, 1.0, 0.5) must reduce to two-condition guidance (1.5, 7.5)
    rng = np.random.default_rng(11)
    t0 = time.monotonic()
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(2, 9, size=3))
        e_u, e_img, e_it = (rng.standard_normal(shape) for _ in range(3))
        three = combine_fused_guidance(e_u, e_img, e_it, e_img,
                                       GuidanceScales(text=7.5, fusion=1.0, source=0.5))
        two = combine_image_text(e_u, e_img, e_it, image_scale=1.5, text_scale=7.5)
        worst = max(worst, float(np.abs(three - two).max()))
    elapsed = time.monotonic() - t0
    _report(1, f"guidance reduction identity, max abs diff {worst:.2e} over 100 "
               f"tensor sets in {elapsed:.2f}s",
            worst <= 1e-12 and elapsed < 1.0)


def test_criterion_2_gradient_correctness(grad_scene):
    cloud, cam = grad_scene
    params = arrays_from_cloud(cloud)
    opts = RenderOptions()
    upstream = np.random.default_rng(1).standard_normal((cam.height, cam.width, 3))
    rng = np.random.default_rng(0)

    def loss():
        return float(np.sum(render_arrays(params, cam, opts).rgb * upstream))

    t0 = time.monotonic()
    grads = backward_arrays(params, cam, upstream, opts)
    h = 1e-4
    checked = 0
    worst = 0.0
    for group in ("positions", "rotations", "log_scales", "colors", "opacity_logits"):
        arr = getattr(params, group)
        g = getattr(grads, group)
        for fi in rng.choice(arr.size, size=min(25, arr.size), replace=False):
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss()
            arr[idx] = orig - h
            lm = loss()
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = g[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
            checked += 1
    elapsed = time.monotonic() - t0
    _report(2, f"analytic vs finite-difference gradients, {checked} params, "
               f"worst rel err {worst:.2e} in {elapsed:.1f}s",
            checked >= 100 and worst < 1e-3 and elapsed < 30.0)


def test_criterion_3_compositing_energy(grad_scene, small_scene, fusion_scene):
    # telescoping identity on every bundled fixture
    worst = 0.0
    fixtures = ([(grad_scene[0], grad_scene[1])]
                + [(small_scene[0], c) for c in small_scene[1]]
                + [(fusion_scene[0], c) for c in fusion_scene[1]])
    for cloud, cam in fixtures:
        out = render(cloud, cam, RenderOptions(record_contribs=True))
        c = out.contribs
        floor = RenderOptions().transmittance_floor
        weights = np.zeros(cam.height * cam.width)
        t_final = np.ones(cam.height * cam.width)
        np.add.at(weights, c.pixel_index,
                  np.where(c.transmittance >= floor, c.alpha * c.transmittance, 0.0))
        for pix, a, t in zip(c.pixel_index, c.alpha, c.transmittance):
            if t >= floor:
                t_final[pix] *= 1.0 - a
        worst = max(worst, float(np.abs(weights + t_final - 1.0).max()))

    # two coincident splats, opacity 0.5 each, over a blue background:
    # C = 0.5 c_front + 0.5*0.5 c_back + 0.25 bg = (0.5, 0.25, 0.25)
    cloud = GaussianCloud(
        positions=[[0.0, 0.0, 4.0], [0.0, 0.0, 5.0]],
        rotations=[[1.0, 0, 0, 0]] * 2,
        log_scales=[[np.log(0.1)] * 3] * 2,
        colors=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        opacity_logits=[0.0, 0.0],
    )
    cam = CameraView("c", 100.0, 100.0, 8.0, 8.0, 17, 17, np.eye(3), np.zeros(3))
    rgb = render(cloud, cam, RenderOptions(background=[0.0, 0.0, 1.0])).rgb
    hand_err = float(np.abs(rgb[8, 8] - [0.5, 0.25, 0.25]).max())
    _report(3, f"compositing energy within {worst:.2e}, two-splat hand value "
               f"within {hand_err:.2e}",
            worst < 1e-6 and hand_err < 1e-6)


def test_criterion_4_fusion_oracle(fusion_scene):
    cloud, cams = fusion_scene
    sources = []
    for cam in cams:
        res = render(cloud, cam)
        depth = np.where(res.alpha > 0.5, res.depth, np.nan)
        sources.append((ViewBundle(cam.id, res.rgb, depth=depth), cam))

    cfg = FusionConfig()
    worst = 0.0
    for target_bundle, target_cam in sources:
        others = [s for s in sources if s[1].id != target_cam.id]
        got = fuse_views(target_bundle, target_cam, others, cfg)
        want, _ = naive_fuse(target_bundle, target_cam, others,
                             n_adjacent=cfg.n_adjacent,
                             orientation_weight=cfg.orientation_weight)
        worst = max(worst, float(np.abs(got - want).max()))

    # a single source that is the target view must pass through bit-exactly
    bundle, cam = sources[0]
    fused = fuse_views(bundle, cam, [(bundle, cam)])
    covered = np.isfinite(bundle.depth)
    identity_exact = np.array_equal(fused[covered], bundle.rgb[covered])
    _report(4, f"fusion matches brute-force oracle within {worst:.2e}; "
               f"identity view bit-exact: {identity_exact}",
            worst < 1e-5 and identity_exact)


def test_criterion_5_pooled_attention(small_scene):
    # hand example: one Gaussian covering a 2x5 view at attention 0.2 and a
    # 5x6 view at 0.6 pools to (0.2*10 + 0.6*30)/40 = 0.5
    cloud = GaussianCloud([[0.0, 0.0, 0.0]], [[1.0, 0, 0, 0]],
                          [[np.log(2.0)] * 3], [[1.0, 1.0, 1.0]], [4.0])
    cam_a = CameraView("a", 4.0, 4.0, 2.0, 0.5, 5, 2, np.eye(3), [0.0, 0.0, 3.0])
    cam_b = CameraView("b", 4.0, 4.0, 2.5, 2.0, 6, 5, np.eye(3), [0.0, 0.0, 3.0])
    opts = RenderOptions(record_contribs=True)
    m1 = len(render(cloud, cam_a, opts).contribs.pixel_index)
    m2 = len(render(cloud, cam_b, opts).contribs.pixel_index)
    stack = AttentionStack({"a": np.full((2, 5), 0.2), "b": np.full((5, 6), 0.6)})
    w = accumulate_attention(cloud, [cam_a, cam_b], stack)
    hand_exact = (m1, m2) == (10, 30) and w[0] == 0.5

    s_cloud, s_cams = small_scene
    s_cams = s_cams[:3]
    rng = np.random.default_rng(5)
    maps = {c.id: rng.uniform(size=(24, 24)) for c in s_cams}
    got = accumulate_attention(s_cloud, s_cams, AttentionStack(maps))
    want = naive_attention_weights(s_cloud, s_cams, maps)
    oracle_err = float(np.abs(got - want).max())
    _report(5, f"pooled mean hand example exact (footprints {m1}/{m2}, "
               f"w={w[0]!r}); 3-view oracle err {oracle_err:.2e}",
            hand_exact and oracle_err < 1e-9)


def _edit_fixture(seed=0):
    """Synthetic recolor edit: an 8x8 patch of Gaussians changes color, one
    near-opaque blocker floats in front of it, and the background is static.
    The blocker carries high attention (it occludes the edit region), so
    pruning it should speed convergence; over-pruning eats the patch."""
    rng = np.random.default_rng(seed)
    pos, col, tgt_col, sca, opa = [], [], [], [], []
    for iy in range(8):
        for ix in range(8):
            pos.append([(ix - 3.5) * 0.12, (iy - 3.5) * 0.12, 0.0])
            col.append([0.3, 0.3, 0.35])
            tgt_col.append([1.0, 0.1, 0.1] if (ix + iy) % 2 == 0 else [1.0, 0.8, 0.1])
            sca.append(np.log(0.055))
            opa.append(3.0)
    n_patch = 64
    pos.append([0.0, 0.0, -0.8])
    col.append([0.5, 0.5, 0.5])
    tgt_col.append([0.5, 0.5, 0.5])
    sca.append(np.log(0.45))
    opa.append(5.0)
    for _ in range(135):
        p = rng.uniform(-1.2, 1.2, 3)
        p[2] = rng.uniform(0.5, 1.5)
        pos.append(p)
        c = rng.uniform(0, 1, 3)
        col.append(c)
        tgt_col.append(c)
        sca.append(np.log(rng.uniform(0.05, 0.15)))
        opa.append(rng.uniform(0.5, 2.0))
    n = len(pos)
    q = normalize_quaternions(rng.normal(size=(n, 4)))
    cloud = GaussianCloud(pos, q, np.repeat(np.array(sca)[:, None], 3, 1), col, opa)
    target_cloud = cloud.copy()
    target_cloud.colors = np.array(tgt_col, np.float32)
    target_cloud = target_cloud.subset([i for i in range(n) if i != n_patch])

    c = (32 - 1) / 2.0
    cams = [
        CameraView("a", 50.0, 50.0, c, c, 32, 32, np.eye(3), [0.0, 0.0, 4.0]),
        CameraView("b", 50.0, 50.0, c, c, 32, 32, np.eye(3), [0.15, 0.1, 4.0]),
    ]
    targets = [render(target_cloud, cam).rgb for cam in cams]

    weights = np.empty(n)
    weights[:n_patch] = 0.4 + 0.4 * rng.permutation(n_patch) / n_patch
    weights[n_patch] = 0.95  # the blocker dominates the attention maps
    weights[n_patch + 1:] = 0.01
    return cloud, cams, targets, weights


def _edit_final_l1(k_percent):
    cloud, cams, targets, weights = _edit_fixture()
    w_thr, _ = threshold_weights(weights, 0.1)
    if k_percent is None:
        trimmed, survivors = cloud.copy(), np.arange(cloud.count)
    else:
        trimmed, pruned = prune_topk(cloud, w_thr, k_percent)
        survivors = np.setdiff1d(np.arange(cloud.count), pruned)
    _, freeze = threshold_weights(weights[survivors], 0.1)
    cfg = OptimizeConfig(epochs=250, densify_interval=0, lr_color=1e-2,
                         lr_opacity=1e-3, lr_log_scale=1e-3, rng_seed=0)
    out, _ = optimize_scene(trimmed, cams, targets, freeze_mask=freeze, cfg=cfg)
    return float(np.mean([np.mean(np.abs(render(out, cam).rgb - t))
                          for cam, t in zip(cams, targets)]))


def test_criterion_6_pruning_trend():
    # 500-iteration budget: 250 epochs x 2 views
    t0 = time.monotonic()
    results = {k: _edit_final_l1(k) for k in (None, 0.15, 1.0, 5.0)}
    elapsed = time.monotonic() - t0
    best = min(results[k] for k in (0.15, 1.0, 5.0))
    trend = best < results[None] and results[5.0] > results[0.15]
    _report(6, "pruning trend "
               + ", ".join(f"k={k}: {v:.5f}" for k, v in results.items())
               + f" in {elapsed:.0f}s",
            trend and elapsed < 300.0)


def test_criterion_7_frozen_bitwise():
    cloud, cams, targets, weights = _edit_fixture()
    _, freeze = threshold_weights(weights, 0.1)
    cfg = OptimizeConfig(epochs=5, densify_interval=0, rng_seed=0)
    out, _ = optimize_scene(cloud, cams, targets, freeze_mask=freeze, cfg=cfg)
    ok = all(
        np.array_equal(getattr(out, g)[freeze], getattr(cloud, g)[freeze])
        for g in ("positions", "rotations", "log_scales", "colors", "opacity_logits")
    )
    moved = any(
        not np.array_equal(getattr(out, g)[~freeze], getattr(cloud, g)[~freeze])
        for g in ("positions", "rotations", "log_scales", "colors", "opacity_logits")
    )
    _report(7, f"{int(freeze.sum())} frozen Gaussians bitwise unchanged "
               f"(unfrozen moved: {moved})",
            ok and moved)


def test_criterion_8_denoising_reconstruction(rng):
    x0 = rng.uniform(size=(24, 24, 3))
    worst = 0.0
    for t_start in (0.7, 0.84, 0.98):
        cfg = SamplerConfig(steps=20, t_start=t_start, rng_seed=3)
        out = edit_image(TrueNoiseOracle(), cfg, x0, GuidanceScales(text=0.0))
        worst = max(worst, float(np.abs(out - x0).max()))
    _report(8, f"true-noise oracle reconstruction, worst err {worst:.2e} "
               f"over t_start in {{0.7, 0.84, 0.98}}",
            worst < 1e-4)


def test_criterion_9_round_trips_and_defaults(small_scene, tmp_path):
    cloud, cams = small_scene
    save_ply(cloud, tmp_path / "scene.ply")
    back = load_ply(tmp_path / "scene.ply")
    ply_ok = all(
        np.array_equal(getattr(back, g), getattr(cloud, g))
        for g in ("positions", "rotations", "log_scales", "colors", "opacity_logits")
    )
    save_cameras(cams, tmp_path / "cams.json")
    cams2 = load_cameras(tmp_path / "cams.json")
    cam_ok = len(cams2) == len(cams) and all(
        a.id == b.id and (a.fx, a.fy, a.cx, a.cy, a.width, a.height)
        == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
        and np.array_equal(np.asarray(a.rotation), np.asarray(b.rotation))
        and np.array_equal(np.asarray(a.translation), np.asarray(b.translation))
        for a, b in zip(cams, cams2)
    )
    # second write must be byte-identical
    save_ply(back, tmp_path / "scene2.ply")
    save_cameras(cams2, tmp_path / "cams2.json")
    bytes_ok = ((tmp_path / "scene.ply").read_bytes() == (tmp_path / "scene2.ply").read_bytes()
                and (tmp_path / "cams.json").read_bytes() == (tmp_path / "cams2.json").read_bytes())

    pc = PipelineConfig()
    g, s, f, o = pc.guidance, pc.sampler, pc.fusion, pc.optimize
    defaults_ok = (
        (g.text, g.fusion, g.source) == (7.5, 1.0, 0.5)
        and (f.n_adjacent, f.keep_fraction, f.orientation_weight) == (5, 0.85, 1.0)
        and (pc.w_thres, pc.k_percent) == (0.1, 0.15)
        and s.steps == 20 and s.t_start == 0.84
        and (o.densify_interval, o.densify_grad_threshold) == (100, 0.01)
        and (o.lr_position, o.lr_color) == (1.6e-4, 2.5e-3)
    )
    _report(9, f"PLY/camera round trips bit-exact ({ply_ok}, {cam_ok}, {bytes_ok}); "
               f"published defaults present ({defaults_ok})",
            ply_ok and cam_ok and bytes_ok and defaults_ok)


def test_criterion_10_pipeline_determinism(tmp_path, monkeypatch):
    import shutil

    monkeypatch.chdir(tmp_path)
    t0 = time.monotonic()
    assert main(["synth", "--out", "scene", "--count", "30", "--cameras", "4",
                 "--size", "24", "--seed", "2"]) == 0
    cfg = {
        "paths": {"scene": "scene/scene.ply", "cameras": "scene/cameras.json",
                  "output": "out"},
        "sampler": {"steps": 6, "t_start": 0.84},
        "fusion": {"n_adjacent": 2},
        "optimize": {"epochs": 3, "densify_interval": 0},
        "provider": {"kind": "true_noise_oracle"},
        "rng_seed": 7,
    }
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", "config.json"]) == 0
    first = (tmp_path / "out/edited.ply").read_bytes()
    shutil.rmtree(tmp_path / "out")  # force a full rerun, not a resume
    assert main(["pipeline", "--config", "config.json"]) == 0
    identical = (tmp_path / "out/edited.ply").read_bytes() == first
    elapsed = time.monotonic() - t0
    _report(10, f"two full pipeline runs bit-identical ({identical}) "
                f"in {elapsed:.0f}s",
            identical and elapsed < 300.0)
