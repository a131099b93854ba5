import numpy as np
import pytest

from gsedit import (
    CameraView,
    ContractError,
    FusionConfig,
    SparseLayer,
    ViewBundle,
    blend_layers,
    fuse_views,
    rank_and_filter,
    refine_background,
    render,
    reproject_view,
    select_adjacent_views,
)
from oracles import naive_fuse


def _bundles(scores):
    rng = np.random.default_rng(0)
    return [
        ViewBundle(f"v{i}", rng.uniform(size=(4, 4, 3)), score=s)
        for i, s in enumerate(scores)
    ]


class TestRankAndFilter:
    def test_bottom_fifteen_percent_dropped(self):
        scores = list(np.linspace(1.0, 0.05, 20))
        kept = rank_and_filter(_bundles(scores), 0.85)
        assert len(kept) == 17
        dropped = {f"v{i}" for i in (17, 18, 19)}  # three lowest scores
        assert dropped.isdisjoint({b.camera_id for b in kept})

    def test_keep_all_reorders(self):
        kept = rank_and_filter(_bundles([0.1, 0.9, 0.5]), 1.0)
        assert [b.camera_id for b in kept] == ["v1", "v2", "v0"]

    def test_stable_ties(self):
        kept = rank_and_filter(_bundles([0.5] * 10), 0.85)
        assert [b.camera_id for b in kept] == [f"v{i}" for i in range(9)]

    def test_missing_score_lists_ids(self):
        bundles = _bundles([0.5, None, 0.7, None])
        with pytest.raises(ContractError, match="v1.*v3"):
            rank_and_filter(bundles, 0.85)


def _cam(cam_id, x=0.0, fx=100.0, size=128):
    c = (size - 1) / 2.0
    return CameraView(cam_id, fx, fx, c, c, size, size, np.eye(3), [-x, 0.0, 0.0])


class TestSelectAdjacent:
    def test_colocated_first(self):
        target = _cam("t", 0.0)
        cands = [_cam("a", 2.0), _cam("b", 0.0)]
        assert select_adjacent_views(target, cands, 1)[0] == 1

    def test_fewer_candidates_than_n(self):
        out = select_adjacent_views(_cam("t"), [_cam("a"), _cam("b"), _cam("c")], 5)
        assert len(out) == 3

    def test_line_of_cameras(self):
        target = _cam("t", 0.0)
        cands = [_cam("a", 1.0), _cam("b", 2.0), _cam("c", 3.0)]
        assert select_adjacent_views(target, cands, 3) == [0, 1, 2]

    def test_empty_candidates(self):
        with pytest.raises(ContractError):
            select_adjacent_views(_cam("t"), [], 5)


class TestReproject:
    def test_identity_warp(self, rng):
        cam = _cam("s", size=8)
        depth = rng.uniform(2.0, 5.0, size=(8, 8))
        depth[0, 0] = np.nan
        src = ViewBundle("s", rng.uniform(size=(8, 8, 3)), depth=depth)
        layer = reproject_view(src, cam, cam)
        finite = np.isfinite(depth)
        assert np.array_equal(layer.present, finite)
        assert np.array_equal(layer.color[finite], src.rgb[finite])
        assert np.allclose(layer.depth[finite], depth[finite])

    def test_single_pixel_translation(self):
        # source pixel at principal point, depth 4; target shifted +1 in x:
        # new pixel x = cx - fx * 1/4 = 64 - 25 = 39
        src_cam = CameraView("s", 100, 100, 64, 64, 128, 128, np.eye(3), np.zeros(3))
        trg_cam = CameraView("t", 100, 100, 64, 64, 128, 128, np.eye(3), [-1.0, 0.0, 0.0])
        depth = np.full((128, 128), np.nan)
        depth[64, 64] = 4.0
        rgb = np.zeros((128, 128, 3))
        rgb[64, 64] = [1.0, 0.5, 0.25]
        layer = reproject_view(ViewBundle("s", rgb, depth=depth), src_cam, trg_cam)
        assert layer.present.sum() == 1
        assert layer.present[64, 39]
        assert layer.depth[64, 39] == pytest.approx(4.0)
        assert np.array_equal(layer.color[64, 39], [1.0, 0.5, 0.25])

    def test_point_behind_target_absent(self):
        src_cam = CameraView("s", 100, 100, 64, 64, 128, 128, np.eye(3), np.zeros(3))
        # target 10 units down +z: the point at depth 4 lands behind it
        trg_cam = CameraView("t", 100, 100, 64, 64, 128, 128, np.eye(3), [0.0, 0.0, -10.0])
        depth = np.full((128, 128), np.nan)
        depth[64, 64] = 4.0
        layer = reproject_view(
            ViewBundle("s", np.zeros((128, 128, 3)), depth=depth), src_cam, trg_cam
        )
        assert not layer.present.any()

    def test_missing_depth(self):
        cam = _cam("s", size=8)
        with pytest.raises(ContractError):
            reproject_view(ViewBundle("s", np.zeros((8, 8, 3))), cam, cam)


def _layer(color, depth, present):
    return SparseLayer(np.asarray(color, float), np.asarray(depth, float),
                       np.asarray(present, bool))


class TestBlend:
    def test_single_layer_passthrough(self, rng):
        col = rng.uniform(size=(3, 3, 3))
        dep = rng.uniform(1, 5, size=(3, 3))
        present = rng.uniform(size=(3, 3)) > 0.3
        img, cov = blend_layers([_layer(col, dep, present)], (3, 3))
        assert np.array_equal(cov, present)
        assert np.array_equal(img[present], col[present])
        assert not img[~present].any()

    def test_two_depth_blend(self):
        far = _layer(np.full((1, 1, 3), 0.9), [[2.0]], [[True]])
        near = _layer(np.full((1, 1, 3), 0.3), [[1.0]], [[True]])
        img, _ = blend_layers([far, near], (1, 1))
        # w = 1/(1+2); I = (2/3) * near + (1/3) * far
        assert np.allclose(img[0, 0], (2 / 3) * 0.3 + (1 / 3) * 0.9, atol=1e-12)

    def test_equal_depth_symmetric(self, rng):
        a = rng.uniform(size=3)
        b = rng.uniform(size=3)
        la = _layer(a.reshape(1, 1, 3), [[2.0]], [[True]])
        lb = _layer(b.reshape(1, 1, 3), [[2.0]], [[True]])
        ab, _ = blend_layers([la, lb], (1, 1))
        ba, _ = blend_layers([lb, la], (1, 1))
        assert np.allclose(ab[0, 0], (a + b) / 2, atol=1e-12)
        assert np.abs(ab - ba).max() < 1e-7

    def test_convex_combination(self, rng):
        # blended value stays inside the contribution range at every pixel
        layers = [
            _layer(rng.uniform(size=(4, 4, 3)), rng.uniform(1, 9, (4, 4)),
                   rng.uniform(size=(4, 4)) > 0.3)
            for _ in range(4)
        ]
        img, cov = blend_layers(layers, (4, 4))
        stack_c = np.stack([l.color for l in layers])
        stack_p = np.stack([l.present for l in layers])
        for py in range(4):
            for px in range(4):
                if not cov[py, px]:
                    continue
                vals = stack_c[stack_p[:, py, px], py, px]
                assert np.all(img[py, px] >= vals.min(axis=0) - 1e-12)
                assert np.all(img[py, px] <= vals.max(axis=0) + 1e-12)


class TestRefineBackground:
    def test_full_mask_full_coverage(self, rng):
        fused = rng.uniform(size=(4, 4, 3))
        src = ViewBundle("s", rng.uniform(size=(4, 4, 3)))
        out = refine_background(fused, np.ones((4, 4), bool), src, np.ones((4, 4), bool))
        assert np.array_equal(out, fused)

    def test_empty_mask(self, rng):
        fused = rng.uniform(size=(4, 4, 3))
        src = ViewBundle("s", rng.uniform(size=(4, 4, 3)))
        out = refine_background(fused, np.ones((4, 4), bool), src, np.zeros((4, 4), bool))
        assert np.array_equal(out, src.rgb)

    def test_checkerboard(self, rng):
        fused = rng.uniform(size=(4, 4, 3))
        src = ViewBundle("s", rng.uniform(size=(4, 4, 3)))
        mask = (np.indices((4, 4)).sum(axis=0) % 2).astype(bool)
        out = refine_background(fused, np.ones((4, 4), bool), src, mask)
        assert np.array_equal(out[mask], fused[mask])
        assert np.array_equal(out[~mask], src.rgb[~mask])

    def test_uncovered_masked_falls_back(self, rng):
        fused = rng.uniform(size=(2, 2, 3))
        src = ViewBundle("s", rng.uniform(size=(2, 2, 3)))
        coverage = np.array([[True, False], [True, True]])
        out = refine_background(fused, coverage, src, np.ones((2, 2), bool))
        assert np.array_equal(out[0, 1], src.rgb[0, 1])

    def test_dimension_mismatch(self, rng):
        src = ViewBundle("s", rng.uniform(size=(4, 4, 3)))
        with pytest.raises(ContractError):
            refine_background(np.zeros((3, 3, 3)), np.ones((4, 4), bool), src,
                              np.ones((4, 4), bool))


def _rendered_bundles(cloud, cameras):
    out = []
    for cam in cameras:
        res = render(cloud, cam)
        depth = np.where(res.alpha > 0.5, res.depth, np.nan)
        out.append((ViewBundle(cam.id, res.rgb, depth=depth), cam))
    return out


class TestFuseViews:
    def test_identical_sources_idempotent(self, fusion_scene):
        cloud, cams = fusion_scene
        target = cams[0]
        res = render(cloud, target)
        depth = np.where(res.alpha > 0.5, res.depth, np.nan)
        bundle = ViewBundle(target.id, res.rgb, depth=depth)
        fused = fuse_views(bundle, target, [(bundle, target)] * 3)
        covered = np.isfinite(depth)
        assert np.abs(fused[covered] - res.rgb[covered]).max() < 1e-6
        assert np.array_equal(fused[~covered], res.rgb[~covered])

    def test_matches_naive_oracle(self, fusion_scene):
        cloud, cams = fusion_scene
        sources = _rendered_bundles(cloud, cams)
        cfg = FusionConfig()
        for target_bundle, target_cam in sources:
            others = [s for s in sources if s[1].id != target_cam.id]
            got = fuse_views(target_bundle, target_cam, others, cfg)
            want, _ = naive_fuse(target_bundle, target_cam, others,
                                 n_adjacent=cfg.n_adjacent,
                                 orientation_weight=cfg.orientation_weight)
            assert np.abs(got - want).max() < 1e-5

    def test_degenerate_source_count(self, fusion_scene):
        cloud, cams = fusion_scene
        sources = _rendered_bundles(cloud, cams)[:3]
        fused = fuse_views(sources[0][0], sources[0][1], sources,
                           FusionConfig(n_adjacent=5))
        assert fused.shape == sources[0][0].rgb.shape

    def test_output_in_unit_range(self, fusion_scene):
        cloud, cams = fusion_scene
        sources = _rendered_bundles(cloud, cams)
        fused = fuse_views(sources[0][0], sources[0][1], sources[1:])
        assert fused.min() >= 0.0 and fused.max() <= 1.0
