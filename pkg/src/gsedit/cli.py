"""Command-line interface: one subcommand per pipeline stage plus the
orchestrated, resumable `pipeline` command driven by a JSON config."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attention as attn_mod
from . import fusion as fusion_mod
from .errors import (
    ContractError,
    DataError,
    FormatError,
    GseditError,
    ProviderError,
    ValidationError,
)
from .guidance import GuidanceScales, SamplerConfig, edit_image, make_mock_provider
from .imgio import read_mask_png, read_pfm, read_png, write_mask_png, write_pfm, write_png
from .optimize import OptimizeConfig, optimize_scene
from .render import RenderOptions, render
from .scene import (
    SyntheticSceneSpec,
    ViewBundle,
    load_cameras,
    load_ply,
    make_synthetic_scene,
    save_cameras,
    save_ply,
)
from .imgio import write_weights_sidecar, read_weights_sidecar

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3
EXIT_PROVIDER = 4


@dataclass
class PipelineConfig:
    """All pipeline knobs in one place; defaults match the published
    hyperparameters (guidance scales 7.5/1.0/0.5, keep fraction 0.85,
    5 adjacent views, weight threshold 0.1, prune 0.15%, 20 sampler steps,
    densify interval 100 at gradient threshold 0.01)."""

    scene: str = ""
    cameras: str = ""
    images: str | None = None
    depths: str | None = None
    masks: str | None = None
    attention: str | None = None
    scores: str | None = None
    output: str = "out"
    guidance: GuidanceScales = field(default_factory=GuidanceScales)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    fusion: fusion_mod.FusionConfig = field(default_factory=fusion_mod.FusionConfig)
    w_thres: float = 0.1
    k_percent: float = 0.15
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    provider_kind: str = "true_noise_oracle"
    provider_payloads: dict = field(default_factory=dict)
    rng_seed: int = 0
    workers: int | None = None

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as f:
            raw = json.load(f)
        cfg = cls()
        paths = raw.get("paths", {})
        for key in ("scene", "cameras", "images", "depths", "masks", "attention", "scores", "output"):
            if key in paths:
                setattr(cfg, key, paths[key])
        g = raw.get("guidance", {})
        cfg.guidance = GuidanceScales(
            text=g.get("text", 7.5), fusion=g.get("fusion", 1.0), source=g.get("source", 0.5)
        )
        s = raw.get("sampler", {})
        cfg.sampler = SamplerConfig(
            steps=s.get("steps", 20),
            t_start=s.get("t_start", 0.84),
            rng_seed=s.get("rng_seed", raw.get("rng_seed", 0)),
        )
        fu = raw.get("fusion", {})
        cfg.fusion = fusion_mod.FusionConfig(
            n_adjacent=fu.get("n_adjacent", 5),
            keep_fraction=fu.get("keep_fraction", 0.85),
            orientation_weight=fu.get("orientation_weight", 1.0),
        )
        tr = raw.get("trim", {})
        cfg.w_thres = tr.get("w_thres", 0.1)
        cfg.k_percent = tr.get("k_percent", 0.15)
        o = raw.get("optimize", {})
        kwargs = {k: v for k, v in o.items() if hasattr(OptimizeConfig, k)}
        cfg.optimize = OptimizeConfig(**kwargs)
        p = raw.get("provider", {})
        cfg.provider_kind = p.get("kind", "true_noise_oracle")
        cfg.provider_payloads = p.get("payloads", {})
        cfg.rng_seed = raw.get("rng_seed", 0)
        cfg.workers = raw.get("workers")
        return cfg

    def validate(self):
        if not Path(self.scene).exists():
            raise ValidationError(f"scene file not found: {self.scene}")
        if not Path(self.cameras).exists():
            raise ValidationError(f"cameras file not found: {self.cameras}")
        if not 0.0 <= self.k_percent <= 100.0:
            raise ValidationError(f"k_percent out of range: {self.k_percent}")
        if not 0.0 <= self.w_thres <= 1.0:
            raise ValidationError(f"w_thres out of range: {self.w_thres}")
        if not 0.0 < self.fusion.keep_fraction <= 1.0:
            raise ValidationError(f"keep_fraction out of range: {self.fusion.keep_fraction}")
        self.sampler.validate()
        self.optimize.validate()
        return self

    def worker_count(self) -> int:
        env = os.environ.get("GSEDIT_WORKERS")
        if env:
            return max(1, int(env))
        if self.workers:
            return max(1, int(self.workers))
        return os.cpu_count() or 1

    def canonical(self) -> dict:
        d = {
            "paths": {
                k: getattr(self, k)
                for k in ("scene", "cameras", "images", "depths", "masks", "attention", "scores", "output")
            },
            "guidance": asdict(self.guidance),
            "sampler": {"steps": self.sampler.steps, "t_start": self.sampler.t_start,
                        "rng_seed": self.sampler.rng_seed},
            "fusion": asdict(self.fusion),
            "trim": {"w_thres": self.w_thres, "k_percent": self.k_percent},
            "optimize": {k: v for k, v in asdict(self.optimize).items() if k != "render"},
            "provider": {"kind": self.provider_kind, "payloads": self.provider_payloads},
            "rng_seed": self.rng_seed,
        }
        return d


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.canonical(), sort_keys=True).encode()).hexdigest()


class Manifest:
    """Per-stage record of inputs, outputs, durations, and hashes; used for
    resume-on-rerun."""

    def __init__(self, path):
        self.path = Path(path)
        self.data = {"stages": {}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())

    def stage_fresh(self, name, config_hash, outputs) -> bool:
        entry = self.data["stages"].get(name)
        if not entry or entry.get("config_hash") != config_hash:
            return False
        for out, digest in entry.get("output_hashes", {}).items():
            if not Path(out).exists() or _sha256_file(out) != digest:
                return False
        return bool(entry.get("output_hashes"))

    def record(self, name, config_hash, inputs, outputs, duration):
        self.data["stages"][name] = {
            "config_hash": config_hash,
            "inputs": [str(p) for p in inputs],
            "outputs": [str(p) for p in outputs],
            "output_hashes": {str(p): _sha256_file(p) for p in outputs if Path(p).exists()},
            "duration_s": duration,
        }
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _make_provider(cfg: PipelineConfig):
    return make_mock_provider(cfg.provider_kind, cfg.provider_payloads)


def _view_seed(base: int, index: int) -> int:
    return int(base) * 100003 + index


# --- pipeline stages ---------------------------------------------------------


def run_pipeline(cfg: PipelineConfig) -> int:
    cfg.validate()
    out_root = Path(cfg.output)
    out_root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out_root / "manifest.json")
    chash = _config_hash(cfg)

    try:
        cloud = load_ply(cfg.scene)
        cameras = load_cameras(cfg.cameras)
    except Exception as e:
        raise ValidationError(f"failed to load pipeline inputs: {e}") from e
    ids = [c.id for c in cameras]
    workers = cfg.worker_count()

    def run_stage(name, outputs, inputs, fn):
        stage_hash = hashlib.sha256(
            (chash + "".join(_sha256_file(p) for p in inputs if Path(p).exists())).encode()
        ).hexdigest()
        if manifest.stage_fresh(name, stage_hash, outputs):
            print(f"[{name}] up to date, skipped")
            return
        t0 = time.perf_counter()
        try:
            fn()
        except ProviderError:
            raise
        except Exception as e:
            raise RuntimeError(f"stage {name!r} failed: {e}") from e
        manifest.record(name, stage_hash, inputs, outputs, time.perf_counter() - t0)
        print(f"[{name}] done")

    # 1. source renders (images + depths), unless both were supplied
    render_dir = out_root / "render"
    if cfg.images and cfg.depths:
        src_img_dir, src_depth_dir = Path(cfg.images), Path(cfg.depths)
    else:
        src_img_dir = src_depth_dir = render_dir

        def do_render():
            render_dir.mkdir(exist_ok=True)
            def one(cam):
                out = render(cloud, cam)
                write_png(render_dir / f"{cam.id}.png", out.rgb)
                write_pfm(render_dir / f"{cam.id}.depth.pfm", out.depth)
                write_pfm(render_dir / f"{cam.id}.alpha.pfm", out.alpha)
            with ThreadPoolExecutor(max_workers=workers) as ex:
                list(ex.map(one, cameras))

        run_stage(
            "render",
            [render_dir / f"{i}.png" for i in ids] + [render_dir / f"{i}.depth.pfm" for i in ids],
            [cfg.scene, cfg.cameras],
            do_render,
        )

    def load_sources():
        bundles = []
        for cam in cameras:
            rgb = read_png(src_img_dir / f"{cam.id}.png")
            depth = read_pfm(src_depth_dir / f"{cam.id}.depth.pfm")
            depth = np.where(depth > 0, depth, np.nan)
            mask = None
            if cfg.masks:
                mp = Path(cfg.masks) / f"{cam.id}.mask.png"
                if mp.exists():
                    mask = read_mask_png(mp)
            bundles.append(ViewBundle(cam.id, rgb, depth=depth, mask=mask))
        return bundles

    # 2. initial per-view edit with the provider (image self-conditioned)
    init_dir = out_root / "initial_edit"

    def do_initial_edit():
        init_dir.mkdir(exist_ok=True)
        for i, cam in enumerate(cameras):
            rgb = read_png(src_img_dir / f"{cam.id}.png")
            provider = _make_provider(cfg)
            scfg = SamplerConfig(
                steps=cfg.sampler.steps, t_start=cfg.sampler.t_start,
                rng_seed=_view_seed(cfg.sampler.rng_seed, i),
            )
            edited = edit_image(provider, scfg, rgb, cfg.guidance)
            write_png(init_dir / f"{cam.id}.png", edited)

    run_stage(
        "initial_edit",
        [init_dir / f"{i}.png" for i in ids],
        [src_img_dir / f"{i}.png" for i in ids],
        do_initial_edit,
    )

    # 3. score-based filtering
    filter_file = out_root / "filter" / "kept.json"

    def do_filter():
        filter_file.parent.mkdir(exist_ok=True)
        scores = {}
        if cfg.scores and Path(cfg.scores).exists():
            scores = json.loads(Path(cfg.scores).read_text())
        bundles = [
            ViewBundle(cam.id, read_png(init_dir / f"{cam.id}.png"),
                       score=float(scores.get(cam.id, 0.0)))
            for cam in cameras
        ]
        kept = fusion_mod.rank_and_filter(bundles, cfg.fusion.keep_fraction)
        filter_file.write_text(json.dumps([b.camera_id for b in kept], indent=2))

    run_stage("filter", [filter_file], [init_dir / f"{i}.png" for i in ids], do_filter)

    # 4. depth-guided fusion into every target view
    fused_dir = out_root / "fused"

    def do_fuse():
        fused_dir.mkdir(exist_ok=True)
        kept_ids = set(json.loads(filter_file.read_text()))
        sources_all = load_sources()
        by_id = {c.id: c for c in cameras}
        src_by_id = {b.camera_id: b for b in sources_all}
        edited_sources = []
        for cam in cameras:
            if cam.id not in kept_ids:
                continue
            b = src_by_id[cam.id]
            edited_sources.append(
                (ViewBundle(cam.id, read_png(init_dir / f"{cam.id}.png"), depth=b.depth,
                            mask=b.mask), by_id[cam.id])
            )

        def one(cam):
            target = src_by_id[cam.id]
            fused = fusion_mod.fuse_views(target, cam, edited_sources, cfg.fusion)
            write_png(fused_dir / f"{cam.id}.png", fused)

        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(one, cameras))

    run_stage(
        "fuse",
        [fused_dir / f"{i}.png" for i in ids],
        [filter_file] + [init_dir / f"{i}.png" for i in ids],
        do_fuse,
    )

    # 5. fusion-guided per-view edit: these become the optimization targets
    edited_dir = out_root / "guided_edit"

    def do_guided_edit():
        edited_dir.mkdir(exist_ok=True)
        for i, cam in enumerate(cameras):
            rgb = read_png(src_img_dir / f"{cam.id}.png")
            provider = _make_provider(cfg)
            scfg = SamplerConfig(
                steps=cfg.sampler.steps, t_start=cfg.sampler.t_start,
                rng_seed=_view_seed(cfg.sampler.rng_seed + 1, i),
            )
            edited = edit_image(provider, scfg, rgb, cfg.guidance)
            write_png(edited_dir / f"{cam.id}.png", edited)

    run_stage(
        "guided_edit",
        [edited_dir / f"{i}.png" for i in ids],
        [fused_dir / f"{i}.png" for i in ids],
        do_guided_edit,
    )

    # 6. attention weighting (supplied maps, or |edit - source| proxy)
    weights_file = out_root / "attention" / "weights.f32"

    def do_attention():
        weights_file.parent.mkdir(exist_ok=True)
        raw = {}
        for cam in cameras:
            if cfg.attention:
                p = Path(cfg.attention) / f"{cam.id}.attn.pfm"
                raw[cam.id] = [read_pfm(p)]
            else:
                src = read_png(src_img_dir / f"{cam.id}.png")
                edi = read_png(edited_dir / f"{cam.id}.png")
                raw[cam.id] = [np.mean(np.abs(edi - src), axis=2)]
        h, w = cameras[0].height, cameras[0].width
        stack = attn_mod.normalize_attention(raw, (h, w))
        weights = attn_mod.accumulate_attention(cloud, cameras, stack)
        write_weights_sidecar(weights_file, weights)

    attention_inputs = [edited_dir / f"{i}.png" for i in ids]
    if cfg.attention:
        attention_inputs = [Path(cfg.attention) / f"{i}.attn.pfm" for i in ids]
    run_stage("attention", [weights_file], attention_inputs, do_attention)

    # 7. threshold + prune
    trimmed_ply = out_root / "trim" / "trimmed.ply"

    def do_trim():
        trimmed_ply.parent.mkdir(exist_ok=True)
        weights = read_weights_sidecar(weights_file).astype(np.float64)
        w_thr, _ = attn_mod.threshold_weights(weights, cfg.w_thres)
        trimmed, pruned = attn_mod.prune_topk(cloud, w_thr, cfg.k_percent)
        survivors = np.setdiff1d(np.arange(cloud.count), pruned)
        w_surv, freeze = attn_mod.threshold_weights(weights[survivors], cfg.w_thres)
        trimmed.attention_weights = np.clip(w_surv, 0.0, 1.0).astype(np.float32)
        trimmed.frozen = freeze
        save_ply(trimmed, trimmed_ply)
        (trimmed_ply.parent / "pruned.json").write_text(
            json.dumps([int(i) for i in pruned])
        )

    run_stage("trim", [trimmed_ply], [weights_file], do_trim)

    # 8. selective optimization against the guided edits
    edited_ply = out_root / "edited.ply"
    loss_csv = out_root / "loss.csv"

    def do_optimize():
        trimmed = load_ply(trimmed_ply)
        targets = [read_png(edited_dir / f"{cam.id}.png") for cam in cameras]
        ocfg = cfg.optimize
        ocfg.rng_seed = cfg.rng_seed
        edited, history = optimize_scene(
            trimmed, cameras, targets, freeze_mask=trimmed.frozen, cfg=ocfg
        )
        save_ply(edited, edited_ply)
        with open(loss_csv, "w") as f:
            f.write("iteration,view_id,l1,perceptual,total\n")
            for rec in history:
                f.write(f"{rec.iteration},{rec.view_id},{rec.l1:.9g},"
                        f"{rec.perceptual:.9g},{rec.total:.9g}\n")

    run_stage(
        "optimize",
        [edited_ply, loss_csv],
        [str(trimmed_ply)] + [edited_dir / f"{i}.png" for i in ids],
        do_optimize,
    )
    print(f"pipeline complete: {edited_ply}")
    return EXIT_OK


# --- subcommands -------------------------------------------------------------


def cmd_synth(args):
    spec = SyntheticSceneSpec(
        count=args.count, extent=args.extent, camera_count=args.cameras,
        orbit_radius=args.radius, image_size=(args.size, args.size), seed=args.seed,
    )
    cloud, cameras = make_synthetic_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(cloud, out / "scene.ply")
    save_cameras(cameras, out / "cameras.json")
    print(f"wrote {out/'scene.ply'} ({cloud.count} Gaussians) and {out/'cameras.json'}")
    return EXIT_OK


def cmd_render(args):
    cloud = load_ply(args.scene)
    cameras = load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = RenderOptions(background=np.array(args.background))
    for cam in cameras:
        res = render(cloud, cam, opts)
        write_png(out / f"{cam.id}.png", res.rgb)
        write_pfm(out / f"{cam.id}.depth.pfm", res.depth)
    print(f"rendered {len(cameras)} views to {out}")
    return EXIT_OK


def _load_view_dir(views_dir, cameras):
    views_dir = Path(views_dir)
    bundles = []
    for cam in cameras:
        rgb = read_png(views_dir / f"{cam.id}.png")
        depth_path = views_dir / f"{cam.id}.depth.pfm"
        depth = None
        if depth_path.exists():
            depth = read_pfm(depth_path)
            depth = np.where(depth > 0, depth, np.nan)
        mask_path = views_dir / f"{cam.id}.mask.png"
        mask = read_mask_png(mask_path) if mask_path.exists() else None
        score = None
        score_path = views_dir / f"{cam.id}.score.json"
        if score_path.exists():
            score = float(json.loads(score_path.read_text())["score"])
        bundles.append(ViewBundle(cam.id, rgb, depth=depth, mask=mask, score=score))
    return bundles


def cmd_fuse(args):
    cameras = load_cameras(args.cameras)
    bundles = _load_view_dir(args.views, cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = fusion_mod.FusionConfig(
        n_adjacent=args.n_adjacent, keep_fraction=args.keep_fraction,
        orientation_weight=args.orientation_weight,
    )
    if all(b.score is not None for b in bundles):
        kept = fusion_mod.rank_and_filter(bundles, cfg.keep_fraction)
        kept_ids = {b.camera_id for b in kept}
    else:
        kept_ids = {b.camera_id for b in bundles}  # unscored: keep everything
    by_id = {c.id: c for c in cameras}
    sources = [(b, by_id[b.camera_id]) for b in bundles if b.camera_id in kept_ids]
    for cam in cameras:
        target = next(b for b in bundles if b.camera_id == cam.id)
        layers = [
            fusion_mod.reproject_view(b, c, cam)
            for b, c in (
                (sources[i][0], sources[i][1])
                for i in fusion_mod.select_adjacent_views(
                    cam, [c for _, c in sources], cfg.n_adjacent, cfg.orientation_weight
                )
            )
        ]
        fused, coverage = fusion_mod.blend_layers(layers, (cam.height, cam.width))
        mask = target.mask if target.mask is not None else np.ones(coverage.shape, bool)
        result = fusion_mod.refine_background(fused, coverage, target, mask)
        write_png(out / f"{cam.id}.png", result)
        write_mask_png(out / f"{cam.id}.coverage.png", coverage)
    print(f"fused {len(cameras)} views to {out}")
    return EXIT_OK


def _provider_from_arg(spec: str):
    kind, _, rest = spec.partition(":")
    if kind == "constant":
        return make_mock_provider("constant_field", {"value": float(rest or 0.0)})
    if kind == "affine":
        a, b = (float(v) for v in rest.split(",")) if rest else (1.0, 0.0)
        return make_mock_provider("affine_of_conditioning", {"default": (a, b)})
    if kind == "oracle":
        return make_mock_provider("true_noise_oracle", {})
    if kind == "exec":
        return make_mock_provider("external_process", {"executable": rest})
    raise ValidationError(f"unknown provider spec {spec!r}")


def cmd_edit(args):
    cameras = load_cameras(args.cameras)
    src = Path(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scales = GuidanceScales(text=args.s_text, fusion=args.s_fusion, source=args.s_source)
    for i, cam in enumerate(cameras):
        rgb = read_png(src / f"{cam.id}.png")
        provider = _provider_from_arg(args.provider)
        cfg = SamplerConfig(steps=args.steps, t_start=args.t_start,
                            rng_seed=_view_seed(args.seed, i))
        edited = edit_image(provider, cfg, rgb, scales)
        write_png(out / f"{cam.id}.png", edited)
    print(f"edited {len(cameras)} views to {out}")
    return EXIT_OK


def cmd_weight_attention(args):
    cloud = load_ply(args.scene)
    cameras = load_cameras(args.cameras)
    raw = {
        cam.id: [read_pfm(Path(args.attention) / f"{cam.id}.attn.pfm")] for cam in cameras
    }
    h, w = cameras[0].height, cameras[0].width
    stack = attn_mod.normalize_attention(raw, (h, w))
    weights = attn_mod.accumulate_attention(cloud, cameras, stack)
    write_weights_sidecar(args.out, weights)
    print(f"wrote {len(weights)} attention weights to {args.out}")
    return EXIT_OK


def cmd_trim(args):
    cloud = load_ply(args.scene)
    weights = read_weights_sidecar(args.weights).astype(np.float64)
    w_thr, _ = attn_mod.threshold_weights(weights, args.w_thres)
    trimmed, pruned = attn_mod.prune_topk(cloud, w_thr, args.k)
    survivors = np.setdiff1d(np.arange(cloud.count), pruned)
    w_surv, freeze = attn_mod.threshold_weights(weights[survivors], args.w_thres)
    trimmed.attention_weights = np.clip(w_surv, 0.0, 1.0).astype(np.float32)
    trimmed.frozen = freeze
    save_ply(trimmed, args.out)
    print(f"pruned {len(pruned)} of {cloud.count} Gaussians -> {args.out}")
    return EXIT_OK


def cmd_optimize(args):
    cloud = load_ply(args.scene)
    cameras = load_cameras(args.cameras)
    targets = [read_png(Path(args.targets) / f"{cam.id}.png") for cam in cameras]
    kwargs = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        kwargs = {k: v for k, v in raw.items() if hasattr(OptimizeConfig, k)}
    cfg = OptimizeConfig(**kwargs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edited, history = optimize_scene(cloud, cameras, targets, freeze_mask=cloud.frozen, cfg=cfg)
    save_ply(edited, out / "edited.ply")
    with open(out / "loss.csv", "w") as f:
        f.write("iteration,view_id,l1,perceptual,total\n")
        for rec in history:
            f.write(f"{rec.iteration},{rec.view_id},{rec.l1:.9g},"
                    f"{rec.perceptual:.9g},{rec.total:.9g}\n")
    print(f"optimized {cfg.epochs} epochs, final loss {history[-1].total:.6g}")
    return EXIT_OK


def cmd_pipeline(args):
    cfg = PipelineConfig.from_json(args.config)
    return run_pipeline(cfg)


def build_parser():
    p = argparse.ArgumentParser(prog="gsedit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene + orbit cameras")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--extent", type=float, default=2.0)
    s.add_argument("--cameras", type=int, default=8)
    s.add_argument("--radius", type=float, default=5.0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", help="render every camera view (PNG + depth PFM)")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fuse", help="depth-guided multi-view fusion per target view")
    s.add_argument("--views", required=True, help="dir of <id>.png / <id>.depth.pfm / optional mask+score")
    s.add_argument("--cameras", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--keep-fraction", type=float, default=0.85, help="score filter keep fraction (default 0.85)")
    s.add_argument("--n-adjacent", type=int, default=5, help="neighbor views per target (default 5)")
    s.add_argument("--orientation-weight", type=float, default=1.0)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("edit", help="guided denoising edit of each view image")
    s.add_argument("--images", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--provider", default="oracle",
                   help="constant:V | affine:a,b | oracle | exec:PATH")
    s.add_argument("--steps", type=int, default=20, help="sampler steps (default 20)")
    s.add_argument("--t-start", type=float, default=0.84, help="noise level in [0.7, 0.98]")
    s.add_argument("--s-text", type=float, default=7.5, help="text guidance scale (default 7.5)")
    s.add_argument("--s-fusion", type=float, default=1.0, help="fusion-image guidance scale (default 1.0)")
    s.add_argument("--s-source", type=float, default=0.5, help="source-image guidance scale (default 0.5)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("weight-attention", help="pool per-view attention maps onto Gaussians")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--attention", required=True, help="dir of <id>.attn.pfm maps")
    s.add_argument("--out", required=True, help="output weights sidecar (.f32)")
    s.set_defaults(func=cmd_weight_attention)

    s = sub.add_parser("trim", help="prune the top k percent of Gaussians by attention weight")
    s.add_argument("--scene", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=float, default=0.15, help="pruning percentage (default 0.15)")
    s.add_argument("--w-thres", type=float, default=0.1, help="freeze threshold (default 0.1)")
    s.set_defaults(func=cmd_trim)

    s = sub.add_parser("optimize", help="optimize the scene against target images")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--config", default=None, help="optimizer config JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("pipeline", help="run all stages with a JSON config (resumable)")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ContractError, FormatError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ProviderError as e:
        print(f"provider error: {e}", file=sys.stderr)
        return EXIT_PROVIDER
    except (GseditError, RuntimeError, OSError) as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
