"""Guidance-score composition and the deterministic denoising edit loop.

Score tensors are plain float arrays shaped like the latent they correspond
to. The diffusion model itself lives behind ScoreProvider; mock providers
cover testing, and an external-process provider bridges to a real editor.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericError, ProviderError
from .imgio import read_pfm, write_pfm

IMAGE_CONDITIONS = ("none", "source", "fusion")
TEXT_CONDITIONS = ("none", "prompt")


@dataclass
class GuidanceScales:
    text: float = 7.5
    fusion: float = 1.0
    source: float = 0.5


def _check_shapes(*fields):
    shapes = {f.shape for f in fields}
    if len(shapes) != 1:
        raise ContractError(f"score fields disagree in shape: {sorted(shapes)}")
    return fields


def combine_image_text(e_uncond, e_image, e_image_text, image_scale: float, text_scale: float):
    """Two-condition guidance: unconditional base plus image and text deltas.

    e_uncond + s_img * (e_image - e_uncond) + s_txt * (e_image_text - e_image).
    """
    e_uncond, e_image, e_image_text = _check_shapes(
        np.asarray(e_uncond, np.float64),
        np.asarray(e_image, np.float64),
        np.asarray(e_image_text, np.float64),
    )
    return (
        e_uncond
        + image_scale * (e_image - e_uncond)
        + text_scale * (e_image_text - e_image)
    )


def combine_fused_guidance(e_uncond, e_fusion, e_fusion_text, e_source,
                           scales: GuidanceScales):
    """Three-condition guidance with the fused multi-view image and the source
    image as separate conditioning terms.

    e_uncond + s_text * (e_fusion_text - e_fusion)
             + s_fusion * (e_fusion - e_uncond)
             + s_source * (e_source - e_uncond).
    """
    e_uncond, e_fusion, e_fusion_text, e_source = _check_shapes(
        np.asarray(e_uncond, np.float64),
        np.asarray(e_fusion, np.float64),
        np.asarray(e_fusion_text, np.float64),
        np.asarray(e_source, np.float64),
    )
    return (
        e_uncond
        + scales.text * (e_fusion_text - e_fusion)
        + scales.fusion * (e_fusion - e_uncond)
        + scales.source * (e_source - e_uncond)
    )


# --- providers ---------------------------------------------------------------


class ScoreProvider:
    """Predicted-noise oracle. Implementations must be deterministic for
    identical arguments within one edit session and preserve the input shape."""

    def predict(self, z_t: np.ndarray, t: int, image_cond: str, text_cond: str) -> np.ndarray:
        raise NotImplementedError


class ConstantFieldProvider(ScoreProvider):
    """Returns a fixed tensor (or scalar broadcast) per conditioning pair."""

    def __init__(self, value=0.0, per_condition: dict | None = None):
        self.value = value
        self.per_condition = per_condition or {}

    def predict(self, z_t, t, image_cond, text_cond):
        v = self.per_condition.get((image_cond, text_cond), self.value)
        return np.broadcast_to(np.asarray(v, np.float64), z_t.shape).copy()


class AffineProvider(ScoreProvider):
    """Returns a * z_t + b with (a, b) selected per conditioning pair."""

    def __init__(self, coeffs: dict | None = None, default=(1.0, 0.0)):
        self.coeffs = coeffs or {}
        self.default = default

    def predict(self, z_t, t, image_cond, text_cond):
        a, b = self.coeffs.get((image_cond, text_cond), self.default)
        return a * np.asarray(z_t, np.float64) + b


class TrueNoiseOracle(ScoreProvider):
    """Replays the exact noise injected by the sampler, for any conditioning."""

    def __init__(self):
        self.noise = None

    def observe_injected_noise(self, noise):
        self.noise = np.asarray(noise, np.float64).copy()

    def predict(self, z_t, t, image_cond, text_cond):
        if self.noise is None:
            raise ProviderError("true-noise oracle queried before noise injection")
        if self.noise.shape != z_t.shape:
            raise ProviderError("true-noise oracle shape mismatch")
        return self.noise.copy()


class ExternalProcessProvider(ScoreProvider):
    """Bridges to an external executable.

    Per query, a request directory receives `z_t.pfm` and `meta.json` (the
    timestep, conditioning selectors, prompt text, and conditioning image
    paths); the executable must write `eps.pfm` next to them and exit 0.
    """

    def __init__(self, executable, prompt: str = "", source_image_path: str | None = None,
                 fusion_image_path: str | None = None):
        self.executable = str(executable)
        self.prompt = prompt
        self.source_image_path = source_image_path
        self.fusion_image_path = fusion_image_path

    def predict(self, z_t, t, image_cond, text_cond):
        z_t = np.asarray(z_t, np.float64)
        with tempfile.TemporaryDirectory(prefix="gsedit_provider_") as tmp:
            tmp = Path(tmp)
            write_pfm(tmp / "z_t.pfm", z_t)
            meta = {
                "t": int(t),
                "image_cond": image_cond,
                "text_cond": text_cond,
                "prompt": self.prompt if text_cond == "prompt" else "",
                "source_image": self.source_image_path,
                "fusion_image": self.fusion_image_path,
            }
            (tmp / "meta.json").write_text(json.dumps(meta))
            proc = subprocess.run(
                [self.executable, str(tmp)], capture_output=True, text=True
            )
            if proc.returncode != 0:
                raise ProviderError(
                    f"provider exited {proc.returncode}; stderr: {proc.stderr.strip()}"
                )
            eps_path = tmp / "eps.pfm"
            if not eps_path.exists():
                raise ProviderError("provider wrote no eps.pfm")
            eps = read_pfm(eps_path)
        if eps.shape != z_t.shape:
            raise ProviderError(
                f"provider output shape {eps.shape} does not match input {z_t.shape}"
            )
        return eps


def make_mock_provider(kind: str, payloads: dict | None = None) -> ScoreProvider:
    """Factory for the provider test doubles."""
    payloads = payloads or {}
    if kind == "constant_field":
        return ConstantFieldProvider(
            value=payloads.get("value", 0.0), per_condition=payloads.get("per_condition")
        )
    if kind == "affine_of_conditioning":
        return AffineProvider(
            coeffs=payloads.get("coeffs"), default=payloads.get("default", (1.0, 0.0))
        )
    if kind == "true_noise_oracle":
        return TrueNoiseOracle()
    if kind == "external_process":
        return ExternalProcessProvider(
            payloads["executable"],
            prompt=payloads.get("prompt", ""),
            source_image_path=payloads.get("source_image"),
            fusion_image_path=payloads.get("fusion_image"),
        )
    raise ContractError(f"unknown mock provider kind {kind!r}")


# --- sampler -----------------------------------------------------------------


def default_alpha_bar(num_steps: int = 1000) -> np.ndarray:
    """Cumulative noise schedule from a linear beta ramp 1e-4 .. 2e-2."""
    betas = np.linspace(1e-4, 2e-2, num_steps)
    return np.cumprod(1.0 - betas)


@dataclass
class SamplerConfig:
    steps: int = 20
    t_start: float | None = 0.84  # None draws uniformly from [0.7, 0.98]
    alpha_bar: np.ndarray = field(default_factory=default_alpha_bar)
    rng_seed: int = 0

    def validate(self):
        ab = np.asarray(self.alpha_bar, np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise ContractError("alpha_bar must be a 1-D table")
        if np.any(np.diff(ab) >= 0) or np.any(ab <= 0) or np.any(ab > 1):
            raise ContractError("alpha_bar must be strictly decreasing in (0, 1]")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.t_start is not None and not 0.7 <= self.t_start <= 0.98:
            raise ContractError("t_start must lie in [0.7, 0.98]")
        return self


def edit_image(provider: ScoreProvider, cfg: SamplerConfig, x0: np.ndarray,
               scales: GuidanceScales | None = None) -> np.ndarray:
    """Noise the input to t_start, then run `steps` deterministic denoising
    updates driven by the fused-guidance combination of four provider queries.

    Update rule per step, with a_t the cumulative schedule value:
        z0_hat = (z_t - sqrt(1 - a_t) * eps) / sqrt(a_t)
        z_prev = sqrt(a_prev) * z0_hat + sqrt(1 - a_prev) * eps
    The final step uses a_prev = 1, returning the model's clean estimate.
    """
    scales = scales or GuidanceScales()
    cfg.validate()
    x0 = np.asarray(x0, np.float64)
    ab = np.asarray(cfg.alpha_bar, np.float64)
    rng = np.random.default_rng(cfg.rng_seed)
    t_start = cfg.t_start if cfg.t_start is not None else float(rng.uniform(0.7, 0.98))
    ti = int(round(t_start * (len(ab) - 1)))

    noise = rng.standard_normal(x0.shape)
    z = np.sqrt(ab[ti]) * x0 + np.sqrt(1.0 - ab[ti]) * noise
    if hasattr(provider, "observe_injected_noise"):
        provider.observe_injected_noise(noise)
    if cfg.steps == 0:
        return z

    schedule = np.unique(np.round(np.linspace(0, ti, cfg.steps)).astype(int))[::-1]
    for k, t_cur in enumerate(schedule):
        e_uu = provider.predict(z, t_cur, "none", "none")
        e_fu = provider.predict(z, t_cur, "fusion", "none")
        e_ft = provider.predict(z, t_cur, "fusion", "prompt")
        e_su = provider.predict(z, t_cur, "source", "none")
        for e in (e_uu, e_fu, e_ft, e_su):
            if np.asarray(e).shape != z.shape:
                raise ContractError("provider returned a wrong-shaped score field")
        eps = combine_fused_guidance(e_uu, e_fu, e_ft, e_su, scales)
        a_t = ab[t_cur]
        a_prev = ab[schedule[k + 1]] if k + 1 < len(schedule) else 1.0
        z0_hat = (z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        z = np.sqrt(a_prev) * z0_hat + np.sqrt(1.0 - a_prev) * eps
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite latent at denoising step {k}")
    return z
