"""Forward splatting renderer and its analytic backward pass.

The forward pass projects each 3D Gaussian to a 2D splat (mean, covariance,
depth), sorts splats by ascending depth, and alpha-composites them
front-to-back per pixel, optionally recording which pixels each Gaussian
touched. The backward pass produces exact gradients for all five parameter
groups and is validated against finite differences in the test suite.

All internal math is float64; clouds store float32 and are upcast on entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .scene import CameraView, GaussianCloud, quaternion_to_matrix

ALPHA_SKIP = 1.0 / 255.0


@dataclass
class RenderOptions:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tile_size: int = 16  # kept for interface compatibility; bbox rasterization is equivalent
    transmittance_floor: float = 1e-4
    alpha_clamp: float = 0.99
    record_contribs: bool = False
    z_near: float = 0.01
    cov_blur: float = 0.3  # low-pass dilation, px^2
    # 3.5 sigma keeps the kernel below the 1/255 skip threshold at the bbox
    # edge for any opacity <= alpha_clamp, so the bbox never truncates a
    # contribution (and the backward pass stays consistent with forward)
    radius_sigmas: float = 3.5

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)


@dataclass
class Splat2D:
    gaussian_index: int
    mean2d: np.ndarray  # (2,), pixels
    cov2d: np.ndarray  # (2, 2), px^2, positive definite after regularization
    depth: float  # camera-frame z


@dataclass
class ContribRecords:
    """Flat per-contribution arrays, in global depth order.

    A contribution exists wherever a Gaussian's clamped alpha at a pixel was
    >= 1/255, regardless of the transmittance cutoff. `transmittance` is the
    pixel's transmittance before this contribution was composited.
    """

    gaussian_index: np.ndarray  # (M,) int
    pixel_index: np.ndarray  # (M,) flat row-major index
    alpha: np.ndarray  # (M,)
    transmittance: np.ndarray  # (M,)

    def footprint_sizes(self, n_gaussians: int) -> np.ndarray:
        counts = np.zeros(n_gaussians, dtype=np.int64)
        np.add.at(counts, self.gaussian_index, 1)
        return counts


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W) accumulated blend weight
    contribs: ContribRecords | None = None


@dataclass
class ParamGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    mean2d_grad_norms: np.ndarray  # per-Gaussian 2D position-gradient magnitude


@dataclass
class SceneArrays:
    """Float64 views of the per-Gaussian parameters (the renderer's input)."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    frozen: np.ndarray | None = None

    @property
    def count(self):
        return self.positions.shape[0]


def arrays_from_cloud(cloud: GaussianCloud) -> SceneArrays:
    return SceneArrays(
        positions=cloud.positions.astype(np.float64),
        rotations=cloud.rotations.astype(np.float64),
        log_scales=cloud.log_scales.astype(np.float64),
        colors=cloud.colors.astype(np.float64),
        opacity_logits=cloud.opacity_logits.astype(np.float64),
        frozen=None if cloud.frozen is None else cloud.frozen.copy(),
    )


# --- projection --------------------------------------------------------------


def _project_all(params: SceneArrays, camera: CameraView, opts: RenderOptions):
    """Project every Gaussian; returns per-Gaussian splat arrays and validity.

    cov2d = J W Sigma W^T J^T + blur * I with Sigma = R S S^T R^T, J the
    perspective Jacobian at the camera-frame mean, W the camera rotation.
    """
    n = params.count
    W = camera.rotation
    mu_cam = params.positions @ W.T + camera.translation  # (N, 3)
    z = mu_cam[:, 2]
    valid = z > opts.z_near

    mean2d = np.zeros((n, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        mean2d[:, 0] = camera.fx * mu_cam[:, 0] / z + camera.cx
        mean2d[:, 1] = camera.fy * mu_cam[:, 1] / z + camera.cy

    qn = params.rotations / np.linalg.norm(params.rotations, axis=1, keepdims=True)
    Rq = quaternion_to_matrix(qn)  # (N, 3, 3)
    s = np.exp(params.log_scales)  # (N, 3)
    L = Rq * s[:, None, :]  # R @ diag(s)
    Sigma = L @ np.swapaxes(L, 1, 2)  # (N, 3, 3)

    zs = np.where(valid, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 1, 1] = camera.fy / zs
    J[:, 0, 2] = -camera.fx * mu_cam[:, 0] / zs**2
    J[:, 1, 2] = -camera.fy * mu_cam[:, 1] / zs**2

    M = J @ W  # (N, 2, 3)
    cov2d = M @ Sigma @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += opts.cov_blur
    cov2d[:, 1, 1] += opts.cov_blur
    return {
        "mu_cam": mu_cam,
        "z": z,
        "valid": valid,
        "mean2d": mean2d,
        "qn": qn,
        "Rq": Rq,
        "s": s,
        "L": L,
        "Sigma": Sigma,
        "J": J,
        "M": M,
        "cov2d": cov2d,
    }


def project_gaussian(cloud: GaussianCloud, index: int, camera: CameraView,
                     opts: RenderOptions | None = None) -> Splat2D | None:
    """Project one Gaussian; None when it lies at or behind the near plane."""
    opts = opts or RenderOptions()
    camera.validate()
    proj = _project_all(arrays_from_cloud(cloud.subset([index])), camera, opts)
    if not proj["valid"][0]:
        return None
    return Splat2D(
        gaussian_index=index,
        mean2d=proj["mean2d"][0],
        cov2d=proj["cov2d"][0],
        depth=float(proj["z"][0]),
    )


# --- forward -----------------------------------------------------------------


def _splat_geometry(cov):
    """Conic (inverse covariance) and bounding radius for one 2x2 covariance."""
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * c - b * b
    conic = np.array([[c, -b], [-b, a]]) / det
    lam_max = 0.5 * (a + c) + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    return conic, np.sqrt(lam_max)


def _forward(params: SceneArrays, camera: CameraView, opts: RenderOptions, tape: bool):
    h, w = camera.height, camera.width
    npx = h * w
    proj = _project_all(params, camera, opts)
    sigma = 1.0 / (1.0 + np.exp(-params.opacity_logits))

    vidx = np.flatnonzero(proj["valid"])
    order = vidx[np.argsort(proj["z"][vidx], kind="stable")]

    T = np.ones(npx)
    C = np.zeros((npx, 3))
    Dacc = np.zeros(npx)
    A = np.zeros(npx)
    records = []

    for g in order:
        mean = proj["mean2d"][g]
        conic, radius = _splat_geometry(proj["cov2d"][g])
        r = opts.radius_sigmas * radius
        x0 = max(int(np.floor(mean[0] - r)), 0)
        x1 = min(int(np.ceil(mean[0] + r)), w - 1)
        y0 = max(int(np.floor(mean[1] - r)), 0)
        y1 = min(int(np.ceil(mean[1] + r)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        dx = (xs - mean[0])[None, :]
        dy = (ys - mean[1])[:, None]
        power = -0.5 * (conic[0, 0] * dx * dx + 2 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy)
        G = np.exp(power)
        alpha_raw = sigma[g] * G
        alpha = np.minimum(alpha_raw, opts.alpha_clamp)
        keep = alpha >= ALPHA_SKIP
        if not np.any(keep):
            continue
        yy, xx = np.nonzero(keep)
        pix = (yy + y0) * w + (xx + x0)
        a_k = alpha[keep]
        Tb = T[pix]
        if tape:
            records.append(
                {
                    "g": g,
                    "pix": pix,
                    "alpha": a_k,
                    "T": Tb,
                    "G": G[keep],
                    "d": np.stack([dx[0, xx], dy[yy, 0]], axis=1),
                    "clamped": alpha_raw[keep] > opts.alpha_clamp,
                }
            )
        active = Tb >= opts.transmittance_floor
        wgt = np.where(active, a_k * Tb, 0.0)
        C[pix] += wgt[:, None] * params.colors[g]
        Dacc[pix] += wgt * proj["z"][g]
        A[pix] += wgt
        T[pix] = np.where(active, Tb * (1.0 - a_k), Tb)

    rgb = (C + T[:, None] * opts.background).reshape(h, w, 3)
    depth = (Dacc / np.maximum(A, 1e-6)).reshape(h, w)
    out = {
        "rgb": rgb,
        "depth": depth,
        "alpha": A.reshape(h, w),
        "T_final": T,
        "records": records,
        "proj": proj,
        "sigma": sigma,
    }
    return out


def render_arrays(params: SceneArrays, camera: CameraView, opts: RenderOptions) -> RenderOutput:
    res = _forward(params, camera, opts, tape=opts.record_contribs)
    contribs = None
    if opts.record_contribs:
        recs = res["records"]
        if recs:
            contribs = ContribRecords(
                gaussian_index=np.concatenate([np.full(len(r["pix"]), r["g"]) for r in recs]),
                pixel_index=np.concatenate([r["pix"] for r in recs]),
                alpha=np.concatenate([r["alpha"] for r in recs]),
                transmittance=np.concatenate([r["T"] for r in recs]),
            )
        else:
            z = np.zeros(0)
            contribs = ContribRecords(z.astype(int), z.astype(int), z, z)
    return RenderOutput(rgb=res["rgb"], depth=res["depth"], alpha=res["alpha"], contribs=contribs)


def render(cloud: GaussianCloud, camera: CameraView, opts: RenderOptions | None = None) -> RenderOutput:
    """Render color, expected depth, and accumulated alpha for one camera."""
    opts = opts or RenderOptions()
    return render_arrays(arrays_from_cloud(cloud), camera, opts)


# --- backward ----------------------------------------------------------------

# dR/dq for the (w, x, y, z) quaternion-to-matrix map, evaluated at a unit q.
def _dR_dq(qn):
    w_, x, y, z = qn
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w_], [z, w_, -2 * x]], dtype=np.float64)
    dy = 2 * np.array([[-2 * y, x, w_], [x, 0, z], [-w_, z, -2 * y]], dtype=np.float64)
    dz = 2 * np.array([[-2 * z, -w_, x], [w_, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dw, dx, dy, dz])  # (4, 3, 3)


def forward_with_tape(params: SceneArrays, camera: CameraView, opts: RenderOptions):
    """Forward pass keeping the per-contribution tape for backward_from_tape."""
    return _forward(params, camera, opts, tape=True)


def backward_from_tape(params: SceneArrays, camera: CameraView, res: dict,
                       upstream_rgb_grad: np.ndarray, opts: RenderOptions) -> ParamGrads:
    """Backward pass reusing a taped forward result (avoids re-rendering)."""
    h, w = camera.height, camera.width
    upstream = np.asarray(upstream_rgb_grad, dtype=np.float64)
    if upstream.shape != (h, w, 3):
        raise ContractError(
            f"upstream gradient shape {upstream.shape} does not match image {(h, w, 3)}"
        )
    up = upstream.reshape(-1, 3)
    proj = res["proj"]
    sigma = res["sigma"]
    n = params.count

    grad_colors = np.zeros((n, 3))
    grad_sigma = np.zeros(n)
    grad_mean2d = np.zeros((n, 2))
    grad_cov = np.zeros((n, 2, 2))

    # suffix accumulator: per pixel, sum of composited contributions behind the
    # current record plus the background term
    S = res["T_final"][:, None] * opts.background

    for rec in reversed(res["records"]):
        g = rec["g"]
        pix = rec["pix"]
        a_k = rec["alpha"]
        Tb = rec["T"]
        active = Tb >= opts.transmittance_floor
        gp = up[pix]
        wgt = np.where(active, a_k * Tb, 0.0)
        color = params.colors[g]

        grad_colors[g] += gp.T @ wgt
        # dC/dalpha_i = c_i T_i - S_i / (1 - alpha_i), zero through the clamp
        dalpha = np.einsum(
            "mc,mc->m", gp, color[None, :] * Tb[:, None] - S[pix] / (1.0 - a_k[:, None])
        )
        dalpha = np.where(active & ~rec["clamped"], dalpha, 0.0)
        S[pix] += wgt[:, None] * color

        dpower = dalpha * a_k  # d alpha/d power = sigma * G = alpha (unclamped)
        grad_sigma[g] += np.sum(np.where(active & ~rec["clamped"], dalpha * rec["G"], 0.0))

        conic, _ = _splat_geometry(proj["cov2d"][g])
        u = rec["d"] @ conic.T  # (M, 2) = conic @ d
        grad_mean2d[g] += u.T @ dpower
        # d power / d cov = +1/2 u u^T
        grad_cov[g] += 0.5 * np.einsum("m,mi,mj->ij", dpower, u, u)

    # chain per-splat gradients to the 3D parameters (vectorized over splats)
    touched = np.flatnonzero(
        (np.abs(grad_mean2d).sum(axis=1) > 0)
        | (np.abs(grad_cov).sum(axis=(1, 2)) > 0)
        | (np.abs(grad_colors).sum(axis=1) > 0)
        | (np.abs(grad_sigma) > 0)
    )

    grad_positions = np.zeros((n, 3))
    grad_rotations = np.zeros((n, 4))
    grad_log_scales = np.zeros((n, 3))

    if touched.size:
        t = touched
        Wc = camera.rotation
        J = proj["J"][t]
        Mt = proj["M"][t]
        Sg = proj["Sigma"][t]
        Lt = proj["L"][t]
        st = proj["s"][t]
        mu = proj["mu_cam"][t]
        Gc = grad_cov[t]
        Gc = 0.5 * (Gc + np.swapaxes(Gc, 1, 2))
        Gm = grad_mean2d[t]

        # mean2d -> mu_cam through the projection Jacobian
        gmu = np.einsum("nij,ni->nj", J, Gm)

        # cov2d = M Sigma M^T
        gSigma = np.einsum("nji,njk,nkl->nil", Mt, Gc, Mt)  # M^T Gc M
        gM = 2.0 * np.einsum("nij,njk,nkl->nil", Gc, Mt, Sg)
        gJ = gM @ Wc.T

        fx, fy = camera.fx, camera.fy
        x, y, z = mu[:, 0], mu[:, 1], mu[:, 2]
        gmu[:, 0] += gJ[:, 0, 2] * (-fx / z**2)
        gmu[:, 1] += gJ[:, 1, 2] * (-fy / z**2)
        gmu[:, 2] += (
            gJ[:, 0, 0] * (-fx / z**2)
            + gJ[:, 1, 1] * (-fy / z**2)
            + gJ[:, 0, 2] * (2 * fx * x / z**3)
            + gJ[:, 1, 2] * (2 * fy * y / z**3)
        )
        grad_positions[t] = gmu @ Wc

        # Sigma = L L^T with L = R(q) diag(s)
        gL = 2.0 * np.einsum("nij,njk->nik", gSigma, Lt)
        gs = np.einsum("nik,nik->nk", proj["Rq"][t], gL)
        grad_log_scales[t] = gs * st
        gRq = gL * st[:, None, :]

        qn = proj["qn"][t]
        qnorm = np.linalg.norm(params.rotations[t], axis=1)
        for i, gi in enumerate(t):
            dR = _dR_dq(qn[i])  # (4, 3, 3)
            gq_hat = np.einsum("qij,ij->q", dR, gRq[i])
            proj_mat = (np.eye(4) - np.outer(qn[i], qn[i])) / qnorm[i]
            grad_rotations[gi] = proj_mat @ gq_hat

    grad_logits = grad_sigma * sigma * (1.0 - sigma)
    norms = np.linalg.norm(grad_mean2d, axis=1)

    if params.frozen is not None:
        fr = params.frozen
        grad_positions[fr] = 0.0
        grad_rotations[fr] = 0.0
        grad_log_scales[fr] = 0.0
        grad_colors[fr] = 0.0
        grad_logits[fr] = 0.0
        norms[fr] = 0.0

    return ParamGrads(
        positions=grad_positions,
        rotations=grad_rotations,
        log_scales=grad_log_scales,
        colors=grad_colors,
        opacity_logits=grad_logits,
        mean2d_grad_norms=norms,
    )


def backward_arrays(params: SceneArrays, camera: CameraView,
                    upstream_rgb_grad: np.ndarray, opts: RenderOptions) -> ParamGrads:
    res = forward_with_tape(params, camera, opts)
    return backward_from_tape(params, camera, res, upstream_rgb_grad, opts)


def render_backward(cloud: GaussianCloud, camera: CameraView, upstream_rgb_grad,
                    opts: RenderOptions | None = None) -> ParamGrads:
    """Analytic adjoint of render() for an upstream gradient on the rgb image."""
    opts = opts or RenderOptions()
    return backward_arrays(arrays_from_cloud(cloud), camera, upstream_rgb_grad, opts)
