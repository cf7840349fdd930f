"""Single-scene fitting against an analytic ground truth.

Ground-truth images come from closed-form density and colour fields,
rendered with the same emission-absorption quadrature at dense sampling.
Fitting renders every pixel of a training view per step through the
streaming renderer, so image-level losses (here MSE and an optional
total-variation term) see whole images.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .execution import ExecConfig
from .hash3d import HashStructure, make_structure
from .rays import Camera, rays_from_camera, sample_points
from .renderer import render_backward_fused, render_forward_fused
from .tinymlp import DirEncConfig, MlpParams, default_mlp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnalyticScene:
    """Gaussian spherical shell with a position-coloured or constant albedo."""

    peak_density: float = 12.0
    radius: float = 0.6
    thickness: float = 0.12
    color_mode: str = "position"   # or "constant"
    constant_color: tuple[float, float, float] = (0.9, 0.6, 0.3)

    def density(self, x: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(x, axis=-1)
        return self.peak_density * np.exp(-((r - self.radius) ** 2) / self.thickness ** 2)

    def color(self, x: np.ndarray) -> np.ndarray:
        if self.color_mode == "constant":
            return np.broadcast_to(np.asarray(self.constant_color), x.shape).copy()
        return np.clip(0.5 + 0.5 * x, 0.0, 1.0)


def render_analytic(scene: AnalyticScene, camera: Camera, num_segments: int,
                    chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """(H x W x 3 image on black, H x W final transmittance) by dense quadrature."""
    bundle = rays_from_camera(camera, dtype=np.float64)
    M = len(bundle)
    delta = (bundle.far - bundle.near) / num_segments
    t = bundle.near + delta * np.arange(num_segments + 1)
    img = np.zeros((M, 3))
    final_t = np.zeros(M)
    for s in range(0, M, chunk):
        o = bundle.origins[s:s + chunk, None, :]
        d = bundle.directions[s:s + chunk, None, :]
        x = o + t[None, :, None] * d
        trans = np.exp(-delta * np.cumsum(scene.density(x), axis=1))
        vis = trans[:, :-1] - trans[:, 1:]
        img[s:s + chunk] = np.einsum("mj,mjc->mc", vis, scene.color(x[:, 1:]))
        final_t[s:s + chunk] = trans[:, -1]
    return (img.reshape(camera.height, camera.width, 3),
            final_t.reshape(camera.height, camera.width))


def orbit_cameras(n: int, size: int, distance: float = 3.0, fov_deg: float = 40.0,
                  phase: float = 0.0) -> list[Camera]:
    """``n`` cameras on a Fibonacci sphere looking at the origin."""
    cams = []
    golden = math.pi * (3 - math.sqrt(5))
    near = distance - math.sqrt(3)
    far = distance + math.sqrt(3)
    for i in range(n):
        zc = 1 - 2 * (i + 0.5) / n
        rr = math.sqrt(max(0.0, 1 - zc * zc))
        ang = golden * i + phase
        eye = distance * np.array([rr * math.cos(ang), rr * math.sin(ang), zc])
        cams.append(Camera.look_at(eye, width=size, height=size, fov_deg=fov_deg,
                                   near=near, far=far))
    return cams


def make_ground_truth(scene: AnalyticScene, cameras: list[Camera], num_segments: int):
    return [render_analytic(scene, cam, num_segments)[0] for cam in cameras]


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - target) ** 2))
    return float("inf") if mse == 0 else 10 * math.log10(1.0 / mse)


def tv_loss(img: np.ndarray) -> tuple[float, np.ndarray]:
    """Anisotropic squared total variation of an H x W x C image, and its gradient."""
    dx = img[:, 1:] - img[:, :-1]
    dy = img[1:] - img[:-1]
    n = img.size
    loss = (np.sum(dx ** 2) + np.sum(dy ** 2)) / n
    g = np.zeros_like(img)
    g[:, 1:] += 2 * dx / n
    g[:, :-1] -= 2 * dx / n
    g[1:] += 2 * dy / n
    g[:-1] -= 2 * dy / n
    return float(loss), g


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.99), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class FitConfig:
    image_size: int = 64
    num_segments: int = 64
    oracle_segments: int = 256
    iterations: int = 2000
    train_views: int = 20
    test_views: int = 4
    kind: str = "voxel"
    grid_size: int = 32
    channels: int = 8
    mlp_width: int = 16
    mlp_depth: int = 2
    dir_frequencies: int = 2
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    density_bias: float = -2.0
    loss: str = "mse"            # or "mse_plus_tv"
    tv_weight: float = 1e-2
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.oracle_segments < 4 * self.num_segments:
            raise ValueError("ground truth needs at least 4x the fitting sample count")
        if self.loss not in ("mse", "mse_plus_tv"):
            raise ValueError(f"unknown loss {self.loss!r}")
        for name in ("image_size", "num_segments", "iterations", "train_views", "grid_size",
                     "channels", "mlp_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_json(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class FitReport:
    losses: list[float]
    test_psnr: float
    test_psnr_per_view: list[float]
    train_psnr: float
    wall_clock_s: float
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class FitState:
    structure: HashStructure
    sigma_mlp: MlpParams
    feature_mlp: MlpParams
    dir_cfg: DirEncConfig


class FitDiverged(RuntimeError):
    pass


def init_state(cfg: FitConfig, rng: np.random.Generator) -> FitState:
    dir_cfg = DirEncConfig(cfg.dir_frequencies)
    g = cfg.grid_size
    structure = make_structure(cfg.kind, (g, g, g), cfg.channels)
    structure.table[...] = rng.normal(0, 0.1, structure.table.shape)
    sigma_mlp = default_mlp(cfg.channels, 1, rng, cfg.mlp_width, cfg.mlp_depth,
                            hidden_activation="relu", output_activation="softplus")
    sigma_mlp.layers[-1][1][...] = cfg.density_bias
    feature_mlp = default_mlp(cfg.channels + dir_cfg.length, 3, rng, cfg.mlp_width,
                              cfg.mlp_depth, hidden_activation="relu",
                              output_activation="sigmoid")
    return FitState(structure, sigma_mlp, feature_mlp, dir_cfg)


def render_view(state: FitState, cam: Camera, num_segments: int,
                exec_cfg: ExecConfig | None = None) -> np.ndarray:
    samples = sample_points(rays_from_camera(cam), num_segments)
    out = render_forward_fused(state.structure, state.sigma_mlp, state.feature_mlp, samples,
                               state.dir_cfg, exec_cfg=exec_cfg)
    return out.features.reshape(cam.height, cam.width, -1)


def fit(cfg: FitConfig, scene: AnalyticScene | None = None,
        exec_cfg: ExecConfig | None = None, callback=None) -> tuple[FitReport, FitState]:
    scene = scene or AnalyticScene()
    rng = np.random.default_rng(cfg.seed)
    start = time.perf_counter()
    train_cams = orbit_cameras(cfg.train_views, cfg.image_size)
    test_cams = orbit_cameras(cfg.test_views, cfg.image_size, phase=0.7)
    train_gt = make_ground_truth(scene, train_cams, cfg.oracle_segments)
    test_gt = make_ground_truth(scene, test_cams, cfg.oracle_segments)
    train_samples = [sample_points(rays_from_camera(c), cfg.num_segments) for c in train_cams]

    state = init_state(cfg, rng)
    opt_grid = Adam([state.structure.table], cfg.lr_grid, cfg.betas)
    mlp_params = state.sigma_mlp.tensors() + state.feature_mlp.tensors()
    opt_mlp = Adam(mlp_params, cfg.lr_mlp, cfg.betas)

    losses: list[float] = []
    order: list[int] = []
    n_px = cfg.image_size * cfg.image_size
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(cfg.train_views))
        view = order.pop()
        samples = train_samples[view]
        gt = train_gt[view].reshape(n_px, 3)
        out = render_forward_fused(state.structure, state.sigma_mlp, state.feature_mlp,
                                   samples, state.dir_cfg, exec_cfg=exec_cfg)
        diff = out.features - gt
        loss = float(np.mean(diff ** 2))
        grad = (2.0 / diff.size) * diff
        if cfg.loss == "mse_plus_tv":
            img = out.features.reshape(cfg.image_size, cfg.image_size, 3)
            tv, g_tv = tv_loss(img)
            loss += cfg.tv_weight * tv
            grad = grad + cfg.tv_weight * g_tv.reshape(n_px, 3)
        if not math.isfinite(loss):
            raise FitDiverged(f"loss became {loss} at iteration {it} (view {view})")
        losses.append(loss)
        grads = render_backward_fused(state.structure, state.sigma_mlp, state.feature_mlp,
                                      samples, grad.astype(np.float32), out, state.dir_cfg,
                                      exec_cfg=exec_cfg)
        opt_grid.step([grads.grad_structure.table])
        opt_mlp.step(grads.grad_sigma_mlp.tensors() + grads.grad_feature_mlp.tensors())
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            log.info("iter %5d  loss %.6f  psnr %.2f", it, loss, 10 * math.log10(1 / max(loss, 1e-12)))
        if callback is not None:
            callback(it, loss, state)

    test_psnrs = [psnr(render_view(state, c, cfg.num_segments, exec_cfg), g)
                  for c, g in zip(test_cams, test_gt)]
    train_psnr = float(np.mean([psnr(render_view(state, c, cfg.num_segments, exec_cfg), g)
                                for c, g in zip(train_cams[:4], train_gt[:4])]))
    mean_mse = float(np.mean([10 ** (-p / 10) for p in test_psnrs]))
    report = FitReport(
        losses=losses,
        test_psnr=10 * math.log10(1 / mean_mse),
        test_psnr_per_view=test_psnrs,
        train_psnr=train_psnr,
        wall_clock_s=time.perf_counter() - start,
        config=asdict(cfg),
    )
    return report, state


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def save_outputs(out_dir, report: FitReport, state: FitState, cfg: FitConfig) -> None:
    from .hash3d import write_grid
    from .imageio import write_ppm
    from .plotting import plot_losses
    from .tinymlp import write_mlps

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    write_grid(out_dir / "grid.lpg", state.structure)
    write_mlps(out_dir / "mlps.lpm", [state.sigma_mlp, state.feature_mlp])
    plot_losses(report.losses, out_dir / "loss.png")
    for i, cam in enumerate(orbit_cameras(cfg.test_views, cfg.image_size, phase=0.7)):
        write_ppm(out_dir / f"test_{i:02d}.ppm", render_view(state, cam, cfg.num_segments))
