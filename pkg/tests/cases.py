"""Seeded random instances shared by the test modules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from raysplat.bench import random_rays
from raysplat.hash3d import random_structure
from raysplat.rays import RaySamples, sample_points
from raysplat.splatter import SplatInputs, TargetSpec
from raysplat.tinymlp import DirEncConfig, MlpParams, default_mlp

GRID = {"voxel": (8, 8, 8), "triplane": (16, 16, 16)}


@dataclass
class RenderCase:
    structure: object
    sigma_mlp: MlpParams
    feature_mlp: MlpParams
    samples: RaySamples
    dir_cfg: DirEncConfig
    upstream: np.ndarray

    @property
    def args(self):
        return self.structure, self.sigma_mlp, self.feature_mlp, self.samples, self.dir_cfg


def render_case(kind: str = "voxel", seed: int = 0, dtype=np.float32, rays: int = 16,
                R: int = 32, K: int = 4, width: int = 16, depth: int = 2, C: int = 3,
                freqs: int = 2, scale: float = 0.5) -> RenderCase:
    rng = np.random.default_rng(seed)
    structure = random_structure(kind, GRID[kind], K, rng, dtype, scale=scale)
    dir_cfg = DirEncConfig(freqs)
    sig = default_mlp(K, 1, rng, width, depth, output_activation="softplus", dtype=dtype)
    feat = default_mlp(K + dir_cfg.length, C, rng, width, depth, output_activation="sigmoid",
                       dtype=dtype)
    samples = sample_points(random_rays(rays, rng, dtype=dtype), R)
    upstream = rng.standard_normal((rays, C)).astype(dtype)
    return RenderCase(structure, sig, feat, samples, dir_cfg, upstream)


@dataclass
class SplatCase:
    inputs: SplatInputs
    target: TargetSpec
    upstream: np.ndarray


def splat_case(kind: str = "voxel", seed: int = 0, dtype=np.float32, rays: int = 16,
               R: int = 32, C_in: int = 4, decoder: bool = True, prior: bool = True,
               width: int = 16) -> SplatCase:
    rng = np.random.default_rng(seed)
    dims = GRID[kind]
    dir_cfg = DirEncConfig(2)
    samples = sample_points(random_rays(rays, rng, dtype=dtype), R)
    features = rng.standard_normal((rays, C_in)).astype(dtype)
    theta_hat = random_structure(kind, dims, 3, rng, dtype, scale=0.5) if prior else None
    gs = None
    out_channels = C_in
    if decoder:
        n_in = SplatInputs(features, samples, theta_hat, None, dir_cfg).decoder_in_dim
        out_channels = 5
        gs = default_mlp(n_in, out_channels, rng, width, 2, output_activation="identity",
                         dtype=dtype)
    inputs = SplatInputs(features, samples, theta_hat if decoder else None, gs, dir_cfg)
    target = TargetSpec(kind, dims, out_channels)
    upstream = rng.standard_normal(target.make(dtype=dtype).table.shape).astype(dtype)
    return SplatCase(inputs, target, upstream)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale
