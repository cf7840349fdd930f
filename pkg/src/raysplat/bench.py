"""Memory, FLOP and wall-clock sweeps comparing fused kernels with the naive baseline.

Memory is the peak of library-managed scratch (``ScratchArena``), not process
RSS. Fused FLOPs come from the kernels' own counters; naive FLOPs are modeled
from the same per-sample costs since autograd is not instrumented.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .execution import ExecConfig
from .hash3d import random_structure
from .instrument import FlopCounter, ScratchArena
from .naive import (render_backward_naive, render_forward_naive, splat_backward_naive,
                    splat_forward_naive)
from .rays import RayBundle, rays_from_camera, sample_points
from .renderer import render_backward_fused, render_forward_fused
from .scenefit import orbit_cameras
from .splatter import SplatInputs, TargetSpec, splat_backward_fused, splat_forward_fused
from .tinymlp import DirEncConfig, MlpParams, default_mlp

CSV_HEADER = ["sweep", "mode", "pass", "scratch_bytes", "flops", "time_ms_median", "time_ms_min"]
SWEEPS = {"renderer": ("rays", "samples"), "splatter": ("views", "samples")}
CORNERS = {"voxel": 8, "triplane": 12}
EQUIVALENCE_TOL = 1e-4


@dataclass
class BenchSpec:
    component: str = "renderer"          # renderer | splatter
    sweep: str = "samples"               # rays (M) | samples (R) | views (N)
    values: list[int] = field(default_factory=lambda: [16, 64, 256])
    modes: list[str] = field(default_factory=lambda: ["fused", "naive"])
    kind: str = "triplane"
    grid: int = 32
    channels: int = 16                   # K
    out_channels: int = 3                # C
    mlp_width: int = 64
    mlp_depth: int = 3
    dir_frequencies: int = 4
    rays: int = 1024                     # M, or pixels per view for the splatter
    samples: int = 64                    # R
    views: int = 1                       # N
    repetitions: int = 3
    byte_budget: int = 1 << 30
    seed: int = 0

    def __post_init__(self):
        if self.component not in SWEEPS:
            raise ValueError(f"component must be one of {sorted(SWEEPS)}")
        if self.sweep not in SWEEPS[self.component]:
            raise ValueError(f"{self.component} sweeps over {SWEEPS[self.component]}, not {self.sweep!r}")
        if len(self.values) < 3:
            raise ValueError("a sweep needs at least 3 points")
        if self.repetitions < 3:
            raise ValueError("repetitions must be at least 3")
        if not set(self.modes) <= {"fused", "naive"} or not self.modes:
            raise ValueError(f"modes must be drawn from fused/naive, got {self.modes}")
        if self.kind not in CORNERS:
            raise ValueError(f"unknown structure kind {self.kind!r}")

    def at(self, value: int) -> "BenchSpec":
        return BenchSpec(**{**asdict(self), self.sweep: int(value)})

    @classmethod
    def from_json(cls, d: dict) -> "BenchSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "BenchSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class BenchRow:
    sweep: int
    mode: str
    pass_: str
    scratch_bytes: int
    flops: int | None
    time_ms_median: float | None
    time_ms_min: float | None
    refused: bool = False
    max_abs_diff: float | None = None

    def csv_fields(self) -> list:
        if self.refused:
            return [self.sweep, self.mode, self.pass_, self.scratch_bytes, "", "refused", "refused"]
        return [self.sweep, self.mode, self.pass_, self.scratch_bytes, self.flops,
                f"{self.time_ms_median:.3f}", f"{self.time_ms_min:.3f}"]


# --- accounting --------------------------------------------------------------

def mlp_output_bytes(M: int, R: int, L: int, K: int, itemsize: int = 4) -> int:
    """Bytes to keep every layer output of a K-wide, L-layer MLP at every sample."""
    return M * R * L * K * itemsize


def lifted_grid_bytes(views: int, grid: int, K: int, itemsize: int = 4) -> int:
    """Bytes of one dense K-channel grid^3 volume per lifted view."""
    return views * grid ** 3 * K * itemsize


def naive_render_bytes(M: int, R: int, K: int, E: int, sigma_widths, feature_widths,
                       itemsize: int = 4) -> int:
    """Tensors the autograd baseline retains for its backward.

    Per point: position (3), sampled feature (K), every density-MLP layer
    output, the clamped density, the feature-MLP input (K+E), every
    feature-MLP layer output and the transmittance; per segment the weight.
    """
    per_point = 3 + K + sum(sigma_widths) + 1 + K + E + sum(feature_widths) + 1
    return M * ((R + 1) * per_point + R) * itemsize


def naive_render_bytes_per_sample(M: int, K: int, E: int, sigma_widths, feature_widths,
                                  itemsize: int = 4) -> int:
    """Slope of ``naive_render_bytes`` in R."""
    return (naive_render_bytes(M, 2, K, E, sigma_widths, feature_widths, itemsize)
            - naive_render_bytes(M, 1, K, E, sigma_widths, feature_widths, itemsize))


def checkpointed_render_bytes(M: int, R: int, K: int, E: int, sigma_widths, feature_widths,
                              itemsize: int = 4) -> int:
    """Per-sample inputs kept, MLP activations recomputed one ray batch at a time.

    Modeled only: positions and sampled features for every point, plus the
    activations of a single sample slab.
    """
    stored = M * (R + 1) * (3 + K) * itemsize
    slab = M * (sum(sigma_widths) + K + E + sum(feature_widths)) * itemsize
    return stored + slab


def naive_splat_bytes(M: int, R: int, c: int, C_in: int, itemsize: int = 4,
                      decoder_in: int | None = None, decoder_widths=(),
                      prior_channels: int = 0) -> int:
    P = M * (R + 1)
    per_point = 3 * itemsize
    if decoder_in is None:
        C = C_in
        per_point += C_in * itemsize
    else:
        C = decoder_widths[-1]
        per_point += (prior_channels + decoder_in + sum(decoder_widths)) * itemsize
    per_point += c * 8 + c * itemsize + c * C * itemsize
    return P * per_point


def naive_render_flops(M: int, R: int, c: int, K: int, sigma_mlp: MlpParams,
                       feature_mlp: MlpParams, backward: bool = False) -> int:
    mlp = sigma_mlp.flops_per_eval() + feature_mlp.flops_per_eval()
    return M * (R + 1) * (c * K + (2 * mlp if backward else mlp))


def naive_splat_flops(M: int, R: int, c: int, C: int, gs: MlpParams | None = None,
                      backward: bool = False) -> int:
    mlp = 0 if gs is None else gs.flops_per_eval()
    return M * (R + 1) * (c * (C + 1) + (2 * mlp if backward else mlp))


# --- instances ---------------------------------------------------------------

@dataclass
class _RenderCase:
    structure: object
    sigma_mlp: MlpParams
    feature_mlp: MlpParams
    samples: object
    dir_cfg: DirEncConfig
    grad: np.ndarray


@dataclass
class _SplatCase:
    inputs: SplatInputs
    target: TargetSpec
    grad: np.ndarray


def random_rays(M: int, rng: np.random.Generator, distance: float = 3.0,
                dtype=np.float32) -> RayBundle:
    """Rays from a sphere of radius ``distance`` aimed at random points in the central cube."""
    origins = rng.standard_normal((M, 3))
    origins *= distance / np.linalg.norm(origins, axis=1, keepdims=True)
    d = rng.uniform(-0.5, 0.5, (M, 3)) - origins
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far = distance - math.sqrt(3), distance + math.sqrt(3)
    return RayBundle(origins.astype(dtype), d.astype(dtype), near, far)


def _widths(params: MlpParams) -> list[int]:
    return [w.shape[0] for w, _ in params.layers]


def _render_case(spec: BenchSpec) -> _RenderCase:
    rng = np.random.default_rng(spec.seed)
    g = spec.grid
    structure = random_structure(spec.kind, (g, g, g), spec.channels, rng, scale=0.5)
    dir_cfg = DirEncConfig(spec.dir_frequencies)
    sig = default_mlp(spec.channels, 1, rng, spec.mlp_width, spec.mlp_depth,
                      output_activation="softplus")
    feat = default_mlp(spec.channels + dir_cfg.length, spec.out_channels, rng, spec.mlp_width,
                       spec.mlp_depth, output_activation="sigmoid")
    samples = sample_points(random_rays(spec.rays, rng), spec.samples)
    grad = rng.standard_normal((spec.rays, spec.out_channels)).astype(np.float32)
    return _RenderCase(structure, sig, feat, samples, dir_cfg, grad)


def _splat_case(spec: BenchSpec) -> _SplatCase:
    rng = np.random.default_rng(spec.seed)
    side = max(1, int(round(math.sqrt(spec.rays))))
    bundles = [rays_from_camera(cam) for cam in orbit_cameras(spec.views, side)]
    bundle = RayBundle(np.concatenate([b.origins for b in bundles]),
                       np.concatenate([b.directions for b in bundles]),
                       bundles[0].near, bundles[0].far)
    samples = sample_points(bundle, spec.samples)
    feats = rng.standard_normal((len(bundle), spec.channels)).astype(np.float32)
    g = spec.grid
    target = TargetSpec(spec.kind, (g, g, g), spec.channels)
    grad = rng.standard_normal(target.make().table.shape).astype(np.float32)
    return _SplatCase(SplatInputs(feats, samples), target, grad)


def predicted_naive_bytes(spec: BenchSpec) -> int:
    E = DirEncConfig(spec.dir_frequencies).length
    hidden = [spec.mlp_width] * (spec.mlp_depth - 1)
    if spec.component == "renderer":
        return naive_render_bytes(spec.rays, spec.samples, spec.channels, E, hidden + [1],
                                  hidden + [spec.out_channels])
    side = max(1, int(round(math.sqrt(spec.rays))))
    M = spec.views * side * side
    return naive_splat_bytes(M, spec.samples, CORNERS[spec.kind], spec.channels)


# --- runners -----------------------------------------------------------------

def _timed(fn, reps: int):
    """Run ``fn(arena, flops)`` ``reps`` times; counters must agree across repetitions."""
    times, counts, result = [], set(), None
    for _ in range(reps):
        arena, flops = ScratchArena(), FlopCounter()
        t0 = time.perf_counter()
        result = fn(arena, flops)
        times.append((time.perf_counter() - t0) * 1e3)
        counts.add((arena.peak_bytes, flops.multiply_adds))
    if len(counts) != 1:
        raise RuntimeError(f"counters differ across repetitions: {sorted(counts)}")
    (peak, mads), = counts
    return result, peak, mads, statistics.median(times), min(times)


def _bench_renderer(spec: BenchSpec, value: int, exec_cfg: ExecConfig) -> list[BenchRow]:
    s = spec.at(value)
    case = _render_case(s)
    args = (case.structure, case.sigma_mlp, case.feature_mlp, case.samples, case.dir_cfg)
    rows, outputs = [], {}
    if "fused" in s.modes:
        fw, peak, mads, med, mn = _timed(
            lambda a, f: render_forward_fused(*args, exec_cfg=exec_cfg, arena=a, flops=f), s.repetitions)
        rows.append(BenchRow(value, "fused", "fw", peak, mads, med, mn))
        bw, peak, mads, med, mn = _timed(
            lambda a, f: render_backward_fused(*args[:4], case.grad, fw, case.dir_cfg,
                                               exec_cfg=exec_cfg, arena=a, flops=f), s.repetitions)
        rows.append(BenchRow(value, "fused", "bw", peak, mads, med, mn))
        outputs["fused"] = (fw.features, bw.grad_structure.table)
    if "naive" in s.modes:
        predicted = predicted_naive_bytes(s)
        if predicted > s.byte_budget:
            rows += [BenchRow(value, "naive", p, predicted, None, None, None, refused=True)
                     for p in ("fw", "bw")]
        else:
            c = CORNERS[s.kind]
            (fw, cache), peak, _, med, mn = _timed(
                lambda a, f: render_forward_naive(*args, arena=a), s.repetitions)
            rows.append(BenchRow(value, "naive", "fw", peak,
                                 naive_render_flops(s.rays, s.samples, c, s.channels,
                                                    case.sigma_mlp, case.feature_mlp), med, mn))
            bw, _, _, med, mn = _timed(lambda a, f: render_backward_naive(cache, case.grad),
                                       s.repetitions)
            rows.append(BenchRow(value, "naive", "bw", cache.stored_bytes,
                                 naive_render_flops(s.rays, s.samples, c, s.channels,
                                                    case.sigma_mlp, case.feature_mlp, True),
                                 med, mn))
            outputs["naive"] = (fw.features, bw.grad_structure.table)
    _check_equivalence(rows, outputs, value)
    return rows


def _bench_splatter(spec: BenchSpec, value: int, exec_cfg: ExecConfig) -> list[BenchRow]:
    s = spec.at(value)
    case = _splat_case(s)
    M, R, c = case.inputs.samples.num_rays, s.samples, CORNERS[s.kind]
    rows, outputs = [], {}
    if "fused" in s.modes:
        fw, peak, mads, med, mn = _timed(
            lambda a, f: splat_forward_fused(case.inputs, case.target, exec_cfg=exec_cfg,
                                             arena=a, flops=f), s.repetitions)
        rows.append(BenchRow(value, "fused", "fw", peak, mads, med, mn))
        bw, peak, mads, med, mn = _timed(
            lambda a, f: splat_backward_fused(case.inputs, case.target, case.grad,
                                              fw.theta_weight, exec_cfg=exec_cfg,
                                              arena=a, flops=f), s.repetitions)
        rows.append(BenchRow(value, "fused", "bw", peak, mads, med, mn))
        outputs["fused"] = (fw.normalized.table, bw[0])
    if "naive" in s.modes:
        predicted = predicted_naive_bytes(s)
        if predicted > s.byte_budget:
            rows += [BenchRow(value, "naive", p, predicted, None, None, None, refused=True)
                     for p in ("fw", "bw")]
        else:
            (fw, cache), peak, _, med, mn = _timed(
                lambda a, f: splat_forward_naive(case.inputs, case.target, arena=a), s.repetitions)
            rows.append(BenchRow(value, "naive", "fw", peak,
                                 naive_splat_flops(M, R, c, s.channels), med, mn))
            bw, _, _, med, mn = _timed(lambda a, f: splat_backward_naive(cache, case.grad),
                                       s.repetitions)
            rows.append(BenchRow(value, "naive", "bw", cache.stored_bytes,
                                 naive_splat_flops(M, R, c, s.channels, backward=True), med, mn))
            outputs["naive"] = (fw.normalized.table, bw[0])
    _check_equivalence(rows, outputs, value)
    return rows


def _check_equivalence(rows: list[BenchRow], outputs: dict, value: int) -> None:
    if len(outputs) < 2:
        return
    diff = max(float(np.max(np.abs(a - b), initial=0.0))
               for a, b in zip(outputs["fused"], outputs["naive"]))
    for r in rows:
        r.max_abs_diff = diff
    scale = max(1.0, max(float(np.max(np.abs(a), initial=0.0)) for a in outputs["naive"]))
    if diff > EQUIVALENCE_TOL * scale:
        raise AssertionError(f"fused and naive disagree by {diff:.3g} at sweep value {value}")


def run_bench(spec: BenchSpec, out_csv=None, exec_cfg: ExecConfig | None = None) -> list[BenchRow]:
    """Run every (sweep value, mode, pass) and optionally write the CSV."""
    exec_cfg = exec_cfg or ExecConfig(deterministic=True)
    runner = _bench_renderer if spec.component == "renderer" else _bench_splatter
    rows = [row for v in spec.values for row in runner(spec, v, exec_cfg)]
    if out_csv is not None:
        write_csv(out_csv, rows)
    return rows


def write_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
