"""Central finite-difference checks of the fused backward passes, in float64.

Each check perturbs a random subset of one parameter group by ±eps, measures
the change of a random linear functional of the output, and compares with
the analytic gradient. The error of a group is
``max |fd - analytic| / max |analytic|`` over its sampled entries.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bench import random_rays
from .execution import ExecConfig
from .hash3d import random_structure
from .rays import sample_points
from .renderer import render_backward_fused, render_forward_fused
from .splatter import SplatInputs, TargetSpec, splat_backward_fused, splat_forward_fused
from .tinymlp import DirEncConfig, MlpParams, default_mlp


@dataclass
class GradcheckConfig:
    kinds: list[str] = field(default_factory=lambda: ["voxel", "triplane"])
    grid: int = 8
    channels: int = 4
    rays: int = 16
    samples: int = 32
    mlp_width: int = 16
    mlp_depth: int = 2
    dir_frequencies: int = 2
    # smooth, so a ±eps stencil never straddles a kink of the function being probed
    hidden_activation: str = "softplus"
    params_per_component: int = 200
    eps: float = 1e-3
    tolerance: float = 1e-2
    seed: int = 0
    # negative control: scale every analytic gradient by (1 + corrupt_backward)
    corrupt_backward: float = 0.0

    @classmethod
    def load(cls, path) -> "GradcheckConfig":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class CheckResult:
    component: str
    kind: str
    group: str
    count: int
    max_rel_error: float
    passed: bool


def _flat_mlp(params: MlpParams) -> list[np.ndarray]:
    return [t for layer in params.layers for t in layer]


def _pick(grad: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Flat indices to probe, preferring entries the output actually depends on."""
    flat = grad.reshape(-1)
    live = np.flatnonzero(flat != 0)
    pool = live if live.size >= n else np.arange(flat.size)
    return rng.choice(pool, size=min(n, pool.size), replace=False)


def _probe(loss, tensor: np.ndarray, analytic: np.ndarray, idx: np.ndarray, eps: float):
    """Returns (finite differences, analytic values) at flat indices ``idx``."""
    flat = tensor.reshape(-1)
    fd = np.empty(len(idx))
    for n, i in enumerate(idx):
        keep = flat[i]
        flat[i] = keep + eps
        up = loss()
        flat[i] = keep - eps
        down = loss()
        flat[i] = keep
        fd[n] = (up - down) / (2 * eps)
    return fd, analytic.reshape(-1)[idx]


def _split(n: int, capacities: list[int]) -> list[int]:
    """Spread ``n`` probes over groups as evenly as their sizes allow."""
    out = [0] * len(capacities)
    left = n
    open_ = [i for i, c in enumerate(capacities) if c > 0]
    while left > 0 and open_:
        share = max(1, left // len(open_))
        for i in list(open_):
            take = min(share, capacities[i] - out[i], left)
            out[i] += take
            left -= take
            if out[i] == capacities[i]:
                open_.remove(i)
            if left == 0:
                break
    return out


def _groups_checked(component, kind, loss, groups, k, cfg, rng) -> list[CheckResult]:
    sizes = [sum(t.size for t in tensors) for _, tensors, _ in groups]
    return [_check_group(component, kind, name, loss, tensors, [a * k for a in analytic], n, cfg, rng)
            for (name, tensors, analytic), n in zip(groups, _split(cfg.params_per_component, sizes))]


def check_renderer(cfg: GradcheckConfig, kind: str, rng: np.random.Generator) -> list[CheckResult]:
    g = cfg.grid
    dtype = np.float64
    structure = random_structure(kind, (g, g, g), cfg.channels, rng, dtype, scale=0.5)
    dir_cfg = DirEncConfig(cfg.dir_frequencies)
    sig = default_mlp(cfg.channels, 1, rng, cfg.mlp_width, cfg.mlp_depth,
                      hidden_activation=cfg.hidden_activation, output_activation="softplus",
                      dtype=dtype)
    feat = default_mlp(cfg.channels + dir_cfg.length, 3, rng, cfg.mlp_width, cfg.mlp_depth,
                       hidden_activation=cfg.hidden_activation, output_activation="sigmoid",
                       dtype=dtype)
    samples = sample_points(random_rays(cfg.rays, rng, dtype=dtype), cfg.samples)
    p = rng.standard_normal((cfg.rays, 3))
    exec_cfg = ExecConfig(threads=1)

    def loss() -> float:
        out = render_forward_fused(structure, sig, feat, samples, dir_cfg, exec_cfg=exec_cfg)
        return float(np.sum(out.features * p))

    fw = render_forward_fused(structure, sig, feat, samples, dir_cfg, exec_cfg=exec_cfg)
    grads = render_backward_fused(structure, sig, feat, samples, p, fw, dir_cfg, exec_cfg=exec_cfg)
    k = 1.0 + cfg.corrupt_backward
    groups = [
        ("theta", [structure.table], [grads.grad_structure.table]),
        ("sigma_mlp", _flat_mlp(sig), _flat_mlp(grads.grad_sigma_mlp)),
        ("feature_mlp", _flat_mlp(feat), _flat_mlp(grads.grad_feature_mlp)),
    ]
    return _groups_checked("renderer", kind, loss, groups, k, cfg, rng)


def check_splatter(cfg: GradcheckConfig, kind: str, rng: np.random.Generator) -> list[CheckResult]:
    g = cfg.grid
    dtype = np.float64
    dir_cfg = DirEncConfig(cfg.dir_frequencies)
    prior = random_structure(kind, (g, g, g), cfg.channels, rng, dtype, scale=0.5)
    c_in = cfg.channels
    target = TargetSpec(kind, (g, g, g), cfg.channels)
    samples = sample_points(random_rays(cfg.rays, rng, dtype=dtype), cfg.samples)
    features = rng.standard_normal((cfg.rays, c_in))
    probe_inputs = SplatInputs(features, samples, prior, None, dir_cfg)
    gs = default_mlp(probe_inputs.decoder_in_dim, cfg.channels, rng, cfg.mlp_width,
                     cfg.mlp_depth, hidden_activation=cfg.hidden_activation,
                     output_activation="identity", dtype=dtype)
    inputs = SplatInputs(features, samples, prior, gs, dir_cfg)
    q = rng.standard_normal(target.make(dtype=dtype).table.shape)
    exec_cfg = ExecConfig(threads=1)

    def loss() -> float:
        res = splat_forward_fused(inputs, target, exec_cfg=exec_cfg)
        return float(np.sum(res.normalized.table * q))

    fw = splat_forward_fused(inputs, target, exec_cfg=exec_cfg)
    gfeat, gprior, ggs = splat_backward_fused(inputs, target, q, fw.theta_weight,
                                              exec_cfg=exec_cfg)
    k = 1.0 + cfg.corrupt_backward
    groups = [
        ("features", [features], [gfeat]),
        ("prior", [prior.table], [gprior.table]),
        ("splat_mlp", _flat_mlp(gs), _flat_mlp(ggs)),
    ]
    return _groups_checked("splatter", kind, loss, groups, k, cfg, rng)


def _check_group(component, kind, name, loss, tensors, analytic, n, cfg, rng) -> CheckResult:
    sizes = np.array([t.size for t in tensors])
    counts = np.minimum(sizes, np.maximum(1, np.floor(n * sizes / sizes.sum())).astype(int))
    counts += _split(max(0, n - int(counts.sum())), list(sizes - counts))
    fds, ans = [], []
    for t, a, c in zip(tensors, analytic, counts):
        fd, an = _probe(loss, t, a, _pick(a, int(c), rng), cfg.eps)
        fds.append(fd)
        ans.append(an)
    fd, an = np.concatenate(fds), np.concatenate(ans)
    scale = max(float(np.max(np.abs(an))), float(np.max(np.abs(fd))), 1e-12)
    err = float(np.max(np.abs(fd - an)) / scale)
    return CheckResult(component, kind, name, len(fd), err, err < cfg.tolerance)


def run_gradcheck(cfg: GradcheckConfig) -> list[CheckResult]:
    rng = np.random.default_rng(cfg.seed)
    results = []
    for kind in cfg.kinds:
        results += check_renderer(cfg, kind, rng)
        results += check_splatter(cfg, kind, rng)
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'component':<10} {'kind':<9} {'group':<12} {'n':>4} {'max_rel_err':>12}  result"]
    for r in results:
        lines.append(f"{r.component:<10} {r.kind:<9} {r.group:<12} {r.count:>4} "
                     f"{r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def config_json(cfg: GradcheckConfig) -> str:
    return json.dumps(asdict(cfg), indent=2)
