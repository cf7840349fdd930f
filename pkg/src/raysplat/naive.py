"""Store-everything reference implementations built on torch autograd.

These materialise every sample of every ray (points, interpolated
features, all decoder activations, transmittances) exactly like a plain
autograd renderer or lifter would, and let torch derive the backward. They
share no interpolation or differentiation code with the streaming kernels:
sampling goes through ``torch.nn.functional.grid_sample`` and splatting
through ``index_add_`` with separately computed weights.

Every tensor autograd keeps alive is counted in the scratch arena, which is
how the benchmark measures the baseline's memory.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .hash3d import HashStructure
from .instrument import NULL_ARENA, ScratchArena
from .rays import RaySamples
from .renderer import SIGMA_MAX, RenderGrads, RenderOutput, check_render_inputs
from .tinymlp import DirEncConfig, MlpParams, direnc

def _t(a: np.ndarray, grad: bool = False) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(a).copy())
    return t.requires_grad_(grad)


class _Keep:
    """Charges the tensors autograd retains to a scope, tallied by category."""

    def __init__(self, scope):
        self.scope = scope
        self.tally: dict[str, int] = {}

    def __call__(self, t: torch.Tensor, category: str = "samples") -> torch.Tensor:
        n = t.numel() * t.element_size()
        self.scope.record(n)
        self.tally[category] = self.tally.get(category, 0) + n
        return t


def torch_sample(kind: str, dims, table: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Trilinear (voxel) or summed bilinear (triplane) lookup of (N, 3) points."""
    H, W, D = dims
    K = table.shape[1]
    n = pts.shape[0]
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inside = ((pts >= -1) & (pts <= 1)).all(dim=1).to(table.dtype)[:, None]
    if kind == "voxel":
        vol = table.reshape(H, W, D, K).permute(3, 0, 1, 2)[None]  # 1, K, H, W, D
        grid = torch.stack([z, y, x], dim=1).reshape(1, n, 1, 1, 3)
        out = F.grid_sample(vol, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
        return out.reshape(K, n).T * inside
    a, b = H * W, H * W + W * D
    planes = [
        (table[:a].reshape(H, W, K), torch.stack([y, x], 1)),
        (table[a:b].reshape(W, D, K), torch.stack([z, y], 1)),
        (table[b:].reshape(D, H, K), torch.stack([x, z], 1)),
    ]
    total = 0
    for plane, g in planes:
        img = plane.permute(2, 0, 1)[None]
        out = F.grid_sample(img, g.reshape(1, n, 1, 2), mode="bilinear",
                            padding_mode="zeros", align_corners=True)
        total = total + out.reshape(K, n).T
    return total * inside


def _axis_weights(u: torch.Tensor, n: int):
    t = (u + 1) * 0.5 * (n - 1)
    i0 = torch.clamp(torch.floor(t), 0, n - 2).long()
    return i0, t - i0.to(t.dtype)


def torch_splat_weights(kind: str, dims, pts: torch.Tensor):
    """Cell ids and weights (N, c) for splatting, computed independently of numba."""
    H, W, D = dims
    out_dtype = pts.dtype
    pts = pts.detach().to(torch.float64)
    inside = ((pts >= -1) & (pts <= 1)).all(dim=1).to(pts.dtype)[:, None]
    i0, fx = _axis_weights(pts[:, 0], H)
    j0, fy = _axis_weights(pts[:, 1], W)
    k0, fz = _axis_weights(pts[:, 2], D)
    ids, ws = [], []
    if kind == "voxel":
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    ids.append(((i0 + di) * W + (j0 + dj)) * D + (k0 + dk))
                    ws.append((fx if di else 1 - fx) * (fy if dj else 1 - fy) * (fz if dk else 1 - fz))
    else:
        spec = [(i0, fx, j0, fy, W, 0), (j0, fy, k0, fz, D, H * W),
                (k0, fz, i0, fx, H, H * W + W * D)]
        for a0, fa, b0, fb, nb, off in spec:
            for da in (0, 1):
                for db in (0, 1):
                    ids.append(off + (a0 + da) * nb + (b0 + db))
                    ws.append((fa if da else 1 - fa) * (fb if db else 1 - fb))
    idx = torch.stack(ids, 1)
    w = torch.stack(ws, 1) * inside
    idx = torch.where(w > 0, idx, torch.zeros_like(idx))
    return idx, w.to(out_dtype)


def _mlp_tensors(params: MlpParams):
    return [(_t(w, True), _t(b, True)) for w, b in params.layers]


_ACT = {
    "relu": torch.relu,
    "softplus": F.softplus,
    "sigmoid": torch.sigmoid,
    "identity": lambda z: z,
}


def torch_mlp(params: MlpParams, layers, x: torch.Tensor, keep: _Keep | None = None):
    """Plain MLP; each layer's output is the one tensor per layer autograd keeps."""
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = _ACT[params.output_activation if i == last else params.hidden_activation](h @ w.T + b)
        if keep is not None:
            keep(h, "mlp")
    return h


def _grads_to_mlp(params: MlpParams, grads) -> MlpParams:
    it = iter(grads)
    return MlpParams([(next(it).numpy().copy(), next(it).numpy().copy()) for _ in params.layers],
                     params.hidden_activation, params.output_activation)


# --- renderer ----------------------------------------------------------------

@dataclass
class NaiveRenderCache:
    """Everything the autograd baseline keeps alive for its backward."""

    output: torch.Tensor
    leaves: list[torch.Tensor]
    structure: HashStructure
    sigma_mlp: MlpParams
    feature_mlp: MlpParams
    stored_bytes: int = 0
    tally: dict = field(default_factory=dict)


def render_forward_naive(structure: HashStructure, sigma_mlp: MlpParams,
                         feature_mlp: MlpParams, samples: RaySamples,
                         dir_cfg: DirEncConfig = DirEncConfig(), *,
                         arena: ScratchArena = NULL_ARENA, want_depth: bool = False):
    """Materialised emission-absorption render. Returns (RenderOutput, cache)."""
    check_render_inputs(structure, sigma_mlp, feature_mlp, dir_cfg)
    with arena.scope() as sc:
        keep = _Keep(sc)
        out, trans, depth, leaves = _render_graph(
            structure, sigma_mlp, feature_mlp, samples, dir_cfg, keep, want_depth)
    cache = NaiveRenderCache(out, leaves, structure, sigma_mlp, feature_mlp, sc.nbytes, keep.tally)
    result = RenderOutput(out.detach().numpy().copy(), trans[:, -1].detach().numpy().copy(),
                          depth)
    return result, cache


def _render_graph(structure, sigma_mlp, feature_mlp, samples, dir_cfg, keep, want_depth):
    M, P = samples.num_rays, samples.R + 1
    delta = samples.delta
    table = _t(structure.table, True)
    lsig = _mlp_tensors(sigma_mlp)
    lfeat = _mlp_tensors(feature_mlp)
    pts = keep(_t(samples.all_points().reshape(-1, 3)))
    feat = keep(torch_sample(structure.kind, structure.dims, table, pts))
    raw = torch_mlp(sigma_mlp, lsig, feat, keep)
    sigma = keep(torch.clamp(raw[:, 0], 0, SIGMA_MAX).reshape(M, P))
    enc = _t(direnc(samples.bundle.directions, dir_cfg))
    enc_all = enc[:, None, :].expand(M, P, enc.shape[1]).reshape(M * P, -1)
    gv_in = keep(torch.cat([feat, enc_all], dim=1))
    fv = torch_mlp(feature_mlp, lfeat, gv_in, keep).reshape(M, P, -1)
    trans = keep(torch.exp(-delta * torch.cumsum(sigma, dim=1)))
    vis = keep(trans[:, :-1] - trans[:, 1:])
    out = (vis[:, :, None] * fv[:, 1:]).sum(dim=1)
    depth = None
    if want_depth:
        t = torch.from_numpy(np.stack([samples.depths(j) for j in range(1, P)], 1)).to(vis.dtype)
        depth = (vis * t).sum(1).detach().numpy()
    leaves = [table] + [t for layer in lsig + lfeat for t in layer]
    return out, trans, depth, leaves


def render_backward_naive(cache: NaiveRenderCache, grad_features: np.ndarray) -> RenderGrads:
    if cache is None:
        raise ContractViolation("naive backward needs the forward cache")
    p = torch.from_numpy(np.asarray(grad_features, dtype=cache.output.detach().numpy().dtype))
    grads = torch.autograd.grad(cache.output, cache.leaves, grad_outputs=p, retain_graph=True)
    n_sig = 2 * cache.sigma_mlp.depth
    table = grads[0].numpy().copy()
    return RenderGrads(
        cache.structure.with_table(table),
        _grads_to_mlp(cache.sigma_mlp, grads[1:1 + n_sig]),
        _grads_to_mlp(cache.feature_mlp, grads[1 + n_sig:]),
    )


# --- splatter ----------------------------------------------------------------

@dataclass
class NaiveSplatCache:
    normalized: torch.Tensor
    features: torch.Tensor
    prior: torch.Tensor | None
    gs_layers: list | None
    gs: MlpParams | None
    prior_structure: HashStructure | None
    stored_bytes: int = 0
    tally: dict = field(default_factory=dict)


def _splat_inputs_tensor(inputs, feats, prior_t, enc, pts, keep):
    M, P = inputs.samples.num_rays, inputs.samples.R + 1
    parts = [feats[:, None, :].expand(M, P, feats.shape[1]).reshape(M * P, -1)]
    if prior_t is not None:
        ps = inputs.prior
        parts.append(keep(torch_sample(ps.kind, ps.dims, prior_t, pts)))
    parts.append(enc[:, None, :].expand(M, P, enc.shape[1]).reshape(M * P, -1))
    if inputs.append_position:
        parts.append(pts)
    return keep(torch.cat(parts, 1))


def splat_forward_naive(inputs, target, *, arena: ScratchArena = NULL_ARENA):
    """Materialise every splatted feature, then scatter. Returns (SplatResult, cache)."""
    from .splatter import SplatResult, check_splat_inputs

    check_splat_inputs(inputs, target)
    dtype = inputs.features.dtype
    with arena.scope() as sc:
        keep = _Keep(sc)
        normalized, theta, theta_w, feats, prior_t, gs_layers = _splat_graph(inputs, target, keep)
    tmpl = target.make(1, dtype)
    result = SplatResult(
        tmpl.with_table(theta.detach().numpy().astype(dtype)),
        tmpl.with_table(theta_w.detach().numpy().astype(dtype)[:, None]),
        tmpl.with_table(normalized.detach().numpy().astype(dtype)),
    )
    cache = NaiveSplatCache(normalized, feats, prior_t, gs_layers, inputs.gs, inputs.prior,
                            sc.nbytes, keep.tally)
    return result, cache


def _splat_graph(inputs, target, keep):
    from .splatter import EPS

    samples = inputs.samples
    M, P = samples.num_rays, samples.R + 1
    dtype = inputs.features.dtype
    feats = _t(inputs.features, True)
    prior_t = _t(inputs.prior.table, True) if inputs.prior is not None else None
    pts = keep(_t(samples.all_points().reshape(-1, 3)))
    gs_layers = None
    if inputs.gs is not None:
        enc = _t(direnc(samples.bundle.directions, inputs.dir_cfg))
        gs_in = _splat_inputs_tensor(inputs, feats, prior_t, enc, pts, keep)
        gs_layers = _mlp_tensors(inputs.gs)
        vals = torch_mlp(inputs.gs, gs_layers, gs_in, keep)
    else:
        vals = keep(feats[:, None, :].expand(M, P, feats.shape[1]).reshape(M * P, -1))
    idx, w = torch_splat_weights(target.kind, target.dims, pts)
    keep(idx)
    keep(w)
    ncells = target.make(1, dtype).table.shape[0]
    contrib = keep((w[:, :, None] * vals[:, None, :]).reshape(-1, vals.shape[1]))
    theta = torch.zeros(ncells, vals.shape[1], dtype=vals.dtype).index_add(0, idx.reshape(-1), contrib)
    theta_w = torch.zeros(ncells, dtype=vals.dtype).index_add(0, idx.reshape(-1), w.reshape(-1))
    denom = torch.clamp(theta_w, min=EPS)[:, None]
    normalized = torch.where(theta_w[:, None] > 0, theta / denom, torch.zeros_like(theta))
    return normalized, theta, theta_w, feats, prior_t, gs_layers


def splat_backward_naive(cache: NaiveSplatCache, grad_normalized: np.ndarray):
    """Returns (grad_features, grad_prior structure or None, grad_gs or None)."""
    leaves = [cache.features]
    if cache.prior is not None and cache.gs is not None:
        leaves.append(cache.prior)
    if cache.gs_layers is not None:
        leaves += [t for l in cache.gs_layers for t in l]
    g = torch.from_numpy(np.asarray(grad_normalized, dtype=cache.normalized.detach().numpy().dtype))
    grads = torch.autograd.grad(cache.normalized, leaves, grad_outputs=g, retain_graph=True,
                                allow_unused=True)
    grads = [torch.zeros_like(l) if gr is None else gr for l, gr in zip(leaves, grads)]
    gfeat = grads[0].numpy().copy()
    gprior, ggs = None, None
    pos = 1
    if cache.prior is not None and cache.gs is not None:
        gprior = cache.prior_structure.with_table(grads[1].numpy().copy())
        pos = 2
    if cache.gs_layers is not None:
        ggs = _grads_to_mlp(cache.gs, grads[pos:])
    return gfeat, gprior, ggs
