"""Emission-absorption rendering with ray-streaming forward and backward passes.

Rendered feature of a ray with samples j = 0..R spaced ``delta`` apart::

    T_j = exp(-delta * sum_{n<=j} sigma_n)
    v   = sum_{j=1..R} (T_{j-1} - T_j) * f_v(x_j)

The forward marches j = 0..R keeping only ``v`` and the running ``T`` per
ray, and caches the final transmittance ``T_R``. The backward marches
q = R..0, rebuilds ``T_{q-1} = T_q * exp(delta * sigma_q)`` from that cache,
re-evaluates the decoders at ``x_q`` and keeps a running suffix sum
``A_q = sum_{j>q} (T_{j-1} - T_j) * a_j`` with ``a_j = p . f_v(x_j)``, so that

    dL/dsigma_q = -delta * (A_q - T_q * a_q)      (q >= 1)
    dL/dsigma_0 = -delta * A_0
    dL/df_v(x_q) = (T_{q-1} - T_q) * p

Per-ray working memory is a handful of feature-sized vectors, whatever R is.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _interp
from .errors import ContractViolation, DimensionError
from .execution import ExecConfig, chunk_slices, run_chunks
from .hash3d import HashStructure
from .instrument import NULL_ARENA, NULL_FLOPS, FlopCounter, ScratchArena
from .rays import RaySamples
from .tinymlp import DirEncConfig, MlpParams, MlpWorkspace, direnc

SIGMA_MAX = 1e4
# Transmittance is one scalar per ray, so it is carried in float64 whatever the
# kernel dtype: the forward march and the reverse rebuild then stay within
# rounding of each other at large R, and the floor can sit far below anything
# float32 could hold (exp(-512) is still representable).
TRANS_DTYPE = np.float64
T_FLOOR = 1e-300
# keeps the per-step factor exp(-delta * sigma) a normal float32 the backward can divide by
EXP_CAP = 70.0


@dataclass
class RenderOutput:
    features: np.ndarray            # (M, C)
    final_transmittance: np.ndarray  # (M,), float64
    expected_depth: np.ndarray | None = None
    cache_key: tuple | None = None


@dataclass
class RenderGrads:
    grad_structure: HashStructure
    grad_sigma_mlp: MlpParams
    grad_feature_mlp: MlpParams


def _cache_key(structure, samples: RaySamples) -> tuple:
    return (structure.kind, structure.dims, structure.channels, samples.num_rays,
            samples.R, float(samples.delta))


def check_render_inputs(structure: HashStructure, sigma_mlp: MlpParams,
                        feature_mlp: MlpParams, dir_cfg: DirEncConfig) -> None:
    K = structure.channels
    if sigma_mlp.in_dim != K or sigma_mlp.out_dim != 1:
        raise DimensionError(
            f"density decoder must map {K} -> 1, got {sigma_mlp.in_dim} -> {sigma_mlp.out_dim}"
        )
    if feature_mlp.in_dim != K + dir_cfg.length:
        raise DimensionError(
            f"feature decoder expects {feature_mlp.in_dim} inputs, "
            f"structure + direction encoding give {K + dir_cfg.length}"
        )


def _density(raw: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Clamp decoder output to [0, SIGMA_MAX]."""
    np.clip(raw, 0.0, SIGMA_MAX, out=out)
    return out


def _step_factor(sigma: np.ndarray, delta: float, out: np.ndarray) -> np.ndarray:
    """exp(-delta * sigma) in the kernel dtype; forward and backward must share these bits."""
    np.multiply(sigma, -delta, out=out)
    np.maximum(out, -EXP_CAP, out=out)
    return np.exp(out, out=out)


def render_forward_fused(structure: HashStructure, sigma_mlp: MlpParams,
                         feature_mlp: MlpParams, samples: RaySamples,
                         dir_cfg: DirEncConfig = DirEncConfig(), *,
                         want_depth: bool = False, exec_cfg: ExecConfig | None = None,
                         arena: ScratchArena = NULL_ARENA,
                         flops: FlopCounter = NULL_FLOPS) -> RenderOutput:
    check_render_inputs(structure, sigma_mlp, feature_mlp, dir_cfg)
    exec_cfg = exec_cfg or ExecConfig()
    dtype = structure.dtype
    M, R, delta = samples.num_rays, samples.R, samples.delta
    K, C = structure.channels, feature_mlp.out_dim
    E = dir_cfg.length
    nc = structure.corners_per_point
    table = structure.table

    features = np.zeros((M, C), dtype)
    final_t = np.ones(M, TRANS_DTYPE)
    depth = np.zeros(M, dtype) if want_depth else None

    def work(s: slice, _acc) -> None:
        m = s.stop - s.start
        with arena.scope() as sc:
            pts = sc.alloc((m, 3), samples.dtype)
            idx = sc.alloc((m, nc), np.int64)
            w = sc.alloc((m, nc), dtype)
            feat = sc.alloc((m, K), dtype)
            gv_in = sc.alloc((m, K + E), dtype)
            sigma = sc.alloc(m, dtype)
            trans = sc.alloc(m, TRANS_DTYPE)
            trans_prev = sc.alloc(m, TRANS_DTYPE)
            vis = sc.alloc(m, dtype)
            acc = sc.alloc((m, C), dtype)
            dacc = sc.alloc(m, dtype) if want_depth else None
            ws_sigma = MlpWorkspace(sigma_mlp, m, sc, flops=flops)
            ws_feat = MlpWorkspace(feature_mlp, m, sc, flops=flops)

            gv_in[:, K:] = direnc(samples.bundle.directions[s], dir_cfg)
            trans[:] = 1
            for j in range(R + 1):
                samples.points(j, s, out=pts)
                structure.corners(pts, idx, w)
                _interp.gather(table, idx, w, feat)
                flops.add("interp", m * nc * K)
                _density(ws_sigma.forward(feat)[:, 0], sigma)
                trans_prev[:] = trans
                _step_factor(sigma, delta, sigma)
                trans *= sigma
                np.maximum(trans, T_FLOOR, out=trans)
                if j == 0:
                    continue
                gv_in[:, :K] = feat
                fv = ws_feat.forward(gv_in)
                np.subtract(trans_prev, trans, out=vis)
                acc += vis[:, None] * fv
                if want_depth:
                    dacc += vis * samples.depths(j, s).astype(dtype)
            features[s] = acc
            final_t[s] = trans
            if want_depth:
                depth[s] = dacc

    run_chunks(chunk_slices(M, exec_cfg.chunk_rays), work, None, lambda: None,
               lambda a, b: None, exec_cfg)
    return RenderOutput(features, final_t, depth, _cache_key(structure, samples))


class _Grads:
    def __init__(self, structure, sigma_mlp, feature_mlp):
        self.table = np.zeros_like(structure.table)
        self.sigma = sigma_mlp.zeros_like()
        self.feat = feature_mlp.zeros_like()

    def merge(self, other: "_Grads") -> None:
        self.table += other.table
        for a, b in zip(self.sigma.tensors() + self.feat.tensors(),
                        other.sigma.tensors() + other.feat.tensors()):
            a += b


def render_backward_fused(structure: HashStructure, sigma_mlp: MlpParams,
                          feature_mlp: MlpParams, samples: RaySamples,
                          grad_features: np.ndarray, forward: RenderOutput | None,
                          dir_cfg: DirEncConfig = DirEncConfig(), *,
                          exec_cfg: ExecConfig | None = None,
                          arena: ScratchArena = NULL_ARENA,
                          flops: FlopCounter = NULL_FLOPS) -> RenderGrads:
    """Vector-Jacobian product of the rendered features with ``grad_features``.

    ``forward`` must be the output of the matching forward call; only its
    cached final transmittance is used.
    """
    check_render_inputs(structure, sigma_mlp, feature_mlp, dir_cfg)
    if forward is None or forward.final_transmittance is None:
        raise ContractViolation("backward needs the final transmittance cached by the forward")
    if forward.cache_key is not None and forward.cache_key != _cache_key(structure, samples):
        raise ContractViolation(
            f"cached forward {forward.cache_key} does not match {_cache_key(structure, samples)}"
        )
    exec_cfg = exec_cfg or ExecConfig()
    dtype = structure.dtype
    M, R, delta = samples.num_rays, samples.R, samples.delta
    K, C = structure.channels, feature_mlp.out_dim
    E = dir_cfg.length
    nc = structure.corners_per_point
    p_all = np.asarray(grad_features, dtype=dtype)
    t_final = np.asarray(forward.final_transmittance, dtype=TRANS_DTYPE)
    if p_all.shape != (M, C) or t_final.shape != (M,):
        raise ContractViolation(
            f"upstream {p_all.shape} / cached transmittance {t_final.shape} do not match {M} rays x {C}"
        )
    table = structure.table

    def work(s: slice, acc: _Grads) -> None:
        m = s.stop - s.start
        with arena.scope() as sc:
            pts = sc.alloc((m, 3), samples.dtype)
            idx = sc.alloc((m, nc), np.int64)
            w = sc.alloc((m, nc), dtype)
            feat = sc.alloc((m, K), dtype)
            gv_in = sc.alloc((m, K + E), dtype)
            sigma = sc.alloc(m, dtype)
            live = sc.alloc((m, 1), dtype)
            factor = sc.alloc(m, dtype)
            trans = sc.alloc(m, TRANS_DTYPE)
            trans_prev = sc.alloc(m, TRANS_DTYPE)
            vis = sc.alloc(m, dtype)
            suffix = sc.alloc(m, dtype)
            a_q = sc.alloc(m, dtype)
            g_sigma = sc.alloc((m, 1), dtype)
            g_fv = sc.alloc((m, C), dtype)
            gin_sigma = sc.alloc((m, K), dtype)
            gin_feat = sc.alloc((m, K + E), dtype)
            ws_sigma = MlpWorkspace(sigma_mlp, m, sc, keep=True, flops=flops)
            ws_feat = MlpWorkspace(feature_mlp, m, sc, keep=True, flops=flops)
            p = p_all[s]

            gv_in[:, K:] = direnc(samples.bundle.directions[s], dir_cfg)
            trans[:] = t_final[s]
            for q in range(R, -1, -1):
                samples.points(q, s, out=pts)
                structure.corners(pts, idx, w)
                _interp.gather(table, idx, w, feat)
                flops.add("interp", m * nc * K)
                raw = ws_sigma.forward(feat, category="mlp_recompute")[:, 0]
                _density(raw, sigma)
                np.logical_and(raw >= 0, raw <= SIGMA_MAX, out=live[:, 0], casting="unsafe")
                # T_{q-1} = T_q / exp(-delta * sigma_q), dividing by the forward's own factor
                _step_factor(sigma, delta, factor)
                np.divide(trans, factor, out=trans_prev)
                # once T_R sits on the floor the rebuild can only be bounded, not exact
                np.clip(trans_prev, T_FLOOR, 1.0, out=trans_prev)
                if q >= 1:
                    gv_in[:, :K] = feat
                    fv = ws_feat.forward(gv_in, category="mlp_recompute")
                    np.einsum("mc,mc->m", p, fv, out=a_q)
                    np.subtract(trans_prev, trans, out=vis)
                    np.multiply(vis[:, None], p, out=g_fv)
                    ws_feat.vjp(g_fv, acc.feat, gin_feat)
                    # -delta * (A_q - T_q a_q)
                    np.multiply(trans, a_q, out=g_sigma[:, 0])
                    g_sigma[:, 0] -= suffix
                    g_sigma *= delta
                else:
                    np.multiply(suffix, -delta, out=g_sigma[:, 0])
                g_sigma *= live
                ws_sigma.vjp(g_sigma, acc.sigma, gin_sigma)
                if q >= 1:
                    gin_sigma += gin_feat[:, :K]
                    suffix += vis * a_q
                _interp.scatter(acc.table, idx, w, gin_sigma)
                flops.add("interp", m * nc * K)
                trans, trans_prev = trans_prev, trans

    shared = _Grads(structure, sigma_mlp, feature_mlp)
    run_chunks(chunk_slices(M, exec_cfg.chunk_rays), work, shared,
               lambda: _Grads(structure, sigma_mlp, feature_mlp),
               lambda a, b: a.merge(b), exec_cfg)
    return RenderGrads(structure.with_table(shared.table), shared.sigma, shared.feat)


def render(structure, sigma_mlp, feature_mlp, samples, dir_cfg=DirEncConfig(), **kw):
    """Alias for the fused forward."""
    return render_forward_fused(structure, sigma_mlp, feature_mlp, samples, dir_cfg, **kw)


def transmittance_profile(structure: HashStructure, sigma_mlp: MlpParams,
                          samples: RaySamples) -> np.ndarray:
    """All T_j (M x (R+1)) by forward marching; a diagnostic, not a kernel."""
    dtype = structure.dtype
    M, R, delta = samples.num_rays, samples.R, samples.delta
    out = np.empty((M, R + 1), TRANS_DTYPE)
    trans = np.ones(M, TRANS_DTYPE)
    ws = MlpWorkspace(sigma_mlp, M)
    sigma = np.empty(M, dtype)
    for j in range(R + 1):
        feat = _sample_rows(structure, samples.points(j))
        _density(ws.forward(feat)[:, 0], sigma)
        trans = np.maximum(trans * _step_factor(sigma, delta, sigma), T_FLOOR)
        out[:, j] = trans
    return out


def reconstruct_transmittance_check(structure: HashStructure, sigma_mlp: MlpParams,
                                    samples: RaySamples, final_transmittance) -> float:
    """Max |T_j(forward) - T_j(rebuilt backwards from T_R)| over rays and samples."""
    forward_t = transmittance_profile(structure, sigma_mlp, samples)
    dtype = structure.dtype
    delta = samples.delta
    trans = np.asarray(final_transmittance, dtype=TRANS_DTYPE).copy()
    ws = MlpWorkspace(sigma_mlp, samples.num_rays)
    sigma = np.empty(samples.num_rays, dtype)
    worst = float(np.max(np.abs(forward_t[:, -1] - trans)))
    for q in range(samples.R, 0, -1):
        feat = _sample_rows(structure, samples.points(q))
        _density(ws.forward(feat)[:, 0], sigma)
        trans = np.clip(trans / _step_factor(sigma, delta, sigma), T_FLOOR, 1.0)
        worst = max(worst, float(np.max(np.abs(forward_t[:, q - 1] - trans))))
    return worst


def _sample_rows(structure: HashStructure, pts: np.ndarray) -> np.ndarray:
    n, nc = pts.shape[0], structure.corners_per_point
    idx = np.empty((n, nc), np.int64)
    w = np.empty((n, nc), structure.dtype)
    structure.corners(np.ascontiguousarray(pts), idx, w)
    out = np.empty((n, structure.channels), structure.dtype)
    _interp.gather(structure.table, idx, w, out)
    return out
