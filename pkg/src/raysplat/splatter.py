"""Push-based lifting of per-pixel features into a hash structure.

Every pixel feature is copied to the R+1 samples of its ray (optionally
modified per sample by a small decoder that also sees a prior structure and
the ray direction) and scattered into a zero-initialised target with the
same weights sampling would use. A second pass with the decoder and prior
switched off scatters the scalar 1, giving per-cell weight totals, and the
result is the cell-wise ratio of the two.

The backward reads the upstream gradient back along each ray with the same
weights, so it mirrors the renderer's forward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _interp
from .errors import ContractViolation, DimensionError
from .execution import ExecConfig, chunk_slices, run_chunks
from .hash3d import HashStructure, make_structure, splat_accumulate
from .instrument import NULL_ARENA, NULL_FLOPS, FlopCounter, ScratchArena
from .rays import RaySamples
from .tinymlp import DirEncConfig, MlpParams, MlpWorkspace, direnc

EPS = 1e-8


@dataclass(frozen=True)
class TargetSpec:
    kind: str
    dims: tuple[int, int, int]
    channels: int

    def make(self, channels: int | None = None, dtype=np.float32) -> HashStructure:
        return make_structure(self.kind, self.dims, channels or self.channels, dtype)

    @classmethod
    def like(cls, structure: HashStructure) -> "TargetSpec":
        return cls(structure.kind, tuple(structure.dims), structure.channels)


@dataclass
class SplatInputs:
    features: np.ndarray                 # (M, C_in), one row per ray
    samples: RaySamples
    prior: HashStructure | None = None
    gs: MlpParams | None = None
    dir_cfg: DirEncConfig = DirEncConfig()
    append_position: bool = False

    @property
    def decoder_in_dim(self) -> int:
        n = self.features.shape[1] + self.dir_cfg.length
        if self.prior is not None:
            n += self.prior.channels
        if self.append_position:
            n += 3
        return n


@dataclass
class SplatResult:
    theta: HashStructure
    theta_weight: HashStructure
    normalized: HashStructure


def check_splat_inputs(inputs: SplatInputs, target: TargetSpec) -> None:
    feats = inputs.features
    if feats.ndim != 2 or feats.shape[0] != inputs.samples.num_rays:
        raise DimensionError(
            f"need one feature row per ray ({inputs.samples.num_rays}), got {feats.shape}"
        )
    out_c = inputs.gs.out_dim if inputs.gs is not None else feats.shape[1]
    if target.channels != out_c:
        raise DimensionError(f"target has {target.channels} channels, splatted values have {out_c}")
    if inputs.gs is not None and inputs.gs.in_dim != inputs.decoder_in_dim:
        raise DimensionError(
            f"splat decoder expects {inputs.gs.in_dim} inputs, got {inputs.decoder_in_dim}"
        )


def canonical_order(inputs: SplatInputs) -> np.ndarray:
    """Ray order determined by ray content alone.

    Processing rays in this order makes accumulation bit-identical under any
    permutation of the input rays: rays with equal keys contribute equal
    values, so their relative order cannot change a sum.
    """
    b = inputs.samples.bundle
    cols = [inputs.features, b.origins, b.directions]
    if inputs.samples.offsets is not None:
        cols.append(inputs.samples.offsets[:, None])
    keys = np.concatenate([np.asarray(c, dtype=np.float64).reshape(len(b), -1) for c in cols], 1)
    return np.lexsort(keys.T[::-1])


def _normalize(theta: np.ndarray, weight: np.ndarray) -> np.ndarray:
    out = np.zeros_like(theta)
    touched = weight[:, 0] > 0
    out[touched] = theta[touched] / np.maximum(weight[touched], EPS)
    return out


class _SplatChunk:
    """Per-chunk buffers for building decoder inputs sample by sample."""

    def __init__(self, inputs: SplatInputs, rows, sc, flops, keep: bool):
        self.inputs = inputs
        self.rows = rows
        self.flops = flops
        s = inputs.samples
        m = len(rows) if not isinstance(rows, slice) else rows.stop - rows.start
        self.m = m
        dtype = inputs.features.dtype
        self.c_in = inputs.features.shape[1]
        self.feats = sc.alloc((m, self.c_in), dtype)
        self.feats[...] = inputs.features[rows]
        self.pts = sc.alloc((m, 3), s.dtype)
        self.ws = None
        if inputs.gs is not None:
            prior = inputs.prior
            self.kp = prior.channels if prior is not None else 0
            self.gs_in = sc.alloc((m, inputs.decoder_in_dim), dtype)
            self.gs_in[:, :self.c_in] = self.feats
            e0 = self.c_in + self.kp
            self.gs_in[:, e0:e0 + inputs.dir_cfg.length] = direnc(
                s.bundle.directions[rows], inputs.dir_cfg)
            if prior is not None:
                self.prior_idx = sc.alloc((m, prior.corners_per_point), np.int64)
                self.prior_w = sc.alloc((m, prior.corners_per_point), prior.dtype)
                self.prior_feat = sc.alloc((m, self.kp), dtype)
            self.ws = MlpWorkspace(inputs.gs, m, sc, keep=keep, flops=flops)

    def points(self, j: int) -> np.ndarray:
        return self.inputs.samples.points(j, self.rows, out=self.pts)

    def values(self, j: int, category: str = "mlp_fw") -> np.ndarray:
        """Feature splatted from sample j of every ray in the chunk."""
        if self.ws is None:
            return self.feats
        inp = self.inputs
        if inp.prior is not None:
            inp.prior.corners(self.pts, self.prior_idx, self.prior_w)
            _interp.gather(inp.prior.table, self.prior_idx, self.prior_w, self.prior_feat)
            self.flops.add("interp", self.m * self.prior_idx.shape[1] * self.kp)
            self.gs_in[:, self.c_in:self.c_in + self.kp] = self.prior_feat
        if inp.append_position:
            self.gs_in[:, -3:] = self.pts
        return self.ws.forward(self.gs_in, category)


def _order(inputs: SplatInputs, exec_cfg: ExecConfig):
    M = inputs.samples.num_rays
    if exec_cfg.deterministic:
        order = canonical_order(inputs)
        return [order[s] for s in chunk_slices(M, exec_cfg.chunk_rays)]
    return chunk_slices(M, exec_cfg.chunk_rays)


def splat_forward_fused(inputs: SplatInputs, target: TargetSpec, *,
                        exec_cfg: ExecConfig | None = None,
                        arena: ScratchArena = NULL_ARENA,
                        flops: FlopCounter = NULL_FLOPS) -> SplatResult:
    check_splat_inputs(inputs, target)
    exec_cfg = exec_cfg or ExecConfig()
    dtype = inputs.features.dtype
    R = inputs.samples.R
    theta = target.make(dtype=dtype)
    weight = target.make(channels=1, dtype=dtype)
    nc = theta.corners_per_point
    chunks = _order(inputs, exec_cfg)

    def feature_pass(rows, acc: np.ndarray) -> None:
        with arena.scope() as sc:
            ch = _SplatChunk(inputs, rows, sc, flops, keep=False)
            idx = sc.alloc((ch.m, nc), np.int64)
            w = sc.alloc((ch.m, nc), dtype)
            for j in range(R + 1):
                pts = ch.points(j)
                theta.corners(pts, idx, w)
                vals = ch.values(j)
                _interp.scatter(acc, idx, w, vals)
                flops.add("interp", ch.m * nc * vals.shape[1])

    def weight_pass(rows, acc: np.ndarray) -> None:
        with arena.scope() as sc:
            m = len(rows) if not isinstance(rows, slice) else rows.stop - rows.start
            pts = sc.alloc((m, 3), inputs.samples.dtype)
            idx = sc.alloc((m, nc), np.int64)
            w = sc.alloc((m, nc), dtype)
            ones = sc.alloc(m, dtype)
            ones[:] = 1
            for j in range(R + 1):
                inputs.samples.points(j, rows, out=pts)
                theta.corners(pts, idx, w)
                _interp.scatter_weights(acc, idx, w, ones)
                flops.add("interp", m * nc)

    def add(a, b):
        a += b

    run_chunks(chunks, feature_pass, theta.table, lambda: np.zeros_like(theta.table), add, exec_cfg)
    run_chunks(chunks, weight_pass, weight.table, lambda: np.zeros_like(weight.table), add, exec_cfg)
    normalized = theta.with_table(_normalize(theta.table, weight.table))
    return SplatResult(theta, weight, normalized)


def splat_backward_fused(inputs: SplatInputs, target: TargetSpec, grad_normalized,
                         theta_weight: HashStructure | None, *,
                         exec_cfg: ExecConfig | None = None,
                         arena: ScratchArena = NULL_ARENA,
                         flops: FlopCounter = NULL_FLOPS):
    """Gradients of <grad_normalized, normalized> for the splat inputs.

    The weight totals from the forward are treated as constants. Returns
    ``(grad_features, grad_prior, grad_gs)``; the last two are ``None`` when
    there is no decoder (or no prior).
    """
    check_splat_inputs(inputs, target)
    if theta_weight is None:
        raise ContractViolation("splat backward needs the weight totals cached by the forward")
    exec_cfg = exec_cfg or ExecConfig()
    dtype = inputs.features.dtype
    g_table = grad_normalized.table if hasattr(grad_normalized, "table") else np.asarray(grad_normalized)
    tmpl = target.make(dtype=dtype)
    if g_table.shape != tmpl.table.shape or theta_weight.table.shape != (tmpl.table.shape[0], 1):
        raise ContractViolation("upstream gradient / weight cache do not match the target")
    scaled = _normalize(np.ascontiguousarray(g_table, dtype=dtype), theta_weight.table)
    R = inputs.samples.R
    nc = tmpl.corners_per_point
    C = target.channels
    grad_features = np.zeros_like(inputs.features)
    has_gs = inputs.gs is not None
    has_prior = has_gs and inputs.prior is not None

    class Acc:
        def __init__(self):
            self.prior = np.zeros_like(inputs.prior.table) if has_prior else None
            self.gs = inputs.gs.zeros_like() if has_gs else None

        def merge(self, other):
            if self.prior is not None:
                self.prior += other.prior
            if self.gs is not None:
                for a, b in zip(self.gs.tensors(), other.gs.tensors()):
                    a += b

    def work(rows, acc: Acc) -> None:
        with arena.scope() as sc:
            ch = _SplatChunk(inputs, rows, sc, flops, keep=True)
            idx = sc.alloc((ch.m, nc), np.int64)
            w = sc.alloc((ch.m, nc), dtype)
            g = sc.alloc((ch.m, C), dtype)
            gfeat = sc.alloc((ch.m, ch.c_in), dtype)
            if has_gs:
                gin = sc.alloc((ch.m, inputs.decoder_in_dim), dtype)
            if has_prior:
                gprior = sc.alloc((ch.m, ch.kp), dtype)
            for j in range(R + 1):
                pts = ch.points(j)
                tmpl.corners(pts, idx, w)
                _interp.gather(scaled, idx, w, g)
                flops.add("interp", ch.m * nc * C)
                if not has_gs:
                    gfeat += g
                    continue
                ch.values(j, category="mlp_recompute")
                ch.ws.vjp(g, acc.gs, gin)
                gfeat += gin[:, :ch.c_in]
                if has_prior:
                    gprior[...] = gin[:, ch.c_in:ch.c_in + ch.kp]
                    _interp.scatter(acc.prior, ch.prior_idx, ch.prior_w, gprior)
                    flops.add("interp", ch.m * ch.prior_idx.shape[1] * ch.kp)
            grad_features[rows] = gfeat

    acc = run_chunks(_order(inputs, exec_cfg), work, Acc(), Acc, lambda a, b: a.merge(b), exec_cfg)
    grad_prior = inputs.prior.with_table(acc.prior) if has_prior else None
    return grad_features, grad_prior, acc.gs


def splat_plain(points, values, weights, target: TargetSpec) -> HashStructure:
    """Un-normalised scatter of ``weights * values`` at ``points``: the exact
    transpose of sampling."""
    values = np.atleast_2d(np.asarray(values))
    dtype = values.dtype if values.dtype in (np.float32, np.float64) else np.float32
    out = target.make(dtype=dtype)
    pts = np.asarray(points)
    if pts.size == 0:
        return out
    if values.shape[1] != target.channels:
        raise DimensionError(f"values have {values.shape[1]} channels, target has {target.channels}")
    splat_accumulate(out, pts.reshape(-1, 3), values, weights)
    return out
