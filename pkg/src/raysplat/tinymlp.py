"""Tiny decoders evaluated per sample, with hand-written reverse mode.

The kernels use :class:`MlpWorkspace` so that every buffer comes from a
:class:`~raysplat.instrument.ScratchArena` and is reused across samples.
Nothing from a forward evaluation is kept for the backward; ``vjp``
re-runs the forward for the current batch of samples first.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .instrument import NULL_ARENA, NULL_FLOPS, FlopCounter, Scope

HIDDEN_ACTIVATIONS = ("relu", "softplus")
OUTPUT_ACTIVATIONS = ("identity", "softplus", "sigmoid")
MLP_MAGIC = b"LPM1"


@dataclass
class MlpParams:
    """Affine layers ``(weight[out, in], bias[out])`` with fixed activations."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("an MLP needs at least one layer")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        fixed = []
        for i, (w, b) in enumerate(self.layers):
            w, b = np.asarray(w), np.asarray(b)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != fixed[-1][0].shape[0]:
                raise DimensionError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer gives {fixed[-1][0].shape[0]}"
                )
            fixed.append((w, b))
        self.layers = fixed

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w, _ in self.layers]

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def tensors(self) -> list[np.ndarray]:
        return [t for layer in self.layers for t in layer]

    def zeros_like(self) -> "MlpParams":
        return self.map(np.zeros_like)

    def copy(self) -> "MlpParams":
        return self.map(np.copy)

    def astype(self, dtype) -> "MlpParams":
        return self.map(lambda t: t.astype(dtype))

    def map(self, fn) -> "MlpParams":
        return MlpParams(
            [(fn(w), fn(b)) for w, b in self.layers],
            self.hidden_activation,
            self.output_activation,
        )

    def flops_per_eval(self) -> int:
        return sum(w.size for w, _ in self.layers)


def init_mlp(sizes, rng: np.random.Generator, hidden_activation="relu",
             output_activation="identity", dtype=np.float32) -> MlpParams:
    """Layers sized ``sizes[0] -> sizes[1] -> ...``, weights and biases
    uniform in +-1/sqrt(fan_in)."""
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype)
        b = rng.uniform(-bound, bound, n_out).astype(dtype)
        layers.append((w, b))
    return MlpParams(layers, hidden_activation, output_activation)


def default_mlp(n_in: int, n_out: int, rng: np.random.Generator, width: int = 64,
                depth: int = 3, **kw) -> MlpParams:
    sizes = [n_in] + [width] * (depth - 1) + [n_out]
    return init_mlp(sizes, rng, **kw)


# --- activations on preallocated buffers ----------------------------------

def _activate(name: str, z: np.ndarray, out: np.ndarray) -> None:
    if name == "relu":
        np.maximum(z, 0, out=out)
    elif name == "softplus":
        np.logaddexp(0, z, out=out)
    elif name == "sigmoid":
        np.negative(z, out=out)
        np.exp(out, out=out)
        out += 1
        np.reciprocal(out, out=out)
    elif out is not z:
        out[...] = z


def _activation_grad(name: str, z: np.ndarray, g: np.ndarray) -> None:
    """g *= act'(z), in place."""
    if name == "relu":
        g *= z > 0
    elif name == "softplus":
        g /= 1 + np.exp(-z)
    elif name == "sigmoid":
        s = 1 / (1 + np.exp(-z))
        g *= s * (1 - s)


class MlpWorkspace:
    """Scratch for evaluating ``params`` on up to ``batch`` inputs at once.

    With ``keep=False`` only two ping-pong buffers of the widest layer exist;
    that is all a forward evaluation needs. ``keep=True`` also holds every
    layer's pre-activation for the current batch so that :meth:`vjp` can run
    straight after :meth:`forward`.
    """

    def __init__(self, params: MlpParams, batch: int, scope: Scope | None = None,
                 keep: bool = False, flops: FlopCounter = NULL_FLOPS):
        self.params = params
        self.batch = batch
        self.keep = keep
        self.flops = flops
        arena = scope or Scope(NULL_ARENA)
        dtype = params.dtype
        widest = max([params.in_dim] + params.widths)
        self._ping = arena.alloc(batch * widest, dtype)
        self._pong = arena.alloc(batch * widest, dtype)
        self.out = arena.alloc((batch, params.out_dim), dtype)
        self._pre = [arena.alloc(batch * w, dtype) for w in params.widths] if keep else None
        self._input = None
        self._m = 0

    def _view(self, buf: np.ndarray, m: int, n: int) -> np.ndarray:
        return buf[: m * n].reshape(m, n)

    def forward(self, x: np.ndarray, category: str = "mlp_fw") -> np.ndarray:
        """Evaluate on ``x`` (m x in, m <= batch); returns a view of ``self.out``."""
        p = self.params
        m = x.shape[0]
        if x.ndim != 2 or x.shape[1] != p.in_dim:
            raise DimensionError(f"MLP expects {p.in_dim} inputs, got shape {x.shape}")
        if m > self.batch:
            raise DimensionError(f"batch of {m} exceeds workspace size {self.batch}")
        self._input, self._m = x, m
        h = x
        last = p.depth - 1
        for i, (w, b) in enumerate(p.layers):
            n = w.shape[0]
            if self.keep:
                z = self._view(self._pre[i], m, n)
            else:
                z = self._view(self._ping if i % 2 == 0 else self._pong, m, n)
            np.matmul(h, w.T, out=z)
            z += b
            self.flops.add(category, m * w.size)
            if i == last:
                out = self.out[:m]
                _activate(p.output_activation, z, out)
                return out
            if self.keep:
                a = self._view(self._ping if i % 2 == 0 else self._pong, m, n)
                _activate(p.hidden_activation, z, a)
                h = a
            else:
                _activate(p.hidden_activation, z, z)
                h = z
        raise AssertionError("unreachable")

    def vjp(self, upstream: np.ndarray, grads: MlpParams | None,
            grad_input: np.ndarray | None = None) -> None:
        """Backpropagate ``upstream`` (m x out) through the last :meth:`forward`.

        Parameter gradients are summed over the batch into ``grads``; the
        input gradient is written to ``grad_input`` when given.
        """
        if not self.keep:
            raise RuntimeError("workspace was built without keep=True")
        p = self.params
        m = self._m
        if upstream.shape != (m, p.out_dim):
            raise DimensionError(f"upstream must be {(m, p.out_dim)}, got {upstream.shape}")
        g = self._view(self._ping, m, p.out_dim)
        g[...] = upstream
        _activation_grad(p.output_activation, self._view(self._pre[-1], m, p.out_dim), g)
        spare = self._pong
        for i in range(p.depth - 1, -1, -1):
            w, _ = p.layers[i]
            n_out, n_in = w.shape
            if i > 0:
                a_prev = self._view(spare, m, n_in)
                _activate(p.hidden_activation, self._view(self._pre[i - 1], m, n_in), a_prev)
            else:
                a_prev = self._input
            if grads is not None:
                gw, gb = grads.layers[i]
                gw += g.T @ a_prev
                gb += g.sum(axis=0)
            self.flops.add("mlp_bw", m * w.size)
            if i == 0:
                if grad_input is not None:
                    np.matmul(g, w, out=grad_input[:m])
                    self.flops.add("mlp_bw", m * w.size)
                return
            # a_prev's buffer is free again once the weight gradient is taken
            g_prev = self._view(spare, m, n_in)
            np.matmul(g, w, out=g_prev)
            self.flops.add("mlp_bw", m * w.size)
            _activation_grad(p.hidden_activation, self._view(self._pre[i - 1], m, n_in), g_prev)
            spare = self._ping if spare is self._pong else self._pong
            g = g_prev


def mlp_forward(params: MlpParams, x, flops: FlopCounter = NULL_FLOPS) -> np.ndarray:
    """Evaluate the MLP on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    ws = MlpWorkspace(params, x2.shape[0], flops=flops)
    out = ws.forward(x2).copy()
    return out[0] if single else out


def mlp_vjp(params: MlpParams, x, upstream, flops: FlopCounter = NULL_FLOPS):
    """Reverse-mode product ``upstream^T J`` at ``x``.

    Returns ``(grad_input, grad_params)``; for a batch the parameter gradient
    is summed over rows. The forward activations are recomputed here.
    """
    x = np.asarray(x, dtype=params.dtype)
    up = np.asarray(upstream, dtype=params.dtype)
    single = x.ndim == 1
    x2, up2 = np.atleast_2d(x), np.atleast_2d(up)
    ws = MlpWorkspace(params, x2.shape[0], keep=True, flops=flops)
    ws.forward(x2, category="mlp_recompute")
    grads = params.zeros_like()
    gin = np.empty_like(x2)
    ws.vjp(up2, grads, gin)
    return (gin[0] if single else gin), grads


# --- direction encoding ----------------------------------------------------

@dataclass(frozen=True)
class DirEncConfig:
    num_frequencies: int = 4
    include_raw: bool = True

    @property
    def length(self) -> int:
        return 3 * (2 * self.num_frequencies + (1 if self.include_raw else 0))


def direnc(direction, cfg: DirEncConfig = DirEncConfig()) -> np.ndarray:
    """Sinusoidal encoding of unit direction(s).

    Layout per row: the raw direction (optional), then for each axis and for
    each frequency 2^0 .. 2^(F-1) the pair (sin(pi f d), cos(pi f d)).
    """
    d = np.asarray(direction)
    single = d.ndim == 1
    d2 = np.atleast_2d(d)
    norms = np.linalg.norm(d2.astype(np.float64), axis=1)
    if not np.all(np.abs(norms - 1.0) <= 1e-4):
        raise DomainError("directions must be unit vectors")
    dtype = d2.dtype if d2.dtype in (np.float32, np.float64) else np.float64
    freqs = np.pi * 2.0 ** np.arange(cfg.num_frequencies)
    ang = d2[:, :, None].astype(np.float64) * freqs  # (N, 3, F)
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(d2.shape[0], -1)
    parts = [d2.astype(np.float64), sc] if cfg.include_raw else [sc]
    out = np.concatenate(parts, axis=1).astype(dtype)
    return out[0] if single else out


# --- LPM1 parameter files --------------------------------------------------

def _mlp_bytes(params: MlpParams) -> bytes:
    chunks = [MLP_MAGIC, struct.pack("<I", params.depth)]
    for w, b in params.layers:
        chunks.append(struct.pack("<2I", *w.shape))
        chunks.append(w.astype("<f4").tobytes())
        chunks.append(b.astype("<f4").tobytes())
    chunks.append(struct.pack(
        "<2B",
        HIDDEN_ACTIVATIONS.index(params.hidden_activation),
        OUTPUT_ACTIVATIONS.index(params.output_activation),
    ))
    return b"".join(chunks)


def write_mlps(path, mlps) -> None:
    """Write one or more MLPs back to back (renderer files hold sigma then feature)."""
    if isinstance(mlps, MlpParams):
        mlps = [mlps]
    Path(path).write_bytes(b"".join(_mlp_bytes(m) for m in mlps))


def read_mlps(path) -> list[MlpParams]:
    raw = Path(path).read_bytes()
    out, pos = [], 0
    try:
        while pos < len(raw):
            if raw[pos:pos + 4] != MLP_MAGIC:
                raise FormatError(f"{path}: bad MLP magic at byte {pos}")
            (depth,) = struct.unpack_from("<I", raw, pos + 4)
            pos += 8
            layers = []
            for _ in range(depth):
                n_out, n_in = struct.unpack_from("<2I", raw, pos)
                pos += 8
                w = np.frombuffer(raw, "<f4", n_out * n_in, pos).reshape(n_out, n_in)
                pos += 4 * n_out * n_in
                b = np.frombuffer(raw, "<f4", n_out, pos)
                pos += 4 * n_out
                layers.append((w.astype(np.float32), b.astype(np.float32)))
            hid, outa = struct.unpack_from("<2B", raw, pos)
            pos += 2
            out.append(MlpParams(layers, HIDDEN_ACTIVATIONS[hid], OUTPUT_ACTIVATIONS[outa]))
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or malformed MLP file ({exc})") from exc
    if not out:
        raise FormatError(f"{path}: no MLP records")
    return out
