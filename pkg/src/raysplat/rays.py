"""Pinhole cameras, ray bundles and equispaced samples along rays."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .hash3d import ContractConfig, contract


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``center`` map camera to world coordinates.

    Camera space looks down +z with +x to the right and +y down the image.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float | None = None
    far: float | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DomainError("image size must be positive")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-5):
            raise DomainError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, width: int,
                height: int, fov_deg: float = 40.0, **kw) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height,
                   np.stack([right, down, fwd], axis=1), eye, **kw)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) to pixel coordinates (N, 2)."""
        pc = (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation
        return np.stack([self.fx * pc[:, 0] / pc[:, 2] + self.cx,
                         self.fy * pc[:, 1] / pc[:, 2] + self.cy], axis=1)

    def to_json(self) -> dict:
        d = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
             "width": self.width, "height": self.height,
             "R": [float(v) for v in self.rotation.ravel()],
             "t": [float(v) for v in self.center]}
        if self.near is not None:
            d["near"], d["far"] = self.near, self.far
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]),
                       np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                       np.asarray(d["t"], dtype=np.float64),
                       d.get("near"), d.get("far"))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad camera description: {exc}") from exc


def read_camera(path) -> Camera:
    try:
        return Camera.from_json(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_camera(path, camera: Camera) -> None:
    Path(path).write_text(json.dumps(camera.to_json(), indent=2))


@dataclass
class RayBundle:
    """M rays sharing one near/far pair."""

    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins))
        self.directions = np.atleast_2d(np.asarray(self.directions))
        if self.origins.shape != self.directions.shape or self.origins.shape[1] != 3:
            raise DimensionError("origins and directions must both be M x 3")
        if not (0 <= self.near < self.far):
            raise DomainError(f"need 0 <= near < far, got near={self.near} far={self.far}")
        norms = np.linalg.norm(self.directions.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1) <= 1e-4):
            raise DomainError("ray directions must be unit vectors")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def take(self, index) -> "RayBundle":
        return RayBundle(self.origins[index], self.directions[index], self.near, self.far)

    def astype(self, dtype) -> "RayBundle":
        return RayBundle(self.origins.astype(dtype), self.directions.astype(dtype),
                         self.near, self.far)


def rays_from_camera(camera: Camera, near: float | None = None, far: float | None = None,
                     dtype=np.float32) -> RayBundle:
    """One ray through each pixel centre, row-major over the image."""
    near = camera.near if near is None else near
    far = camera.far if far is None else far
    if near is None or far is None:
        raise DomainError("near/far not given and not stored on the camera")
    u, v = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    d_cam = np.stack([(u.ravel() - camera.cx) / camera.fx,
                      (v.ravel() - camera.cy) / camera.fy,
                      np.ones(u.size)], axis=1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape)
    return RayBundle(o.astype(dtype), d.astype(dtype), float(near), float(far))


class RaySamples:
    """The R+1 equispaced points ``o + (near + j * delta) * d`` of every ray.

    Points are produced lazily, one sample index at a time, so that streaming
    kernels never hold more than one point per ray. ``offsets`` shifts whole
    rays by a per-ray amount (stratified jitter) without changing spacing.
    """

    def __init__(self, bundle: RayBundle, num_segments: int,
                 contraction: ContractConfig | None = None,
                 offsets: np.ndarray | None = None):
        if num_segments < 1:
            raise DomainError("need at least one segment per ray (R >= 1)")
        self.bundle = bundle
        self.R = int(num_segments)
        self.contraction = contraction if (contraction and contraction.enabled) else None
        self.delta = (bundle.far - bundle.near) / self.R
        self.offsets = None if offsets is None else np.asarray(offsets, dtype=np.float64)

    @property
    def num_rays(self) -> int:
        return len(self.bundle)

    @property
    def num_points(self) -> int:
        return self.R + 1

    @property
    def dtype(self):
        return self.bundle.origins.dtype

    def depths(self, j: int, rays=slice(None)) -> np.ndarray:
        t = np.full(self.bundle.origins[rays].shape[0], self.bundle.near + j * self.delta)
        if self.offsets is not None:
            t = t + self.offsets[rays]
        return t

    def points(self, j: int, rays=slice(None), out: np.ndarray | None = None) -> np.ndarray:
        o = self.bundle.origins[rays]
        d = self.bundle.directions[rays]
        t = self.depths(j, rays).astype(o.dtype)
        if out is None:
            out = np.empty_like(o)
        np.multiply(d, t[:, None], out=out)
        out += o
        if self.contraction is not None:
            out[...] = contract(out, self.contraction)
        return out

    def all_points(self) -> np.ndarray:
        """Materialised (M, R+1, 3) array; only the naive paths use this."""
        return np.stack([self.points(j) for j in range(self.R + 1)], axis=1)

    def take(self, index) -> "RaySamples":
        off = None if self.offsets is None else self.offsets[index]
        return RaySamples(self.bundle.take(index), self.R, self.contraction, off)

    def astype(self, dtype) -> "RaySamples":
        return RaySamples(self.bundle.astype(dtype), self.R, self.contraction, self.offsets)


def sample_points(bundle: RayBundle, num_segments: int,
                  contraction: ContractConfig | None = None,
                  jitter_rng: np.random.Generator | None = None) -> RaySamples:
    offsets = None
    if jitter_rng is not None:
        delta = (bundle.far - bundle.near) / num_segments
        offsets = jitter_rng.uniform(0, delta, len(bundle))
    return RaySamples(bundle, num_segments, contraction, offsets)
