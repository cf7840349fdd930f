"""Regenerate the golden render fixture. Expected bytes come from the naive oracle.

    python tests/fixtures/make_fixtures.py
"""
from pathlib import Path

import numpy as np

from raysplat.hash3d import make_structure, write_grid
from raysplat.imageio import to_bytes
from raysplat.naive import render_forward_naive
from raysplat.rays import Camera, rays_from_camera, sample_points, write_camera
from raysplat.tinymlp import DirEncConfig, init_mlp, write_mlps

HERE = Path(__file__).parent / "black"
SAMPLES = 16


def main() -> None:
    HERE.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    grid = make_structure("voxel", (4, 4, 4), 4)
    dir_cfg = DirEncConfig(2)
    # zero weights, identity output: the density clamp makes sigma exactly 0
    sigma = init_mlp([4, 8, 1], rng, output_activation="identity").map(np.zeros_like)
    feature = init_mlp([4 + dir_cfg.length, 8, 3], rng, output_activation="sigmoid").map(np.zeros_like)
    cam = Camera.look_at((3.0, 0.5, 1.0), width=8, height=6, fov_deg=40, near=1.2, far=4.8)
    write_grid(HERE / "grid.lpg", grid)
    write_mlps(HERE / "mlps.lpm", [sigma, feature])
    write_camera(HERE / "camera.json", cam)
    out, _ = render_forward_naive(grid, sigma, feature,
                                  sample_points(rays_from_camera(cam), SAMPLES), dir_cfg)
    img = to_bytes(out.features.reshape(cam.height, cam.width, 3))
    (HERE / "expected.ppm").write_bytes(f"P6\n{cam.width} {cam.height}\n255\n".encode() + img.tobytes())
    print("mean T_R", out.final_transmittance.mean())


if __name__ == "__main__":
    main()
