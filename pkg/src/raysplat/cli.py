"""Command-line entry point: render, splat, fit, bench, gradcheck.

Exit codes: 0 success, 1 failed gradient check, 2 unreadable or invalid
input, 3 shape mismatch between inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .execution import ExecConfig, default_threads
from .hash3d import ContractConfig, read_grid, write_grid
from .imageio import read_lpi, write_lpi, write_ppm
from .rays import rays_from_camera, read_camera, sample_points
from .tinymlp import DirEncConfig, read_mlps

log = logging.getLogger("raysplat")

EXIT_GRADCHECK = 1
EXIT_PARSE = 2
EXIT_SHAPE = 3


def shipped_config(name: str) -> Path:
    return Path(str(resources.files("raysplat") / "configs" / name))


def atomic_write(path, write) -> None:
    """Call ``write(tmp_path)`` and move the result over ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def direnc_for(in_dim: int, channels: int) -> DirEncConfig:
    """Recover the direction-encoding config from the feature decoder's input width."""
    extra = in_dim - channels
    for raw in (True, False):
        base = 3 if raw else 0
        if extra >= base and (extra - base) % 6 == 0:
            cfg = DirEncConfig((extra - base) // 6, raw)
            if cfg.length == extra:
                return cfg
    raise DimensionError(
        f"feature decoder takes {in_dim} inputs, which is not {channels} grid channels "
        "plus a direction encoding")


def _exec(args) -> ExecConfig:
    threads = args.threads if args.threads is not None else default_threads()
    return ExecConfig(threads=threads, deterministic=args.deterministic)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# --- commands ----------------------------------------------------------------

def cmd_render(args) -> int:
    from .renderer import render_forward_fused

    structure = read_grid(args.grid)
    mlps = read_mlps(args.mlp)
    if len(mlps) != 2:
        raise FormatError(f"{args.mlp}: expected a density and a feature decoder, found {len(mlps)}")
    sigma_mlp, feature_mlp = mlps
    camera = read_camera(args.camera)
    dtype = np.float64 if args.float64 else np.float32
    dir_cfg = direnc_for(feature_mlp.in_dim, structure.channels)
    contraction = ContractConfig(scale=args.contract) if args.contract is not None else None
    samples = sample_points(rays_from_camera(camera, dtype=dtype), args.samples, contraction)
    out = render_forward_fused(structure.astype(dtype), sigma_mlp.astype(dtype),
                               feature_mlp.astype(dtype), samples, dir_cfg, exec_cfg=_exec(args))
    image = out.features.reshape(camera.height, camera.width, -1)
    if Path(args.out).suffix.lower() == ".ppm":
        if image.shape[2] != 3:
            raise DimensionError(f"PPM output needs 3 channels, the decoder emits {image.shape[2]}")
        atomic_write(args.out, lambda p: write_ppm(p, image))
    else:
        atomic_write(args.out, lambda p: write_lpi(p, image))
    print(f"mean T_R: {float(np.mean(out.final_transmittance, dtype=np.float64)):.6f}")
    return 0


def cmd_splat(args) -> int:
    from .splatter import SplatInputs, TargetSpec, splat_forward_fused

    features = read_lpi(args.features)
    camera = read_camera(args.camera)
    h, w, c = features.shape
    if (h, w) != (camera.height, camera.width):
        raise DimensionError(f"feature image is {w}x{h}, camera is {camera.width}x{camera.height}")
    contraction = ContractConfig(scale=args.contract) if args.contract is not None else None
    samples = sample_points(rays_from_camera(camera), args.samples, contraction)
    n = args.grid_size
    target = TargetSpec(args.kind, (n, n, n), c)
    res = splat_forward_fused(SplatInputs(features.reshape(-1, c), samples), target,
                              exec_cfg=_exec(args))
    atomic_write(args.grid_out, lambda p: write_grid(p, res.normalized))
    covered = int(np.count_nonzero(res.theta_weight.table))
    print(f"cells with weight: {covered} / {res.theta_weight.table.shape[0]}")
    return 0


def cmd_fit(args) -> int:
    from .scenefit import FitConfig, fit, save_outputs

    d = _read_json(args.config or shipped_config("sphere_fit.json"))
    if args.seed is not None:
        d["seed"] = args.seed
    if args.iterations is not None:
        d["iterations"] = args.iterations
    cfg = FitConfig.from_json(d)
    report, state = fit(cfg, exec_cfg=_exec(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=out, prefix=".staging-"))
    try:
        save_outputs(staging, report, state, cfg)
        for f in staging.iterdir():
            os.replace(f, out / f.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"held-out PSNR: {report.test_psnr:.2f} dB  train PSNR: {report.train_psnr:.2f} dB  "
          f"time: {report.wall_clock_s:.1f} s")
    return 0


def cmd_bench(args) -> int:
    from .bench import BenchSpec, run_bench, write_csv
    from .plotting import plot_bench

    d = _read_json(args.spec or shipped_config("bench.json"))
    if args.seed is not None:
        d["seed"] = args.seed
    spec = BenchSpec.from_json(d)
    rows = run_bench(spec, exec_cfg=_exec(args))
    atomic_write(args.out, lambda p: write_csv(p, rows))
    figure = Path(args.figure) if args.figure else Path(args.out).with_suffix(".png")
    atomic_write(figure, lambda p: plot_bench(rows, p, spec.sweep))
    for r in rows:
        print(",".join(str(v) for v in r.csv_fields()))
    return 0


def cmd_gradcheck(args) -> int:
    from dataclasses import replace

    from .gradcheck import GradcheckConfig, format_table, run_gradcheck

    d = _read_json(args.config or shipped_config("gradcheck.json"))
    cfg = GradcheckConfig(**d)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.corrupt_backward:
        cfg = replace(cfg, corrupt_backward=args.corrupt_backward)
    results = run_gradcheck(cfg)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else EXIT_GRADCHECK


# --- parser ------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand.

    The subcommand copy uses SUPPRESS defaults so it never overwrites a value
    given before the subcommand.
    """
    def default(v):
        return argparse.SUPPRESS if suppress else v

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=default(None))
    g.add_argument("--threads", type=int, default=default(None),
                   help="worker threads (default: $LIGHTPLANE_THREADS or 1)")
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=default(True), help="fixed-order reductions (default on)")
    g.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="raysplat", parents=[_global_flags(suppress=False)],
                                description="Fused volume rendering and feature splatting.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", parents=[common], help="render a grid + decoders from a camera")
    r.add_argument("--grid", required=True)
    r.add_argument("--mlp", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--samples", type=int, required=True)
    r.add_argument("--out", required=True, help=".ppm for 8-bit RGB, anything else for LPI1")
    r.add_argument("--contract", type=float, default=None)
    r.add_argument("--float64", action="store_true")
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("splat", parents=[common], help="lift a feature image into a grid")
    s.add_argument("--features", required=True, help="LPI1 feature image")
    s.add_argument("--camera", required=True)
    s.add_argument("--grid-out", required=True)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--grid-size", type=int, default=32)
    s.add_argument("--kind", choices=["voxel", "triplane"], default="voxel")
    s.add_argument("--contract", type=float, default=None)
    s.set_defaults(func=cmd_splat)

    f = sub.add_parser("fit", parents=[common], help="fit the analytic sphere-shell scene")
    f.add_argument("--config", default=None)
    f.add_argument("--out", required=True)
    f.add_argument("--iterations", type=int, default=None)
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("bench", parents=[common], help="memory/FLOP/time sweep to CSV")
    b.add_argument("--spec", default=None)
    b.add_argument("--out", required=True)
    b.add_argument("--figure", default=None, help="default: CSV path with .png")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--config", default=None)
    g.add_argument("--corrupt-backward", type=float, default=0.0, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DimensionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (FormatError, DomainError, FileNotFoundError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
