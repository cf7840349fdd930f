"""The nine acceptance criteria, one test each.

Every test records a PASS/FAIL line (shown in the terminal summary) before
asserting, so the report is complete even when a criterion fails.
"""
import json
import time

import numpy as np
import pytest

from cases import rel_err, render_case, splat_case
from conftest import CRITERIA
from raysplat.bench import (BenchSpec, lifted_grid_bytes, mlp_output_bytes,
                            naive_render_bytes_per_sample, run_bench)
from raysplat.cli import main, shipped_config
from raysplat.execution import ExecConfig
from raysplat.gradcheck import GradcheckConfig, run_gradcheck
from raysplat.hash3d import random_structure, sample, write_grid
from raysplat.instrument import FlopCounter
from raysplat.naive import render_backward_naive, render_forward_naive
from raysplat.rays import Camera, RayBundle, sample_points, write_camera
from raysplat.renderer import (reconstruct_transmittance_check, render_backward_fused,
                               render_forward_fused, transmittance_profile)
from raysplat.splatter import SplatInputs, TargetSpec, splat_forward_fused, splat_plain
from raysplat.tinymlp import DirEncConfig, MlpParams, init_mlp, write_mlps

INSTANCES = [("voxel", s) for s in range(10)] + [("triplane", s) for s in range(10, 20)]


def record(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def instances():
    return [render_case(kind, seed=seed) for kind, seed in INSTANCES]


def test_criterion_1_forward_equivalence(instances):
    t0 = time.perf_counter()
    worst = 0.0
    for case in instances:
        fused = render_forward_fused(*case.args)
        naive, _ = render_forward_naive(*case.args)
        worst = max(worst, float(np.max(np.abs(fused.features - naive.features))),
                    float(np.max(np.abs(fused.final_transmittance - naive.final_transmittance))))
    dt = time.perf_counter() - t0
    record(1, worst < 1e-5 and dt < 10,
           f"20 instances, max abs diff {worst:.2e} (< 1e-5), {dt:.1f} s (< 10 s)")


def test_criterion_2_backward_equivalence(instances):
    t0 = time.perf_counter()
    worst = {"grid": 0.0, "sigma_mlp": 0.0, "feature_mlp": 0.0}
    for case in instances:
        fw = render_forward_fused(*case.args)
        fused = render_backward_fused(*case.args[:4], case.upstream, fw, case.dir_cfg)
        _, cache = render_forward_naive(*case.args)
        naive = render_backward_naive(cache, case.upstream)
        worst["grid"] = max(worst["grid"], rel_err(fused.grad_structure.table,
                                                   naive.grad_structure.table))
        for key, a, b in [("sigma_mlp", fused.grad_sigma_mlp, naive.grad_sigma_mlp),
                          ("feature_mlp", fused.grad_feature_mlp, naive.grad_feature_mlp)]:
            for x, y in zip(a.tensors(), b.tensors()):
                worst[key] = max(worst[key], rel_err(x, y))
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    record(2, max(worst.values()) < 1e-4 and dt < 30,
           f"max rel err {detail} (< 1e-4), {dt:.1f} s (< 30 s)")


def test_criterion_3_finite_differences():
    cfg = GradcheckConfig.load(shipped_config("gradcheck.json"))
    t0 = time.perf_counter()
    results = run_gradcheck(cfg)
    dt = time.perf_counter() - t0
    per_component = {}
    for r in results:
        per_component[(r.component, r.kind)] = per_component.get((r.component, r.kind), 0) + r.count
    worst = max(r.max_rel_error for r in results)
    ok = (cfg.eps == 1e-3 and all(r.passed for r in results) and dt < 120
          and all(n == 200 for n in per_component.values()) and len(per_component) == 4)
    groups = ", ".join(f"{r.kind}/{r.group} {r.max_rel_error:.1e}" for r in results)
    record(3, ok, f"200 params per component, worst rel err {worst:.2e} (< 1e-2), "
                  f"{dt:.1f} s (< 120 s); {groups}")


def test_criterion_4_adjointness():
    # The gap is measured against the size of the summed terms, sum |v . sample(theta, x)|.
    # With random signs the inner product can cancel by three orders of magnitude, and
    # float32 rounding of the individual terms then dominates a plain relative gap; the
    # plain figure is reported alongside.
    t0 = time.perf_counter()
    worst, worst_plain = 0.0, 0.0
    rng = np.random.default_rng(4)
    for kind, dims in [("voxel", (8, 8, 8)), ("triplane", (16, 16, 16))]:
        for _ in range(50):
            C = int(rng.integers(1, 6))
            target = TargetSpec(kind, dims, C)
            theta = random_structure(kind, dims, C, rng, np.float32)
            n = int(rng.integers(1, 300))
            X = rng.uniform(-1.2, 1.2, (n, 3)).astype(np.float32)
            V = rng.standard_normal((n, C)).astype(np.float32)
            lhs = float(np.sum(splat_plain(X, V, np.ones(n, np.float32), target).table
                               .astype(np.float64) * theta.table))
            terms = V.astype(np.float64) * sample(theta, X)
            rhs = float(np.sum(terms))
            gap = abs(lhs - rhs)
            worst = max(worst, gap / max(float(np.sum(np.abs(terms))), 1e-30))
            worst_plain = max(worst_plain, gap / max(abs(lhs), abs(rhs), 1e-30))
    dt = time.perf_counter() - t0
    record(4, worst < 1e-5 and dt < 5,
           f"100 instances (50 voxel, 50 triplane), max gap / sum|terms| {worst:.2e} (< 1e-5), "
           f"plain relative {worst_plain:.2e}, {dt:.1f} s (< 5 s)")


def _constant_density_mlp(K: int, sigma: float) -> MlpParams:
    return MlpParams([(np.zeros((1, K), np.float32), np.array([sigma], np.float32))],
                     output_activation="identity")


def test_criterion_5_transmittance_reconstruction():
    t0 = time.perf_counter()
    worst, steepest, checked = 0.0, 0.0, 0
    cases = []
    for R in (1, 8, 32, 128, 512):
        for kind in ("voxel", "triplane"):
            case = render_case(kind, seed=R, dtype=np.float32)
            cases.append((case.structure, case.sigma_mlp, case.feature_mlp, case.dir_cfg,
                          sample_points(case.samples.bundle, R)))
    # a dense medium at the top of the allowed range: sigma * delta = 1 on every step
    base = render_case("voxel", seed=99)
    for R in (64, 512):
        samples = sample_points(base.samples.bundle, R)
        cases.append((base.structure, _constant_density_mlp(4, 1.0 / samples.delta),
                      base.feature_mlp, base.dir_cfg, samples))
    for structure, sig, feat, dir_cfg, samples in cases:
        prof = transmittance_profile(structure, sig, samples)
        t = np.concatenate([np.ones((prof.shape[0], 1)), prof], axis=1)
        step = float(np.max(np.log(t[:, :-1] / t[:, 1:])))
        if step > 1 + 1e-6:
            continue  # outside the stated regime (the R = 1 instances)
        checked += 1
        steepest = max(steepest, step)
        out = render_forward_fused(structure, sig, feat, samples, dir_cfg)
        worst = max(worst, reconstruct_transmittance_check(structure, sig, samples,
                                                           out.final_transmittance))
    dt = time.perf_counter() - t0
    record(5, worst < 1e-5 and dt < 5 and steepest > 0.99 and checked >= 10,
           f"{checked} instances, R up to 512, max sigma*delta {steepest:.3f}, "
           f"max |T_fw - T_rebuilt| {worst:.2e} "
           f"(< 1e-5), {dt:.1f} s (< 5 s)")


def test_criterion_6_memory_contract():
    t0 = time.perf_counter()
    spec = BenchSpec(values=[16, 64, 256], kind="triplane", grid=16, channels=8, mlp_width=16,
                     mlp_depth=2, dir_frequencies=2, rays=64, repetitions=3)
    rows = run_bench(spec)
    fused = {(r.pass_, r.sweep): r.scratch_bytes for r in rows if r.mode == "fused"}
    fused_equal = all(len({fused[(p, R)] for R in spec.values}) == 1 for p in ("fw", "bw"))
    naive = {r.sweep: r.scratch_bytes for r in rows if r.mode == "naive" and r.pass_ == "fw"}
    slope = (naive[256] - naive[16]) / (256 - 16)
    E = DirEncConfig(2).length
    expected = naive_render_bytes_per_sample(spec.rays, spec.channels, E, [16, 1], [16, 3])
    slope_ok = abs(slope / expected - 1) < 0.1
    full_image = mlp_output_bytes(256 ** 2, 128, 6, 64)
    lifting = lifted_grid_bytes(1, 128, 64)
    ratio = full_image / (256 ** 2 * 64 * 4)
    dt = time.perf_counter() - t0
    ok = (fused_equal and slope_ok and full_image == 12_884_901_888
          and round(full_image / 1e9, 1) == 12.9 and lifting == 536_870_912 and ratio == 128 * 6
          and dt < 60)
    record(6, ok,
           f"fused fw/bw bytes {fused[('fw', 16)]}/{fused[('bw', 16)]} at every R; naive slope "
           f"{slope:.0f} B/sample vs {expected} ({slope / expected - 1:+.1%}); "
           f"{full_image:,} B and {lifting:,} B; R*L ratio {ratio:.0f}; {dt:.1f} s (< 60 s)")


def test_criterion_7_flop_contract(instances):
    t0 = time.perf_counter()
    worst = 0.0
    extra = [render_case("triplane", seed=77, width=64, depth=3, K=16)]
    for case in list(instances) + extra:
        fl = FlopCounter()
        fw = render_forward_fused(*case.args, flops=fl)
        forward = fl["mlp_fw"]
        render_backward_fused(*case.args[:4], case.upstream, fw, case.dir_cfg, flops=fl)
        worst = max(worst, fl["mlp_recompute"] / forward)
    dt = time.perf_counter() - t0
    record(7, worst <= 1.5 and dt < 60,
           f"max recompute/forward MLP FLOPs {worst:.3f} (<= 1.5), {dt:.1f} s (< 60 s)")


@pytest.mark.slow
def test_criterion_8_scene_fit(sphere_fit):
    report, _ = sphere_fit
    cfg = report["config"]
    shape_ok = (cfg["image_size"] == 64 and cfg["train_views"] == 20 and cfg["test_views"] == 4
                and cfg["grid_size"] == 32 and cfg["kind"] == "voxel"
                and cfg["num_segments"] == 64 and cfg["iterations"] == 2000)
    psnr, wall = report["test_psnr"], report["wall_clock_s"]
    record(8, shape_ok and psnr >= 25 and wall < 900,
           f"held-out PSNR {psnr:.2f} dB (>= 25), train {report['train_psnr']:.2f} dB, "
           f"{wall:.0f} s (< 900 s)")


def _render_scene(tmp_path):
    rng = np.random.default_rng(0)
    K = 4
    g = random_structure("voxel", (8, 8, 8), K, rng)
    write_grid(tmp_path / "grid.lpg", g)
    dcfg = DirEncConfig(2)
    sig = init_mlp([K, 16, 1], rng, output_activation="softplus")
    feat = init_mlp([K + dcfg.length, 16, 3], rng, output_activation="sigmoid")
    write_mlps(tmp_path / "mlps.lpm", [sig, feat])
    cam = Camera.look_at([2.0, -1.5, 1.5], width=24, height=18, fov_deg=45, near=1.0, far=5.0)
    write_camera(tmp_path / "cam.json", cam)
    return cam


def _blobs(paths):
    return [p.read_bytes() for p in paths]


def test_criterion_9_determinism(tmp_path):
    checks = {}
    _render_scene(tmp_path)
    common = ["--grid", str(tmp_path / "grid.lpg"), "--mlp", str(tmp_path / "mlps.lpm"),
              "--camera", str(tmp_path / "cam.json")]

    outs = []
    for i, threads in enumerate(["1", "1", "4"]):
        out = tmp_path / f"render{i}.ppm"
        assert main(["--seed", "3", "--deterministic", "--threads", threads, "render", *common,
                     "--samples", "48", "--out", str(out)]) == 0
        outs.append(out)
    checks["render"] = len(set(_blobs(outs))) == 1

    outs = []
    for i, threads in enumerate(["1", "1", "4"]):
        out = tmp_path / f"render{i}.lpi"
        assert main(["--seed", "3", "--threads", threads, "render", *common, "--samples", "48",
                     "--out", str(out)]) == 0
        outs.append(out)
    lifted = []
    for i, threads in enumerate(["1", "4"]):
        grid = tmp_path / f"lifted{i}.lpg"
        assert main(["--seed", "3", "--threads", threads, "splat", "--features", str(outs[0]),
                     "--camera", str(tmp_path / "cam.json"), "--grid-out", str(grid),
                     "--kind", "triplane", "--grid-size", "16", "--samples", "32"]) == 0
        lifted.append(grid)
    checks["splat"] = len(set(_blobs(lifted))) == 1

    case = splat_case("triplane", seed=9, rays=40)
    inp = case.inputs
    perm = np.random.default_rng(5).permutation(inp.samples.num_rays)
    b = inp.samples.bundle
    shuffled = SplatInputs(inp.features[perm],
                           sample_points(RayBundle(b.origins[perm], b.directions[perm],
                                                   b.near, b.far), inp.samples.R),
                           inp.prior, inp.gs, inp.dir_cfg)
    same = True
    for threads in (1, 4):
        cfg = ExecConfig(chunk_rays=6, threads=threads, deterministic=True)
        r1 = splat_forward_fused(inp, case.target, exec_cfg=cfg)
        r2 = splat_forward_fused(shuffled, case.target, exec_cfg=cfg)
        same &= all(np.array_equal(x.table, y.table) for x, y in
                    [(r1.theta, r2.theta), (r1.theta_weight, r2.theta_weight),
                     (r1.normalized, r2.normalized)])
    checks["splat_permuted"] = same

    fit_cfg = tmp_path / "fit.json"
    fit_cfg.write_text(json.dumps(dict(image_size=12, num_segments=16, oracle_segments=64,
                                       iterations=4, train_views=3, test_views=2, grid_size=8,
                                       channels=4, log_every=0)))
    for name in ("fit_a", "fit_b"):
        assert main(["--seed", "11", "fit", "--config", str(fit_cfg), "--out",
                     str(tmp_path / name)]) == 0
    fa, fb = tmp_path / "fit_a", tmp_path / "fit_b"
    artifacts = ["grid.lpg", "mlps.lpm", "test_00.ppm", "test_01.ppm"]
    losses = [json.loads((d / "report.json").read_text())["losses"] for d in (fa, fb)]
    checks["fit"] = (losses[0] == losses[1]
                     and _blobs([fa / f for f in artifacts]) == _blobs([fb / f for f in artifacts]))

    spec = BenchSpec(values=[4, 8, 16], grid=8, channels=4, mlp_width=16, mlp_depth=2,
                     dir_frequencies=2, rays=32, samples=8)
    counters = [[(r.sweep, r.mode, r.pass_, r.scratch_bytes, r.flops) for r in run_bench(spec)]
                for _ in range(2)]
    checks["bench_counters"] = counters[0] == counters[1]

    gc = tmp_path / "gc.json"
    gc.write_text(json.dumps({"kinds": ["triplane"], "params_per_component": 24}))
    tables = [[(r.group, r.max_rel_error) for r in run_gradcheck(GradcheckConfig.load(gc))]
              for _ in range(2)]
    checks["gradcheck"] = tables[0] == tables[1]

    record(9, all(checks.values()),
           ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in checks.items()))
