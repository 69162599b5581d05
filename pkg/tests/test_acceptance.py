"""Acceptance gate: one test per release criterion.

Each test prints a single [PASS]/[FAIL] line with the measured numbers
before asserting, so a plain pytest run doubles as the acceptance
report. Criteria with runtime budgets assert the elapsed time too.
"""

import filecmp
import json
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from foveastack import (analysis, calibrate, cli, control, fusion, imaging,
                        optics, optimize, zernike)
from foveastack.optimize import OptimizerSchedule
from foveastack.zernike import ZernikeExpansion


def _line(num: int, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")


# ---------------------------------------------------------------------------
# 1. gradient fidelity
# ---------------------------------------------------------------------------

def test_criterion_01_gradient_fidelity(system):
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    k = zernike.num_terms(4)
    a = system.plate_semi_diameter
    worst = 0.0
    checked = 0
    while checked < 100:
        P = np.array([rng.uniform(-80, 80), rng.uniform(-80, 80),
                      system.object_z])
        origins, dirs = optics.aperture_fan(system, P, rings=3)
        i = rng.integers(len(origins))
        lam = float(rng.choice(system.wavelengths))
        ray = optics.Ray(origins[i], dirs[i], lam)
        w = rng.normal(scale=0.2, size=k)

        p, jac = optics.trace_with_gradient(system, ray,
                                            ZernikeExpansion(w, a))
        if p is None:
            continue

        def f(wv):
            q = optics.trace(system, ray, ZernikeExpansion(wv, a))
            if q is None:
                raise ValueError("vignetted")
            return q

        try:
            fd = oracles.central_difference(f, w, h=1e-6)
        except ValueError:
            continue
        rel = np.linalg.norm(jac - fd) / max(np.linalg.norm(jac), 1e-12)
        worst = max(worst, rel)
        checked += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 60.0
    _line(1, ok, f"100 Jacobians, worst rel err {worst:.2e} "
                 f"(< 1e-4), {dt:.1f}s (< 60s)")
    assert worst < 1e-4
    assert dt < 60.0


# ---------------------------------------------------------------------------
# 2. Zernike basis
# ---------------------------------------------------------------------------

def test_criterion_02_zernike_basis():
    k = 15
    r, t, w = oracles.disk_quadrature(n_r=400, n_t=512)
    Z = np.stack([ZernikeExpansion(np.eye(k)[j], 1.0).eval_polar(r, t)
                  for j in range(k)])
    gram = (Z * w) @ Z.T
    ortho_err = float(np.abs(gram - np.eye(k)).max())

    rng = np.random.default_rng(3)
    exp = ZernikeExpansion(rng.normal(size=k), 1.0)
    worst = 0.0
    for _ in range(40):
        x, y = rng.uniform(-0.6, 0.6, size=2)
        gx, gy = exp.grad_cartesian(x, y)
        fd = oracles.central_difference(
            lambda p: exp.eval_xy(p[0], p[1]), np.array([x, y]), h=1e-6)
        rel = np.linalg.norm([gx, gy] - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)

    ok = ortho_err < 1e-3 and worst < 1e-5
    _line(2, ok, f"orthonormality err {ortho_err:.2e} (< 1e-3), "
                 f"gradient rel err {worst:.2e} (< 1e-5)")
    assert ortho_err < 1e-3
    assert worst < 1e-5


# ---------------------------------------------------------------------------
# 3. fovea correction vs focus stacking at field angles
# ---------------------------------------------------------------------------

def test_criterion_03_field_angle_correction(system):
    t0 = time.perf_counter()
    sched = OptimizerSchedule(iterations=200)
    spots = {}
    for ang in (0.0, 4.6, 9.2):
        P = optics.field_point_at_angle(system, ang)
        dz, _ = optimize.optimize_defocus_only(system, [P], sched)
        full, _ = optimize.optimize_single(system, [P], sched,
                                           init=dz.coeffs)
        spots[ang] = (analysis.rms_spot(system, P, full),
                      analysis.rms_spot(system, P, dz))
    dt = time.perf_counter() - t0
    every = all(f <= d * 1.001 for f, d in spots.values())
    twice = spots[9.2][0] * 2.0 <= spots[9.2][1]
    ok = every and twice and dt < 600.0
    detail = ", ".join(f"{a}deg {f:.2f}/{d:.2f}um"
                       for a, (f, d) in spots.items())
    _line(3, ok, f"full/defocus-only spots: {detail}; "
                 f"2x at 9.2deg: {twice}, {dt:.0f}s (< 600s)")
    assert every
    assert twice
    assert dt < 600.0


# ---------------------------------------------------------------------------
# 4. imaging-budget efficiency
# ---------------------------------------------------------------------------

def test_criterion_04_budget_efficiency(system):
    t0 = time.perf_counter()
    sched = OptimizerSchedule(iterations=150, patience=15)
    grid = (32, 32)
    curve = optimize.budget_curve(system, list(range(1, 11)),
                                  grid_shape=grid, schedule=sched, seed=0)
    vals = [c["mean_r_min"] for c in curve]

    tiling = optimize.optimize_roi_tiling(system, 2, schedule=sched)
    tiling_val = float(optimize.evaluate_stack(system, tiling,
                                               grid).r_min.mean())
    joint5, single = vals[4], vals[0]
    monotone = all(b <= a for a, b in zip(vals, vals[1:]))
    tail = (vals[8] - vals[9]) / vals[8]
    dt = time.perf_counter() - t0
    ok = (joint5 < tiling_val < single and monotone and tail < 0.05
          and dt < 3600.0)
    _line(4, ok, f"joint N=5 {joint5:.2f} < tiling 2x2 {tiling_val:.2f} "
                 f"< single {single:.2f} um; monotone {monotone}, "
                 f"N=9->10 gain {tail:.1%} (< 5%), {dt:.0f}s (< 3600s)")
    assert joint5 < tiling_val < single
    assert monotone
    assert tail < 0.05
    assert dt < 3600.0


# ---------------------------------------------------------------------------
# 5. joint-loss hand examples
# ---------------------------------------------------------------------------

def test_criterion_05_joint_loss_examples():
    r = np.zeros((2, 2, 2))
    r[:, :, 0] = [[1.0, 5.0], [2.0, 2.0]]
    r[:, :, 1] = [[4.0, 3.0], [9.0, 9.0]]
    l_gs, l_hr, _ = optimize.joint_loss(r)
    exact = (l_gs == 2.0 and l_hr == 0.0)

    single = np.abs(np.random.default_rng(0).normal(size=(4, 4, 1))) + 0.1
    l_gs1, _, _ = optimize.joint_loss(single)
    identity = np.isclose(l_gs1, single[:, :, 0].mean(), rtol=1e-12)

    ok = exact and identity
    _line(5, ok, f"2x2/N=2 example L_gs={l_gs}, L_hr={l_hr} "
                 f"(want 2.0, 0.0); N=1 identity {bool(identity)}")
    assert exact
    assert identity


# ---------------------------------------------------------------------------
# 6. fovea coverage and image-count estimate
# ---------------------------------------------------------------------------

def test_criterion_06_coverage(system):
    sched = OptimizerSchedule(iterations=120)
    covs = {}
    # the 1.0 anchor exists to cover the sensor corners in the count
    for rho in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        P = optics.object_point_for_field(system, rho, 0.0)
        exp, _ = optimize.optimize_single(system, P, sched)
        covs[rho] = analysis.coverage_map(
            system, exp, rho_nodes=np.linspace(0.02, 1.0, 17),
            theta_nodes=25, rays=8_000, support=48, threshold=30.0)
    area_in = covs[0.1].region_extent()[2]
    area_out = covs[0.9].region_extent()[2]
    need = analysis.images_needed(covs, threshold=30.0)
    ok = (area_out < area_in and 20 <= need["count"] <= 300
          and need["uncovered_cells"] == 0)
    _line(6, ok, f"area(rho=0.9) {area_out:.3f} < area(rho=0.1) "
                 f"{area_in:.3f}; images needed {need['count']} "
                 f"(in [20, 300], {need['uncovered_cells']} uncovered)")
    assert area_out < area_in
    assert 20 <= need["count"] <= 300


# ---------------------------------------------------------------------------
# 7. control-model quality ordering
# ---------------------------------------------------------------------------

def test_criterion_07_control_ordering(system):
    t0 = time.perf_counter()
    dev = control.SyntheticDevice(
        aperture_radius=system.plate_semi_diameter)
    ds = control.dataset_generate(dev, 1800, seed=0)
    models = control.ControlModels(
        A=control.fit_linear(ds),
        decoder=control.train_decoder(ds, epochs=800, seed=0),
        encoder=control.train_encoder(ds, epochs=700, seed=0),
    )
    rmse_dec = float(np.sqrt(
        ((models.decoder(ds.V_test) - ds.W_test) ** 2).mean()))
    rmse_lin = float(np.sqrt(
        (((ds.V_test ** 2) @ models.A.T - ds.W_test) ** 2).mean()))
    table = control.compare_strategies(dev, models, ds)
    V_enc = models.encoder.predict(ds.W_test)
    in_range = bool((V_enc >= 0.0).all() and (V_enc <= control.V_MAX).all())
    dt = time.perf_counter() - t0
    ok = (rmse_dec < rmse_lin and table["ordering_ok"] and in_range
          and dt < 900.0)
    wm = {s: table[s]["w_m_mse"] for s in control.STRATEGIES}
    _line(7, ok, f"decoder RMSE {rmse_dec:.3f} < linear {rmse_lin:.3f}; "
                 f"W_m MSE {wm}; encoder in [0, {control.V_MAX:.0f}] V "
                 f"{in_range}; {dt:.0f}s (< 900s)")
    assert rmse_dec < rmse_lin
    assert table["ordering_ok"]
    assert in_range
    assert dt < 900.0


# ---------------------------------------------------------------------------
# 8. fusion quality on a miscalibrated stack
# ---------------------------------------------------------------------------

def test_criterion_08_fusion_quality(system):
    sched = OptimizerSchedule(iterations=150, patience=15)
    pset, stack = optimize.optimize_joint(system, 5, grid_shape=(16, 16),
                                          schedule=sched, seed=0)
    scene = imaging.text_scene(system.d_img, seed=1)
    # sensor sits 0.5 mm off its calibrated position
    miscal = system.rebuilt(d_sensor=system.d_sensor + 0.5)
    kw = dict(psf_grid=5, resolution=256, psf_rays=8_000, psf_support=25)
    fstack = imaging.render_stack(scene, miscal, pset,
                                  n_star=stack.n_star, **kw)
    pitch_mm = (miscal.sensor.pixel_pitch_um
                * miscal.sensor.resolution / 256) * 1e-3
    ref = imaging.warp_scene(scene, miscal, 256, pitch_mm)

    fused, _ = fusion.fuse_sharpness(fstack.images)
    masked = fusion.fuse_mask(fstack.images, fstack.n_star)
    psnr = lambda img: fusion.metrics(img, ref)["psnr_db"]
    p_fused, p_mask = psnr(fused), psnr(masked)
    p_each = [psnr(img) for img in fstack.images]
    beats_each = all(p_fused >= p + 2.0 for p in p_each)
    ok = beats_each and p_fused > p_mask
    _line(8, ok, f"sharpness fusion {p_fused:.2f} dB vs individuals "
                 f"{[f'{p:.2f}' for p in p_each]} (+2 dB each) and mask "
                 f"fusion {p_mask:.2f} dB under 0.5 mm sensor error")
    assert beats_each
    assert p_fused > p_mask


# ---------------------------------------------------------------------------
# 9. calibration round trip
# ---------------------------------------------------------------------------

def test_criterion_09_calibration_round_trip(system):
    t0 = time.perf_counter()
    scene = imaging.text_scene(system.d_img, seed=3)
    patterns = cli.calibrate_default_patterns(system)
    base = {"d_dpp": system.d_dpp, "d_sensor": system.d_sensor,
            "d_img": system.d_img, "c_img_x": float(system.c_img[0]),
            "c_img_y": float(system.c_img[1])}
    tols = {"d_sensor": 0.05, "d_dpp": 0.2, "c_img_x": 0.1, "c_img_y": 0.1}
    results = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        signs = rng.choice([-1.0, 1.0], size=4)
        true = dict(base)
        true["d_sensor"] += signs[0] * 0.5
        true["d_dpp"] += signs[1] * 1.0
        true["c_img_x"] += signs[2] * 0.5
        true["c_img_y"] += signs[3] * 0.5
        problem = calibrate.make_problem(system, scene, patterns,
                                         [0.0, 30.0], true, base)
        report = calibrate.calibrate(problem, system, scene)
        errs = {k: abs(report["final"][k] - true[k]) for k in tols}
        ssim = report["final_mean_ssim"]
        results.append((all(errs[k] < tols[k] for k in tols)
                        and ssim > 0.95, errs, ssim))
    dt = time.perf_counter() - t0
    passed = sum(r[0] for r in results)
    worst = {k: max(r[1][k] for r in results) for k in tols}
    ok = passed == 10 and dt < 1800.0
    _line(9, ok, f"{passed}/10 seeds within tolerance; worst errors "
                 f"{ {k: round(v, 3) for k, v in worst.items()} } vs "
                 f"{tols}; min SSIM {min(r[2] for r in results):.4f} "
                 f"(> 0.95); {dt:.0f}s (< 1800s)")
    assert passed == 10, [r[1] for r in results if not r[0]]
    assert dt < 1800.0


# ---------------------------------------------------------------------------
# 10. grid-interpolated control
# ---------------------------------------------------------------------------

def test_criterion_10_grid_control(system):
    sched = OptimizerSchedule(iterations=100)
    grid = control.build_pattern_grid(system, 5, sched)
    pts = optimize.field_grid(system, (101, 101))
    rng = np.random.default_rng(11)
    ratios = []
    for _ in range(20):
        x, y = rng.uniform(0.0, 1.0, size=2)
        P = pts[int(round(y * 100)), int(round(x * 100))]
        coeffs, _ = control.grid_control(grid, (x, y))
        interp = ZernikeExpansion(coeffs, system.plate_semi_diameter)
        direct, _ = optimize.optimize_single(system, P, sched)
        ratios.append(analysis.rms_spot(system, P, interp)
                      / analysis.rms_spot(system, P, direct))
    med = float(np.median(ratios))
    ok = med <= 2.0
    _line(10, ok, f"median interpolated/direct spot ratio {med:.2f} "
                  f"(<= 2.0) over 20 random positions")
    assert med <= 2.0


# ---------------------------------------------------------------------------
# 11. CLI determinism
# ---------------------------------------------------------------------------

def test_criterion_11_determinism(tmp_path):
    cfg = {"seed": 7, "budget": 2, "grid_shape": [6, 6],
           "schedule": {"iterations": 25, "patience": 25}}
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps(cfg))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["optimize-joint", "--config", str(cfg_file),
                       "--out", str(out)])
        assert rc == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    same = all(filecmp.cmp(outs[0] / f, outs[1] / f, shallow=False)
               for f in files)
    ok = same and files == sorted(p.name for p in outs[1].iterdir())
    _line(11, ok, f"repeated optimize-joint run byte-identical across "
                  f"{len(files)} output files: {same}")
    assert ok
