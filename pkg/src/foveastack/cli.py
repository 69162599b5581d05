"""Command-line entry point for reproducible, config-driven runs.

Every command resolves its configuration, seeds all randomness, writes
its outputs under --out, and drops a manifest.json echoing the resolved
config so reruns are byte-identical. Errors leave an error.json with a
nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback
from pathlib import Path

import cv2
import numpy as np

from . import analysis, calibrate, control, fusion, imaging, optics, optimize
from .errors import ConfigError
from .zernike import ZernikeExpansion


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    return cfg


def _system(cfg: dict):
    if "system" in cfg:
        return optics.load_system(cfg["system"])
    return optics.default_system(**cfg.get("system_overrides", {}))


def _write_manifest(out: Path, command: str, cfg: dict, outputs: list):
    manifest = {
        "command": command,
        "config": cfg,
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                  sort_keys=True))


def _save_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _save_image(path: Path, img: np.ndarray):
    arr = np.clip(np.asarray(img, float), 0, 1)
    if arr.ndim == 3:
        arr = arr[:, :, ::-1]   # RGB -> BGR for the PNG writer
    cv2.imwrite(str(path), (arr * 65535).astype(np.uint16))


def _schedule(cfg: dict) -> optimize.OptimizerSchedule:
    sched = optimize.OptimizerSchedule()
    for k, v in cfg.get("schedule", {}).items():
        if not hasattr(sched, k):
            raise ConfigError(f"unknown schedule field {k!r}")
        setattr(sched, k, v)
    return sched


def _scene(cfg: dict, depth: float) -> imaging.Scene:
    sc = cfg.get("scene", {})
    if "file" in sc:
        return imaging.Scene.load(sc["file"])
    kind = sc.get("kind", "text")
    kw = dict(extent_mm=sc.get("extent_mm", 80.0))
    if kind == "checkerboard":
        return imaging.checkerboard_scene(depth, **kw)
    return imaging.text_scene(depth, seed=sc.get("seed", 0), **kw)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_optimize_single(cfg, system, out: Path) -> list:
    sched = _schedule(cfg)
    if "field_angle_deg" in cfg:
        pts = [optics.field_point_at_angle(system, cfg["field_angle_deg"])]
    else:
        pts = cfg.get("points") or [[0.0, 0.0, system.object_z]]
    if cfg.get("defocus_only"):
        exp, trace = optimize.optimize_defocus_only(system, pts, sched)
    else:
        exp, trace = optimize.optimize_single(system, pts, sched)
    (out / "pattern.json").write_text(exp.to_json())
    _save_json(out / "loss_trace.json", trace)
    spots = [analysis.rms_spot(system, p, exp) for p in np.atleast_2d(pts)]
    _save_json(out / "spots_um.json", spots)
    return ["pattern.json", "loss_trace.json", "spots_um.json"]


def cmd_optimize_joint(cfg, system, out: Path) -> list:
    sched = _schedule(cfg)
    pset, stack = optimize.optimize_joint(
        system, cfg.get("budget", 5),
        grid_shape=tuple(cfg.get("grid_shape", (32, 32))),
        schedule=sched, seed=cfg["seed"], depth=cfg.get("depth_mm"))
    pset.save(out / "patterns.json")
    np.save(out / "spot_stack.npy", stack.r)
    np.save(out / "n_star.npy", stack.n_star)
    _save_json(out / "summary.json", {
        "mean_r_min_um": float(stack.r_min.mean()),
        "budget": pset.budget,
        "loss_trace": pset.loss_trace,
    })
    return ["patterns.json", "spot_stack.npy", "n_star.npy", "summary.json"]


def cmd_optimize_tiling(cfg, system, out: Path) -> list:
    sched = _schedule(cfg)
    pset = optimize.optimize_roi_tiling(
        system, cfg.get("tiles", 2), schedule=sched,
        samples_per_roi=cfg.get("samples_per_roi", 3),
        depth=cfg.get("depth_mm"))
    pset.save(out / "patterns.json")
    stack = optimize.evaluate_stack(system, pset,
                                    tuple(cfg.get("grid_shape", (32, 32))))
    _save_json(out / "summary.json",
               {"mean_r_min_um": float(stack.r_min.mean())})
    return ["patterns.json", "summary.json"]


def cmd_analyze(cfg, system, out: Path) -> list:
    sub = cfg.get("analysis", "mtf")
    if sub == "mtf":
        exp = _pattern(cfg, system)
        P = cfg.get("point") or [0.0, 0.0, system.object_z]
        psf = analysis.psf_render(system, exp, P,
                                  rays=cfg.get("rays", 100_000))
        curve = analysis.mtf_from_psf(psf, system.sensor.pixel_pitch_um)
        f50, sat = analysis.mtf50(curve)
        rows = zip(curve.frequencies, curve.sagittal, curve.tangential,
                   curve.mean)
        with open(out / "mtf.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["freq_lp_mm", "sagittal", "tangential", "mean"])
            wr.writerows([[f"{x:.8g}" for x in r] for r in rows])
        _save_json(out / "mtf50.json",
                   {"mtf50_lp_mm": f50, "saturated": sat})
        return ["mtf.csv", "mtf50.json"]
    if sub == "coverage":
        exp = _pattern(cfg, system)
        cov = analysis.coverage_map(
            system, exp, threshold=cfg.get("threshold_lp_mm", 30.0),
            rays=cfg.get("rays", 20_000))
        cov.to_csv(out / "coverage.csv")
        (rho_rng, theta_rng, area) = cov.region_extent()
        _save_json(out / "coverage.json", {
            "threshold_lp_mm": cov.threshold,
            "covered_fraction": float(cov.covered.mean()),
            "region_rho": list(rho_rng), "region_theta": list(theta_rng),
            "region_area": area,
        })
        return ["coverage.csv", "coverage.json"]
    if sub == "budget-curve":
        sched = _schedule(cfg)
        res = optimize.budget_curve(
            system, cfg.get("budgets", list(range(1, 11))),
            grid_shape=tuple(cfg.get("grid_shape", (32, 32))),
            schedule=sched, seed=cfg["seed"])
        with open(out / "budget_curve.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["budget", "mean_r_min_um"])
            for r in res:
                wr.writerow([r["budget"], f"{r['mean_r_min']:.8g}"])
        for r in res:
            r["pattern_set"].save(out / f"patterns_n{r['budget']:02d}.json")
        return ["budget_curve.csv"] + \
            [f"patterns_n{r['budget']:02d}.json" for r in res]
    raise ConfigError(f"unknown analysis {sub!r}")


def _pattern(cfg, system) -> ZernikeExpansion | None:
    if "pattern_file" in cfg:
        return ZernikeExpansion.from_dict(
            json.loads(Path(cfg["pattern_file"]).read_text()))
    return None


def cmd_render_stack(cfg, system, out: Path) -> list:
    pset = optimize.PatternSet.load(cfg["patterns_file"])
    scene = _scene(cfg, pset.depth)
    kw = cfg.get("render", {})
    stack = imaging.render_stack(scene, system, pset, **kw)
    stack.save(out / "stack")
    return [f"stack/{p.name}" for p in sorted((out / "stack").iterdir())]


def cmd_fuse(cfg, system, out: Path) -> list:
    mode = cfg.get("fusion", "sharpness")
    stack = imaging.FoveaStack.load(cfg["stack_dir"])
    outputs = []
    if mode == "sharpness":
        fused, idx = fusion.fuse_sharpness(
            stack.images, cfg.get("blur_radius", fusion.DEFAULT_BLUR_RADIUS))
        cv2.imwrite(str(out / "index_map.png"),
                    (idx * (255 // max(len(stack.images) - 1, 1))
                     ).astype(np.uint8))
        outputs.append("index_map.png")
    elif mode == "mask":
        if stack.n_star is None:
            raise ConfigError("stack has no winner mask for mask fusion")
        fused = fusion.fuse_mask(stack.images, stack.n_star)
    elif mode == "pyramid":
        fused = fusion.fuse_pyramid(stack.images, cfg.get("levels", 5))
    else:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    np.save(out / "fused.npy", fused)
    _save_image(out / "fused.png", fused)
    outputs += ["fused.npy", "fused.png"]
    if "reference_file" in cfg:
        ref = np.load(cfg["reference_file"])
        _save_json(out / "metrics.json", fusion.metrics(fused, ref))
        outputs.append("metrics.json")
    return outputs


def cmd_device(cfg, system, out: Path) -> list:
    sub = cfg.get("device", "generate")
    dev = control.SyntheticDevice(
        aperture_radius=cfg.get("aperture_radius_mm",
                                system.plate_semi_diameter))
    if sub == "generate":
        ds = control.dataset_generate(dev, cfg.get("count", 1800),
                                      seed=cfg["seed"])
        ds.save(out / "dataset.csv")
        return ["dataset.csv"]
    ds = control.Dataset.load(cfg["dataset_file"])
    if sub == "fit-linear":
        A = control.fit_linear(ds)
        control.ControlModels(A=A).save(out / "models.json")
        pred = (ds.V_test ** 2) @ A.T
        _save_json(out / "linear_rmse.json", {
            "test_rmse": float(np.sqrt(((pred - ds.W_test) ** 2).mean()))})
        return ["models.json", "linear_rmse.json"]
    if sub == "train":
        models = control.ControlModels(
            A=control.fit_linear(ds),
            decoder=control.train_decoder(
                ds, sigma=cfg.get("sigma", 0.36),
                epochs=cfg.get("decoder_epochs", 800), seed=cfg["seed"]),
            encoder=control.train_encoder(
                ds, epochs=cfg.get("encoder_epochs", 700),
                seed=cfg["seed"] + 1),
        )
        models.save(out / "models.json")
        rmse = float(np.sqrt(
            ((models.decoder(ds.V_test) - ds.W_test) ** 2).mean()))
        _save_json(out / "decoder_rmse.json", {"test_rmse": rmse})
        return ["models.json", "decoder_rmse.json"]
    models = control.ControlModels.load(cfg["models_file"])
    if sub == "control":
        W = np.asarray(cfg["target_coeffs_um"], float)
        V = control.control(W, cfg.get("strategy", "encoder+decoder"),
                            models)
        _save_json(out / "voltages.json", {"V": V.tolist()})
        return ["voltages.json"]
    if sub == "compare-strategies":
        table = control.compare_strategies(dev, models, ds)
        _save_json(out / "strategy_table.json", table)
        return ["strategy_table.json"]
    raise ConfigError(f"unknown device subcommand {sub!r}")


def cmd_calibrate(cfg, system, out: Path) -> list:
    scene = _scene(cfg, system.d_img)
    rng = np.random.default_rng(cfg["seed"])
    pert = cfg.get("perturbation", {
        "d_sensor": 0.5, "d_dpp": 1.0, "c_img": 0.5})
    base = {"d_dpp": system.d_dpp, "d_sensor": system.d_sensor,
            "d_img": system.d_img, "c_img_x": float(system.c_img[0]),
            "c_img_y": float(system.c_img[1])}
    signs = rng.choice([-1.0, 1.0], size=4)
    true = dict(base)
    true["d_sensor"] += signs[0] * pert["d_sensor"]
    true["d_dpp"] += signs[1] * pert["d_dpp"]
    true["c_img_x"] += signs[2] * pert["c_img"]
    true["c_img_y"] += signs[3] * pert["c_img"]
    patterns = [ZernikeExpansion.from_dict(p)
                for p in cfg.get("patterns", [])] or \
        calibrate_default_patterns(system)
    offsets = cfg.get("stage_offsets_mm", [0.0, 30.0])
    problem = calibrate.make_problem(system, scene, patterns, offsets,
                                     true, base,
                                     render_kw=cfg.get("render", {}))
    report = calibrate.calibrate(problem, system, scene,
                                 sweeps=cfg.get("sweeps", 3))
    report["true"] = true
    report["errors"] = {k: report["final"][k] - true[k]
                        for k in ("d_sensor", "d_dpp", "c_img_x", "c_img_y")}
    calibrate.save_report(report, out / "calibration_report.json")
    return ["calibration_report.json"]


def calibrate_default_patterns(system) -> list:
    from . import zernike
    k = zernike.num_terms(4)
    # strong aberrations keep the SSIM objective sensitive to d_dpp
    w1 = np.zeros(k)
    w1[4], w1[12] = 2.5, 1.2          # defocus + spherical
    w2 = np.zeros(k)
    w2[3], w2[5], w2[7] = 2.0, -2.0, 1.5   # astigmatism + coma
    return [ZernikeExpansion(w1, system.plate_semi_diameter),
            ZernikeExpansion(w2, system.plate_semi_diameter)]


def cmd_track_sim(cfg, system, out: Path) -> list:
    """Scripted fovea path through grid-interpolated control."""
    g = cfg.get("grid", 5)
    sched = _schedule(cfg)
    grid = control.build_pattern_grid(system, g, sched)
    grid.save(out / "control_grid.json")
    steps = cfg.get("steps", 16)
    t = np.linspace(0, 2 * np.pi, steps, endpoint=False)
    path = np.column_stack([0.5 + 0.3 * np.cos(t), 0.5 + 0.3 * np.sin(t)])
    pts = optimize.field_grid(system, (512, 512))
    rows = []
    for x, y in path:
        coeffs, clamped = control.grid_control(grid, (x, y))
        exp = ZernikeExpansion(coeffs, system.plate_semi_diameter)
        i = min(int(round(y * 511)), 511)
        j = min(int(round(x * 511)), 511)
        spot = analysis.rms_spot(system, pts[i, j], exp)
        rows.append([x, y, spot, int(clamped)])
    with open(out / "track.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["x", "y", "spot_um", "clamped"])
        wr.writerows([[f"{r[0]:.6g}", f"{r[1]:.6g}", f"{r[2]:.6g}", r[3]]
                      for r in rows])
    return ["control_grid.json", "track.csv"]


COMMANDS = {
    "optimize-single": cmd_optimize_single,
    "optimize-joint": cmd_optimize_joint,
    "optimize-tiling": cmd_optimize_tiling,
    "analyze": cmd_analyze,
    "render-stack": cmd_render_stack,
    "fuse": cmd_fuse,
    "device": cmd_device,
    "calibrate": cmd_calibrate,
    "track-sim": cmd_track_sim,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="foveastack",
        description="foveated imaging pipeline: optimization, rendering, "
                    "fusion, device control and calibration")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="runs/out")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("FOVEASTACK_THREADS", 4)))
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        import torch
        torch.set_num_threads(args.threads)
        cfg = _load_config(args)
        np.random.seed(cfg["seed"])
        system = _system(cfg)
        outputs = COMMANDS[args.command](cfg, system, out)
        _write_manifest(out, args.command, cfg, outputs + ["manifest.json"])
        return 0
    except Exception as exc:   # structured error surface for scripts
        err = {"error": type(exc).__name__, "message": str(exc)}
        (out / "error.json").write_text(json.dumps(err, indent=2))
        print(f"error: {exc}", file=sys.stderr)
        if os.environ.get("FOVEASTACK_DEBUG"):
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
