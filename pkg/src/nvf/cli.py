"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 planning failure,
4 evaluation failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigError, EvaluationError, PlanningError

EXIT_OK, EXIT_CONFIG, EXIT_PLANNING, EXIT_EVAL = 0, 2, 3, 4


def _float_list(text: str, n: int, what: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace(" ", ",").split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"bad {what}: {text!r}") from exc
    if len(vals) != n:
        raise ConfigError(f"{what} needs {n} numbers, got {len(vals)}")
    return vals


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.RunConfig()
    run = {}
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        run["out_dir"] = args.out
    if getattr(args, "threads", None) is not None:
        run["threads"] = args.threads
    cfg = cfg.replace(run=run)
    if getattr(args, "method", None) is not None:
        cfg = cfg.replace(planner={"method": args.method})
    cfgmod.validate(cfg)
    return cfg


def _run_dir(cfg: cfgmod.RunConfig) -> Path:
    return Path(cfg.run.out_dir) / f"{cfg.planner.method}-seed{cfg.run.seed}"


def cmd_run(args) -> int:
    from . import io
    from .field import save_field
    from .planner import check_planner_method, run_active_mapping

    cfg = _load_config(args)
    check_planner_method(cfg.planner.method)
    out = _run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    state = {"run": None}
    manifest = {"seed": cfg.run.seed, "config_hash": cfg.hash(), "method": cfg.planner.method,
                "status": "running", "failure_step": None}

    def flush(run):
        state["run"] = run
        io.write_candidates_csv(out / "candidates.csv", run.steps)
        rec = run.steps[-1]
        if rec.entropy_image is not None:
            io.write_scalar_image(out / f"step{rec.step:03d}_entropy.ppm", rec.entropy_image)
        if rec.observation is not None:
            io.write_ppm(out / f"step{rec.step:03d}_view.ppm", rec.observation)

    code = EXIT_OK
    try:
        run = run_active_mapping(cfg, progress=flush)
        state["run"] = run
        manifest["status"] = "ok"
    except PlanningError as exc:
        manifest.update(status="planning-failure", error=str(exc))
        code = EXIT_PLANNING
    except EvaluationError as exc:
        manifest.update(status="evaluation-failure", error=str(exc))
        code = EXIT_EVAL
    run = state["run"]
    if run is not None:
        io.write_metrics_csv(out / "metrics.csv", run.metrics)
        io.write_candidates_csv(out / "candidates.csv", run.steps)
        if run.field is not None and code == EXIT_OK:
            save_field(run.field, out / "field.nvff")
        manifest.update(
            failure_step=run.failure_step,
            timings={k: round(v, 3) for k, v in run.timings.items()},
            coverage=run.coverage_trace,
            n_views=len(run.training),
        )
    elif code != EXIT_OK:
        io.write_metrics_csv(out / "metrics.csv", [])
    io.write_manifest(out / "manifest.json", manifest)
    if code != EXIT_OK:
        print(f"error: {manifest.get('error')}", file=sys.stderr)
    else:
        print(f"wrote {out}")
    return code


def _parse_pose(text: str):
    """Either 6 numbers (camera position, look-at target) or 12 (rotation rows, translation)."""
    import numpy as np

    from .geometry import Pose, look_at

    vals = [float(x) for x in text.replace(" ", ",").split(",") if x] if text else []
    if len(vals) == 6:
        return look_at(np.array(vals[:3]), np.array(vals[3:]))
    if len(vals) == 12:
        return Pose.from_flat(vals)
    raise ConfigError("pose needs 6 numbers (position, target) or 12 (rotation row-major, translation)")


def cmd_entropy_map(args) -> int:
    import numpy as np

    from . import io
    from . import uncertainty as unc
    from .field import load_field
    from .planner import make_priors, planning_intrinsics
    from .render import render_image

    cfg = _load_config(args)
    method = args.method or cfg.planner.method
    unc.check_method(method)
    field = load_field(args.field)
    pose = _parse_pose(args.pose)
    intr = planning_intrinsics(cfg)
    priors = make_priors(cfg, field)
    corr = unc.CorrelationConfig(cfg.correlation.k, field.grid.diameter, intr.delta_phi)
    ent = unc.image_entropy(field, pose, intr, method, priors, corr, cfg.planner.samples_per_ray,
                            cfg.correlation.correlated, cfg.planner.no_var_variance)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = io.write_scalar_image(out / f"entropy_{method}.ppm", ent.pixels)
    rgb, _, _ = render_image(field, pose, intr, cfg.field.samples_per_ray)
    io.write_ppm(out / "render.ppm", rgb)
    print(f"method={method} total={ent.total:.6f} mean={float(np.mean(ent.pixels)):.6f} min={lo:.6f} max={hi:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import io
    from .evaluation import MetricsRecord, geometry_metrics, image_metrics, reconstruct_points
    from .field import load_field
    from .planner import cr_threshold, eval_intrinsics, observation_intrinsics, scene_from_config, test_poses
    from .scene import extract_surface

    cfg = _load_config(args)
    if cfg.eval.n_test_poses < 1:
        raise ConfigError("eval.n_test_poses must be at least 1 for evaluation")
    field = load_field(args.field)
    scene = scene_from_config(cfg)
    tests = test_poses(scene, cfg)
    p, s, m = image_metrics(field, scene, tests, eval_intrinsics(cfg), cfg.field.samples_per_ray,
                            cfg.camera.gt_samples)
    recon = reconstruct_points(field, tests, observation_intrinsics(cfg), cfg.field.samples_per_ray,
                               cfg.eval.recon_min_weight)
    thr = cr_threshold(scene, cfg)
    acc, comp, cr = geometry_metrics(recon, extract_surface(scene, cfg.eval.surface_density).positions, thr)
    record = MetricsRecord(0, 0, p, s, m, acc, comp, cr, thr, float("nan"))
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_metrics_csv(out / "eval.csv", [record])
    print(f"psnr={p:.3f} ssim={s:.4f} mse={m:.6f} acc={acc:.4f} comp={comp:.4f} cr={cr:.4f}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    from .oracles import run_all

    results = run_all(args.seed if args.seed is not None else 0, args.trials, beta=args.beta)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else 1


def cmd_config_reference(args) -> int:
    print(cfgmod.reference())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvf", description="Visibility-aware uncertainty and active mapping.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, method=True):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
        sp.add_argument("--out", help="output directory (overrides [run] out_dir)")
        sp.add_argument("--threads", type=int, help="numeric library threads")
        if method:
            sp.add_argument("--method", help="uncertainty method tag")

    sp = sub.add_parser("run", help="run active mapping")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("entropy-map", help="per-pixel entropy image of one view")
    common(sp)
    sp.add_argument("--field", required=True, help="field file")
    sp.add_argument("--pose", required=True, help="x,y,z,tx,ty,tz or 12 numbers")
    sp.set_defaults(func=cmd_entropy_map)
    sp = sub.add_parser("eval", help="metrics of a field at the fixed test poses")
    common(sp, method=False)
    sp.add_argument("--field", required=True, help="field file")
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("oracle-check", help="run the randomised oracle suite")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--beta", type=float, help="fixed beta for every trial (validated)")
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_oracle_check)
    sp = sub.add_parser("config-reference", help="print every configuration key with its default")
    sp.set_defaults(func=cmd_config_reference)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    threads = getattr(args, "threads", None)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlanningError as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return EXIT_PLANNING
    except EvaluationError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
