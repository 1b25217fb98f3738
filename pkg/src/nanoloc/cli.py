"""Command-line entry point tying the subsystems together.

Exit codes: 0 success, 1 domain error (unplannable layer, aborted episode,
bad file contents), 2 usage error.  Every randomized path takes an explicit
seed and embeds it in the JSON summaries so runs are reproducible from the
command line alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import deploy, metrics, nets, qnn, sim, vision
from .config import ConfigBundle, ConfigError, load_config
from .pose import Pose


class DomainError(RuntimeError):
    pass


def _write_or_print(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, newline="")
    else:
        sys.stdout.write(text)


def _resolve_nets(name: str | None, want_all: bool) -> list[str]:
    if want_all or name is None:
        return nets.all_network_names()
    try:
        nets.network_by_name(name)
    except KeyError as e:
        raise DomainError(str(e)) from e
    return [name]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_profile(args, cfg: ConfigBundle) -> int:
    names = _resolve_nets(args.net, args.all)
    if args.per_layer:
        if len(names) != 1:
            raise DomainError("--per-layer needs a single network (--net NAME)")
        prof = nets.profile(nets.network_by_name(names[0]))
        _write_or_print(nets.profile_to_csv(prof), args.out)
        return 0
    rows = [(n, nets.profile(nets.network_by_name(n))) for n in names]
    _write_or_print(deploy.comparison_csv(rows), args.out)
    return 0


def cmd_plan(args, cfg: ConfigBundle) -> int:
    (name,) = _resolve_nets(args.net, False)
    net = nets.network_by_name(name)
    mem = cfg.memory
    try:
        plan = deploy.plan_tiling(net, mem)
    except deploy.UnplannableLayer as e:
        raise DomainError(str(e)) from e
    report = deploy.validate_plan(plan, net, mem)
    text = deploy.plan_to_text(plan)
    text += f"validation {'PASS' if report.ok else 'FAIL'} ({len(report.checks)} checks)\n"
    for c in report.failures():
        text += f"  FAIL {c.layer} {c.check}: {c.detail}\n"
    _write_or_print(text, args.out)
    return 0 if report.ok else 1


def cmd_points(args, cfg: ConfigBundle) -> int:
    (name,) = _resolve_nets(args.net, False)
    prof = nets.profile(nets.network_by_name(name))
    _write_or_print(deploy.operative_points_csv(prof), args.out)
    return 0


def cmd_init_weights(args, cfg: ConfigBundle) -> int:
    (name,) = _resolve_nets(args.net, False)
    net = qnn.random_network(nets.network_by_name(name), seed=args.seed)
    qnn.save_network(net, args.out)
    print(f"wrote full-precision weights for {name} (seed {args.seed}) to {args.out}")
    return 0


def _load_calibration(directory: str, spec) -> list[np.ndarray]:
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise DomainError(f"no .pgm calibration frames in {directory!r}")
    frames = []
    for p in paths:
        frame = qnn.read_pgm(p)
        frames.append(_frame_to_input(frame, spec))
    return frames


def _frame_to_input(frame: np.ndarray, spec) -> np.ndarray:
    c, h, w = spec.input_shape
    if frame.shape == (160, 160) and (h, w) == (96, 160):
        frame = qnn.crop_input(frame)
    if frame.shape != (h, w):
        raise DomainError(f"frame shape {frame.shape} does not fit network input {(h, w)}")
    return frame.astype(np.float64)[None, :, :] / 255.0


def cmd_quantize(args, cfg: ConfigBundle) -> int:
    try:
        net = qnn.load_network(args.weights_in)
    except qnn.WeightFormatError as e:
        raise DomainError(str(e)) from e
    if net.stage is not qnn.Stage.FULL_PRECISION:
        raise DomainError("quantize expects a full-precision weight container")
    frames = _load_calibration(args.calibration, net.spec)
    try:
        fq, qi = qnn.quantize_pipeline(net, frames)
    except (qnn.CalibrationError, qnn.RequantError) as e:
        raise DomainError(str(e)) from e
    worst = 0.0
    for frame in frames:
        ref, _ = qnn.run_fp32(net, frame)
        got, _ = qnn.run_fakequant(fq, frame)
        worst = max(worst, float(np.max(np.abs(np.asarray(ref) - np.asarray(got)))))
    for idx in sorted(qi.q_params):
        q = qi.q_params[idx].quant
        name = net.spec.layers[idx].name
        if q.weight_scales is not None:
            print(
                f"layer {idx} {name}: in_scale={q.in_scale:.6g} "
                f"w_scale=[{q.weight_scales.min():.6g}, {q.weight_scales.max():.6g}]"
                + (f" alpha={q.alpha:.6g}" if q.alpha is not None else " (raw head)")
            )
        elif q.alpha is not None:
            print(f"layer {idx} {name}: in_scale={q.in_scale:.6g} alpha={q.alpha:.6g}")
    print(f"max fake-quant output deviation over calibration set: {worst:.6g}")
    qnn.save_network(qi, args.weights_out)
    if args.manifest_out:
        Path(args.manifest_out).write_text(qnn.manifest_text(qi), newline="")
    print(f"wrote integer-deployable weights to {args.weights_out}")
    return 0


def cmd_infer(args, cfg: ConfigBundle) -> int:
    try:
        net = qnn.load_network(args.weights)
    except qnn.WeightFormatError as e:
        raise DomainError(str(e)) from e
    frame = qnn.read_pgm(args.frame)
    x = _frame_to_input(frame, net.spec)
    if net.stage is qnn.Stage.FULL_PRECISION:
        out, _ = qnn.run_fp32(net, x)
    elif net.stage is qnn.Stage.FAKE_QUANTIZED:
        out, _ = qnn.run_fakequant(net, x)
    else:
        q = qnn.QTensor(np.rint(x * 255.0).astype(np.int64), qnn.INPUT_SCALE)
        out, _ = qnn.run_int8(net, q)
    vec = np.asarray(out, dtype=np.float64).ravel()
    doc = {"stage": net.stage.name, "output": [float(v) for v in vec]}
    if vec.shape == (4,):
        doc["pose"] = dict(zip(("x", "y", "z", "phi"), (float(v) for v in vec)))
    print(json.dumps(doc, sort_keys=True))
    return 0


_TRAJECTORIES = {
    "spiral": lambda cfg: cfg.spiral,
    "facing_circles": lambda cfg: sim.gen_training_patterns()[0],
    "vertical_circles": lambda cfg: sim.gen_training_patterns()[1],
}


def cmd_render(args, cfg: ConfigBundle) -> int:
    if args.trajectory not in _TRAJECTORIES:
        raise DomainError(f"unknown trajectory {args.trajectory!r}")
    traj = _TRAJECTORIES[args.trajectory](cfg)
    times = np.linspace(0.0, traj.duration, args.count)
    pairs = [(traj.observer_pose(float(t)), traj.target_pose(float(t))) for t in times]
    manifest = vision.generate_dataset(
        pairs,
        args.out_dir,
        cam=cfg.camera,
        background=args.background,
        seed=args.seed,
        augmentation=cfg.augmentation if args.augment else None,
    )
    meta = {
        "seed": args.seed,
        "count": args.count,
        "trajectory": args.trajectory,
        "augmented": bool(args.augment),
        "background": args.background,
    }
    (Path(args.out_dir) / "dataset.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True) + "\n", newline=""
    )
    print(f"wrote {args.count} frames and {manifest}")
    return 0


def _perception_model(name: str, cfg: ConfigBundle):
    if name == "oracle":
        return sim.OracleNoise.for_overall_rmse(cfg.simulation.oracle_rmse)
    if name == "blob":
        return sim.BlobPinhole(cam=cfg.camera, model=cfg.target, background=cfg.simulation.background)
    if name == "cnn":
        if not cfg.simulation.weights:
            raise DomainError("cnn perception needs [simulation] weights = <container>")
        net = qnn.load_network(cfg.simulation.weights)
        if net.stage is not qnn.Stage.INTEGER_DEPLOYABLE:
            raise DomainError("cnn perception needs integer-deployable weights")
        return sim.CnnPerception(net, cam=cfg.camera)
    raise DomainError(f"unknown perception model {name!r}")


def cmd_simulate(args, cfg: ConfigBundle) -> int:
    seed = cfg.simulation.seed if args.seed is None else args.seed
    perception = _perception_model(
        args.perception or cfg.simulation.perception, cfg
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    duration = args.duration or cfg.simulation.duration_s
    code = 0
    try:
        log = sim.run_episode(cfg.spiral, perception, cfg.controller, seed=seed, duration=duration)
    except sim.VolumeExit as e:
        log = e.log
        code = 1
    (out_dir / "episode.csv").write_text(log.to_csv(), newline="")
    (out_dir / "summary.json").write_text(
        json.dumps(log.summary(), indent=1, sort_keys=True) + "\n", newline=""
    )
    print(f"episode {'aborted' if code else 'completed'}; artifacts in {out_dir}")
    return code


def cmd_evaluate(args, cfg: ConfigBundle) -> int:
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise DomainError(f"manifest {manifest} does not exist")
    try:
        rows = vision.read_manifest(manifest)
    except ValueError as e:
        raise DomainError(str(e)) from e
    base = manifest.parent

    spec = args.predictor
    if spec == "oracle":
        predictor = metrics.oracle_predictor
    elif spec == "mean":
        predictor = metrics.mean_predictor(rows)
    elif spec == "blob":

        def predictor(row):
            return vision.estimate_pose_from_blob(
                qnn.read_pgm(base / row.frame), cfg.camera, cfg.target
            )

    elif spec.startswith("cnn:"):
        net = qnn.load_network(spec[4:])
        if net.stage is not qnn.Stage.INTEGER_DEPLOYABLE:
            raise DomainError("cnn predictor needs integer-deployable weights")

        def predictor(row):
            frame = qnn.read_pgm(base / row.frame)
            if frame.shape == (160, 160):
                frame = qnn.crop_input(frame)
            out, _ = qnn.run_int8(net, qnn.QTensor.from_frame(frame))
            vec = np.asarray(out).ravel()
            return Pose(float(vec[0]), float(vec[1]), float(vec[2]), float(vec[3]))

    else:
        raise DomainError(f"unknown predictor {spec!r}")

    report, scatter = metrics.evaluate(rows, predictor)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n", newline="")
    (out_dir / "scatter.csv").write_text(metrics.scatter_csv(scatter), newline="")
    print(f"evaluated {report.sample_count} samples ({report.failed_count} failures)")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nanoloc",
        description="Nano-drone relative-localization pipeline: profiling, "
        "quantization, tiling, synthetic vision, and closed-loop simulation.",
    )
    parser.add_argument("--config", help="TOML config file (section per subsystem)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="static network profiles (weights, MACs, est. fps)")
    p.add_argument("--net", help="network name (frontnet, mnv2-<t>-<n>)")
    p.add_argument("--all", action="store_true", help="profile all 17 networks")
    p.add_argument("--per-layer", action="store_true", help="per-layer breakdown CSV")
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="tile a network onto the memory hierarchy")
    p.add_argument("--net", required=True)
    p.add_argument("--out", help="output text path (default stdout)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("points", help="operative-point throughput/power table")
    p.add_argument("--net", default="frontnet")
    p.add_argument("--out")
    p.set_defaults(func=cmd_points)

    p = sub.add_parser("init-weights", help="write seeded full-precision weights")
    p.add_argument("--net", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("quantize", help="full-precision container -> integer container")
    p.add_argument("--weights-in", required=True)
    p.add_argument("--calibration", required=True, help="directory of PGM frames")
    p.add_argument("--weights-out", required=True)
    p.add_argument("--manifest-out", help="also write a text manifest")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="run one frame through a weight container")
    p.add_argument("--weights", required=True)
    p.add_argument("--frame", required=True, help="PGM frame")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", help="synthesize a labeled dataset")
    p.add_argument("--trajectory", default="spiral")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--background", default="flat", choices=("flat", "gradient", "textured"))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("simulate", help="closed-loop following episode")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="override [simulation] seed")
    p.add_argument("--duration", type=float, help="override [simulation] duration_s")
    p.add_argument("--perception", choices=("oracle", "blob", "cnn"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="run a predictor over a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictor", required=True, help="oracle | mean | blob | cnn:<weights>")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DomainError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
