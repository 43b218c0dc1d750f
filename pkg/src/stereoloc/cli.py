"""Command-line entry point.

Subcommands compose into the full experiment with no manual file edits:

    synth -> train -> teach -> repeat -> report

Configuration comes from an optional flat dotted-key config file
(`key = value` lines) overridden by command-line flags; every run directory
gets a manifest recording the fully resolved configuration and seeds. Exit
codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import estimator, features, harness, synth, training
from .errors import ConfigError, StereolocError

RUN_DIR_ENV = "STEREOLOC_RUN_DIR"


def _default_out(name: str) -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs")) / name


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat dotted-key config: `section.key = value` lines, `#` comments."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _merge_config(args: argparse.Namespace, argv: list[str]) -> None:
    """File values fill in flags the user left at their defaults; explicit
    command-line flags win."""
    if not getattr(args, "config", None):
        return
    file_values = read_config_file(args.config)
    prefix = args.command + "."
    for key, value in file_values.items():
        if not key.startswith(prefix):
            continue
        dest = key[len(prefix) :].replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigError(f"unknown config key {key}")
        if _flag_given(dest, argv):
            continue
        current = getattr(args, dest)
        caster = type(current) if current is not None else str
        if caster is bool:
            setattr(args, dest, value.lower() in ("1", "true", "yes"))
        else:
            setattr(args, dest, caster(value))


def _flag_given(dest: str, argv: list[str]) -> bool:
    flag = "--" + dest.replace("_", "-")
    return any(a == flag or a.startswith(flag + "=") for a in argv)


def _write_run_manifest(out_dir: Path, args: argparse.Namespace) -> None:
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k != "func"
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(
        json.dumps({"command": args.command, "config": resolved}, indent=2, sort_keys=True)
        + "\n"
    )


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(p) for p in text.lower().split("x"))
        return h, w
    except ValueError as e:
        raise ConfigError(f"bad --size {text!r}, expected WxH") from e


def _parse_channels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --channels {text!r}") from e


def _load_extractor(args) -> harness.LearnedExtractor | harness.AnalyticExtractor:
    if args.features == "analytic":
        return harness.AnalyticExtractor(window=args.window)
    if not args.ckpt:
        raise ConfigError("--ckpt required unless --features analytic")
    weights, _ = features.load_checkpoint(args.ckpt)
    return harness.LearnedExtractor(weights)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out) if args.out else _default_out(f"synth-{args.seed}")
    scene = synth.generate_scene(args.scene_seed)
    size = _parse_size(args.size)
    h, w = size
    K = synth.default_intrinsics(w, h)
    if args.kind == "pairs":
        synth.make_dataset(out, scene, count=args.count, seed=args.seed, size=size)
    elif args.kind == "path":
        poses = synth.path_poses(args.count)
        frames = synth.render_sequence(scene, poses, args.condition, K, size, args.seed)
        synth.save_sequence(out, frames, K, args.condition, args.seed)
    elif args.kind == "repeat":
        if not args.of:
            raise ConfigError("--of TEACH_DIR required for --kind repeat")
        _, manifest = synth.load_sequence(args.of)
        poses = np.array([e["pose"] for e in manifest["frames"]])
        live, _ = synth.offset_poses(poses, seed=args.seed)
        frames = synth.render_sequence(scene, live, args.condition, K, size, args.seed)
        synth.save_sequence(out, frames, K, args.condition, args.seed,
                            extra={"repeat_of": str(args.of)})
    else:
        raise ConfigError(f"unknown kind {args.kind!r}")
    _write_run_manifest(out, args)
    print(f"wrote {args.kind} data to {out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out) if args.out else _default_out(f"train-{args.seed}")
    samples, manifest = synth.load_dataset(args.data)
    K = synth.camera_from_dict(manifest["camera"])
    train_samples, val_samples = training.split_dataset(samples, args.val_fraction)
    cfg = features.ExtractorConfig(
        channels=_parse_channels(args.channels),
        window=args.window,
        seed=args.seed,
    )
    weights = features.init_weights(cfg)
    tcfg = training.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        early_stop_patience=args.patience,
        seed=args.seed,
    )
    lcfg = training.LossConfig(
        lam=args.lam,
        keypoint_weight=args.keypoint_weight,
        gate_threshold=args.gate_threshold,
        tau=args.tau,
    )
    _write_run_manifest(out, args)
    result = training.train(
        train_samples, val_samples, weights, tcfg, lcfg, K, out_dir=out,
        log=lambda msg: print(msg),
    )
    print(f"best epoch {result.best_epoch}; checkpoint in {out / 'checkpoint'}")
    return 0


def cmd_eval_grad(args) -> int:
    """Cross-check the analytic pipeline gradient against central
    differences on a small synthetic pair."""
    size = _parse_size(args.size)
    h, w = size
    scene = synth.generate_scene(args.scene_seed)
    K = synth.default_intrinsics(w, h)
    with tempfile.TemporaryDirectory() as tmp:
        synth.make_dataset(tmp, scene, count=1, seed=args.seed, size=size)
        samples, _ = synth.load_dataset(tmp)
    cfg = features.ExtractorConfig(
        channels=_parse_channels(args.channels), window=args.window, seed=args.seed
    )
    weights = features.init_weights(cfg)
    lcfg = training.LossConfig()
    rel = gradient_cross_check(samples, weights, lcfg, K)
    print(f"gradient relative error: {rel:.3e} (tolerance {args.tolerance:.1e})")
    if not rel < args.tolerance:
        print(f"error: numeric: gradient check failed ({rel:.3e})", file=sys.stderr)
        return 4
    return 0


def gradient_cross_check(samples, weights, lcfg, K) -> float:
    """Norm-relative disagreement between backward() and finite differences
    over every extractor weight."""
    from . import autodiff as ad

    names = sorted(weights.tensors)
    sizes = {n: weights.tensors[n].size for n in names}

    def flatten(tensors):
        return np.concatenate([np.ravel(tensors[n]) for n in names])

    def unflatten(x):
        out = {}
        i = 0
        for n in names:
            out[n] = x[i : i + sizes[n]].reshape(weights.tensors[n].shape)
            i += sizes[n]
        return out

    _, grads, _ = training.total_loss(samples, weights, lcfg, K)
    analytic = flatten(grads)

    def f(x):
        w = features.ExtractorWeights(weights.config, unflatten(x))
        mean, _, _ = training.total_loss(samples, w, lcfg, K, compute_grads=False)
        return mean

    numeric = ad.finite_diff(f, flatten(weights.tensors))
    return float(
        np.linalg.norm(analytic - numeric)
        / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
    )


def cmd_teach(args) -> int:
    out = Path(args.out) if args.out else _default_out("map")
    frames, manifest = synth.load_sequence(args.frames)
    K = synth.camera_from_dict(manifest["camera"])
    extractor = _load_extractor(args)
    teach_map = harness.teach(frames, extractor, K, disparity_source=args.disparity)
    harness.save_map(out, teach_map)
    _write_run_manifest(out, args)
    print(f"taught {len(teach_map.vertices)} vertices into {out}")
    return 0


def cmd_repeat(args) -> int:
    out = Path(args.out) if args.out else _default_out("repeat")
    frames, manifest = synth.load_sequence(args.frames)
    teach_map = harness.load_map(args.map)
    extractor = _load_extractor(args)
    params = harness.LocalizeParams(
        ransac=estimator.RansacParams(
            iterations=args.iterations,
            inlier_threshold=args.inlier_threshold,
            min_inliers=args.min_inliers,
            seed=args.seed,
        ),
        tau=args.tau,
        mode=args.mode,
        failure_inliers=args.failure_inliers,
        disparity=args.disparity,
    )
    report = harness.repeat(frames, teach_map, extractor, params, teach_map.K)
    record = harness.RunRecord(
        name=args.name or manifest.get("condition", "run"),
        teach_condition=str(manifest.get("extra", {}).get("teach_condition", "teach")),
        repeat_condition=str(manifest.get("condition", "unknown")),
        report=report,
    )
    harness.emit_report([record], out)
    summary = {
        "mean_inliers": report.mean_inliers,
        "failure_count": report.failure_count,
        "failure_fraction": report.failure_fraction,
        "pose_rmse": report.pose_rmse,
        "heading_rmse": report.heading_rmse,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out, args)
    print(
        f"repeat {record.name}: mean inliers {report.mean_inliers:.1f}, "
        f"failures {report.failure_count}/{len(frames)}"
    )
    return 0


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else _default_out("report")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        summary_path = run_dir / "summary.json"
        if not summary_path.is_file():
            raise ConfigError(f"{run_dir} has no summary.json (not a repeat output?)")
        summary = json.loads(summary_path.read_text())
        manifest = json.loads((run_dir / "run_manifest.json").read_text())
        rows.append({"run": run_dir.name, **summary,
                     "condition": manifest["config"].get("name") or "unknown"})
    table = out / "aggregate.csv"
    with open(table, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    _write_run_manifest(out, args)
    print(f"aggregated {len(rows)} runs into {table}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereoloc",
        description="Differentiable stereo localization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat dotted-key config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap (this build is single-threaded)")

    p = sub.add_parser("synth", help="generate synthetic data")
    common(p)
    p.add_argument("--kind", choices=["pairs", "path", "repeat"], default="pairs")
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--size", default="64x48")
    p.add_argument("--scene-seed", type=int, default=3)
    p.add_argument("--condition", default="noon", choices=sorted(synth.CONDITIONS))
    p.add_argument("--of", help="teach sequence to align a repeat to")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the extractor")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--channels", default="8,16,32")
    p.add_argument("--tau", type=float, default=50.0)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--keypoint-weight", type=float, default=1.0)
    p.add_argument("--gate-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-grad", help="finite-difference gradient cross-check")
    common(p)
    p.add_argument("--size", default="32x24")
    p.add_argument("--channels", default="2,3,4")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--scene-seed", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_eval_grad)

    p = sub.add_parser("teach", help="build a map from a taught sequence")
    common(p)
    p.add_argument("--frames", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--features", choices=["learned", "analytic"], default="learned")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--disparity", choices=["gt", "block"], default="gt")
    p.set_defaults(func=cmd_teach)

    p = sub.add_parser("repeat", help="localize a sequence against a map")
    common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--features", choices=["learned", "analytic"], default="learned")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--mode", choices=["dense", "sparse"], default="dense")
    p.add_argument("--tau", type=float, default=harness.DEFAULT_LOCALIZE_TAU)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--inlier-threshold", type=float, default=0.1)
    p.add_argument("--min-inliers", type=int, default=6)
    p.add_argument("--failure-inliers", type=int, default=20)
    p.add_argument("--disparity", choices=["gt", "block"], default="gt")
    p.add_argument("--name", help="run name for reports")
    p.set_defaults(func=cmd_repeat)

    p = sub.add_parser("report", help="aggregate repeat runs")
    common(p)
    p.add_argument("--runs", nargs="+", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    effective = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(effective)
    try:
        _merge_config(args, effective)
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return 3
    except StereolocError as e:
        print(f"error: numeric: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
