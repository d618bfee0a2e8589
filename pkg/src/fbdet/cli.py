"""Command-line surface: dataset generation, training, inference, sweeps,
verification, and figure-data export.

Exit codes: 0 success, 1 runtime failure, 2 usage error. All primary outputs
are deterministic for fixed flags and seed; wall-clock timings are written
to their own file so everything else stays byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import verify
from .analysis import (
    bound_check,
    box_mask,
    build_ideal_features,
    energy_histogram,
    heatmap_export,
)
from .boxes import eval_map
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .detector import GRID, IMAGE_SIZE, build_model, detect_batch, head_outputs, timing_probe
from .feedback import IffConfig
from .reporting import format_value, write_csv, write_pgm
from .scenes import SceneSpec, gen_dataset, read_manifest, write_manifest
from .tensor import PaddingMode
from .train import TrainingDiverged, loss_curve_rows, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbdet",
        description="Closed-loop detection engine and its verification harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene manifest")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a detector on a manifest")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mi", type=int, default=1, help="feedback iterations")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--w2-kernel", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--loss-csv", type=Path, default=None)

    p = sub.add_parser("sweep-mi", help="train/evaluate across feedback iteration counts")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--test-data", type=Path, required=True)
    p.add_argument("--mi-list", type=str, default="0,1,2,3")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("infer", help="run detection over a manifest")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mi", type=int, default=None, help="override checkpoint iterations")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("verify", help="run a randomized verification sweep")
    p.add_argument(
        "--suite",
        required=True,
        choices=sorted(verify.SUITES),
    )
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="optional CSV report path")

    p = sub.add_parser("analyze", help="export heatmaps, energy histograms, stability trace, timing")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--scenes", type=int, default=60, help="scenes used for the energy histograms")
    p.add_argument("--heatmaps", type=int, default=3, help="scenes exported as heatmaps")
    return parser


def _cmd_gen(args) -> int:
    scenes = gen_dataset(args.count, args.seed, SceneSpec(noise_level=args.noise))
    write_manifest(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _train_once(scenes, mi, args):
    w2_kernel = getattr(args, "w2_kernel", 1)
    cfg = IffConfig(iterations=mi, pad=PaddingMode.ZERO, feedback_kernel=w2_kernel)
    model = build_model(args.seed, feedback_kernel=cfg.feedback_kernel)
    result = train(
        model,
        scenes,
        cfg,
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    return cfg, result


def _cmd_train(args) -> int:
    scenes = read_manifest(args.data)
    cfg, result = _train_once(scenes, args.mi, args)
    final_loss = result.losses[-1] if result.losses else float("nan")
    meta = {
        "seed": args.seed,
        "epochs": len(result.losses),
        "final_loss": final_loss,
    }
    save_checkpoint(args.out, result.model, cfg, meta)
    if args.loss_csv is not None:
        write_csv(args.loss_csv, ("epoch", "loss", "map_estimate"), loss_curve_rows(result))
    print(f"trained {len(result.losses)} epochs, final loss {final_loss:.6f} -> {args.out}")
    return 0


def _cmd_sweep_mi(args) -> int:
    try:
        mi_values = [int(v) for v in args.mi_list.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"--mi-list must be comma-separated integers, got {args.mi_list!r}")
    if not mi_values:
        raise UsageError("--mi-list must be nonempty")
    train_scenes = read_manifest(args.data)
    test_scenes = read_manifest(args.test_data)
    test_images = [s.image for s in test_scenes]
    test_gts = [list(s.objects) for s in test_scenes]
    rows = []
    for mi in mi_values:
        cfg, result = _train_once(train_scenes, mi, args)
        dets = detect_batch(result.model, test_images, cfg)
        score = eval_map(dets, test_gts)
        rows.append((mi, score))
        print(f"mi={mi} map={score:.4f}")
    write_csv(args.out, ("mi", "map"), rows)
    return 0


def _cmd_infer(args) -> int:
    model, cfg, _meta = load_checkpoint(args.ckpt)
    if args.mi is not None:
        cfg = cfg.with_iterations(args.mi)
    scenes = read_manifest(args.data)
    det_lists = detect_batch(model, [s.image for s in scenes], cfg)
    rows = []
    for idx, dets in enumerate(det_lists):
        for d in dets:
            rows.append((idx, d.label, d.score, d.box[0], d.box[1], d.box[2], d.box[3]))
    write_csv(args.out, ("scene", "label", "score", "x", "y", "w", "h"), rows)
    print(f"{sum(len(d) for d in det_lists)} detections over {len(scenes)} scenes -> {args.out}")
    return 0


def _cmd_verify(args) -> int:
    result = verify.run_suite(args.suite, args.trials, args.seed)
    status = "PASS" if result.passed else "FAIL"
    print(
        f"{status} suite={result.suite} trials={result.trials} "
        f"violations={result.violations} worst={result.worst:.3e}"
    )
    if args.out is not None:
        write_csv(args.out, result.header, result.rows)
    return 0 if result.passed else 1


def _cmd_analyze(args) -> int:
    model, cfg, _meta = load_checkpoint(args.ckpt)
    scenes = read_manifest(args.data)
    if not scenes:
        raise UsageError("manifest is empty")
    out_dir = args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    subset = scenes[: args.scenes]
    images = np.stack([s.image for s in subset])
    x0, x_final, _y = head_outputs(model, images, cfg)
    masks = [box_mask(s.objects, GRID, IMAGE_SIZE) for s in subset]

    with_iff = energy_histogram([x_final[i] for i in range(len(subset))], masks)
    without = energy_histogram([x0[i] for i in range(len(subset))], masks)
    for name, dist in (("with_iff", with_iff), ("without_iff", without)):
        write_csv(
            out_dir / f"energy_hist_{name}.csv",
            ("bin_center", "bg_mass", "fg_mass"),
            list(zip(dist.bin_centers, dist.background, dist.foreground)),
            footer=(
                "# mean_bg="
                + format_value(dist.background_mean)
                + " mean_fg="
                + format_value(dist.foreground_mean)
            ),
        )

    for i in range(min(args.heatmaps, len(subset))):
        write_pgm(out_dir / f"heatmap_without_iff_{i:03d}.pgm", heatmap_export(x0[i], 300))
        write_pgm(out_dir / f"heatmap_with_iff_{i:03d}.pgm", heatmap_export(x_final[i], 300))

    # Stability trace on the first scene, in the spectral-exact regime.
    scene = subset[0]
    analysis_cfg = IffConfig(
        iterations=cfg.iterations,
        leak=cfg.leak,
        pad=PaddingMode.CIRCULAR,
        enforce_contraction=True,
        feedback_kernel=cfg.feedback_kernel,
    )
    ideal, x0_scene = build_ideal_features(model, scene, analysis_cfg)
    report = bound_check(
        x0_scene,
        model.head_filter(),
        model.feedback_filter(),
        analysis_cfg,
        ideal,
        steps=5,
    )
    consts = report.constants
    write_csv(
        out_dir / "stability_report.csv",
        ("k", "v", "v_change", "bound", "slack"),
        report.rows(),
        footer=(
            "summary,"
            + ",".join(
                format_value(v)
                for v in (
                    consts.a,
                    consts.b,
                    consts.c,
                    consts.epsilon if consts.epsilon is not None else "",
                    report.violations,
                )
            )
        ),
    )

    timing_scenes = scenes[: max(100, min(len(scenes), 120))]
    if len(timing_scenes) >= 100:
        probe = timing_probe(model, [s.image for s in timing_scenes], cfg)
        write_csv(
            out_dir / "timing.csv",
            ("iterations", "mean_latency_s"),
            sorted(probe.latency.items()),
            footer=f"# ratio={format_value(probe.ratio) if probe.ratio is not None else ''}",
        )
    print(f"analysis artifacts written to {out_dir}")
    return 0


class UsageError(ValueError):
    """Command-line misuse detected after argparse."""


_HANDLERS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "sweep-mi": _cmd_sweep_mi,
    "infer": _cmd_infer,
    "verify": _cmd_verify,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen" and args.count <= 0:
        parser.error("--count must be positive")
    try:
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:  # console_scripts hook
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
