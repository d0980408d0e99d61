import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from lib.config import ExperimentConfig, dump_config, load_config, parse_config
from lib.errors import EXIT_OK, DataError, exit_code_for
from lib.experiment_store import ExperimentStore, RunFolder, build_run_manifest, make_run_id
from lib.frame_sources import open_frame_source
from lib.harness import SequenceTrainer
from lib.logger import LOG_ERR, LOG_WARN
from lib.manifest import DatasetManifest, assign_untrimmed_labels, load_manifest, trim_manifest, write_manifest
from lib.reporting import result_row, write_report
from lib.synthetic_videos import export_frames, generate_synthetic_dataset
from lib.task_splits import (check_task_sequence, generate_task_sequence, load_task_sequence, save_task_sequence,
                             split_statistics)

# make sure to load environment variables from .env file
load_dotenv()

BANNER = "=============================================="


def prepare_manifest(manifest: DatasetManifest, trim: bool) -> DatasetManifest:
    """Untrimmed manifests are either cut into segments or labeled per whole video."""
    if manifest.trim_mode != "untrimmed":
        return manifest
    if trim:
        return trim_manifest(manifest)
    result = assign_untrimmed_labels(manifest)
    if result.discarded_count:
        print(f"Discarded {result.discarded_count}/{result.total_before} multi-label videos "
              f"({100.0 * result.discarded_fraction:.2f}%)")
    return result.manifest


# ----------------------------------------------------
# split
# ----------------------------------------------------


def cmd_split(args) -> int:
    manifest = prepare_manifest(load_manifest(args.manifest), args.trim)
    seq = generate_task_sequence(manifest, args.num_tasks, args.seed)
    table, summary = split_statistics(seq, manifest)
    out = Path(args.out) if args.out else Path("splits") / f"{manifest.name}_t{args.num_tasks}_s{args.seed}.json"
    save_task_sequence(seq, out, stats=summary)
    if args.stats_csv:
        table.to_csv(args.stats_csv, index=False)

    print(table.to_string(index=False))
    print(", ".join(f"{k}: {v}" for k, v in summary.items()))
    print(f"Task sequence written to {out}")
    return EXIT_OK


# ----------------------------------------------------
# synth
# ----------------------------------------------------


def cmd_synth(args) -> int:
    knobs: Dict[str, Any] = {"motion_speed": args.motion_speed, "noise_std": args.noise_std,
                             "oscillation": args.oscillation}
    if args.blob_radius is not None:
        knobs["blob_radius"] = args.blob_radius
    manifest, source = generate_synthetic_dataset(
        num_classes=args.classes,
        videos_per_class=args.videos_per_class,
        frames_per_video=args.frames,
        frame_size=(args.size, args.size),
        seed=args.seed,
        **knobs,
    )
    write_manifest(manifest, args.out)
    print(f"Synthetic manifest '{manifest.name}' ({len(manifest.records)} videos) written to {args.out}")
    if args.export_frames:
        n = export_frames(manifest, source, args.export_frames)
        print(f"Exported {n} frames to {args.export_frames}")
    return EXIT_OK


# ----------------------------------------------------
# run
# ----------------------------------------------------

# flag -> (section, key)
_OVERRIDES = {
    "method": ("method", "name"),
    "lambda_reg": ("method", "lambda_reg"),
    "epochs_memory": ("training", "epochs_memory"),
    "epochs_reg": ("training", "epochs_reg"),
    "lr": ("training", "learning_rate"),
    "segments": ("training", "segments_n"),
    "seed": ("training", "seed"),
    "eval_partition": ("training", "eval_partition"),
    "max_video_instances": ("memory", "max_video_instances"),
    "frames_per_video": ("memory", "frames_per_video"),
    "lambda_tc": ("tc", "lambda_tc"),
}


def apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    doc = config.model_dump(mode="json")
    for flag, (section, key) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "frames_per_video" and value != "all":
            value = int(value)
        doc[section][key] = value
    return parse_config(json.dumps(doc))


def print_schedule(run_id: str, config: ExperimentConfig, run_cfg, seq) -> None:
    print(f"Run id: {run_id}")
    print(f"Method: {run_cfg.method}, epochs/task: {run_cfg.epochs}, lr: {run_cfg.learning_rate}, "
          f"segments: {run_cfg.segments_n}, eval on: {run_cfg.eval_partition}")
    if run_cfg.budget is not None:
        print(f"Memory: {run_cfg.budget.max_video_instances} videos x {config.memory.frames_per_video} frames "
              f"= {run_cfg.budget.frame_capacity} frames")
    for task in seq.tasks:
        print(f"  task {task.task_index}: classes {list(task.class_ids)}, "
              f"{len(task.train_ids)} train / {len(task.val_ids)} val / {len(task.test_ids)} test videos")


def cmd_run(args) -> int:
    config = apply_overrides(load_config(args.config), args)
    manifest_path = Path(config.dataset.manifest)
    manifest = prepare_manifest(load_manifest(manifest_path), config.dataset.trim)
    seq = load_task_sequence(args.split)
    check_task_sequence(seq, manifest)
    if seq.num_tasks != config.split.num_tasks:
        LOG_WARN(f"split file has {seq.num_tasks} tasks, config says {config.split.num_tasks}; using the split file")

    run_cfg = config.to_run_config(avg_frames_full=manifest.avg_frames())
    run_cfg.validate()
    memory_fpv = config.memory.frames_per_video if run_cfg.uses_memory else "-"
    run_id = make_run_id(run_cfg.method, manifest.name, seq.num_tasks,
                         config.memory.frames_per_video if run_cfg.uses_memory else "none", run_cfg.seed)

    if args.dry_run:
        print_schedule(run_id, config, run_cfg, seq)
        print("Dry run: configuration valid, nothing trained.")
        return EXIT_OK

    store = ExperimentStore(args.store)
    folder = store.create_run(run_id, force=args.force, resume=args.resume)
    (folder.path / "config.json").write_text(dump_config(config), encoding="utf-8")
    capacity = run_cfg.budget.frame_capacity if run_cfg.budget is not None else "-"
    if not (args.resume and folder.manifest_path.exists()):
        folder.write_run_manifest(build_run_manifest(
            run_id,
            config.model_dump(mode="json"),
            inputs={"manifest": manifest_path, "split": Path(args.split)},
            seeds={"split": seq.seed, "training": run_cfg.seed},
            extra={"summary": {"method": run_cfg.method, "dataset": manifest.name,
                               "frames_per_video": memory_fpv, "frame_capacity": capacity}},
        ))

    source = open_frame_source(manifest, manifest_path.parent)
    trainer = SequenceTrainer(
        run_cfg, manifest, seq, source, progress=not args.quiet and sys.stderr.isatty(),
        on_task_end=lambda tr, t: tr.save_checkpoint(folder.checkpoint_dir(t)),
    )
    start = 0
    if args.resume:
        latest = folder.latest_checkpoint()
        if latest is not None:
            start = trainer.restore_checkpoint(latest[1])
            print(f"Resuming {run_id} after task {latest[0]}")
    result = trainer.run(start_task=start)
    report = folder.save_result(result)

    print("method, frames_per_video, frame_capacity, Acc%, BWF%")
    print(result_row(run_cfg.method, memory_fpv, capacity, report["acc"], report["bwf"]))
    print(f"Artifacts in {folder.path}")
    return EXIT_OK


# ----------------------------------------------------
# report
# ----------------------------------------------------


def cmd_report(args) -> int:
    store = ExperimentStore(args.store)
    folders: List[RunFolder] = [store.open_run(r) for r in args.runs] if args.runs else store.list_runs()
    if not folders:
        raise DataError(f"no runs found in {store.root}")
    written = write_report(folders, args.out, plots=not args.no_plots)
    print(Path(written["table_txt"]).read_text(encoding="utf-8").rstrip())
    for name, path in written.items():
        print(f"  {name}: {path}")
    return EXIT_OK


# ----------------------------------------------------
# argument parsing
# ----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Class-incremental video action recognition benchmark.",
        formatter_class=argparse.RawTextHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="Generate a class-incremental task sequence from a manifest.")
    p.add_argument("--manifest", required=True, help="Dataset manifest (JSON lines).")
    p.add_argument("--num-tasks", type=int, default=10, help="Number of tasks (default: 10)")
    p.add_argument("--seed", type=int, default=0, help="Split seed (default: 0)")
    p.add_argument("--out", default=None, help="Output JSON (default: splits/<dataset>_t<n>_s<seed>.json)")
    p.add_argument("--trim", action="store_true",
                   help="Untrimmed manifests: one video per segment instead of whole-video labels.")
    p.add_argument("--stats-csv", default=None, help="Also write the per-task statistics table as CSV.")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="Write a synthetic moving-blob dataset manifest.")
    p.add_argument("--out", default="data/synthetic/manifest.jsonl",
                   help="Manifest path (default: data/synthetic/manifest.jsonl)")
    p.add_argument("--classes", type=int, default=10, help="Number of classes (default: 10)")
    p.add_argument("--videos-per-class", type=int, default=56,
                   help="Videos per class, split 70/15/15 into train/val/test (default: 56 -> 40 train)")
    p.add_argument("--frames", type=int, default=16, help="Frames per video (default: 16)")
    p.add_argument("--size", type=int, default=32, help="Frame height and width in pixels (default: 32)")
    p.add_argument("--seed", type=int, default=0, help="Generator seed (default: 0)")
    p.add_argument("--motion-speed", type=float, default=1.5, help="Blob speed in pixels/frame (default: 1.5)")
    p.add_argument("--noise-std", type=float, default=20.0, help="Per-pixel noise std (default: 20)")
    p.add_argument("--blob-radius", type=float, default=None, help="Blob radius (default: frame size / 12)")
    p.add_argument("--oscillation", type=float, default=2.0,
                   help="Transverse oscillation amplitude of every third class (default: 2.0)")
    p.add_argument("--export-frames", default=None, help="Also write every frame as PNG under this directory.")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="Train and evaluate one method over a task sequence.")
    p.add_argument("--config", default="config/experiment.json", help="Experiment config (default: config/experiment.json)")
    p.add_argument("--split", required=True, help="Task sequence JSON written by 'split'.")
    p.add_argument("--method", default=None,
                   help="finetune, ewc, mas, naive, icarl, bic, naive+tc, icarl+tc, bic+tc (config default: icarl)")
    p.add_argument("--lambda-reg", type=float, default=None, help="EWC/MAS regularization factor (default: preset)")
    p.add_argument("--epochs-memory", type=int, default=None, help="Epochs per task, memory methods (default: 50)")
    p.add_argument("--epochs-reg", type=int, default=None, help="Epochs per task, EWC/MAS/finetune (default: 20)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default: 1e-3)")
    p.add_argument("--segments", type=int, default=None, help="Segments N sampled per clip (default: 8)")
    p.add_argument("--lambda-tc", type=float, default=None, help="Temporal consistency factor (default: 0.5)")
    p.add_argument("--frames-per-video", default=None, help="Frames stored per memory video, or 'all' (default: 8)")
    p.add_argument("--max-video-instances", type=int, default=None, help="Memory size in videos (default: 2020)")
    p.add_argument("--seed", type=int, default=None, help="Training seed (default: 0)")
    p.add_argument("--eval-partition", choices=("val", "test"), default=None, help="Evaluation partition (default: val)")
    p.add_argument("--store", default=None, help="Store root (default: $VIDEO_CIL_STORE or ./runs)")
    p.add_argument("--force", action="store_true", help="Overwrite an existing run folder.")
    p.add_argument("--resume", action="store_true", help="Continue from the last completed task checkpoint.")
    p.add_argument("--dry-run", action="store_true", help="Validate and print the task schedule without training.")
    p.add_argument("--quiet", action="store_true", help="No progress bars.")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="Comparison table and plots over finished runs.")
    p.add_argument("runs", nargs="*", help="Run ids or folders (default: every run in the store)")
    p.add_argument("--store", default=None, help="Store root (default: $VIDEO_CIL_STORE or ./runs)")
    p.add_argument("--out", default="report", help="Output directory (default: ./report)")
    p.add_argument("--no-plots", action="store_true", help="Write tables and CSVs only.")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    print(BANNER)
    try:
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        if code == 1:
            LOG_ERR(f"fatal error: {e}")
        print(f"\n {args.command} error: {e}")
        return code
    finally:
        print(BANNER)


if __name__ == "__main__":
    sys.exit(main())
