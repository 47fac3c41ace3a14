"""Command-line interface.

Exit codes: 0 success, 1 validation failure, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from .core import ValidationError, validate_dataset
from .experiment import (
    BASELINES,
    CONSTRAINTS,
    MODES,
    RunConfig,
    StageError,
    average_reports,
    evaluate_predictions,
    predict,
    random_splits,
    report_metadata,
    run_experiment,
    split_dataset,
    train_task_model,
    write_report,
)
from .io import FormatError, load_dataset, load_model, load_predictions, save_dataset, save_model, save_pca, write_document
from .training import TrainConfig

log = logging.getLogger("stepseg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _add_run_flags(p: argparse.ArgumentParser, with_baseline: bool = True) -> None:
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--constraints", choices=CONSTRAINTS, default="none")
    if with_baseline:
        p.add_argument("--baseline", choices=BASELINES, default="none")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--pca-components", type=int, default=100, help="per feature group; 0 disables PCA")
    p.add_argument("--hmm", action="store_true", help="fix durations to one timestep")
    p.add_argument("--max-duration", type=int, default=None)
    p.add_argument("--penalty", type=float, default=-1e4)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--epochs", type=int, default=TrainConfig.max_epochs)
    p.add_argument("--decay", type=float, default=TrainConfig.decay)
    p.add_argument("--patience", type=int, default=TrainConfig.patience)


def _config(args, output_dir=None) -> RunConfig:
    train = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        decay=args.decay,
        patience=args.patience,
        seed=args.seed,
    )
    return RunConfig(
        mode=args.mode,
        constraints=args.constraints,
        baseline=getattr(args, "baseline", "none"),
        train=train,
        pca_components=args.pca_components or None,
        seed=args.seed,
        output_dir=str(output_dir) if output_dir else None,
        hmm=args.hmm,
        penalty=args.penalty,
        smoothing=args.smoothing,
        max_duration=args.max_duration,
        max_figures=getattr(args, "figures", 5),
    )


def cmd_validate(args) -> int:
    ds = load_dataset(args.manifest, validate=False)
    problems = validate_dataset(ds)
    for p in problems:
        print(p)
    if problems:
        return EXIT_INVALID
    print(f"ok: {len(ds.tasks)} tasks, {ds.N} videos")
    return EXIT_OK


def cmd_pca(args) -> int:
    from .experiment import fit_pca

    ds = load_dataset(args.manifest)
    train, _ = split_dataset(ds)
    config = RunConfig(pca_components=args.components)
    merged = None
    for task in train.tasks:
        if not train.videos_for(task.task_id):
            continue
        model = fit_pca(train, task.task_id, config)
        if merged is None:
            merged = model
        else:
            merged.projections.update(model.projections)
    if merged is None:
        raise ValidationError("no training videos")
    save_pca(args.out, merged)
    for task, groups in sorted(merged.explained_variance().items()):
        print(task, " ".join(f"{g}={v:.3f}" for g, v in groups.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.manifest)
    config = _config(args)
    train, _ = split_dataset(ds)
    models = {}
    for task in train.tasks:
        if train.videos_for(task.task_id):
            log.info("training task %s", task.task_id)
            models[task.task_id] = train_task_model(train, task.task_id, config)
    save_model(args.out, models, {**report_metadata(config), "config": config.to_dict()})
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .io import save_predictions

    ds = load_dataset(args.manifest)
    models, meta = load_model(args.model)
    _, test = split_dataset(ds)
    missing = sorted({v.task_id for v in test.videos} - set(models))
    if missing:
        raise ValidationError(f"model has no parameters for tasks {missing}")
    preds = predict(models, test)
    save_predictions(args.out, preds, meta.get("system", "model"), meta)
    print(f"wrote {args.out} ({len(preds)} videos)")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_dataset(args.manifest)
    system, preds = load_predictions(args.predictions)
    unknown = sorted(set(preds) - {v.video_id for v in ds.videos})
    if unknown:
        raise ValidationError(f"predictions for unknown videos: {unknown[:5]}")
    report = evaluate_predictions(preds, ds.subset(preds))
    print(report.table())
    if args.out_dir:
        write_report(report, Path(args.out_dir), {"system": system})
    return EXIT_OK


def cmd_synth(args) -> int:
    from .io import params_to_dict
    from .synth import SynthSpec, synth_generate

    spec = SynthSpec(
        n_steps=args.steps,
        n_videos=args.videos,
        T_range=(args.t_min, args.t_max),
        separation=args.separation,
        step_duration=args.step_duration,
        background_fraction=args.background,
        ordered=args.ordered,
        n_tasks=args.tasks,
        seed=args.seed,
    )
    result = synth_generate(spec)
    out = Path(args.out_dir)
    path = save_dataset(result.dataset, out)
    write_document(
        out / "truth.json",
        "stepseg-synth-truth",
        1,
        {
            "params": {t: params_to_dict(p) for t, p in result.params.items()},
            "expected_background_fraction": result.expected_background_fraction,
            "seed": args.seed,
        },
    )
    print(f"wrote {path} ({result.dataset.N} videos)")
    return EXIT_OK


def cmd_viz(args) -> int:
    from .core import frames_to_segmentation, resolve_multilabel
    from .plotting import save_timeline

    ds = load_dataset(args.manifest)
    systems = [load_predictions(p) for p in args.predictions]
    out = Path(args.out_dir)
    vids = args.videos or sorted(systems[0][1])[: args.limit]
    by_id = {v.video_id: v for v in ds.videos}
    for vid in vids:
        if vid not in by_id:
            raise ValidationError(f"unknown video {vid!r}")
        v = by_id[vid]
        task = ds.task(v.task_id)
        rows = []
        if v.reference is not None:
            rows.append(("GT", frames_to_segmentation(resolve_multilabel(v, task))))
        for name, preds in systems:
            if vid in preds:
                rows.append((name, frames_to_segmentation(preds[vid]["labels"])))
        path = save_timeline(out / f"{vid}.{args.format}", rows, task.steps, title=f"{task.task_id} / {vid}")
        print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    ds = load_dataset(args.manifest)
    out = Path(args.out_dir)
    if args.splits:
        reports = []
        for i, (train, test) in enumerate(random_splits(ds, args.splits, args.train_per_task, args.seed)):
            config = _config(args, out / f"split{i:02d}")
            reports.append(run_experiment(ds, config, train, test).report)
        report = average_reports(reports)
        config = _config(args, out)
        meta = {**report_metadata(config), "splits": args.splits, "train_per_task": args.train_per_task}
        write_report(report, out, meta)
    else:
        config = _config(args, out)
        report = run_experiment(ds, config).report
    print(report.table())
    for f in report.flags:
        print("note:", f)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset manifest")
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pca", help="fit per-task PCA on training videos")
    p.add_argument("manifest", type=Path)
    p.add_argument("--components", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("train", help="fit per-task models")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_run_flags(p, with_baseline=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode test videos with a saved model")
    p.add_argument("manifest", type=Path)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against reference annotations")
    p.add_argument("manifest", type=Path)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--tasks", type=int, default=1)
    p.add_argument("--t-min", type=int, default=40)
    p.add_argument("--t-max", type=int, default=80)
    p.add_argument("--separation", type=float, default=5.0)
    p.add_argument("--step-duration", type=float, default=8.0)
    p.add_argument("--background", type=float, default=0.5)
    p.add_argument("--ordered", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("viz", help="draw segmentation timelines")
    p.add_argument("manifest", type=Path)
    p.add_argument("--predictions", type=Path, nargs="+", required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--videos", nargs="*", default=None)
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--format", choices=("pdf", "svg", "png"), default="pdf")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("run", help="end-to-end experiment")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--splits", type=int, default=0, help="repeat over random train/test splits")
    p.add_argument("--train-per-task", type=int, default=30)
    p.add_argument("--figures", type=int, default=5)
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        if isinstance(exc.__cause__, (ValidationError, FormatError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
