"""End-to-end experiment pipeline.

PCA -> constraints -> train (or baseline) -> decode -> merge background ->
metrics, with all artifacts written to an output directory.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .baselines import TaskStats, corpus_background_fraction, ordered_uniform, predict_background, sample_from_train
from .constraints import build_ordered_space, constrain_params, narration_mask
from .core import BACKGROUND, Dataset, Segmentation, ValidationError, frames_to_segmentation, resolve_multilabel, segmentation_to_frames
from .features import FeatureGroupSpec, PcaModel, empirical_diag_cov, pca_fit, pca_transform
from .metrics import METRICS, EvalReport, aggregate, map_states, score_video
from .model import ModelParams, from_task_labels, to_task_labels, viterbi_decode
from .training import TrainConfig, fit_supervised_generative, random_init, train_discriminative, train_unsupervised

log = logging.getLogger(__name__)

MODES = ("unsup", "gen-sup", "disc-sup")
CONSTRAINTS = ("none", "ord", "narr", "ord+narr")
BASELINES = ("none", "bkg", "sample", "uniform")


@dataclass
class RunConfig:
    mode: str | None = None
    constraints: str = "none"
    baseline: str = "none"
    train: TrainConfig = field(default_factory=TrainConfig)
    pca_components: int | None = 100
    seed: int = 0
    output_dir: str | None = None
    hmm: bool = False
    penalty: float = -1e4
    smoothing: float = 0.1
    max_duration: int | None = None
    narration_at_test: bool = False
    max_figures: int = 5

    def __post_init__(self):
        if self.baseline != "none" and self.mode is not None:
            raise ValidationError("baseline and mode are mutually exclusive")
        if self.mode is None and self.baseline == "none":
            self.mode = "unsup"
        if self.mode is not None and self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.constraints not in CONSTRAINTS:
            raise ValidationError(f"unknown constraints {self.constraints!r}")
        if self.baseline not in BASELINES:
            raise ValidationError(f"unknown baseline {self.baseline!r}")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    @property
    def ordered(self) -> bool:
        return "ord" in self.constraints

    @property
    def narrated(self) -> bool:
        return "narr" in self.constraints

    @property
    def system_name(self) -> str:
        if self.baseline != "none":
            return f"baseline-{self.baseline}"
        name = {"unsup": "HSMM", "gen-sup": "SMM-gen", "disc-sup": "SMM-disc"}[self.mode]
        if self.hmm:
            name = name.replace("SMM", "MM")
        if self.constraints != "none":
            name += "+" + self.constraints.replace("ord", "Ord").replace("narr", "Narr")
        return name

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


def split_dataset(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Videos marked ``train``/``test``; with no split marks both sides are
    the whole dataset."""
    train = [v for v in ds.videos if v.split in (None, "train")]
    test = [v for v in ds.videos if v.split in (None, "test")]
    if all(v.split is None for v in ds.videos):
        return ds, ds
    return ds.replace_videos(train), ds.replace_videos(test)


def random_splits(ds: Dataset, n_splits: int, train_per_task: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Per task, ``train_per_task`` videos sampled without replacement for
    training; the rest are held out."""
    out = []
    for i in range(n_splits):
        rng = np.random.default_rng([seed, i])
        train_ids = set()
        for task in ds.tasks:
            vids = sorted(v.video_id for v in ds.videos_for(task.task_id))
            if len(vids) <= train_per_task:
                raise ValidationError(
                    f"task {task.task_id!r} has {len(vids)} videos; cannot hold out any with "
                    f"{train_per_task} for training"
                )
            train_ids.update(rng.choice(vids, size=train_per_task, replace=False).tolist())
        train = [replace(v, split="train") for v in ds.videos if v.video_id in train_ids]
        test = [replace(v, split="test") for v in ds.videos if v.video_id not in train_ids]
        out.append((ds.replace_videos(train), ds.replace_videos(test)))
    return out


def _group_specs(ds: Dataset, task_id: str, components: int) -> list[FeatureGroupSpec]:
    v = ds.videos_for(task_id)[0]
    dims = v.group_dims or (v.n_features,)
    return [FeatureGroupSpec(f"group{i}", d, min(components, d)) for i, d in enumerate(dims)]


def _unit_segmentation(frames: np.ndarray) -> Segmentation:
    return Segmentation(tuple((int(l), 1) for l in frames))


def _model_segmentation(frames_task: np.ndarray, n_steps: int, hmm: bool) -> Segmentation:
    model_frames = from_task_labels(frames_task, n_steps)
    return _unit_segmentation(model_frames) if hmm else frames_to_segmentation(model_frames)


def fit_pca(train: Dataset, task_id: str, config: RunConfig) -> PcaModel | None:
    if config.pca_components is None:
        return None
    specs = _group_specs(train, task_id, config.pca_components)
    sub = Dataset((train.task(task_id),), tuple(train.videos_for(task_id)))
    return pca_fit(sub, specs)


def _project(pca: PcaModel | None, video) -> np.ndarray:
    return video.features if pca is None else pca_transform(pca, video)


def train_task_model(train: Dataset, task_id: str, config: RunConfig) -> dict[str, Any]:
    """Fit PCA and model parameters for one task."""
    task = train.task(task_id)
    S = task.n_steps
    videos = sorted(train.videos_for(task_id), key=lambda v: v.video_id)
    if not videos:
        raise ValidationError(f"task {task_id!r} has no training videos")
    pca = fit_pca(train, task_id, config)
    feats = [_project(pca, v) for v in videos]
    variances = empirical_diag_cov(feats)
    space = build_ordered_space(task) if config.ordered else None
    max_duration = 1 if config.hmm else config.max_duration
    seed = config.seed
    tcfg = replace(config.train, seed=seed)
    needs_assignment = False

    if config.mode == "gen-sup":
        segs = [_model_segmentation(resolve_multilabel(v, task), S, config.hmm) for v in videos]
        params = fit_supervised_generative(feats, segs, S + 1, config.smoothing, variances, max_duration)
        if space is not None:
            params = constrain_params(params, space)
    elif config.mode == "disc-sup":
        if space is not None:
            raise ValidationError("discriminative training over the ordered space is not supported")
        segs = [_model_segmentation(resolve_multilabel(v, task), S, config.hmm) for v in videos]
        if max_duration is None:
            max_duration = max(max(s.durations) for s in segs)
        init = random_init(feats, S + 1, seed, tcfg.init_noise, variances, max_duration)
        params = train_discriminative(
            feats, segs, tcfg, init=init, video_ids=[v.video_id for v in videos]
        )
    else:
        keep = [i for i, v in enumerate(videos) if space is None or v.T >= S]
        if len(keep) < len(videos):
            log.warning("task %s: skipping %d videos shorter than %d steps", task_id, len(videos) - len(keep), S)
        videos = [videos[i] for i in keep]
        feats = [feats[i] for i in keep]
        masks = None
        if config.narrated:
            masks = [
                narration_mask(v, space=space, n_steps=S, penalty=config.penalty) if v.narration else None
                for v in videos
            ]
        init = random_init(feats, S + 1, seed, tcfg.init_noise, variances, max_duration, space)
        params = train_unsupervised(
            feats, tcfg, init=init, masks=masks, video_ids=[v.video_id for v in videos]
        )
        needs_assignment = config.constraints == "none"
    return {"params": params, "pca": pca, "needs_assignment": needs_assignment}


def decode_video(model: dict[str, Any], video, n_steps: int, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """(task labels, raw base-model states) for one video."""
    params: ModelParams = model["params"]
    X = _project(model["pca"], video)
    seg, _ = viterbi_decode(params, X, mask)
    states = params.label_map[segmentation_to_frames(seg)]
    labels = to_task_labels(states, n_steps)
    return labels, states


def predict(models: dict[str, dict[str, Any]], ds: Dataset, config: RunConfig | None = None) -> dict[str, dict[str, Any]]:
    out = {}
    for v in sorted(ds.videos, key=lambda v: v.video_id):
        model = models[v.task_id]
        S = ds.task(v.task_id).n_steps
        mask = None
        if config is not None and config.narration_at_test and config.narrated and v.narration:
            mask = narration_mask(v, space=model["params"].space, n_steps=S, penalty=config.penalty)
        labels, states = decode_video(model, v, S, mask)
        out[v.video_id] = {
            "task_id": v.task_id,
            "labels": labels,
            "states": states,
            "needs_assignment": model["needs_assignment"],
        }
    return out


def predict_baseline(train: Dataset, test: Dataset, baseline: str, seed: int) -> dict[str, dict[str, Any]]:
    rng = np.random.default_rng(seed)
    train_refs = {v.video_id: resolve_multilabel(v, train.task(v.task_id)) for v in train.videos}
    bg = corpus_background_fraction(list(train_refs.values())) if train_refs else 0.0
    stats = {}
    out = {}
    for v in sorted(test.videos, key=lambda v: v.video_id):
        task = test.task(v.task_id)
        if baseline == "bkg":
            labels = predict_background(v.T)
        elif baseline == "sample":
            if task.task_id not in stats:
                stats[task.task_id] = TaskStats.from_labelings(
                    task, [train_refs[u.video_id] for u in train.videos_for(task.task_id)]
                )
            labels = sample_from_train(stats[task.task_id], v.T, rng)
        elif baseline == "uniform":
            labels = segmentation_to_frames(ordered_uniform(task, v.T, bg))
        else:
            raise ValidationError(f"unknown baseline {baseline!r}")
        out[v.video_id] = {"task_id": v.task_id, "labels": labels, "states": None, "needs_assignment": False}
    return out


def apply_assignment(predictions: dict[str, dict[str, Any]], ds: Dataset) -> dict[str, dict[str, Any]]:
    """Relabel state predictions flagged for it with the per-task
    accuracy-maximizing state->label bijection."""
    out = dict(predictions)
    for task in ds.tasks:
        vids = [vid for vid, p in predictions.items() if p["task_id"] == task.task_id and p.get("needs_assignment")]
        if not vids:
            continue
        S = task.n_steps
        labels = list(range(S)) + [BACKGROUND]
        refs = [resolve_multilabel(_video(ds, vid), task) for vid in vids]
        states = [predictions[vid]["states"] for vid in vids]
        mapping = map_states(states, refs, S + 1, labels)
        lut = np.array([mapping[i] for i in range(S + 1)], dtype=np.int64)
        for vid in vids:
            out[vid] = {**predictions[vid], "labels": lut[predictions[vid]["states"]], "needs_assignment": False}
    return out


def _video(ds: Dataset, vid: str):
    for v in ds.videos:
        if v.video_id == vid:
            return v
    raise KeyError(vid)


def evaluate_predictions(predictions: dict[str, dict[str, Any]], ds: Dataset) -> EvalReport:
    predictions = apply_assignment(predictions, ds)
    scores = []
    for vid in sorted(predictions):
        v = _video(ds, vid)
        ref = resolve_multilabel(v, ds.task(v.task_id))
        scores.append(score_video(vid, v.task_id, predictions[vid]["labels"], ref))
    return aggregate(scores)


@dataclass
class RunResult:
    report: EvalReport
    predictions: dict[str, dict[str, Any]]
    models: dict[str, dict[str, Any]] | None
    artifacts: dict[str, str] = field(default_factory=dict)


def run_experiment(ds: Dataset, config: RunConfig, train: Dataset | None = None, test: Dataset | None = None) -> RunResult:
    if train is None or test is None:
        train, test = split_dataset(ds)
    if config.narrated and config.baseline == "none" and config.mode == "unsup":
        if not any(v.narration for v in train.videos):
            raise ValidationError("narration constraints requested but no video carries constraint intervals")
    models = None
    if config.baseline != "none":
        try:
            preds = predict_baseline(train, test, config.baseline, config.seed)
        except Exception as exc:
            raise StageError("baseline", exc) from exc
    else:
        models = {}
        for task in train.tasks:
            if not train.videos_for(task.task_id):
                continue
            try:
                models[task.task_id] = train_task_model(train, task.task_id, config)
            except Exception as exc:
                raise StageError(f"train:{task.task_id}", exc) from exc
        try:
            preds = predict(models, test, config)
        except Exception as exc:
            raise StageError("decode", exc) from exc
    try:
        report = evaluate_predictions(preds, test)
    except Exception as exc:
        raise StageError("evaluate", exc) from exc
    preds = apply_assignment(preds, test)
    result = RunResult(report, preds, models)
    if config.output_dir:
        result.artifacts = write_artifacts(result, test, config)
    return result


def report_metadata(config: RunConfig) -> dict:
    return {
        "version": __version__,
        "system": config.system_name,
        "seed": config.seed,
        "config_hash": config.digest(),
    }


def write_report(report: EvalReport, out_dir: Path, meta: dict) -> dict[str, str]:
    """report.jsonl (one record per task + average), report.tsv, report.txt."""
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [{**rec, **meta} for rec in report.records()]
    jsonl = out_dir / "report.jsonl"
    jsonl.write_text("".join(json.dumps(_jsonable(r), sort_keys=True) + "\n" for r in records))
    tsv = out_dir / "report.tsv"
    cols = ["task", *METRICS, *meta.keys()]
    lines = ["\t".join(cols)]
    for r in records:
        lines.append("\t".join(_cell(r[c]) for c in cols))
    tsv.write_text("\n".join(lines) + "\n")
    txt = out_dir / "report.txt"
    txt.write_text(
        f"system {meta.get('system')}  seed {meta.get('seed')}  config {meta.get('config_hash')}\n"
        + report.table() + "\n" + "".join(f"note: {f}\n" for f in report.flags)
    )
    return {"report_jsonl": str(jsonl), "report_tsv": str(tsv), "report_txt": str(txt)}


def _cell(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.4f}"
    return str(x)


def _jsonable(r: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}


def write_artifacts(result: RunResult, test: Dataset, config: RunConfig) -> dict[str, str]:
    from .io import save_model, save_predictions
    from .plotting import metrics_figure, save_timeline

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = report_metadata(config)
    artifacts = write_report(result.report, out, meta)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    pred_path = out / "predictions.json"
    save_predictions(pred_path, result.predictions, config.system_name, meta)
    artifacts["predictions"] = str(pred_path)
    if result.models is not None:
        model_path = out / "model.json"
        save_model(model_path, result.models, {**meta, "config": config.to_dict()})
        artifacts["model"] = str(model_path)
    if result.report.per_task:
        artifacts["metrics_figure"] = str(
            metrics_figure(result.report.per_task, METRICS[:4], out / "figures" / "metrics.pdf")
        )
    for v in sorted(test.videos, key=lambda v: v.video_id)[: config.max_figures]:
        task = test.task(v.task_id)
        gt = frames_to_segmentation(resolve_multilabel(v, task))
        pred = frames_to_segmentation(result.predictions[v.video_id]["labels"])
        path = save_timeline(
            out / "figures" / f"{v.video_id}.pdf",
            [("GT", gt), (config.system_name, pred)],
            task.steps,
            title=f"{task.task_id} / {v.video_id}",
        )
        artifacts[f"timeline:{v.video_id}"] = str(path)
    return artifacts


def average_reports(reports: list[EvalReport]) -> EvalReport:
    """Mean of each per-task and average value across repeated splits."""
    tasks = sorted(set().union(*(r.per_task for r in reports)))
    per_task = {
        t: {m: float(np.nanmean([r.per_task[t][m] for r in reports if t in r.per_task])) for m in METRICS}
        for t in tasks
    }
    average = {m: float(np.nanmean([r.average[m] for r in reports])) for m in METRICS}
    flags = sorted(set(f for r in reports for f in r.flags))
    return EvalReport(per_task, average, flags)
