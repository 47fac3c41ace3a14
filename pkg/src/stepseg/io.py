"""Dataset manifests, feature files, model bundles and prediction files.

A manifest is JSON listing tasks and videos. Each video's features live in
a raw little-endian float32 file (row-major T x F) next to a JSON sidecar
header ``<file>.json`` holding ``T``, ``F`` and the feature-group widths.

Model and prediction files are JSON with an embedded format version; model
payloads carry a SHA-256 checksum.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .constraints import OrderedStateSpace
from .core import Dataset, TaskDefinition, ValidationError, VideoInstance, validate_dataset
from .features import FeatureGroupSpec, GroupProjection, PcaModel
from .model import ModelParams

MANIFEST_VERSION = 1
MODEL_VERSION = 1
PREDICTIONS_VERSION = 1
FEATURE_DTYPE = "<f4"


class FormatError(ValueError):
    pass


# datasets ------------------------------------------------------------------


def write_features(path: str | Path, features: np.ndarray, group_dims=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    X = np.ascontiguousarray(features, dtype=FEATURE_DTYPE)
    X.tofile(path)
    header = {"T": X.shape[0], "F": X.shape[1], "dtype": FEATURE_DTYPE,
              "group_dims": list(group_dims) if group_dims else [X.shape[1]]}
    Path(str(path) + ".json").write_text(json.dumps(header))


def read_features(path: str | Path, video_id: str = "?", expected_T: int | None = None) -> tuple[np.ndarray, list[int]]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"video {video_id!r}: feature file not found: {path}")
    header_path = Path(str(path) + ".json")
    if not header_path.exists():
        raise FormatError(f"video {video_id!r}: feature header not found: {header_path}")
    header = json.loads(header_path.read_text())
    T, F = int(header["T"]), int(header["F"])
    if expected_T is not None and expected_T != T:
        raise FormatError(f"video {video_id!r}: manifest T={expected_T} but feature header has T={T}")
    size = path.stat().st_size
    if size != T * F * 4:
        raise FormatError(
            f"video {video_id!r}: feature file {path} holds {size // (4 * F) if F else 0} rows, expected T={T}"
        )
    X = np.memmap(path, dtype=FEATURE_DTYPE, mode="r", shape=(T, F))
    return X, [int(d) for d in header.get("group_dims", [F])]


def save_dataset(ds: Dataset, directory: str | Path, name: str = "manifest.json") -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    videos = []
    for v in ds.videos:
        rel = f"features/{v.video_id}.f32"
        write_features(directory / rel, v.features, v.group_dims)
        rec: dict[str, Any] = {"video_id": v.video_id, "task_id": v.task_id, "T": v.T, "features": rel}
        if v.group_dims:
            rec["group_dims"] = list(v.group_dims)
        if v.reference is not None:
            rec["reference"] = [list(r) for r in v.reference]
        if v.narration is not None:
            rec["narration"] = {str(k): [list(i) for i in ivs] for k, ivs in sorted(v.narration.items())}
        if v.split is not None:
            rec["split"] = v.split
        videos.append(rec)
    manifest = {
        "format": "stepseg-manifest",
        "version": MANIFEST_VERSION,
        "tasks": [{"task_id": t.task_id, "steps": list(t.steps)} for t in ds.tasks],
        "videos": videos,
    }
    path = directory / name
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(path: str | Path, validate: bool = True) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    base = path.parent
    try:
        tasks = [TaskDefinition(t["task_id"], t["steps"]) for t in manifest["tasks"]]
        videos = []
        for i, rec in enumerate(manifest["videos"]):
            vid = rec["video_id"]
            X, dims = read_features(base / rec["features"], vid, rec.get("T"))
            narration = rec.get("narration")
            videos.append(
                VideoInstance(
                    vid,
                    rec["task_id"],
                    np.asarray(X, dtype=np.float64),
                    reference=rec.get("reference"),
                    narration={int(k): v for k, v in narration.items()} if narration is not None else None,
                    group_dims=rec.get("group_dims", dims),
                    split=rec.get("split"),
                )
            )
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
    ds = Dataset(tuple(tasks), tuple(videos))
    if validate:
        problems = validate_dataset(ds)
        if problems:
            raise ValidationError(f"{path}: " + "; ".join(str(p) for p in problems))
    return ds


# arrays in JSON ------------------------------------------------------------


def _enc_float(x: float):
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def _dec_float(x):
    return float(x)


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [_enc_float(float(x)) for x in a.ravel()]}


def decode_array(d: Mapping) -> np.ndarray:
    return np.array([_dec_float(x) for x in d["data"]], dtype=np.float64).reshape(d["shape"])


def params_to_dict(p: ModelParams) -> dict:
    return {
        "log_initial": encode_array(p.log_initial),
        "log_transition": encode_array(p.log_transition),
        "durations": encode_array(p.durations),
        "means": encode_array(p.means),
        "variances": encode_array(p.variances),
        "max_duration": p.max_duration,
        "final_duration": p.final_duration,
        "space": None if p.space is None else {"type": "ordered", "n_steps": p.space.n_steps},
    }


def params_from_dict(d: Mapping) -> ModelParams:
    space = d.get("space")
    if space is not None:
        if space.get("type") != "ordered":
            raise FormatError(f"unknown state space type {space.get('type')!r}")
        space = OrderedStateSpace(int(space["n_steps"]))
    return ModelParams(
        decode_array(d["log_initial"]),
        decode_array(d["log_transition"]),
        decode_array(d["durations"]),
        decode_array(d["means"]),
        decode_array(d["variances"]),
        max_duration=d.get("max_duration"),
        space=space,
        final_duration=d.get("final_duration", "pmf"),
    )


def pca_to_dict(p: PcaModel) -> dict:
    return {
        "groups": [asdict(g) for g in p.groups],
        "projections": {
            task: [
                {
                    "mean": encode_array(g.mean),
                    "components": encode_array(g.components),
                    "explained_variance_ratio": encode_array(g.explained_variance_ratio),
                    "n_effective": g.n_effective,
                }
                for g in projs
            ]
            for task, projs in p.projections.items()
        },
    }


def pca_from_dict(d: Mapping) -> PcaModel:
    model = PcaModel([FeatureGroupSpec(**g) for g in d["groups"]])
    for task, projs in d["projections"].items():
        model.projections[task] = [
            GroupProjection(
                decode_array(g["mean"]),
                decode_array(g["components"]),
                decode_array(g["explained_variance_ratio"]),
                int(g["n_effective"]),
            )
            for g in projs
        ]
    return model


# checksummed documents -----------------------------------------------------


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_document(path: str | Path, kind: str, version: int, payload: dict) -> None:
    body = _canonical(payload)
    doc = {
        "format": kind,
        "version": version,
        "checksum": hashlib.sha256(body.encode()).hexdigest(),
        "payload": payload,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, allow_nan=False))


def read_document(path: str | Path, kind: str, version: int) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read file: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt or truncated file (checksum cannot be verified)") from exc
    if doc.get("format") != kind:
        raise FormatError(f"{path}: expected a {kind!r} file, found {doc.get('format')!r}")
    if doc.get("version") != version:
        raise FormatError(f"{path}: unsupported {kind} version {doc.get('version')!r}")
    payload = doc.get("payload")
    if hashlib.sha256(_canonical(payload).encode()).hexdigest() != doc.get("checksum"):
        raise FormatError(f"{path}: checksum mismatch")
    return payload


def save_model(path, models: Mapping[str, Mapping[str, Any]], meta: Mapping | None = None) -> None:
    """``models`` maps task id to ``{"params": ModelParams, "pca": PcaModel | None,
    "needs_assignment": bool}``."""
    payload = {
        "meta": dict(meta or {}),
        "tasks": {
            task: {
                "params": params_to_dict(m["params"]),
                "pca": None if m.get("pca") is None else pca_to_dict(m["pca"]),
                "needs_assignment": bool(m.get("needs_assignment", False)),
            }
            for task, m in models.items()
        },
    }
    write_document(path, "stepseg-model", MODEL_VERSION, payload)


def load_model(path) -> tuple[dict[str, dict[str, Any]], dict]:
    payload = read_document(path, "stepseg-model", MODEL_VERSION)
    models = {
        task: {
            "params": params_from_dict(m["params"]),
            "pca": None if m["pca"] is None else pca_from_dict(m["pca"]),
            "needs_assignment": m["needs_assignment"],
        }
        for task, m in payload["tasks"].items()
    }
    return models, payload["meta"]


def save_pca(path, model: PcaModel) -> None:
    write_document(path, "stepseg-pca", MODEL_VERSION, pca_to_dict(model))


def load_pca(path) -> PcaModel:
    return pca_from_dict(read_document(path, "stepseg-pca", MODEL_VERSION))


def save_predictions(path, predictions: Mapping[str, Mapping[str, Any]], system: str, meta: Mapping | None = None) -> None:
    """``predictions`` maps video id to ``{"task_id", "labels", "states"?,
    "needs_assignment"?}``; labels are task labels (-1 = background)."""
    videos = {}
    for vid, p in sorted(predictions.items()):
        rec = {"task_id": p["task_id"], "labels": [int(x) for x in p["labels"]]}
        if p.get("states") is not None:
            rec["states"] = [int(x) for x in p["states"]]
        rec["needs_assignment"] = bool(p.get("needs_assignment", False))
        videos[vid] = rec
    write_document(path, "stepseg-predictions", PREDICTIONS_VERSION,
                   {"system": system, "meta": dict(meta or {}), "videos": videos})


def load_predictions(path) -> tuple[str, dict[str, dict[str, Any]]]:
    payload = read_document(path, "stepseg-predictions", PREDICTIONS_VERSION)
    videos = {
        vid: {**rec, "labels": np.array(rec["labels"], dtype=np.int64),
              "states": None if rec.get("states") is None else np.array(rec["states"], dtype=np.int64)}
        for vid, rec in payload["videos"].items()
    }
    return payload["system"], videos
