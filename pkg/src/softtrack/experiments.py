"""Dataset builds and end-to-end experiment runs.

A dataset directory is a manifest plus train/ and test/ sequence files; the
manifest pins the derived per-sequence seeds, so regeneration is
reproducible file-by-file. Experiment runs tie together training, tracking,
and evaluation for the association model's ablation grid and the baselines.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Sequence, load_sequence, save_sequence
from .fileio import atomic_write_text
from .metrics import MotReport, OcclusionReport, evaluate_many, occlusion_report
from .model import ModelConfig, ModelParams
from .seeding import derive_seed, STREAM_SEQUENCE, STREAM_DROP
from .simulate import DropConfig, SimConfig, apply_drop_noise, generate_sequence
from .baselines import BaselineGates, SimilarityNet, run_baseline_tracker
from .tracking import TrackerConfig, TrackerOutput, run_association_tracker
from .train import (TrainConfig, train_association_model, train_similarity_model,
                    load_association_checkpoint, load_similarity_checkpoint)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "softtrack-manifest"
MANIFEST_VERSION = 1

ASSOCIATION_METHODS = {
    "assoc": (False, False),
    "assoc+ae": (True, False),
    "assoc+occ": (False, True),
    "assoc+ae+occ": (True, True),
}
BASELINE_METHODS = ("iou", "center", "learned")
REPORT_ORDER = ("iou", "center", "learned", "assoc", "assoc+ae",
                "assoc+occ", "assoc+ae+occ")


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_sequences: int = 200
    test_sequences: int = 10
    seed: int = 0
    drop: DropConfig | None = None
    matching: str = "identity"
    gates: BaselineGates = field(default_factory=BaselineGates)

    def validate(self) -> None:
        self.sim.validate()
        self.model.validate()
        self.tracker.validate()
        self.train.validate()
        if self.train_sequences < 0 or self.test_sequences < 0:
            raise ValueError("sequence counts must be >= 0")
        if self.drop is not None:
            self.drop.validate()
        if self.matching not in ("identity", "distance"):
            raise ValueError(f"unknown matching mode {self.matching!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["drop"] = None if self.drop is None else asdict(self.drop)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ValueError("experiment config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")

        def build(factory, value, label):
            if value is None:
                return None
            if not isinstance(value, dict):
                raise ValueError(f"config section {label!r} must be an object")
            names = {f.name for f in dataclasses.fields(factory)}
            bad = sorted(set(value) - names)
            if bad:
                raise ValueError(f"unknown keys in config section {label!r}: {bad}")
            return factory(**value)

        cfg = cls(
            sim=build(SimConfig, raw.get("sim", {}), "sim") or SimConfig(),
            model=build(ModelConfig, raw.get("model", {}), "model") or ModelConfig(),
            tracker=build(TrackerConfig, raw.get("tracker", {}), "tracker") or TrackerConfig(),
            train=build(TrainConfig, raw.get("train", {}), "train") or TrainConfig(),
            train_sequences=raw.get("train_sequences", 200),
            test_sequences=raw.get("test_sequences", 10),
            seed=raw.get("seed", 0),
            drop=build(DropConfig, raw.get("drop"), "drop"),
            matching=raw.get("matching", "identity"),
            gates=build(BaselineGates, raw.get("gates", {}), "gates") or BaselineGates(),
        )
        cfg.validate()
        return cfg


def load_experiment_config(path: str) -> ExperimentConfig:
    with open(path, "r") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed config: {exc}") from exc
    try:
        return ExperimentConfig.from_dict(raw)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# datasets


def generate_dataset(config: ExperimentConfig, out_dir: str) -> dict:
    """Write train/ and test/ sequences plus a seed-pinning manifest."""
    config.validate()
    entries: dict[str, list[dict]] = {"train": [], "test": []}
    for split_tag, split, count in ((0, "train", config.train_sequences),
                                    (1, "test", config.test_sequences)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for index in range(count):
            seq_seed = derive_seed(config.seed, STREAM_SEQUENCE, split_tag, index)
            seq = generate_sequence(replace(config.sim, seed=seq_seed))
            drop_seed = None
            if config.drop is not None:
                drop_seed = derive_seed(config.seed, STREAM_DROP, split_tag, index)
                seq = apply_drop_noise(seq, replace(config.drop, seed=drop_seed))
            rel = os.path.join(split, f"seq_{index:04d}.jsonl")
            save_sequence(seq, os.path.join(out_dir, rel))
            entry = {"file": rel, "seed": seq_seed}
            if drop_seed is not None:
                entry["drop_seed"] = drop_seed
            entries[split].append(entry)
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                "config": config.to_dict(), "train": entries["train"],
                "test": entries["test"]}
    atomic_write_text(os.path.join(out_dir, MANIFEST_NAME),
                      json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, MANIFEST_NAME)
    try:
        with open(path, "r") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"{data_dir}: no {MANIFEST_NAME} (not a dataset directory)")
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed manifest: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: manifest version {manifest.get('version')} "
                         f"(supported: {MANIFEST_VERSION})")
    return manifest


def load_split(data_dir: str, split: str) -> list[tuple[str, Sequence]]:
    manifest = load_manifest(data_dir)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    out = []
    for entry in manifest[split]:
        path = os.path.join(data_dir, entry["file"])
        out.append((entry["file"], load_sequence(path)))
    return out


# ---------------------------------------------------------------------------
# end-to-end pieces


def variant_model_config(base: ModelConfig, method: str,
                         window_future: int | None = None) -> ModelConfig:
    """Model config for an ablation-grid method name."""
    if method not in ASSOCIATION_METHODS:
        raise ValueError(f"unknown association method {method!r}")
    use_encoder, use_occlusion = ASSOCIATION_METHODS[method]
    cfg = replace(base, use_encoder=use_encoder, use_occlusion=use_occlusion)
    if window_future is not None:
        cfg = replace(cfg, window_future=window_future)
    return cfg


def tracks_filename(sequence_name: str) -> str:
    """Tracker-output filename paired with a dataset sequence file."""
    stem = os.path.splitext(os.path.basename(sequence_name))[0]
    return stem + ".tracks.jsonl"


def track_sequences(method: str, test_seqs: list[tuple[str, Sequence]],
                    config: ExperimentConfig,
                    params: ModelParams | None = None,
                    model_config: ModelConfig | None = None,
                    similarity_net: SimilarityNet | None = None,
                    out_dir: str | None = None) -> list[tuple[str, TrackerOutput]]:
    """Run one method over the test split; optionally persist outputs."""
    outputs = []
    for name, seq in test_seqs:
        if method in BASELINE_METHODS:
            out = run_baseline_tracker(method, seq, similarity_net=similarity_net,
                                       tracker_config=config.tracker,
                                       gates=config.gates)
        else:
            if params is None or model_config is None:
                raise ValueError("association tracking requires params and model config")
            out = run_association_tracker(seq, params, model_config, config.tracker)
        outputs.append((name, out))
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            out.save(os.path.join(out_dir, tracks_filename(name)))
    return outputs


def evaluate_outputs(test_seqs: list[tuple[str, Sequence]],
                     outputs: list[tuple[str, TrackerOutput]],
                     config: ExperimentConfig) -> MotReport:
    by_name = dict(outputs)
    triples = [(name, seq, by_name[name]) for name, seq in test_seqs]
    return evaluate_many(triples, matching=config.matching)


def occlusion_summary(test_seqs: list[tuple[str, Sequence]],
                      outputs: list[tuple[str, TrackerOutput]]) -> OcclusionReport:
    by_name = dict(outputs)
    tp = fp = fn = tn = 0
    for name, seq in test_seqs:
        rep = occlusion_report(seq, by_name[name])
        tp += rep.tp
        fp += rep.fp
        fn += rep.fn
        tn += rep.tn
    total = tp + fp + fn + tn
    return OcclusionReport(
        accuracy=(tp + tn) / total if total else 1.0,
        recall=tp / (tp + fn) if tp + fn else 1.0,
        precision=tp / (tp + fp) if tp + fp else 1.0,
        tp=tp, fp=fp, fn=fn, tn=tn)


def run_method(method: str, config: ExperimentConfig,
               train_seqs: list[Sequence], test_seqs: list[tuple[str, Sequence]],
               window_future: int | None = None,
               checkpoint_path: str | None = None,
               out_dir: str | None = None,
               progress=None) -> dict:
    """Train (if needed), track the test split, and evaluate one method.

    Returns {"method", "report", "occlusion", "history"}.
    """
    history: list[dict] = []
    params = model_config = net = None
    if method in ASSOCIATION_METHODS:
        model_config = variant_model_config(config.model, method, window_future)
        params, history = train_association_model(
            train_seqs, model_config, config.train, seed=config.seed,
            checkpoint_path=checkpoint_path, progress=progress)
    elif method == "learned":
        net, history = train_similarity_model(
            train_seqs, config.train, seed=config.seed,
            checkpoint_path=checkpoint_path, progress=progress)
    elif method not in BASELINE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    outputs = track_sequences(method, test_seqs, config, params=params,
                              model_config=model_config, similarity_net=net,
                              out_dir=out_dir)
    report = evaluate_outputs(test_seqs, outputs, config)
    occl = occlusion_summary(test_seqs, outputs) \
        if method in ASSOCIATION_METHODS and ASSOCIATION_METHODS[method][1] else None
    return {"method": method, "report": report, "occlusion": occl,
            "history": history}
