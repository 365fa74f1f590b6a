"""Training loops for the association model and the similarity baseline.

Both loops run SGD with momentum over fixed-length windows sampled from the
training sequences: per epoch the sequence order is shuffled, each sequence
contributes a random 32-frame window, and windows are grouped into batches
whose loss is the mean over every (track, frame) term in the batch.

Epoch randomness derives from (seed, epoch index), so resuming from a
checkpoint at epoch k reproduces exactly the schedule a fresh run would have
used from epoch k onward. Checkpoints are written after each epoch; a
non-finite loss aborts immediately, leaving the last epoch's checkpoint as
the newest on disk.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import SgdOptimizer, Tensor, backward, load_checkpoint, save_checkpoint
from .baselines import SimilarityConfig, SimilarityNet, contrastive_loss
from .data import Sequence
from .model import (ModelConfig, ModelParams, association_loss_terms,
                    embed_measurements, frame_embeddings)
from .seeding import derive_seed, rng_from, STREAM_EPOCH, STREAM_MODEL_INIT, STREAM_PAIRS
from .tracking import build_training_targets


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last epoch checkpoint is retained."""


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    window: int = 32
    windows_per_sequence: int = 1
    lost_promoted: int = 5    # teacher-forcing liveness horizon

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.window < 1 or self.windows_per_sequence < 1:
            raise ValueError("batch_size, window, windows_per_sequence must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


def _sample_window_start(seq: Sequence, window: int, rng: np.random.Generator) -> int:
    if seq.num_frames < window:
        warnings.warn(f"sequence has {seq.num_frames} frames, shorter than the "
                      f"{window}-frame training window")
        return 0
    return int(rng.integers(0, seq.num_frames - window + 1))


def _window_loss_groups(seq: Sequence, start: int, config: ModelConfig,
                        train_config: TrainConfig, params: ModelParams):
    """Graph-building pass for one window; returns association loss groups."""
    frame_targets = build_training_targets(
        seq, start, train_config.window, train_config.lost_promoted)
    if not frame_targets:
        return []
    end = min(start + train_config.window, seq.num_frames)
    frames_list: list[int] = []
    boxes_list: list[np.ndarray] = []
    for t in range(start, end):
        for det in seq.frames[t]:
            frames_list.append(t)
            boxes_list.append(det.box.as_array())
    if not boxes_list:
        return []
    frames_arr = np.asarray(frames_list, dtype=np.int64)
    z0 = embed_measurements(ad.tensor(np.stack(boxes_list)), params)
    embs: dict[int, Tensor] = {}
    for t in range(start, end):
        if seq.frames[t]:
            embs[t] = frame_embeddings(z0, frames_arr, t, config, params)

    groups = []
    for ft in frame_targets:
        by_frame: dict[int, list[tuple[int, int]]] = {}
        for order, (f, pos) in enumerate(ft.latest):
            by_frame.setdefault(f, []).append((order, pos))
        pieces = []
        perm: list[int] = []
        for f in sorted(by_frame):
            rows = by_frame[f]
            pieces.append(ad.gather_rows(embs[f], np.array([p for _, p in rows])))
            perm.extend(order for order, _ in rows)
        tracks = pieces[0] if len(pieces) == 1 else ad.concat_rows(*pieces)
        if perm != list(range(len(perm))):
            tracks = ad.gather_rows(tracks, np.argsort(perm))
        groups.append((tracks, embs.get(ft.frame), ft.targets))
    return groups


def train_association_model(sequences: list[Sequence], model_config: ModelConfig,
                            train_config: TrainConfig, seed: int = 0,
                            checkpoint_path: str | None = None,
                            log_path: str | None = None,
                            resume_from: str | None = None,
                            progress=None) -> tuple[ModelParams, list[dict]]:
    """Train the association model; returns (params, per-epoch summaries)."""
    model_config.validate()
    train_config.validate()
    if not sequences:
        raise ValueError("no training sequences")

    start_epoch = 0
    if resume_from is not None:
        tensors, hyper, extras = load_checkpoint(resume_from)
        if hyper.get("kind") != "association":
            raise ValueError(f"{resume_from}: not an association checkpoint")
        if hyper.get("model") != asdict(model_config):
            raise ValueError(f"{resume_from}: checkpoint model config does not match")
        params = ModelParams.from_named(model_config, tensors)
        start_epoch = int(hyper.get("epochs_done", 0))
        velocity = extras
    else:
        params = ModelParams(model_config, seed=derive_seed(seed, STREAM_MODEL_INIT))
        velocity = {}

    named = params.named()
    opt = SgdOptimizer(named, lr=train_config.learning_rate,
                       momentum=train_config.momentum)
    if velocity:
        opt.load_velocity(velocity)

    history: list[dict] = []
    log_lines: list[str] = []

    def _write_state(epochs_done: int) -> None:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, named,
                            hyper={"kind": "association",
                                   "model": asdict(model_config),
                                   "train": asdict(train_config),
                                   "seed": seed, "epochs_done": epochs_done},
                            extras=opt.velocity)
        if log_path is not None and log_lines:
            with open(log_path, "a") as fh:
                fh.write("".join(log_lines))
            log_lines.clear()

    if start_epoch == 0:
        _write_state(0)

    for epoch in range(start_epoch, train_config.epochs):
        rng = rng_from(derive_seed(seed, STREAM_EPOCH, epoch))
        order = rng.permutation(len(sequences))
        draws = [(int(i), _sample_window_start(sequences[i], train_config.window, rng))
                 for i in order for _ in range(train_config.windows_per_sequence)]
        losses: list[float] = []
        for at in range(0, len(draws), train_config.batch_size):
            total: Tensor | None = None
            count = 0
            for seq_idx, start in draws[at:at + train_config.batch_size]:
                groups = _window_loss_groups(sequences[seq_idx], start,
                                             model_config, train_config, params)
                for tracks, cands, targets in groups:
                    part, n = association_loss_terms(tracks, cands, targets,
                                                     params, model_config)
                    if part is None:
                        continue
                    total = part if total is None else ad.add(total, part)
                    count += n
            if count == 0:
                continue
            loss = ad.scale(total, 1.0 / count)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {at // train_config.batch_size}")
            backward(loss, params=named)
            opt.step()
            losses.append(value)
            log_lines.append(json.dumps({
                "epoch": epoch, "batch": at // train_config.batch_size,
                "loss": value, "terms": count}) + "\n")
        summary = {"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else None,
                   "steps": len(losses)}
        history.append(summary)
        if progress is not None:
            progress(summary)
        _write_state(epoch + 1)
    return params, history


# ---------------------------------------------------------------------------
# similarity baseline training


def _sample_pairs(seq: Sequence, rng: np.random.Generator, window: int,
                  pairs_wanted: int, max_gap: int = 5):
    """Draw (box_a, box_b, same) pairs with frame gaps in 1..max_gap."""
    out = []
    if seq.num_frames < 2:
        return out
    start = _sample_window_start(seq, window, rng)
    end = min(start + window, seq.num_frames)
    if end - start < 2:
        return out
    by_frame = [
        {d.gt_id: d for d in seq.frames[t] if d.gt_id is not None}
        for t in range(seq.num_frames)]
    for _ in range(pairs_wanted):
        t = int(rng.integers(start, end - 1))
        gap = int(rng.integers(1, min(max_gap, end - 1 - t) + 1))
        here, there = by_frame[t], by_frame[t + gap]
        shared = sorted(set(here) & set(there))
        if not shared:
            continue
        anchor = shared[int(rng.integers(len(shared)))]
        if rng.random() < 0.5:
            out.append((here[anchor].box.as_array(), there[anchor].box.as_array(), True))
        else:
            others = sorted(set(there) - {anchor})
            if not others:
                continue
            partner = others[int(rng.integers(len(others)))]
            out.append((here[anchor].box.as_array(), there[partner].box.as_array(), False))
    return out


def train_similarity_model(sequences: list[Sequence], train_config: TrainConfig,
                           seed: int = 0, sim_config: SimilarityConfig | None = None,
                           pairs_per_sequence: int = 32,
                           checkpoint_path: str | None = None,
                           log_path: str | None = None,
                           progress=None) -> tuple[SimilarityNet, list[dict]]:
    """Train the learned-similarity baseline; returns (net, epoch summaries)."""
    train_config.validate()
    if not sequences:
        raise ValueError("no training sequences")
    sim_config = sim_config or SimilarityConfig()
    net = SimilarityNet(sim_config, seed=derive_seed(seed, STREAM_MODEL_INIT, 1))
    named = net.named()
    opt = SgdOptimizer(named, lr=train_config.learning_rate,
                       momentum=train_config.momentum)

    history: list[dict] = []
    log_lines: list[str] = []
    for epoch in range(train_config.epochs):
        rng = rng_from(derive_seed(seed, STREAM_PAIRS, epoch))
        order = rng.permutation(len(sequences))
        losses: list[float] = []
        for at in range(0, len(order), train_config.batch_size):
            pair_list = []
            for i in order[at:at + train_config.batch_size]:
                pair_list.extend(_sample_pairs(sequences[int(i)], rng,
                                               train_config.window,
                                               pairs_per_sequence))
            if not pair_list:
                continue
            box_a = np.stack([a for a, _, _ in pair_list])
            box_b = np.stack([b for _, b, _ in pair_list])
            same = np.array([s for _, _, s in pair_list], dtype=bool)
            both = net.forward(ad.tensor(np.concatenate([box_a, box_b], axis=0)))
            n = len(pair_list)
            emb_a = ad.gather_rows(both, np.arange(n))
            emb_b = ad.gather_rows(both, np.arange(n, 2 * n))
            loss = contrastive_loss(emb_a, emb_b, same, margin=sim_config.margin)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite similarity loss at epoch {epoch}")
            backward(loss, params=named)
            opt.step()
            losses.append(value)
            log_lines.append(json.dumps({
                "epoch": epoch, "batch": at // train_config.batch_size,
                "loss": value, "pairs": n}) + "\n")
        summary = {"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else None,
                   "steps": len(losses)}
        history.append(summary)
        if progress is not None:
            progress(summary)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, named,
                            hyper={"kind": "similarity",
                                   "similarity": asdict(sim_config),
                                   "train": asdict(train_config),
                                   "seed": seed, "epochs_done": epoch + 1},
                            extras=opt.velocity)
        if log_path is not None and log_lines:
            with open(log_path, "a") as fh:
                fh.write("".join(log_lines))
            log_lines.clear()
    if checkpoint_path is not None and train_config.epochs == 0:
        save_checkpoint(checkpoint_path, named,
                        hyper={"kind": "similarity", "similarity": asdict(sim_config),
                               "train": asdict(train_config), "seed": seed,
                               "epochs_done": 0},
                        extras=opt.velocity)
    return net, history


def load_association_checkpoint(path: str) -> tuple[ModelParams, ModelConfig, dict]:
    """Restore a trained association model from disk."""
    tensors, hyper, _ = load_checkpoint(path)
    if hyper.get("kind") != "association":
        raise ValueError(f"{path}: not an association checkpoint")
    config = ModelConfig(**hyper["model"])
    return ModelParams.from_named(config, tensors), config, hyper


def load_similarity_checkpoint(path: str) -> tuple[SimilarityNet, dict]:
    tensors, hyper, _ = load_checkpoint(path)
    if hyper.get("kind") != "similarity":
        raise ValueError(f"{path}: not a similarity checkpoint")
    config = SimilarityConfig(**hyper["similarity"])
    return SimilarityNet.from_named(config, tensors), hyper
