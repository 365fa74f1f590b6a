"""Bouncing-particle worlds with noisy detections.

Three flavors:
  * "basic": particles drift under random forces and bounce off the unit
    square; every particle yields one noisy detection per frame.
  * "occlusion": adds depth-ordered mutual occlusion (high box overlap hides
    the deeper particle) and one environmental block per sequence that hides
    whatever it touches.
  * "social": adds a pairwise exponential repulsion on top of the random
    force, so trajectories bend around each other.

Dynamics per step: v += random force (plus social force for that flavor);
p += v; any center coordinate outside [0, 1] with an outward velocity has
that velocity component negated. Detections are ground-truth centers plus
Gaussian noise, boxed at the particle radius.

Draw order from the sequence RNG is fixed and documented: initial positions,
initial velocities, depths, environment block, then per step the force
matrix, then one detection-noise matrix for all frames. Identical configs
therefore produce byte-identical sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence as Seq

import numpy as np

from .data import BoundingBox, Detection, Sequence
from .seeding import derive_seed, rng_from, STREAM_DROP

FLAVORS = ("basic", "occlusion", "social")


@dataclass
class SimConfig:
    flavor: str = "basic"
    num_particles: int = 5
    num_frames: int = 600
    particle_radius: float = 0.05
    force_sigma: float = 0.01
    init_velocity_sigma: float = 0.1
    detection_noise_sigma: float = 0.05
    mutual_occlusion_iou: float = 0.3
    social_strength: float = 0.02
    social_radius: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}, expected one of {FLAVORS}")
        if self.num_particles < 1:
            raise ValueError("num_particles must be >= 1")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.particle_radius <= 0:
            raise ValueError("particle_radius must be positive")
        for name in ("force_sigma", "init_velocity_sigma", "detection_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.mutual_occlusion_iou <= 1:
            raise ValueError("mutual_occlusion_iou must be in (0, 1]")
        if self.social_radius <= 0:
            raise ValueError("social_radius must be positive")


@dataclass
class DropConfig:
    """Detection-drop corruption: per track, per positional block of frames,
    with probability drop_prob delete a uniform-length run of detections."""

    drop_prob: float = 0.1
    block_len: int = 10
    min_run: int = 1
    max_run: int = 5
    seed: int = 0

    def validate(self) -> None:
        if not 0 <= self.drop_prob <= 1:
            raise ValueError("drop_prob must be in [0, 1]")
        if self.block_len < 1:
            raise ValueError("block_len must be >= 1")
        if not 1 <= self.min_run <= self.max_run:
            raise ValueError("need 1 <= min_run <= max_run")


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    depth: float = 0.0
    identity: int = 0


def social_force(target: Particle, others: Seq[Particle],
                 strength: float, radius: float) -> np.ndarray:
    """Sum of exponential repulsions pushing `target` away from `others`.

    Each neighbor j contributes strength * exp(-dist / radius) along the unit
    vector from j to the target; coincident neighbors contribute nothing.
    """
    total = np.zeros(2, dtype=np.float64)
    for other in others:
        diff = target.position - other.position
        dist = float(np.hypot(diff[0], diff[1]))
        if dist <= 0.0:
            continue
        total += strength * math.exp(-dist / radius) * (diff / dist)
    return total


def _social_forces(pos: np.ndarray, strength: float, radius: float) -> np.ndarray:
    """Vectorized social_force for all particles at once. pos: (n, 2)."""
    diff = pos[:, None, :] - pos[None, :, :]          # diff[i, j] = p_i - p_j
    dist = np.sqrt((diff ** 2).sum(axis=2))
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(dist[:, :, None] > 0, diff / np.where(dist == 0, 1, dist)[:, :, None], 0.0)
    weight = np.where(dist > 0, strength * np.exp(-dist / radius), 0.0)
    return (weight[:, :, None] * unit).sum(axis=1)


def _bounce(pos: np.ndarray, vel: np.ndarray) -> None:
    """Negate velocity components that point outward while the center is
    outside the unit square. In place."""
    low = (pos < 0.0) & (vel < 0.0)
    high = (pos > 1.0) & (vel > 0.0)
    flip = low | high
    vel[flip] = -vel[flip]


def _pairwise_iou(boxes: np.ndarray) -> np.ndarray:
    """(n, n) IOU matrix for an (n, 4) corner-format box array."""
    x1 = np.maximum(boxes[:, None, 0], boxes[None, :, 0])
    y1 = np.maximum(boxes[:, None, 1], boxes[None, :, 1])
    x2 = np.minimum(boxes[:, None, 2], boxes[None, :, 2])
    y2 = np.minimum(boxes[:, None, 3], boxes[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area[:, None] + area[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def _box_block_overlap(boxes: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Boolean mask: boxes with positive-area intersection with the block."""
    x1 = np.maximum(boxes[:, 0], block[0])
    y1 = np.maximum(boxes[:, 1], block[1])
    x2 = np.minimum(boxes[:, 2], block[2])
    y2 = np.minimum(boxes[:, 3], block[3])
    return (x2 - x1 > 0) & (y2 - y1 > 0)


def generate_sequence(config: SimConfig) -> Sequence:
    """Simulate one sequence; fully determined by the config (incl. seed)."""
    config.validate()
    rng = rng_from(config.seed)
    n, frames = config.num_particles, config.num_frames
    r = config.particle_radius

    pos = rng.uniform(0.0, 1.0, size=(n, 2))
    vel = rng.normal(0.0, config.init_velocity_sigma, size=(n, 2))
    depth = rng.uniform(0.0, 1.0, size=n)
    # Environment block: center uniform in the unit square, half-sides
    # uniform in [0.05, 0.15]. Drawn for every flavor to keep the stream
    # layout fixed; only the occlusion flavor uses it.
    block_center = rng.uniform(0.2, 0.8, size=2)
    block_half = rng.uniform(0.05, 0.15, size=2)
    block = np.array([block_center[0] - block_half[0], block_center[1] - block_half[1],
                      block_center[0] + block_half[0], block_center[1] + block_half[1]])

    positions = np.empty((frames, n, 2), dtype=np.float64)
    positions[0] = pos
    for t in range(1, frames):
        force = rng.normal(0.0, 1.0, size=(n, 2)) * config.force_sigma
        vel = vel + force
        if config.flavor == "social":
            vel = vel + _social_forces(pos, config.social_strength, config.social_radius)
        pos = pos + vel
        _bounce(pos, vel)
        positions[t] = pos

    noise = rng.normal(0.0, 1.0, size=(frames, n, 2)) * config.detection_noise_sigma

    seq = Sequence(metadata={"kind": "simulation", "config": asdict(config)},
                   frames=[[] for _ in range(frames)])
    for i in range(n):
        seq.gt_tracks[i] = [
            (t, BoundingBox.from_center(positions[t, i, 0], positions[t, i, 1], r))
            for t in range(frames)]

    det_id = 0
    for t in range(frames):
        gt_boxes = np.concatenate(
            [positions[t] - r, positions[t] + r], axis=1)  # (n, 4) corner format
        hidden = np.zeros(n, dtype=bool)
        if config.flavor == "occlusion":
            iou = _pairwise_iou(gt_boxes)
            for i in range(n):
                for j in range(i + 1, n):
                    if iou[i, j] > config.mutual_occlusion_iou:
                        hidden[i if depth[i] > depth[j] else j] = True
            hidden |= _box_block_overlap(gt_boxes, block)
        centers = positions[t] + noise[t]
        for i in range(n):
            if hidden[i]:
                continue
            seq.frames[t].append(Detection(
                frame=t, det_id=det_id,
                box=BoundingBox.from_center(centers[i, 0], centers[i, 1], r),
                gt_id=i))
            det_id += 1
    return seq


def apply_drop_noise(seq: Sequence, drop: DropConfig) -> Sequence:
    """Return a copy of `seq` with per-track detection runs deleted.

    Blocks are positional within each track's detection list. Within a chosen
    block, a run length is drawn from U{min_run..max_run} (clamped to the
    block), then a uniform start offset. Only deletions happen: surviving
    detections keep their ids, boxes, and order. Each track consumes an
    independent RNG stream derived from (drop.seed, identity), so one track's
    outcome never shifts another's.
    """
    drop.validate()
    doomed: set[int] = set()
    for identity in sorted(seq.gt_tracks):
        track_dets = [d for d in seq.all_detections() if d.gt_id == identity]
        track_dets.sort(key=lambda d: d.frame)
        rng = rng_from(derive_seed(drop.seed, STREAM_DROP, identity))
        for start in range(0, len(track_dets), drop.block_len):
            block = track_dets[start:start + drop.block_len]
            if rng.random() >= drop.drop_prob:
                continue
            run = int(rng.integers(drop.min_run, drop.max_run + 1))
            run = min(run, len(block))
            offset = int(rng.integers(0, len(block) - run + 1))
            doomed.update(d.det_id for d in block[offset:offset + run])

    metadata = dict(seq.metadata)
    metadata["drop"] = asdict(drop)
    return Sequence(
        metadata=metadata,
        gt_tracks={i: list(entries) for i, entries in seq.gt_tracks.items()},
        frames=[[d for d in dets if d.det_id not in doomed] for dets in seq.frames])
