"""Sequence data model and on-disk format.

A sequence file is line-delimited JSON: one header record, then one record
per frame carrying ground-truth boxes and detections. Floats serialize with
repr round-trip precision, so save followed by load is bit-exact for float64
coordinates.

Header record:
    {"format": "softtrack-sequence", "version": 1, "num_frames": N,
     "num_identities": K, "metadata": {...}}
Frame record:
    {"frame": t,
     "gt":   [[identity, x1, y1, x2, y2], ...],
     "dets": [[det_id, identity-or-null, x1, y1, x2, y2], ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .fileio import atomic_write_text

FORMAT_NAME = "softtrack-sequence"
FORMAT_VERSION = 1


class SequenceFormatError(ValueError):
    """Malformed, truncated, or version-incompatible sequence file."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized coordinates, corners ordered."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {vals}")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_center(cx: float, cy: float, half: float) -> "BoundingBox":
        return BoundingBox(cx - half, cy - half, cx + half, cy + half)


@dataclass(frozen=True)
class Detection:
    frame: int
    det_id: int
    box: BoundingBox
    gt_id: int | None = None


@dataclass
class Sequence:
    """Ground-truth tracks plus per-frame detections."""

    metadata: dict = field(default_factory=dict)
    gt_tracks: dict[int, list[tuple[int, BoundingBox]]] = field(default_factory=dict)
    frames: list[list[Detection]] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def all_detections(self) -> Iterator[Detection]:
        for dets in self.frames:
            yield from dets

    def detection_lookup(self) -> dict[int, Detection]:
        index: dict[int, Detection] = {}
        for det in self.all_detections():
            if det.det_id in index:
                raise ValueError(f"duplicate detection id {det.det_id}")
            index[det.det_id] = det
        return index

    def gt_by_frame(self) -> list[dict[int, BoundingBox]]:
        out: list[dict[int, BoundingBox]] = [dict() for _ in range(self.num_frames)]
        for identity, entries in self.gt_tracks.items():
            for frame, box in entries:
                out[frame][identity] = box
        return out

    def gt_count(self) -> int:
        """Total ground-truth (identity, frame) pairs."""
        return sum(len(entries) for entries in self.gt_tracks.values())


def save_sequence(seq: Sequence, path: str) -> None:
    gt_frames: list[list[tuple[int, BoundingBox]]] = [[] for _ in range(seq.num_frames)]
    for identity in sorted(seq.gt_tracks):
        for frame, box in seq.gt_tracks[identity]:
            if not 0 <= frame < seq.num_frames:
                raise ValueError(f"ground-truth frame {frame} outside sequence")
            gt_frames[frame].append((identity, box))

    lines = [json.dumps({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_frames": seq.num_frames,
        "num_identities": len(seq.gt_tracks),
        "metadata": seq.metadata,
    })]
    for t in range(seq.num_frames):
        record = {
            "frame": t,
            "gt": [[i, b.x1, b.y1, b.x2, b.y2] for i, b in gt_frames[t]],
            "dets": [[d.det_id, d.gt_id, d.box.x1, d.box.y1, d.box.x2, d.box.y2]
                     for d in seq.frames[t]],
        }
        lines.append(json.dumps(record))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _parse_header(path: str, line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"{path}:1: malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise SequenceFormatError(f"{path}:1: not a sequence file")
    if header.get("version") != FORMAT_VERSION:
        raise SequenceFormatError(
            f"{path}:1: sequence version {header.get('version')} "
            f"(supported: {FORMAT_VERSION})")
    return header


def load_sequence(path: str) -> Sequence:
    with open(path, "r") as fh:
        raw_lines = fh.read().splitlines()
    lines = [(n, s) for n, s in enumerate(raw_lines, start=1) if s.strip()]
    if not lines:
        raise SequenceFormatError(f"{path}: empty file")
    header = _parse_header(path, lines[0][1])
    num_frames = header["num_frames"]
    records = lines[1:]
    if len(records) != num_frames:
        raise SequenceFormatError(
            f"{path}: header declares {num_frames} frames, file has {len(records)} records")

    seq = Sequence(metadata=header.get("metadata", {}),
                   frames=[[] for _ in range(num_frames)])
    seen_dets: set[int] = set()
    for pos, (lineno, line) in enumerate(records):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SequenceFormatError(
                f"{path}:{lineno}: malformed frame record {pos}: {exc}") from exc
        try:
            frame = rec["frame"]
            gt = rec["gt"]
            dets = rec["dets"]
        except (TypeError, KeyError) as exc:
            raise SequenceFormatError(
                f"{path}:{lineno}: frame record {pos} missing field {exc}") from exc
        if frame != pos:
            raise SequenceFormatError(
                f"{path}:{lineno}: frame records out of order ({frame} at position {pos})")
        try:
            for identity, x1, y1, x2, y2 in gt:
                seq.gt_tracks.setdefault(int(identity), []).append(
                    (frame, BoundingBox(x1, y1, x2, y2)))
            for det_id, gt_id, x1, y1, x2, y2 in dets:
                det_id = int(det_id)
                if det_id in seen_dets:
                    raise SequenceFormatError(
                        f"{path}:{lineno}: duplicate detection id {det_id}")
                seen_dets.add(det_id)
                seq.frames[frame].append(Detection(
                    frame=frame, det_id=det_id,
                    box=BoundingBox(x1, y1, x2, y2),
                    gt_id=None if gt_id is None else int(gt_id)))
        except SequenceFormatError:
            raise
        except (TypeError, ValueError) as exc:
            raise SequenceFormatError(
                f"{path}:{lineno}: bad frame record {pos}: {exc}") from exc

    if header.get("num_identities") not in (None, len(seq.gt_tracks)):
        raise SequenceFormatError(
            f"{path}: header declares {header['num_identities']} identities, "
            f"file has {len(seq.gt_tracks)}")
    for det in seq.all_detections():
        if det.gt_id is not None and det.gt_id not in seq.gt_tracks:
            raise SequenceFormatError(
                f"{path}: detection {det.det_id} references unknown identity {det.gt_id}")
    return seq


def normalize_boxes(raw, width: float, height: float) -> list[BoundingBox]:
    """Scale pixel-coordinate (n, 4) boxes into unit coordinates."""
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width} x {height}")
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an (n, 4) box array, got shape {arr.shape}")
    return [BoundingBox(x1 / width, y1 / height, x2 / width, y2 / height)
            for x1, y1, x2, y2 in arr]


def denormalize_boxes(boxes: list[BoundingBox], width: float, height: float) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width} x {height}")
    return np.array([[b.x1 * width, b.y1 * height, b.x2 * width, b.y2 * height]
                     for b in boxes], dtype=np.float64).reshape(-1, 4)


def boxes_array(dets: list[Detection]) -> np.ndarray:
    """(n, 4) float64 array of detection boxes, in list order."""
    if not dets:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([d.box.as_array() for d in dets])
