"""Track lifecycle and the soft-association tracker.

Tracks spawn unpromoted from unclaimed detections, promote on their second
associated detection, and die after a run of consecutive frames without an
association (occluded frames count toward the run). Only promoted tracks
emit official output; association records for unpromoted tracks are kept in
the output file with promoted=false so occlusion decisions can be audited.

Per frame, each alive track's distribution over the frame's candidates (plus
the occlusion class) is computed once. Conflicts are resolved greedily by
default: tracks are processed in descending order of best-available-candidate
probability (ties to the lower track id), and a track claims its best
available candidate only if that probability beats its occlusion probability,
otherwise it is flagged occluded and keeps its embedding frozen. A global
min-cost assignment variant is available via TrackerConfig.conflict.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .assignment import FORBIDDEN_COST, solve_min_cost_assignment
from .data import BoundingBox, Detection, Sequence
from .fileio import atomic_write_text
from .model import (ModelConfig, ModelParams, OCCLUDED_TARGET,
                    association_probabilities, encode_sequence)

TRACK_UNPROMOTED = "unpromoted"
TRACK_PROMOTED = "promoted"

OUTPUT_FORMAT = "softtrack-tracks"
OUTPUT_VERSION = 1


@dataclass
class TrackerConfig:
    lost_unpromoted: int = 2
    lost_promoted: int = 5
    conflict: str = "greedy"   # or "assignment"
    measure_sigma: float = 0.05    # detection-noise scale assumed by the motion filter
    process_sigma: float = 0.01    # random-force scale assumed by the motion filter
    velocity_prior: float = 0.1    # plausible initial speed scale

    def validate(self) -> None:
        if self.lost_unpromoted < 1 or self.lost_promoted < 1:
            raise ValueError("lost counters must be >= 1")
        if self.conflict not in ("greedy", "assignment"):
            raise ValueError(f"unknown conflict mode {self.conflict!r}")
        for name in ("measure_sigma", "process_sigma", "velocity_prior"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _coast_step(pos: np.ndarray, vel: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One constant-velocity step under the arena's bounce law: move, then
    negate any velocity component pointing outward from the unit square.
    Also returns the per-axis flip mask so filters can mirror their state."""
    pos = pos + vel
    flip = ((pos < 0.0) & (vel < 0.0)) | ((pos > 1.0) & (vel > 0.0))
    vel = np.where(flip, -vel, vel)
    return pos, vel, flip


class Track:
    """One tracked object: embedding, filtered motion state, lifecycle state.

    Motion is a constant-velocity Kalman filter over the box center, one
    scalar filter per axis (noise is isotropic, so both axes share gains but
    keep their own covariance). The process model matches impulse dynamics:
    a random force perturbs the velocity and the position in the same step,
    so Q couples both states. Forecasts follow the arena's bounce rule,
    since the filter otherwise overshoots through a wall on every rebound.
    """

    __slots__ = ("track_id", "status", "embedding", "last_frame", "associations",
                 "history", "last_box", "_kf_frame", "_kf_pos", "_kf_vel",
                 "_kf_c00", "_kf_c01", "_kf_c11", "_measure_var", "_process_var")

    def __init__(self, track_id: int, frame: int, det: Detection,
                 embedding: np.ndarray | None = None,
                 measure_sigma: float = 0.05, process_sigma: float = 0.01,
                 velocity_prior: float = 0.1):
        self.track_id = track_id
        self.status = TRACK_UNPROMOTED
        self.embedding = None if embedding is None else np.array(embedding, dtype=np.float64)
        self.last_frame = frame
        self.associations = 1
        self.history: list[tuple[int, int]] = [(frame, det.det_id)]
        self.last_box = det.box
        self._kf_frame = frame
        self._kf_pos = np.array(det.box.center, dtype=np.float64)
        self._kf_vel = np.zeros(2)
        self._measure_var = measure_sigma ** 2
        self._process_var = process_sigma ** 2
        self._kf_c00 = np.full(2, self._measure_var)
        self._kf_c01 = np.zeros(2)
        self._kf_c11 = np.full(2, velocity_prior ** 2)

    def _advance(self, frame: int) -> None:
        q = self._process_var
        for _ in range(frame - self._kf_frame):
            self._kf_pos, self._kf_vel, _ = _coast_step(self._kf_pos, self._kf_vel)
            c00, c01, c11 = self._kf_c00, self._kf_c01, self._kf_c11
            self._kf_c00 = c00 + 2.0 * c01 + c11 + q
            self._kf_c01 = c01 + c11 + q
            self._kf_c11 = c11 + q
        self._kf_frame = frame

    def associate(self, frame: int, det: Detection,
                  embedding: np.ndarray | None = None) -> None:
        self.history.append((frame, det.det_id))
        self.associations += 1
        if self.status == TRACK_UNPROMOTED and self.associations >= 2:
            self.status = TRACK_PROMOTED
        center = np.asarray(det.box.center, dtype=np.float64)
        self._advance(frame)
        residual = center - self._kf_pos
        c00, c01, c11 = self._kf_c00, self._kf_c01, self._kf_c11
        s = c00 + self._measure_var
        k0, k1 = c00 / s, c01 / s
        self._kf_pos = self._kf_pos + k0 * residual
        self._kf_vel = self._kf_vel + k1 * residual
        self._kf_c00 = (1.0 - k0) * c00
        self._kf_c01 = (1.0 - k0) * c01
        self._kf_c11 = c11 - k1 * c01
        self.last_box = det.box
        self.last_frame = frame
        if embedding is not None:
            self.embedding = np.array(embedding, dtype=np.float64)

    def miss_count(self, frame: int) -> int:
        return frame - self.last_frame

    def predicted_center(self, frame: int) -> np.ndarray:
        """Filter forecast of the box center, coasting over missed frames."""
        pos, vel = self._kf_pos, self._kf_vel
        for _ in range(frame - self._kf_frame):
            pos, vel, _ = _coast_step(pos, vel)
        return pos

    def predicted_box(self, frame: int) -> BoundingBox:
        cx, cy = self.predicted_center(frame)
        hw, hh = 0.5 * self.last_box.width, 0.5 * self.last_box.height
        return BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh)


@dataclass(frozen=True)
class AssociationRecord:
    track_id: int
    det_id: int
    box: tuple[float, float, float, float]
    promoted: bool


@dataclass
class TrackerOutput:
    """Per-frame association records and occlusion flags."""

    num_frames: int
    associations: list[list[AssociationRecord]] = field(default_factory=list)
    occluded: list[list[int]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, num_frames: int, metadata: dict | None = None) -> "TrackerOutput":
        return cls(num_frames=num_frames,
                   associations=[[] for _ in range(num_frames)],
                   occluded=[[] for _ in range(num_frames)],
                   metadata=metadata or {})

    def promoted_pairs(self, frame: int) -> list[AssociationRecord]:
        return [rec for rec in self.associations[frame] if rec.promoted]

    def save(self, path: str) -> None:
        lines = [json.dumps({"format": OUTPUT_FORMAT, "version": OUTPUT_VERSION,
                             "num_frames": self.num_frames, "metadata": self.metadata})]
        for t in range(self.num_frames):
            for rec in self.associations[t]:
                lines.append(json.dumps({
                    "frame": t, "track": rec.track_id, "det": rec.det_id,
                    "box": list(rec.box), "promoted": rec.promoted}))
            for track_id in self.occluded[t]:
                lines.append(json.dumps({"frame": t, "track": track_id, "occ": True}))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "TrackerOutput":
        with open(path, "r") as fh:
            raw = [s for s in fh.read().splitlines() if s.strip()]
        if not raw:
            raise ValueError(f"{path}: empty tracker output")
        header = json.loads(raw[0])
        if header.get("format") != OUTPUT_FORMAT:
            raise ValueError(f"{path}: not a tracker output file")
        if header.get("version") != OUTPUT_VERSION:
            raise ValueError(f"{path}: tracker output version {header.get('version')} "
                             f"(supported: {OUTPUT_VERSION})")
        out = cls.empty(header["num_frames"], header.get("metadata", {}))
        for lineno, line in enumerate(raw[1:], start=2):
            rec = json.loads(line)
            t = rec["frame"]
            if not 0 <= t < out.num_frames:
                raise ValueError(f"{path}:{lineno}: frame {t} out of range")
            if rec.get("occ"):
                out.occluded[t].append(rec["track"])
            else:
                out.associations[t].append(AssociationRecord(
                    rec["track"], rec["det"], tuple(rec["box"]), rec["promoted"]))
        return out


# ---------------------------------------------------------------------------
# conflict resolution


def resolve_greedy(probs: np.ndarray, use_occlusion: bool
                   ) -> tuple[dict[int, int], list[int]]:
    """Greedy per-frame resolution on a fixed probability matrix.

    Rows are tracks; the last column is the occlusion class when
    use_occlusion is set. Returns (claims row->col, occluded rows).
    """
    num_tracks, num_cols = probs.shape
    num_cands = num_cols - 1 if use_occlusion else num_cols
    available = np.ones(num_cands, dtype=bool)
    pending = set(range(num_tracks))
    claims: dict[int, int] = {}
    occluded: list[int] = []
    while pending:
        best_row, best_col, best_p = -1, -1, -np.inf
        for row in sorted(pending):
            if available.any():
                cols = np.flatnonzero(available)
                col = int(cols[np.argmax(probs[row, cols])])
                p = probs[row, col]
            else:
                col, p = -1, -np.inf
            if best_row < 0 or p > best_p:
                best_row, best_col, best_p = row, col, p
        occ_p = probs[best_row, num_cands] if use_occlusion else -np.inf
        if best_col >= 0 and best_p > occ_p:
            claims[best_row] = best_col
            available[best_col] = False
        elif use_occlusion:
            occluded.append(best_row)
        pending.remove(best_row)
    return claims, sorted(occluded)


def resolve_assignment(probs: np.ndarray, use_occlusion: bool
                       ) -> tuple[dict[int, int], list[int]]:
    """Global min-cost resolution; occlusion becomes a per-track virtual column."""
    num_tracks, num_cols = probs.shape
    num_cands = num_cols - 1 if use_occlusion else num_cols
    if use_occlusion:
        costs = np.full((num_tracks, num_cands + num_tracks), FORBIDDEN_COST)
        costs[:, :num_cands] = -probs[:, :num_cands]
        for row in range(num_tracks):
            costs[row, num_cands + row] = -probs[row, num_cands]
    else:
        if num_cands == 0:
            return {}, []
        costs = -probs
    claims: dict[int, int] = {}
    occluded: list[int] = []
    for row, col in solve_min_cost_assignment(costs):
        if col < num_cands:
            claims[row] = col
        elif use_occlusion:
            occluded.append(row)
    return claims, sorted(occluded)


# ---------------------------------------------------------------------------
# tracker loop


def _sweep_dead(tracks: list[Track], frame: int, cfg: TrackerConfig) -> list[Track]:
    kept = []
    for tr in tracks:
        limit = cfg.lost_promoted if tr.status == TRACK_PROMOTED else cfg.lost_unpromoted
        if tr.miss_count(frame) < limit:
            kept.append(tr)
    return kept


def run_association_tracker(seq: Sequence, params: ModelParams,
                            model_config: ModelConfig,
                            tracker_config: TrackerConfig | None = None
                            ) -> TrackerOutput:
    """Track one sequence with the soft-association model."""
    tracker_config = tracker_config or TrackerConfig()
    tracker_config.validate()
    model_config.validate()
    embeddings = encode_sequence(seq, model_config, params)
    occ = params.occ_embed.data if model_config.use_occlusion else None

    out = TrackerOutput.empty(seq.num_frames, metadata={
        "method": "association", "conflict": tracker_config.conflict,
        "use_encoder": model_config.use_encoder,
        "use_occlusion": model_config.use_occlusion,
        "delay": model_config.window_future})
    tracks: list[Track] = []
    next_id = 0
    for t in range(seq.num_frames):
        dets = seq.frames[t]
        frame_embs = embeddings[t]
        claims: dict[int, int] = {}
        occluded_rows: list[int] = []
        if tracks:
            probs = association_probabilities(
                np.stack([tr.embedding for tr in tracks]), frame_embs, occ)
            if probs.shape[1] == 0:
                pass  # no candidates and no occlusion class: plain misses
            elif tracker_config.conflict == "greedy":
                claims, occluded_rows = resolve_greedy(probs, model_config.use_occlusion)
            else:
                claims, occluded_rows = resolve_assignment(probs, model_config.use_occlusion)
        for row, tr in enumerate(tracks):
            if row in claims:
                det = dets[claims[row]]
                tr.associate(t, det, frame_embs[claims[row]])
                out.associations[t].append(AssociationRecord(
                    tr.track_id, det.det_id, tuple(det.box.as_array().tolist()),
                    tr.status == TRACK_PROMOTED))
        for row in occluded_rows:
            out.occluded[t].append(tracks[row].track_id)
        claimed = set(claims.values())
        for j, det in enumerate(dets):
            if j not in claimed:
                tracks.append(Track(next_id, t, det, frame_embs[j],
                                    tracker_config.measure_sigma,
                                    tracker_config.process_sigma,
                                    tracker_config.velocity_prior))
                out.associations[t].append(AssociationRecord(
                    next_id, det.det_id, tuple(det.box.as_array().tolist()),
                    False))
                next_id += 1
        tracks = _sweep_dead(tracks, t, tracker_config)
    return out


# ---------------------------------------------------------------------------
# training targets


@dataclass
class FrameTargets:
    """Teacher-forced association targets for one frame.

    identities: alive ground-truth tracks (sorted); latest[i] points at the
    (frame, in-frame detection position) of identity i's newest detection;
    targets[i] is the in-frame position of its detection at this frame, or
    OCCLUDED_TARGET when it has none.
    """

    frame: int
    identities: list[int]
    latest: list[tuple[int, int]]
    targets: np.ndarray


def build_training_targets(seq: Sequence, window_start: int, window_len: int,
                           lost_promoted: int = 5) -> list[FrameTargets]:
    """Ground-truth association targets over a window, mirroring the tracker.

    An identity is an alive track at frame t iff its latest in-window
    detection lies within the previous `lost_promoted` frames; identities
    absent longer are dead and contribute no terms until respawned (which,
    matching inference, the teacher does via the detection itself at the
    frame it reappears).
    """
    if window_start < 0 or window_len < 1:
        raise ValueError("window_start must be >= 0 and window_len >= 1")
    end = min(window_start + window_len, seq.num_frames)
    last_seen: dict[int, tuple[int, int]] = {}
    out: list[FrameTargets] = []
    for t in range(window_start, end):
        position = {d.gt_id: j for j, d in enumerate(seq.frames[t]) if d.gt_id is not None}
        alive = sorted(i for i, (f, _) in last_seen.items() if t - f <= lost_promoted)
        if alive:
            targets = np.array([position.get(i, OCCLUDED_TARGET) for i in alive],
                               dtype=np.int64)
            out.append(FrameTargets(
                frame=t, identities=alive,
                latest=[last_seen[i] for i in alive], targets=targets))
        for i, j in position.items():
            last_seen[i] = (t, j)
    return out
