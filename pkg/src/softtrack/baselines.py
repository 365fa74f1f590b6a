"""Baseline trackers: IOU, center-distance, and learned-similarity.

All three share the tracker module's lifecycle (spawn unpromoted, promote on
the second association, die after a run of misses) and differ only in the
per-frame similarity used for the min-cost matching:

  * iou:     overlap between a constant-velocity predicted box and the
             detection box; pairs under a minimum overlap are forbidden.
  * center:  negative distance between the predicted center and the
             detection center; pairs beyond a maximum distance are forbidden.
  * learned: cosine similarity between embeddings from a small box network
             trained with a contrastive loss; pairs under a minimum cosine
             are forbidden.

The learned network is four FC layers (ReLU between, linear last) from the
4 box coordinates to the embedding; it sees single frames only, no window
context and no occlusion class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .assignment import (FORBIDDEN_COST, box_iou_matrix, iou,
                         solve_min_cost_assignment)
from .autodiff import Tensor
from .data import Sequence, boxes_array
from .seeding import rng_from
from .tracking import (AssociationRecord, Track, TrackerConfig, TrackerOutput,
                       TRACK_PROMOTED, TRACK_UNPROMOTED, _sweep_dead)

BASELINE_KINDS = ("iou", "center", "learned")


@dataclass
class BaselineGates:
    """Association gates; pairs outside a gate are forbidden entirely."""

    min_iou: float = 0.1
    max_center_dist: float = 0.2
    min_cosine: float = 0.3


@dataclass
class SimilarityConfig:
    embed_dim: int = 64
    margin: float = 0.3


class SimilarityNet:
    """Box-coordinate embedding network for the learned baseline."""

    def __init__(self, config: SimilarityConfig | None = None, seed: int = 0,
                 _empty: bool = False):
        self.config = config or SimilarityConfig()
        if _empty:
            return
        rng = rng_from(seed)
        d = self.config.embed_dim
        dims = [4, d, d, d, d]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(ad.parameter(rng.uniform(-s, s, size=(fan_in, fan_out))))
            self.biases.append(ad.parameter(np.zeros(fan_out)))

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"fc{i}.w"] = w
            out[f"fc{i}.b"] = b
        return out

    @classmethod
    def from_named(cls, config: SimilarityConfig, tensors: dict[str, Tensor]
                   ) -> "SimilarityNet":
        net = cls(config, _empty=True)
        net.weights, net.biases = [], []
        for i in range(4):
            try:
                net.weights.append(tensors[f"fc{i}.w"])
                net.biases.append(tensors[f"fc{i}.b"])
            except KeyError as exc:
                raise ValueError(f"checkpoint missing similarity layer {exc}") from exc
        return net

    def forward(self, boxes: Tensor) -> Tensor:
        """(n, 4) boxes -> (n, d) embeddings; last layer linear."""
        h = boxes
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add_row(ad.matmul(h, w), b)
            if i != last:
                h = ad.relu(h)
        return h

    def embed(self, boxes: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(ad.tensor(np.asarray(boxes, dtype=np.float64))).data


def cosine_similarity_matrix(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    """(n, m) cosine similarities; zero-norm rows are rejected."""
    a = np.atleast_2d(np.asarray(emb_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(emb_b, dtype=np.float64))
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (a.shape[0] and na.min() == 0.0) or (b.shape[0] and nb.min() == 0.0):
        raise ValueError("cosine similarity: zero-norm embedding")
    return (a @ b.T) / (na[:, None] * nb[None, :])


def contrastive_loss(emb_a: Tensor, emb_b: Tensor, is_same,
                     margin: float = 0.3) -> Tensor:
    """Mean contrastive loss on cosine distance.

    Pairs with the same identity are pulled to distance 0 (squared distance
    penalty); different pairs are pushed past the margin (squared hinge).
    """
    same = np.asarray(is_same, dtype=bool)
    n = emb_a.data.shape[0]
    if emb_b.data.shape[0] != n or same.shape != (n,):
        raise ad.ShapeError(
            f"contrastive_loss: {emb_a.data.shape} vs {emb_b.data.shape} "
            f"with labels {same.shape}")
    if n == 0:
        raise ValueError("contrastive_loss: empty batch")
    if (np.linalg.norm(emb_a.data, axis=1).min() == 0.0
            or np.linalg.norm(emb_b.data, axis=1).min() == 0.0):
        raise ValueError("contrastive_loss: zero-norm embedding")

    dots = ad.sum_rows(ad.mul(emb_a, emb_b))
    norm_a = ad.sqrt(ad.sum_rows(ad.mul(emb_a, emb_a)))
    norm_b = ad.sqrt(ad.sum_rows(ad.mul(emb_b, emb_b)))
    cosine = ad.div(dots, ad.mul(norm_a, norm_b))
    dist = ad.add_const(ad.scale(cosine, -1.0), 1.0)          # (n, 1)

    total: Tensor | None = None
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    if pos.size:
        d_pos = ad.gather_rows(dist, pos)
        total = ad.sum_all(ad.mul(d_pos, d_pos))
    if neg.size:
        d_neg = ad.gather_rows(dist, neg)
        hinge = ad.relu(ad.add_const(ad.scale(d_neg, -1.0), margin))
        neg_term = ad.sum_all(ad.mul(hinge, hinge))
        total = neg_term if total is None else ad.add(total, neg_term)
    return ad.scale(total, 1.0 / n)


# ---------------------------------------------------------------------------
# baseline tracking loop


def _similarity_and_forbidden(kind: str, tracks: list[Track], dets,
                              det_embs: np.ndarray | None, frame: int,
                              gates: BaselineGates) -> tuple[np.ndarray, np.ndarray]:
    det_boxes = boxes_array(dets)
    if kind == "iou":
        pred = np.stack([tr.predicted_box(frame).as_array() for tr in tracks])
        sim = box_iou_matrix(pred, det_boxes)
        forbidden = sim < gates.min_iou
    elif kind == "center":
        pred = np.stack([tr.predicted_center(frame) for tr in tracks])
        centers = 0.5 * (det_boxes[:, :2] + det_boxes[:, 2:])
        dist = np.sqrt(((pred[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
        sim = -dist
        forbidden = dist > gates.max_center_dist
    elif kind == "learned":
        track_embs = np.stack([tr.embedding for tr in tracks])
        sim = cosine_similarity_matrix(track_embs, det_embs)
        forbidden = sim < gates.min_cosine
    else:
        raise ValueError(f"unknown baseline kind {kind!r}, expected one of {BASELINE_KINDS}")
    return sim, forbidden


def run_baseline_tracker(kind: str, seq: Sequence,
                         similarity_net: SimilarityNet | None = None,
                         tracker_config: TrackerConfig | None = None,
                         gates: BaselineGates | None = None) -> TrackerOutput:
    """Track one sequence with a baseline association rule."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}, expected one of {BASELINE_KINDS}")
    if kind == "learned" and similarity_net is None:
        raise ValueError("learned baseline requires a similarity net")
    tracker_config = tracker_config or TrackerConfig()
    tracker_config.validate()
    gates = gates or BaselineGates()

    out = TrackerOutput.empty(seq.num_frames, metadata={"method": kind})
    tracks: list[Track] = []
    next_id = 0
    for t in range(seq.num_frames):
        dets = seq.frames[t]
        det_embs = None
        if kind == "learned":
            det_embs = similarity_net.embed(boxes_array(dets)) if dets else \
                np.zeros((0, similarity_net.config.embed_dim))
        claims: dict[int, int] = {}
        if tracks and dets:
            sim, forbidden = _similarity_and_forbidden(
                kind, tracks, dets, det_embs, t, gates)
            costs = np.where(forbidden, FORBIDDEN_COST, -sim)
            # promoted tracks claim first so a one-frame gate blip cannot
            # hand an established identity to a freshly spawned track
            for stage in (TRACK_PROMOTED, TRACK_UNPROMOTED):
                rows = [i for i, tr in enumerate(tracks) if tr.status == stage]
                cols = [j for j in range(len(dets)) if j not in claims.values()]
                if not rows or not cols:
                    continue
                stage_costs = costs[np.ix_(rows, cols)]
                for r, c in solve_min_cost_assignment(stage_costs):
                    if stage_costs[r, c] < FORBIDDEN_COST:
                        claims[rows[r]] = cols[c]
        for row, tr in enumerate(tracks):
            if row in claims:
                det = dets[claims[row]]
                emb = det_embs[claims[row]] if det_embs is not None else None
                tr.associate(t, det, emb)
                out.associations[t].append(AssociationRecord(
                    tr.track_id, det.det_id, tuple(det.box.as_array().tolist()),
                    tr.status == TRACK_PROMOTED))
        claimed = set(claims.values())
        for j, det in enumerate(dets):
            if j not in claimed:
                emb = det_embs[j] if det_embs is not None else None
                tracks.append(Track(next_id, t, det, emb,
                                    tracker_config.measure_sigma,
                                    tracker_config.process_sigma,
                                    tracker_config.velocity_prior))
                out.associations[t].append(AssociationRecord(
                    next_id, det.det_id, tuple(det.box.as_array().tolist()),
                    False))
                next_id += 1
        tracks = _sweep_dead(tracks, t, tracker_config)
    return out
