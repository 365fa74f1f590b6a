"""Attention measurement encoding and soft association.

A detection box is embedded by a small stem (FC + ReLU, FC, LayerNorm), then
refined by stacked self-attention layers over a sliding window of nearby
frames' detections. Attention scores combine a content term and a learned
relative-frame-offset term with shared content/offset bias vectors:

    score[i, j] = ((Q_i + u) . K_j + (Q_i + v) . R[t_i - t_j]) / sqrt(d)

Each layer applies attention with a residual + LayerNorm, then a one-layer
ReLU feedforward with another residual + LayerNorm. A head (FC + ReLU,
FC + tanh) maps encoder outputs to association embeddings.

A track is represented by the association embedding of its latest associated
detection. Its distribution over a frame's candidate detections appends a
learned occlusion embedding as a virtual candidate:

    p(cand_j | track) = exp(z_j . z_track) / (exp(z_occ . z_track)
                                              + sum_k exp(z_k . z_track))

Training minimizes cross-entropy of the true candidate (or the occlusion
class while the identity has no detection).

Ablation switches: use_encoder=False bypasses the attention layers (the head
reads stem outputs directly); use_occlusion=False drops the virtual
candidate, so the softmax runs over real candidates only and frames whose
target is the occlusion class contribute no loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Sequence, boxes_array
from .seeding import rng_from

OCCLUDED_TARGET = -1


@dataclass
class ModelConfig:
    embed_dim: int = 64
    window_past: int = 5
    window_future: int = 0
    num_layers: int = 2
    use_encoder: bool = True
    use_occlusion: bool = True

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.window_past < 0 or self.window_future < 0:
            raise ValueError("window extents must be non-negative")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def max_offset(self) -> int:
        return max(self.window_past, self.window_future)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class EncoderLayer:
    """Weights for one attention + feedforward block."""

    def __init__(self, rng: np.random.Generator, d: int):
        self.wq = ad.parameter(_glorot(rng, d, d))
        self.wk = ad.parameter(_glorot(rng, d, d))
        self.wv = ad.parameter(_glorot(rng, d, d))
        self.attn_ln_gain = ad.parameter(np.ones(d))
        self.attn_ln_bias = ad.parameter(np.zeros(d))
        self.ffn_w = ad.parameter(_glorot(rng, d, d))
        self.ffn_b = ad.parameter(np.zeros(d))
        self.ffn_ln_gain = ad.parameter(np.ones(d))
        self.ffn_ln_bias = ad.parameter(np.zeros(d))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


class ModelParams:
    """All learnable tensors for the association model."""

    def __init__(self, config: ModelConfig, seed: int | None = 0, _empty: bool = False):
        config.validate()
        self.config = config
        if _empty:
            return
        rng = rng_from(seed)
        d = config.embed_dim
        table_rows = 2 * config.max_offset + 1
        self.stem_w1 = ad.parameter(_glorot(rng, 4, d))
        self.stem_b1 = ad.parameter(np.zeros(d))
        self.stem_w2 = ad.parameter(_glorot(rng, d, d))
        self.stem_b2 = ad.parameter(np.zeros(d))
        self.stem_ln_gain = ad.parameter(np.ones(d))
        self.stem_ln_bias = ad.parameter(np.zeros(d))
        self.layers = [EncoderLayer(rng, d) for _ in range(config.num_layers)]
        self.rel_table = ad.parameter(rng.normal(0.0, 0.02, size=(table_rows, d)))
        self.content_bias = ad.parameter(rng.normal(0.0, 0.02, size=d))
        self.relative_bias = ad.parameter(rng.normal(0.0, 0.02, size=d))
        self.head_w1 = ad.parameter(_glorot(rng, d, d))
        self.head_b1 = ad.parameter(np.zeros(d))
        self.head_w2 = ad.parameter(_glorot(rng, d, d))
        self.head_b2 = ad.parameter(np.zeros(d))
        self.occ_embed = ad.parameter(rng.normal(0.0, 0.02, size=d))

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key in ("stem_w1", "stem_b1", "stem_w2", "stem_b2",
                    "stem_ln_gain", "stem_ln_bias"):
            out["stem." + key[5:]] = getattr(self, key)
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"enc{i}"))
        out["rel.table"] = self.rel_table
        out["rel.content_bias"] = self.content_bias
        out["rel.relative_bias"] = self.relative_bias
        for key in ("head_w1", "head_b1", "head_w2", "head_b2"):
            out["head." + key[5:]] = getattr(self, key)
        out["occ.embed"] = self.occ_embed
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: dict[str, Tensor]) -> "ModelParams":
        params = cls(config, _empty=True)
        template = cls(config, seed=0)
        expected = template.named()
        missing = sorted(set(expected) - set(tensors))
        if missing:
            raise ValueError(f"checkpoint missing parameters: {missing[:4]}")
        for key, ref in expected.items():
            if tensors[key].data.shape != ref.data.shape:
                raise ValueError(
                    f"parameter {key}: shape {tensors[key].data.shape} does not match "
                    f"config ({ref.data.shape})")
        params.stem_w1 = tensors["stem.w1"]
        params.stem_b1 = tensors["stem.b1"]
        params.stem_w2 = tensors["stem.w2"]
        params.stem_b2 = tensors["stem.b2"]
        params.stem_ln_gain = tensors["stem.ln_gain"]
        params.stem_ln_bias = tensors["stem.ln_bias"]
        params.layers = []
        for i in range(config.num_layers):
            layer = EncoderLayer.__new__(EncoderLayer)
            for field in ("wq", "wk", "wv", "attn_ln_gain", "attn_ln_bias",
                          "ffn_w", "ffn_b", "ffn_ln_gain", "ffn_ln_bias"):
                setattr(layer, field, tensors[f"enc{i}.{field}"])
            params.layers.append(layer)
        params.rel_table = tensors["rel.table"]
        params.content_bias = tensors["rel.content_bias"]
        params.relative_bias = tensors["rel.relative_bias"]
        params.head_w1 = tensors["head.w1"]
        params.head_b1 = tensors["head.b1"]
        params.head_w2 = tensors["head.w2"]
        params.head_b2 = tensors["head.b2"]
        params.occ_embed = tensors["occ.embed"]
        return params


# ---------------------------------------------------------------------------
# forward pieces


def embed_measurements(boxes: Tensor, params: ModelParams) -> Tensor:
    """Stem: box (n, 4) -> initial embedding (n, d)."""
    if boxes.data.ndim != 2 or boxes.data.shape[1] != 4:
        raise ad.ShapeError(f"embed_measurements: expected (n, 4), got {boxes.data.shape}")
    h = ad.relu(ad.add_row(ad.matmul(boxes, params.stem_w1), params.stem_b1))
    h = ad.add_row(ad.matmul(h, params.stem_w2), params.stem_b2)
    return ad.layer_norm(h, params.stem_ln_gain, params.stem_ln_bias)


def encode_window(z0: Tensor, frames: np.ndarray, t: int,
                  config: ModelConfig, params: ModelParams) -> Tensor:
    """Run the attention layers over the window around frame t.

    `z0` holds stem embeddings for detections whose frame indices are in
    `frames`; rows outside [t - window_past, t + window_future] are ignored.
    Returns the encoded rows belonging to frame t, in input order.
    """
    frames = np.asarray(frames, dtype=np.int64)
    if z0.data.shape[0] != frames.shape[0]:
        raise ad.ShapeError(
            f"encode_window: {z0.data.shape[0]} rows vs {frames.shape[0]} frame tags")
    sel = np.flatnonzero((frames >= t - config.window_past)
                         & (frames <= t + config.window_future))
    local = frames[sel]
    t_rows = np.flatnonzero(local == t)
    if t_rows.size == 0:
        raise ValueError(f"encode_window: no detections at frame {t}")

    z = ad.gather_rows(z0, sel)
    m = config.max_offset
    offsets = np.clip(local[:, None] - local[None, :], -m, m) + m
    inv_scale = 1.0 / math.sqrt(config.embed_dim)
    for layer in params.layers:
        q = ad.matmul(z, layer.wq)
        k = ad.matmul(z, layer.wk)
        v = ad.matmul(z, layer.wv)
        content = ad.matmul(ad.add_row(q, params.content_bias), ad.transpose(k))
        relative = ad.offset_scores(ad.add_row(q, params.relative_bias),
                                    params.rel_table, offsets)
        attn = ad.softmax(ad.scale(ad.add(content, relative), inv_scale))
        z = ad.layer_norm(ad.add(z, ad.matmul(attn, v)),
                          layer.attn_ln_gain, layer.attn_ln_bias)
        ffn = ad.relu(ad.add_row(ad.matmul(z, layer.ffn_w), layer.ffn_b))
        z = ad.layer_norm(ad.add(z, ffn), layer.ffn_ln_gain, layer.ffn_ln_bias)
    return ad.gather_rows(z, t_rows)


def association_head(z: Tensor, params: ModelParams) -> Tensor:
    """Head: encoder output -> association embedding (tanh-bounded)."""
    h = ad.relu(ad.add_row(ad.matmul(z, params.head_w1), params.head_b1))
    return ad.tanh(ad.add_row(ad.matmul(h, params.head_w2), params.head_b2))


def frame_embeddings(z0: Tensor, frames: np.ndarray, t: int,
                     config: ModelConfig, params: ModelParams) -> Tensor:
    """Association embeddings for frame t's detections (full stack)."""
    if config.use_encoder:
        enc = encode_window(z0, frames, t, config, params)
    else:
        rows = np.flatnonzero(np.asarray(frames) == t)
        if rows.size == 0:
            raise ValueError(f"frame_embeddings: no detections at frame {t}")
        enc = ad.gather_rows(z0, rows)
    return association_head(enc, params)


def encode_sequence(seq: Sequence, config: ModelConfig,
                    params: ModelParams) -> list[np.ndarray]:
    """Per-frame association embeddings for a whole sequence (no gradients)."""
    det_frames, det_boxes = [], []
    for dets in seq.frames:
        for d in dets:
            det_frames.append(d.frame)
            det_boxes.append(d.box.as_array())
    out: list[np.ndarray] = []
    d_model = config.embed_dim
    if not det_boxes:
        return [np.zeros((0, d_model)) for _ in range(seq.num_frames)]
    frames_arr = np.asarray(det_frames, dtype=np.int64)
    with ad.no_grad():
        z0 = embed_measurements(ad.tensor(np.stack(det_boxes)), params)
        for t, dets in enumerate(seq.frames):
            if not dets:
                out.append(np.zeros((0, d_model)))
                continue
            out.append(frame_embeddings(z0, frames_arr, t, config, params).data)
    return out


# ---------------------------------------------------------------------------
# association


def association_probabilities(track_embs: np.ndarray, cand_embs: np.ndarray,
                              occ_embed: np.ndarray | None) -> np.ndarray:
    """Rows of candidate probabilities, one per track (inference path).

    With an occlusion embedding, column K (the last) is the occlusion class.
    """
    track_embs = np.atleast_2d(np.asarray(track_embs, dtype=np.float64))
    cand_embs = np.asarray(cand_embs, dtype=np.float64).reshape(-1, track_embs.shape[1]) \
        if np.asarray(cand_embs).size else np.zeros((0, track_embs.shape[1]))
    logits = track_embs @ cand_embs.T
    if occ_embed is not None:
        occ_col = track_embs @ np.asarray(occ_embed, dtype=np.float64)
        logits = np.concatenate([logits, occ_col[:, None]], axis=1)
    if logits.shape[1] == 0:
        return logits
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def association_distribution(track_emb: np.ndarray, cand_embs: np.ndarray,
                             occ_embed: np.ndarray | None) -> np.ndarray:
    """Distribution of one track over candidates (+ occlusion class if used)."""
    track_emb = np.asarray(track_emb, dtype=np.float64).reshape(-1)
    if occ_embed is None and np.asarray(cand_embs).size == 0:
        return np.zeros(0)
    return association_probabilities(track_emb[None, :], cand_embs, occ_embed)[0]


def association_loss_terms(track_matrix: Tensor, cand_matrix: Tensor | None,
                           targets: np.ndarray, params: ModelParams,
                           config: ModelConfig) -> tuple[Tensor | None, int]:
    """Summed cross-entropy for one frame's tracks; returns (sum, count).

    `targets` holds candidate row indices, or OCCLUDED_TARGET for tracks
    whose identity has no detection this frame.
    """
    targets = np.asarray(targets, dtype=np.int64)
    num_tracks = track_matrix.data.shape[0]
    if targets.shape != (num_tracks,):
        raise ad.ShapeError(
            f"association_loss_terms: {num_tracks} tracks vs targets {targets.shape}")
    num_cands = 0 if cand_matrix is None else cand_matrix.data.shape[0]
    if targets.size and targets.max() >= num_cands:
        raise ValueError(f"association_loss_terms: target index out of range "
                         f"for {num_cands} candidates")

    if config.use_occlusion:
        parts = ([cand_matrix] if num_cands else []) + [params.occ_embed]
        cands = ad.concat_rows(*parts)
        mapped = np.where(targets == OCCLUDED_TARGET, num_cands, targets)
        rows = track_matrix
    else:
        keep = np.flatnonzero(targets != OCCLUDED_TARGET)
        if keep.size == 0 or num_cands == 0:
            return None, 0
        cands = cand_matrix
        mapped = targets[keep]
        rows = ad.gather_rows(track_matrix, keep)
    logits = ad.matmul(rows, ad.transpose(cands))
    total = ad.nll_rows(ad.log_softmax(logits), mapped)
    return total, int(mapped.shape[0])


def association_loss(groups, params: ModelParams, config: ModelConfig) -> Tensor:
    """Mean cross-entropy over (track, frame) terms.

    `groups` is an iterable of (track_matrix, cand_matrix_or_None, targets)
    triples, one per frame.
    """
    total: Tensor | None = None
    count = 0
    for track_matrix, cand_matrix, targets in groups:
        part, n = association_loss_terms(track_matrix, cand_matrix, targets,
                                         params, config)
        if part is None:
            continue
        total = part if total is None else ad.add(total, part)
        count += n
    if count == 0 or total is None:
        raise ValueError("association_loss: no loss terms in batch")
    return ad.scale(total, 1.0 / count)
