"""Geometry primitives and the on-disk sequence format."""

import json
import os

import numpy as np
import pytest

from softtrack.data import (BoundingBox, Detection, Sequence,
                            SequenceFormatError, boxes_array,
                            denormalize_boxes, load_sequence,
                            normalize_boxes, save_sequence)
from softtrack.simulate import SimConfig, generate_sequence


def toy_sequence():
    b = BoundingBox
    seq = Sequence(metadata={"note": "toy"})
    seq.gt_tracks = {
        1: [(0, b(0.1, 0.1, 0.2, 0.2)), (1, b(0.15, 0.1, 0.25, 0.2))],
        2: [(0, b(0.6, 0.6, 0.7, 0.7))],
    }
    seq.frames = [
        [Detection(0, 0, b(0.1, 0.1, 0.2, 0.2), 1),
         Detection(0, 1, b(0.61, 0.6, 0.71, 0.7), 2)],
        [Detection(1, 2, b(0.15, 0.1, 0.25, 0.2), 1),
         Detection(1, 3, b(0.9, 0.9, 0.95, 0.95), None)],
    ]
    return seq


def test_bounding_box_validates_and_derives():
    box = BoundingBox(0.1, 0.2, 0.5, 0.6)
    assert box.center == (0.3, 0.4)
    assert box.width == pytest.approx(0.4)
    assert box.area == pytest.approx(0.16)
    with pytest.raises(ValueError):
        BoundingBox(0.5, 0.2, 0.1, 0.6)     # x2 < x1
    with pytest.raises(ValueError):
        BoundingBox(0.1, float("nan"), 0.2, 0.3)
    half = BoundingBox.from_center(0.5, 0.5, 0.1)
    assert (half.x1, half.y2) == (0.4, 0.6)


def test_round_trip_preserves_everything(tmp_path):
    seq = toy_sequence()
    path = os.path.join(tmp_path, "seq.jsonl")
    save_sequence(seq, path)
    loaded = load_sequence(path)
    assert loaded.metadata == seq.metadata
    assert loaded.gt_tracks == seq.gt_tracks
    assert loaded.frames == seq.frames

    # a second save must produce identical bytes
    path2 = os.path.join(tmp_path, "seq2.jsonl")
    save_sequence(loaded, path2)
    with open(path, "rb") as fa, open(path2, "rb") as fb:
        assert fa.read() == fb.read()


def test_generated_sequence_round_trip(tmp_path):
    seq = generate_sequence(SimConfig(flavor="occlusion", num_frames=40,
                                      particle_radius=0.1, seed=7))
    path = os.path.join(tmp_path, "gen.jsonl")
    save_sequence(seq, path)
    loaded = load_sequence(path)
    assert loaded.gt_tracks == seq.gt_tracks
    assert loaded.frames == seq.frames


def test_loader_errors_name_path_and_line(tmp_path):
    seq = toy_sequence()
    path = os.path.join(tmp_path, "seq.jsonl")
    save_sequence(seq, path)
    lines = open(path).read().splitlines()

    bad = os.path.join(tmp_path, "bad.jsonl")
    with open(bad, "w") as fh:
        fh.write("\n".join(lines[:2]) + "\n{oops\n")
    with pytest.raises(SequenceFormatError, match=r"bad\.jsonl:3"):
        load_sequence(bad)

    truncated = os.path.join(tmp_path, "trunc.jsonl")
    with open(truncated, "w") as fh:
        fh.write("\n".join(lines[:2]) + "\n")
    with pytest.raises(SequenceFormatError, match="declares 2 frames"):
        load_sequence(truncated)

    with open(os.path.join(tmp_path, "empty.jsonl"), "w"):
        pass
    with pytest.raises(SequenceFormatError, match="empty"):
        load_sequence(os.path.join(tmp_path, "empty.jsonl"))


def test_loader_rejects_wrong_header_and_version(tmp_path):
    path = os.path.join(tmp_path, "h.jsonl")
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "something-else", "version": 1}) + "\n")
    with pytest.raises(SequenceFormatError, match="not a sequence file"):
        load_sequence(path)

    seq = toy_sequence()
    good = os.path.join(tmp_path, "g.jsonl")
    save_sequence(seq, good)
    lines = open(good).read().splitlines()
    header = json.loads(lines[0])
    header["version"] = 42
    with open(path, "w") as fh:
        fh.write("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(SequenceFormatError, match="version 42"):
        load_sequence(path)


def test_loader_rejects_semantic_corruption(tmp_path):
    seq = toy_sequence()
    path = os.path.join(tmp_path, "seq.jsonl")
    save_sequence(seq, path)
    lines = open(path).read().splitlines()

    # duplicate detection id across frames
    rec = json.loads(lines[2])
    rec["dets"][0][0] = 0
    bad = os.path.join(tmp_path, "dup.jsonl")
    with open(bad, "w") as fh:
        fh.write("\n".join(lines[:2] + [json.dumps(rec)]) + "\n")
    with pytest.raises(SequenceFormatError, match="duplicate detection id 0"):
        load_sequence(bad)

    # detection pointing at an identity with no ground-truth track
    rec = json.loads(lines[2])
    rec["dets"][0][1] = 99
    bad = os.path.join(tmp_path, "orphan.jsonl")
    with open(bad, "w") as fh:
        fh.write("\n".join(lines[:2] + [json.dumps(rec)]) + "\n")
    with pytest.raises(SequenceFormatError, match="unknown identity 99"):
        load_sequence(bad)

    # out-of-order frame records
    swapped = lines[:1] + [lines[2], lines[1]]
    bad = os.path.join(tmp_path, "order.jsonl")
    with open(bad, "w") as fh:
        fh.write("\n".join(swapped) + "\n")
    with pytest.raises(SequenceFormatError, match="out of order"):
        load_sequence(bad)


def test_detection_lookup_and_counts():
    seq = toy_sequence()
    lookup = seq.detection_lookup()
    assert set(lookup) == {0, 1, 2, 3}
    assert lookup[3].gt_id is None
    assert seq.gt_count() == 3
    by_frame = seq.gt_by_frame()
    assert set(by_frame[0]) == {1, 2}
    assert set(by_frame[1]) == {1}


def test_normalize_denormalize_round_trip():
    raw = np.array([[10.0, 20.0, 110.0, 220.0], [0.0, 0.0, 640.0, 480.0]])
    boxes = normalize_boxes(raw, 640.0, 480.0)
    assert boxes[1].x2 == pytest.approx(1.0)
    back = denormalize_boxes(boxes, 640.0, 480.0)
    np.testing.assert_allclose(back, raw, atol=1e-12)
    with pytest.raises(ValueError, match="positive"):
        normalize_boxes(raw, 0.0, 480.0)
    with pytest.raises(ValueError, match="shape"):
        normalize_boxes(np.zeros((3, 5)), 640.0, 480.0)


def test_boxes_array_orders_and_handles_empty():
    seq = toy_sequence()
    arr = boxes_array(seq.frames[0])
    assert arr.shape == (2, 4)
    np.testing.assert_allclose(arr[0], [0.1, 0.1, 0.2, 0.2])
    assert boxes_array([]).shape == (0, 4)
