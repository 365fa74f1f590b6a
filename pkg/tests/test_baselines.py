"""Baseline trackers, the assignment solver, and the contrastive loss."""

import numpy as np
import pytest

from softtrack import autodiff as ad
from softtrack.assignment import (box_iou_matrix, iou,
                                  solve_min_cost_assignment)
from softtrack.baselines import (BaselineGates, SimilarityConfig,
                                 SimilarityNet, contrastive_loss,
                                 cosine_similarity_matrix,
                                 run_baseline_tracker)
from softtrack.metrics import evaluate
from softtrack.simulate import SimConfig, generate_sequence
from softtrack.tracking import TrackerConfig
from oracles import brute_force_assignment, check_gradients

RNG = np.random.default_rng(20240813)


def test_iou_worked_examples():
    a = [0.0, 0.0, 1.0, 1.0]
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, [0.5, 0.0, 1.5, 1.0]) == pytest.approx(1.0 / 3.0)
    assert iou(a, [2.0, 2.0, 3.0, 3.0]) == 0.0
    assert iou(a, [0.5, 0.5, 1.5, 1.5]) == pytest.approx(0.25 / 1.75)


def random_boxes(count):
    out = []
    for _ in range(count):
        x1, x2 = sorted(RNG.uniform(0, 1, 2))
        y1, y2 = sorted(RNG.uniform(0, 1, 2))
        out.append([x1, y1, x2 + 0.01, y2 + 0.01])
    return np.array(out)


def test_box_iou_matrix_agrees_with_scalar_iou():
    boxes_a = random_boxes(4)
    boxes_b = random_boxes(3)
    matrix = box_iou_matrix(boxes_a, boxes_b)
    for i, ba in enumerate(boxes_a):
        for j, bb in enumerate(boxes_b):
            assert matrix[i, j] == pytest.approx(iou(ba, bb), abs=1e-12)


def test_solver_matches_brute_force_on_random_problems():
    for trial in range(25):
        costs = RNG.uniform(-5, 5, size=(4, 4))
        pairs = solve_min_cost_assignment(costs)
        total = sum(costs[r, c] for r, c in pairs)
        assert total == pytest.approx(brute_force_assignment(costs), abs=1e-9)


def test_solver_handles_rectangular_problems():
    for shape in ((3, 5), (5, 3), (1, 4), (4, 1)):
        costs = RNG.uniform(0, 10, size=shape)
        pairs = solve_min_cost_assignment(costs)
        assert len(pairs) == min(shape)
        total = sum(costs[r, c] for r, c in pairs)
        assert total == pytest.approx(brute_force_assignment(costs), abs=1e-9)


def test_solver_rejects_non_finite_costs():
    with pytest.raises(ValueError, match="finite"):
        solve_min_cost_assignment(np.array([[1.0, np.inf], [0.0, 2.0]]))
    with pytest.raises(ValueError, match="finite"):
        solve_min_cost_assignment(np.array([[np.nan]]))


def test_cosine_similarity_properties():
    embs = RNG.normal(0, 1, size=(5, 16))
    sim = cosine_similarity_matrix(embs, embs)
    np.testing.assert_allclose(np.diag(sim), np.ones(5), atol=1e-12)
    assert np.abs(sim).max() <= 1.0 + 1e-12
    scaled = cosine_similarity_matrix(3.0 * embs, embs)
    np.testing.assert_allclose(scaled, sim, atol=1e-12)
    with pytest.raises(ValueError, match="zero-norm"):
        cosine_similarity_matrix(np.zeros((2, 4)), embs[:, :4])


def test_contrastive_loss_frozen_values():
    e = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
    # pair 0: identical direction, same -> 0
    # pair 1: orthogonal, same -> (1 - 0)^2 = 1
    # pair 2: identical direction, different -> hinge(0.3 - 0)^2 = 0.09
    a = ad.tensor(np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
    b = ad.tensor(np.array([[5.0, 0.0], [0.0, 1.0], [7.0, 0.0]]))
    loss = contrastive_loss(a, b, [True, True, False], margin=0.3)
    np.testing.assert_allclose(loss.item(), (0.0 + 1.0 + 0.09) / 3, atol=1e-12)

    # a far-apart negative pair costs nothing
    far = contrastive_loss(ad.tensor([[1.0, 0.0]]), ad.tensor([[-1.0, 0.0]]),
                           [False], margin=0.3)
    np.testing.assert_allclose(far.item(), 0.0, atol=1e-12)


def test_contrastive_loss_rejects_bad_input():
    with pytest.raises(ValueError, match="empty"):
        contrastive_loss(ad.tensor(np.zeros((0, 2))), ad.tensor(np.zeros((0, 2))), [])
    with pytest.raises(ValueError, match="zero-norm"):
        contrastive_loss(ad.tensor([[0.0, 0.0]]), ad.tensor([[1.0, 0.0]]), [True])
    with pytest.raises(ad.ShapeError):
        contrastive_loss(ad.tensor([[1.0, 0.0]]), ad.tensor([[1.0, 0.0]]),
                         [True, False])


def test_contrastive_loss_gradients():
    net = SimilarityNet(SimilarityConfig(embed_dim=6), seed=1)
    boxes_a = RNG.uniform(0.1, 0.9, size=(4, 4))
    boxes_b = boxes_a + RNG.normal(0, 0.05, size=(4, 4))
    same = np.array([True, False, True, False])

    def make_loss():
        return contrastive_loss(net.forward(ad.tensor(boxes_a)),
                                net.forward(ad.tensor(boxes_b)), same)

    assert check_gradients(make_loss, net.named()) < 1e-4


def test_similarity_net_is_seed_deterministic():
    a = SimilarityNet(SimilarityConfig(embed_dim=8), seed=5)
    b = SimilarityNet(SimilarityConfig(embed_dim=8), seed=5)
    for key, tensor in a.named().items():
        np.testing.assert_array_equal(tensor.data, b.named()[key].data)
    boxes = RNG.uniform(0, 1, size=(3, 4))
    assert a.embed(boxes).shape == (3, 8)
    np.testing.assert_array_equal(a.embed(boxes), b.embed(boxes))


def test_similarity_net_from_named_requires_all_layers():
    net = SimilarityNet(SimilarityConfig(embed_dim=8), seed=0)
    named = net.named()
    del named["fc2.w"]
    with pytest.raises(ValueError, match="missing"):
        SimilarityNet.from_named(SimilarityConfig(embed_dim=8), named)


def clean_scene():
    """Slow, noise-free particles: every baseline should track perfectly."""
    return generate_sequence(SimConfig(
        num_particles=3, num_frames=40, force_sigma=0.0,
        init_velocity_sigma=0.005, detection_noise_sigma=0.0, seed=21))


@pytest.mark.parametrize("kind", ["iou", "center"])
def test_geometric_baselines_track_a_clean_scene_perfectly(kind):
    seq = clean_scene()
    out = run_baseline_tracker(kind, seq)
    report = evaluate(seq, out)
    # the spawn frame of each track is unpromoted, hence one miss per particle
    assert report.ids == 0
    assert report.fp == 0
    assert report.fn == 3
    assert report.mota == pytest.approx(1.0 - 3 / seq.gt_count())


def test_learned_baseline_runs_and_is_deterministic():
    seq = clean_scene()
    net = SimilarityNet(SimilarityConfig(embed_dim=8), seed=3)
    a = run_baseline_tracker("learned", seq, similarity_net=net)
    b = run_baseline_tracker("learned", seq, similarity_net=net)
    assert a.associations == b.associations
    assert evaluate(seq, a).gt_count == seq.gt_count()


def test_impossible_gate_prevents_all_associations():
    seq = clean_scene()
    out = run_baseline_tracker("iou", seq, gates=BaselineGates(min_iou=1.01))
    assert all(not out.promoted_pairs(t) for t in range(seq.num_frames))
    report = evaluate(seq, out)
    assert report.fn == seq.gt_count()
    assert report.mota == 0.0


def test_baseline_rejects_unknown_kind_and_missing_net():
    seq = clean_scene()
    with pytest.raises(ValueError, match="unknown baseline kind"):
        run_baseline_tracker("flow", seq)
    with pytest.raises(ValueError, match="similarity net"):
        run_baseline_tracker("learned", seq)


def test_baseline_respects_lost_counters():
    seq = clean_scene()
    # drop a hole longer than lost_promoted in one track and check the id count
    frames = [[d for d in dets if not (d.gt_id == 0 and 10 <= d.frame < 18)]
              for dets in seq.frames]
    holed = type(seq)(metadata=seq.metadata, gt_tracks=seq.gt_tracks,
                      frames=frames)
    out = run_baseline_tracker(
        "iou", holed, tracker_config=TrackerConfig(lost_promoted=5))
    track_ids = {rec.track_id
                 for t in range(holed.num_frames)
                 for rec in out.associations[t]
                 for _ in [0]
                 if seq.detection_lookup()[rec.det_id].gt_id == 0}
    assert len(track_ids) == 2      # original track dies, a new one spawns
