"""Tracking evaluation: MOTA, identity measures, and occlusion reporting.

Matching modes:
  * "identity": hypothesis boxes carry the detection they claimed, and
    simulated detections carry their source identity, so a hypothesis
    matches a ground-truth identity exactly when it claimed that identity's
    detection. Noise detections (no identity) count as false positives.
  * "distance": per-frame center-distance matching under a threshold with
    the standard continuity rule (a pair kept from the previous frame is
    not broken by a closer newcomer); for data without identity-tagged
    detections.

Events follow the usual conventions: FN per unmatched ground-truth
(identity, frame); FP per unmatched hypothesis; an identity switch when a
ground truth's matched track differs from its last known matched track (gaps
do not reset the memory). MOTA = 1 - (FN + FP + IDS) / gt_count. Identity
measures (IDF1/IDP/IDR) come from a global min-cost assignment between
ground-truth identities and track ids on per-frame match-eligibility counts.

Zero-denominator conventions: with zero ground truth, MOTA is 1.0 when there
are no errors, else errors are charged against a denominator of 1;
occlusion recall/precision with an empty positive/predicted set is 1.0.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .assignment import FORBIDDEN_COST, solve_min_cost_assignment
from .data import Sequence
from .tracking import TrackerOutput


@dataclass
class MotReport:
    mota: float
    idf1: float
    idp: float
    idr: float
    ids: int
    fp: int
    fn: int
    matches: int
    gt_count: int
    num_hyp: int
    per_sequence: list[dict] = field(default_factory=list)

    def summary_dict(self) -> dict:
        return {"mota": self.mota, "idf1": self.idf1, "idp": self.idp,
                "idr": self.idr, "ids": self.ids, "fp": self.fp, "fn": self.fn,
                "matches": self.matches, "gt_count": self.gt_count,
                "num_hyp": self.num_hyp}


@dataclass
class OcclusionReport:
    """Binary occlusion-decision quality over alive (track, frame) points.

    A decision point is any frame where a track with at least one earlier
    association either associates a detection (predicted visible) or is
    flagged occluded (predicted occluded). Its truth label asks whether the
    identity of the track's latest earlier association has a detection in
    that frame. Spawn frames carry no belief yet and are excluded.
    """

    accuracy: float
    recall: float
    precision: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class _Counts:
    fp: int = 0
    fn: int = 0
    ids: int = 0
    matches: int = 0
    gt_count: int = 0
    num_hyp: int = 0
    idtp: int = 0


def _check_frame_hyps(frame: int, recs) -> None:
    tracks = [r.track_id for r in recs]
    dets = [r.det_id for r in recs]
    if len(set(tracks)) != len(tracks):
        raise ValueError(f"frame {frame}: duplicate track id in hypotheses")
    if len(set(dets)) != len(dets):
        raise ValueError(f"frame {frame}: detection claimed by multiple tracks")


def _identity_counts(gt: Sequence, hyp: TrackerOutput) -> _Counts:
    if hyp.num_frames != gt.num_frames:
        raise ValueError(
            f"hypotheses cover {hyp.num_frames} frames, ground truth {gt.num_frames}")
    det_lookup = gt.detection_lookup()
    gt_frames = gt.gt_by_frame()
    counts = _Counts(gt_count=gt.gt_count())
    last_match: dict[int, int] = {}
    overlap: Counter = Counter()
    for t in range(gt.num_frames):
        recs = hyp.promoted_pairs(t)
        _check_frame_hyps(t, recs)
        counts.num_hyp += len(recs)
        present = gt_frames[t]
        by_identity: dict[int, list[int]] = {}
        for rec in recs:
            det = det_lookup.get(rec.det_id)
            if det is None:
                raise ValueError(f"frame {t}: hypothesis claims unknown detection "
                                 f"{rec.det_id}")
            if det.frame != t:
                raise ValueError(f"frame {t}: hypothesis claims detection "
                                 f"{rec.det_id} from frame {det.frame}")
            if det.gt_id is None:
                counts.fp += 1
                continue
            by_identity.setdefault(det.gt_id, []).append(rec.track_id)
        matched: dict[int, int] = {}
        for identity, track_ids in by_identity.items():
            keep = last_match.get(identity)
            chosen = keep if keep in track_ids else min(track_ids)
            counts.fp += len(track_ids) - 1
            matched[identity] = chosen
            overlap[(identity, chosen)] += 1
        counts.matches += len(matched)
        counts.fn += len(present) - len(matched)
        for identity, track_id in matched.items():
            if identity in last_match and last_match[identity] != track_id:
                counts.ids += 1
            last_match[identity] = track_id
    counts.idtp = _assignment_overlap(overlap)
    return counts


def _distance_counts(gt: Sequence, hyp: TrackerOutput, threshold: float) -> _Counts:
    if hyp.num_frames != gt.num_frames:
        raise ValueError(
            f"hypotheses cover {hyp.num_frames} frames, ground truth {gt.num_frames}")
    gt_frames = gt.gt_by_frame()
    counts = _Counts(gt_count=gt.gt_count())
    last_match: dict[int, int] = {}
    prev_matched: dict[int, int] = {}
    overlap: Counter = Counter()
    for t in range(gt.num_frames):
        recs = hyp.promoted_pairs(t)
        _check_frame_hyps(t, recs)
        counts.num_hyp += len(recs)
        present = gt_frames[t]
        identities = sorted(present)
        gt_centers = {i: np.array([(present[i].x1 + present[i].x2) / 2,
                                   (present[i].y1 + present[i].y2) / 2])
                      for i in identities}
        hyp_centers = {rec.track_id: np.array([(rec.box[0] + rec.box[2]) / 2,
                                               (rec.box[1] + rec.box[3]) / 2])
                       for rec in recs}
        for (g, gc) in gt_centers.items():
            for (h, hc) in hyp_centers.items():
                if float(np.hypot(*(gc - hc))) <= threshold:
                    overlap[(g, h)] += 1
        matched: dict[int, int] = {}
        free_h = set(hyp_centers)
        for identity in identities:
            h = prev_matched.get(identity)
            if h in free_h and \
                    float(np.hypot(*(gt_centers[identity] - hyp_centers[h]))) <= threshold:
                matched[identity] = h
                free_h.discard(h)
        rest_g = [i for i in identities if i not in matched]
        rest_h = sorted(free_h)
        if rest_g and rest_h:
            costs = np.full((len(rest_g), len(rest_h)), FORBIDDEN_COST)
            for a, g in enumerate(rest_g):
                for b, h in enumerate(rest_h):
                    d = float(np.hypot(*(gt_centers[g] - hyp_centers[h])))
                    if d <= threshold:
                        costs[a, b] = d
            for a, b in solve_min_cost_assignment(costs):
                if costs[a, b] < FORBIDDEN_COST:
                    matched[rest_g[a]] = rest_h[b]
        counts.matches += len(matched)
        counts.fn += len(identities) - len(matched)
        counts.fp += len(recs) - len(matched)
        for identity, track_id in matched.items():
            if identity in last_match and last_match[identity] != track_id:
                counts.ids += 1
            last_match[identity] = track_id
        prev_matched = matched
    counts.idtp = _assignment_overlap(overlap)
    return counts


def _assignment_overlap(overlap: Counter) -> int:
    """Max total per-frame co-occurrence under a one-to-one id mapping."""
    if not overlap:
        return 0
    identities = sorted({g for g, _ in overlap})
    tracks = sorted({h for _, h in overlap})
    matrix = np.zeros((len(identities), len(tracks)))
    for (g, h), n in overlap.items():
        matrix[identities.index(g), tracks.index(h)] = n
    total = 0
    for a, b in solve_min_cost_assignment(-matrix):
        total += int(matrix[a, b])
    return total


def _report_from_counts(counts: _Counts, per_sequence: list[dict]) -> MotReport:
    denom = max(1, counts.gt_count)
    errors = counts.fn + counts.fp + counts.ids
    mota = 1.0 - errors / denom if counts.gt_count or errors else 1.0
    idp = counts.idtp / counts.num_hyp if counts.num_hyp else 1.0
    idr = counts.idtp / counts.gt_count if counts.gt_count else 1.0
    idf1 = (2 * counts.idtp / (counts.gt_count + counts.num_hyp)
            if counts.gt_count + counts.num_hyp else 1.0)
    return MotReport(mota=mota, idf1=idf1, idp=idp, idr=idr, ids=counts.ids,
                     fp=counts.fp, fn=counts.fn, matches=counts.matches,
                     gt_count=counts.gt_count, num_hyp=counts.num_hyp,
                     per_sequence=per_sequence)


def evaluate(gt: Sequence, hyp: TrackerOutput, matching: str = "identity",
             distance_threshold: float = 0.1) -> MotReport:
    """Score one sequence's tracker output against ground truth."""
    if matching == "identity":
        counts = _identity_counts(gt, hyp)
    elif matching == "distance":
        counts = _distance_counts(gt, hyp, distance_threshold)
    else:
        raise ValueError(f"unknown matching mode {matching!r}")
    return _report_from_counts(counts, per_sequence=[])


def evaluate_many(pairs, matching: str = "identity",
                  distance_threshold: float = 0.1) -> MotReport:
    """Score (ground truth, output) pairs and merge raw counts."""
    total = _Counts()
    breakdown: list[dict] = []
    for name, gt, hyp in pairs:
        if matching == "identity":
            counts = _identity_counts(gt, hyp)
        elif matching == "distance":
            counts = _distance_counts(gt, hyp, distance_threshold)
        else:
            raise ValueError(f"unknown matching mode {matching!r}")
        breakdown.append({"name": name,
                          **_report_from_counts(counts, []).summary_dict()})
        total.fp += counts.fp
        total.fn += counts.fn
        total.ids += counts.ids
        total.matches += counts.matches
        total.gt_count += counts.gt_count
        total.num_hyp += counts.num_hyp
        total.idtp += counts.idtp
    return _report_from_counts(total, breakdown)


# ---------------------------------------------------------------------------
# occlusion decisions


def occlusion_report(gt: Sequence, hyp: TrackerOutput) -> OcclusionReport:
    det_lookup = gt.detection_lookup()
    detected: set[tuple[int, int]] = {
        (d.gt_id, d.frame) for d in gt.all_detections() if d.gt_id is not None}
    gt_frames = gt.gt_by_frame()

    events: dict[int, list[tuple[int, bool, int | None]]] = {}
    for t in range(hyp.num_frames):
        for rec in hyp.associations[t]:
            det = det_lookup.get(rec.det_id)
            identity = None if det is None else det.gt_id
            events.setdefault(rec.track_id, []).append((t, False, identity))
        for track_id in hyp.occluded[t]:
            events.setdefault(track_id, []).append((t, True, None))

    tp = fp = fn = tn = 0
    for track_id, track_events in events.items():
        track_events.sort(key=lambda e: (e[0], e[1]))
        followed: int | None = None
        for t, is_occ_flag, identity in track_events:
            if followed is not None and t < len(gt_frames) \
                    and followed in gt_frames[t]:
                truly_occluded = (followed, t) not in detected
                if is_occ_flag and truly_occluded:
                    tp += 1
                elif is_occ_flag:
                    fp += 1
                elif truly_occluded:
                    fn += 1
                else:
                    tn += 1
            if not is_occ_flag:
                followed = identity

    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    return OcclusionReport(accuracy=accuracy, recall=recall, precision=precision,
                           tp=tp, fp=fp, fn=fn, tn=tn)


def format_report(rows: dict[str, MotReport]) -> str:
    """Aligned method-by-metric text table."""
    headers = ["method", "MOTA", "IDF1", "IDS", "FP", "FN", "GT"]
    table = [headers]
    for name, rep in rows.items():
        table.append([name, f"{100 * rep.mota:.2f}", f"{100 * rep.idf1:.2f}",
                      str(rep.ids), str(rep.fp), str(rep.fn), str(rep.gt_count)])
    widths = [max(len(row[c]) for row in table) for c in range(len(headers))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
