"""
Matching
========
Two matchings between detections and ground truth:

- psi matching: every detection targets the same-class, same-image
  ground truth it overlaps most (IoU is the calibration target).
- greedy TP matching: COCO-style assignment at an IoU threshold tau,
  used for AP, recall and precision.
"""

from dataclasses import dataclass

from mocae.errors import DomainError
from mocae.geometry import iou_matrix


@dataclass(frozen=True)
class TargetPair:
    score: float
    target_iou: float
    class_id: int
    expert_id: int
    det_id: int = -1
    image_id: str = ""


@dataclass(frozen=True)
class DetectionMatch:
    det_id: int
    matched_gt_id: object  # int or None
    is_tp: bool
    iou_with_match: float
    ignored: bool = False


class MatchResult:
    """Per-detection outcome of a greedy match at one threshold."""

    def __init__(self, matches, tau, num_positives):
        self.tau = tau
        self.matches = matches
        self.num_positives = num_positives

    def __getitem__(self, det_id):
        return self.matches[det_id]

    def __len__(self):
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches.values())

    def tp_det_ids(self):
        return {m.det_id for m in self.matches.values() if m.is_tp}


# ============================================================================
# PSI MATCHING (CALIBRATION TARGETS)
# ============================================================================

def psi_targets(dets, gts):
    """
    Map each det_id to its psi-target IoU.

    Ignore-flagged ground truths never serve as targets; a detection with no
    same-class ground truth in its image gets 0.
    """
    if dets.kind != gts.kind:
        raise DomainError(f"geometry kinds differ: {dets.kind} vs {gts.kind}")
    targets = {}
    for image_id, class_id in dets.groups():
        group = dets.group(image_id, class_id)
        candidates = [g for g in gts.group(image_id, class_id) if not g.ignore]
        if not candidates:
            for det in group:
                targets[det.det_id] = 0.0
            continue
        overlaps = iou_matrix([d.box for d in group], [g.box for g in candidates])
        for det, row in zip(group, overlaps):
            targets[det.det_id] = float(row.max())
    return targets


def match_psi(dets, gts):
    """
    One (score, target IoU) pair per detection, in store order.

    Returns:
        list of TargetPair
    """
    targets = psi_targets(dets, gts)
    return [
        TargetPair(
            score=d.score,
            target_iou=targets[d.det_id],
            class_id=d.class_id,
            expert_id=d.expert_id,
            det_id=d.det_id,
            image_id=d.image_id,
        )
        for d in dets
    ]


# ============================================================================
# GREEDY TP MATCHING
# ============================================================================

def _outside(area, area_range):
    return area_range is not None and not (area_range[0] <= area <= area_range[1])


def _match_group(group, gt_group, tau, area_range):
    """Greedy assignment for one (image, class) group; group is score-ordered."""
    regular = [g for g in gt_group if not g.ignore and not _outside(g.box.area, area_range)]
    ignored = [g for g in gt_group if g.ignore or _outside(g.box.area, area_range)]
    ov_regular = iou_matrix([d.box for d in group], [g.box for g in regular])
    ov_ignored = iou_matrix([d.box for d in group], [g.box for g in ignored])
    taken = set()
    out = {}
    for row, det in enumerate(group):
        best, best_iou = None, -1.0
        for col, gt in enumerate(regular):
            if col in taken:
                continue
            value = ov_regular[row, col]
            if value >= tau and value > best_iou:
                best, best_iou = col, value
        if best is not None:
            taken.add(best)
            out[det.det_id] = DetectionMatch(det.det_id, regular[best].gt_id, True, float(best_iou))
            continue
        crowd, crowd_iou = None, -1.0
        for col, gt in enumerate(ignored):
            value = ov_ignored[row, col]
            if value >= tau and value > crowd_iou:
                crowd, crowd_iou = col, value
        if crowd is not None:
            out[det.det_id] = DetectionMatch(det.det_id, ignored[crowd].gt_id, False, float(crowd_iou), ignored=True)
        else:
            out[det.det_id] = DetectionMatch(
                det.det_id, None, False, 0.0, ignored=_outside(det.box.area, area_range)
            )
    return out


def greedy_tp_match(dets, gts, tau, area_range=None):
    """
    COCO-style greedy matching at IoU threshold tau.

    Per (image, class), detections are visited score-descending (det_id
    breaks ties); each takes the unmatched ground truth with the highest
    IoU >= tau (lower gt_id breaks ties). Ignore-flagged ground truths
    absorb matches without counting as TP or FP.

    Args:
        dets: DetectionStore
        gts: GroundTruthSet
        tau: float in (0, 1]
        area_range: optional (lo, hi) object-area range; objects outside
            it are ignored

    Returns:
        MatchResult
    """
    if not 0.0 < tau <= 1.0:
        raise DomainError(f"IoU threshold must be in (0, 1], got {tau}")
    if dets.kind != gts.kind:
        raise DomainError(f"geometry kinds differ: {dets.kind} vs {gts.kind}")
    matches = {}
    for image_id, class_id in dets.groups():
        matches.update(_match_group(dets.group(image_id, class_id), gts.group(image_id, class_id), tau, area_range))
    positives = {}
    for gt in gts:
        if not gt.ignore and not _outside(gt.box.area, area_range):
            positives[gt.class_id] = positives.get(gt.class_id, 0) + 1
    return MatchResult(matches, tau, positives)
