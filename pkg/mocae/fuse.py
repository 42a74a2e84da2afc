"""
Detection Fusion
================
Post-processing and aggregation of detections from several experts:
background removal, standard NMS, Linear/Gaussian Soft NMS, Score Voting,
Refining NMS (Soft NMS + Score Voting), top-k survival and the full
calibrate -> concatenate -> aggregate pipeline.

Every NMS flavour operates class-wise, per (image_id, class_id) group.
"""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from mocae import config
from mocae.calib import apply_calibrators
from mocae.detections import DetectionStore, concat_experts
from mocae.errors import ConfigError, DomainError
from mocae.geometry import AABB, AxisAlignedBox, ROTATED, iou_matrix
from mocae.runtime import parallel_map

# ============================================================================
# CONFIGURATION
# ============================================================================


@dataclass
class FusionConfig:
    """Aggregation hyper-parameters; iou_nms=None resolves from the geometry kind."""

    nms_kind: str = "soft-linear"
    iou_nms: float = None
    sigma_nms: float = config.SIGMA_NMS
    score_voting: bool = True
    sigma_sv: float = config.SIGMA_SV
    background_threshold: float = config.FUSION_BACKGROUND_THRESHOLD
    top_k: int = config.TOP_K
    prune_after_soft: float = config.PRUNE_AFTER_SOFT

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.nms_kind not in config.NMS_KINDS:
            raise ConfigError(f"nms_kind must be one of {config.NMS_KINDS}, got {self.nms_kind!r}")
        if self.iou_nms is not None and not 0.0 < self.iou_nms <= 1.0:
            raise ConfigError(f"iou_nms must be in (0, 1], got {self.iou_nms}")
        if not self.sigma_nms > 0:
            raise ConfigError(f"sigma_nms must be positive, got {self.sigma_nms}")
        if not self.sigma_sv > 0:
            raise ConfigError(f"sigma_sv must be positive, got {self.sigma_sv}")
        if not 0.0 <= self.background_threshold <= 1.0:
            raise ConfigError(f"background_threshold must be in [0, 1], got {self.background_threshold}")
        if isinstance(self.top_k, bool) or not isinstance(self.top_k, int) or self.top_k < 1:
            raise ConfigError(f"top_k must be a positive integer, got {self.top_k!r}")
        if not 0.0 <= self.prune_after_soft <= 1.0:
            raise ConfigError(f"prune_after_soft must be in [0, 1], got {self.prune_after_soft}")
        return self

    def resolved_iou(self, kind):
        if self.iou_nms is not None:
            return self.iou_nms
        return config.IOU_NMS_ROTATED if kind == ROTATED else config.IOU_NMS

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self):
        return asdict(self)


# ============================================================================
# BASIC FILTERS
# ============================================================================


def background_removal(store, threshold):
    """Keep detections with score >= threshold (boundary inclusive)."""
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"background threshold must be in [0, 1], got {threshold}")
    return store.filter(lambda d: d.score >= threshold)


def top_k_survival(store, k):
    """Per image, across classes, keep the k highest-scoring detections (det_id breaks ties)."""
    if k < 0:
        raise DomainError(f"top-k must be non-negative, got {k}")
    kept = []
    for dets in store.by_image().values():
        ranked = sorted(dets, key=lambda d: (-d.score, d.det_id))
        kept.extend(ranked[:k])
    return store.with_detections(kept)


def _per_group(store, fn):
    """Run fn on every (image, class) group and flatten the results in group order."""
    groups = [store.group(image_id, class_id) for image_id, class_id in store.groups()]
    out = []
    for part in parallel_map(fn, groups):
        out.extend(part)
    return out


# ============================================================================
# STANDARD NMS
# ============================================================================


def _nms_group(group, iou_thr):
    # group arrives score-descending with det_id tiebreak
    overlaps = iou_matrix([d.box for d in group], [d.box for d in group])
    suppressed = [False] * len(group)
    keep = []
    for i, det in enumerate(group):
        if suppressed[i]:
            continue
        keep.append(det)
        for j in range(i + 1, len(group)):
            if overlaps[i, j] >= iou_thr:
                suppressed[j] = True
    return keep


def standard_nms(store, iou_thr):
    """
    Class-wise greedy NMS: repeatedly keep the max-scoring detection and
    discard the remaining ones with IoU >= iou_thr against it.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise DomainError(f"NMS IoU threshold must be in (0, 1], got {iou_thr}")
    return store.with_detections(_per_group(store, lambda g: _nms_group(g, iou_thr)))


# ============================================================================
# SOFT NMS
# ============================================================================


def _soft_group(group, linear, iou_thr, sigma):
    """
    Rescored scores for one group.

    Returns:
        list of (detection, rescored score) for every detection of the group
    """
    overlaps = iou_matrix([d.box for d in group], [d.box for d in group])
    scores = [d.score for d in group]
    remaining = list(range(len(group)))
    out = []
    while remaining:
        best = max(remaining, key=lambda i: (scores[i], -group[i].det_id))
        remaining.remove(best)
        out.append((group[best], scores[best]))
        for j in remaining:
            overlap = overlaps[best, j]
            if linear:
                if overlap >= iou_thr:
                    scores[j] *= 1.0 - overlap
            else:
                scores[j] *= math.exp(-(overlap * overlap) / sigma)
    return out


def soft_rescore(store, cfg):
    """{det_id: score after Soft NMS} for every detection, pruned or not."""
    if cfg.nms_kind not in ("soft-linear", "soft-gaussian"):
        raise DomainError(f"soft NMS needs a soft nms_kind, got {cfg.nms_kind!r}")
    linear = cfg.nms_kind == "soft-linear"
    iou_thr = cfg.resolved_iou(store.kind)
    pairs = _per_group(store, lambda g: _soft_group(g, linear, iou_thr, cfg.sigma_nms))
    return {det.det_id: float(score) for det, score in pairs}


def soft_nms(store, cfg):
    """
    Linear or Gaussian Soft NMS.

    Linear: an overlap >= iou_nms with the selected detection multiplies
    the score by (1 - IoU). Gaussian: every score is multiplied by
    exp(-IoU^2 / sigma_nms). Rescored detections below prune_after_soft
    are dropped at the end.
    """
    rescored = soft_rescore(store, cfg)
    kept = store.with_scores(rescored)
    return kept.filter(lambda d: d.score >= cfg.prune_after_soft)


# ============================================================================
# SCORE VOTING
# ============================================================================


def _vote(survivor, pool, sigma_sv):
    if not pool:
        return survivor.box
    overlaps = iou_matrix([survivor.box], [d.box for d in pool])[0]
    mask = overlaps > 0.0
    if not mask.any():
        return survivor.box
    corners = np.array([d.box.corners() for d in pool], dtype=float)[mask]
    weights = np.array([d.score for d in pool], dtype=float)[mask] * np.exp(-((1.0 - overlaps[mask]) ** 2) / sigma_sv)
    live = weights > 0.0
    if not live.any():
        return survivor.box
    corners, weights = corners[live], weights[live]
    if np.all(corners == corners[0]):
        # a single box (or identical boxes) averages to itself
        refined = corners[0]
    else:
        refined = (weights / weights.sum()) @ corners
    if tuple(refined) == survivor.box.corners():
        return survivor.box
    return AxisAlignedBox(*(float(v) for v in refined))


def score_voting(survivors, raw, sigma_sv=config.SIGMA_SV):
    """
    Refine each survivor's box with the confidence- and IoU-weighted mean of
    the same-image, same-class raw boxes overlapping it.

    Weights are p_j * exp(-(1 - IoU)^2 / sigma_sv); scores are untouched.
    Rotated boxes are returned unchanged.
    """
    if not sigma_sv > 0:
        raise DomainError(f"sigma_sv must be positive, got {sigma_sv}")
    if survivors.kind != AABB:
        return survivors
    boxes = {}
    for image_id, class_id in survivors.groups():
        pool = raw.group(image_id, class_id)
        for det in survivors.group(image_id, class_id):
            box = _vote(det, pool, sigma_sv)
            if box is not det.box:
                boxes[det.det_id] = box
    return survivors.with_boxes(boxes)


# ============================================================================
# REFINING NMS & PIPELINE
# ============================================================================


def refining_nms(store, cfg):
    """
    NMS (soft or standard per cfg) followed by Score Voting against the
    pre-NMS store, then top-k survival.

    With Soft NMS the voting pool carries the rescored scores.
    """
    if len(store) == 0:
        return store
    if cfg.nms_kind == "standard":
        survivors = standard_nms(store, cfg.resolved_iou(store.kind))
        pool = store
    else:
        rescored = soft_rescore(store, cfg)
        pool = store.with_scores(rescored)
        survivors = pool.filter(lambda d: d.score >= cfg.prune_after_soft)
    if cfg.score_voting:
        survivors = score_voting(survivors, pool, cfg.sigma_sv)
    return top_k_survival(survivors, cfg.top_k)


def postprocess(store, cfg):
    """Detector-style post-processing: background removal, aggregation, top-k."""
    return refining_nms(background_removal(store, cfg.background_threshold), cfg)


def fuse_pipeline(expert_stores, calibrator_sets, cfg=None):
    """
    Mixture of calibrated experts.

    Args:
        expert_stores: list of DetectionStore, one per expert
        calibrator_sets: list of CalibratorSet (identity sets give Vanilla MoE)
        cfg: FusionConfig

    Returns:
        DetectionStore of fused detections; expert_id is the list position
    """
    cfg = cfg or FusionConfig()
    expert_stores, calibrator_sets = list(expert_stores), list(calibrator_sets)
    if len(expert_stores) != len(calibrator_sets):
        raise ConfigError(
            f"{len(expert_stores)} detection store(s) but {len(calibrator_sets)} calibrator set(s)"
        )
    if not expert_stores:
        return DetectionStore.empty()
    calibrated = [apply_calibrators(s, c) for s, c in zip(expert_stores, calibrator_sets)]
    return postprocess(concat_experts(calibrated), cfg)


def contribution_shares(store, experts=None):
    """Fraction of surviving detections contributed by each expert."""
    experts = sorted(set(experts or ()) | set(store.experts))
    total = len(store)
    counts = {e: 0 for e in experts}
    for det in store:
        counts[det.expert_id] += 1
    return {e: (counts[e] / total if total else 0.0) for e in experts}
