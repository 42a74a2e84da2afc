"""
Oracle Harness
==============
Synthetic scenes with controllable per-expert miscalibration, the oracle
mixture (every score replaced by its calibration target), a from-definition
AP reference and the AP-optimality check of calibrated fusion.

Optimality statement checked here: if every detection is scored by its
target IoU and post-processing keeps exactly one detection per coverable
ground truth without leaving duplicates above tau, AP@tau of class c equals
N_TP / M, where N_TP counts ground truths covered at IoU >= tau by the union
of the experts and M counts all ground truths of c.
"""

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from tabulate import tabulate

from mocae import config
from mocae.calib import CalibratorSet, fit_calibrator_set
from mocae.detections import Detection, DetectionStore, GroundTruth, GroundTruthSet, concat_experts
from mocae.errors import CalibrationWarning, DomainError
from mocae.fuse import FusionConfig, contribution_shares, fuse_pipeline, standard_nms
from mocae.geometry import AxisAlignedBox, iou
from mocae.matching import greedy_tp_match, psi_targets
from mocae.metrics import average_recall, build_bins, coco_ap, laece
from mocae.runtime import parallel_map

MISCALIBRATIONS = ("identity", "power", "affine")

# ============================================================================
# SCENE SPECIFICATION
# ============================================================================


@dataclass(frozen=True)
class ExpertSpec:
    """
    One synthetic detector.

    noise: corner jitter as a fraction of the box side
    miss_prob: probability that a ground truth gets no detection
    duplicates: Poisson mean of extra detections per detected ground truth
    fp_rate: Poisson mean of false positives per image
    miscalibration: "identity", "power" (x ** gamma) or "affine" (a * x + b)
    """

    noise: float = 0.05
    miss_prob: float = 0.2
    duplicates: float = 0.5
    fp_rate: float = 1.0
    miscalibration: str = "identity"
    gamma: float = 1.0
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.miscalibration not in MISCALIBRATIONS:
            raise DomainError(f"miscalibration must be one of {MISCALIBRATIONS}, got {self.miscalibration!r}")
        if self.noise < 0 or self.duplicates < 0 or self.fp_rate < 0:
            raise DomainError("noise, duplicates and fp_rate must be non-negative")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise DomainError(f"miss_prob must be in [0, 1], got {self.miss_prob}")
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")

    def miscalibrate(self, true_score):
        if self.miscalibration == "power":
            value = true_score ** self.gamma
        elif self.miscalibration == "affine":
            value = self.a * true_score + self.b
        else:
            value = true_score
        return float(min(1.0, max(0.0, value)))


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """
    Seeded scene generator settings.

    min_gt_separation is the largest pairwise IoU allowed between ground
    truths of one image (0 keeps them disjoint).
    """

    num_images: int = 10
    gts_per_image: int = 4
    num_classes: int = 2
    experts: tuple = (ExpertSpec(), ExpertSpec())
    min_gt_separation: float = 0.0
    seed: int = config.ORACLE_SEED
    image_width: float = config.IMAGE_WIDTH
    image_height: float = config.IMAGE_HEIGHT
    min_box_size: float = config.MIN_BOX_SIZE
    max_box_size: float = config.MAX_BOX_SIZE

    def __post_init__(self):
        if self.num_images < 1 or self.gts_per_image < 0 or self.num_classes < 1:
            raise DomainError("num_images and num_classes must be >= 1, gts_per_image >= 0")
        if not self.experts:
            raise DomainError("a scene needs at least one expert")
        if not 0 < self.min_box_size <= self.max_box_size:
            raise DomainError("box sizes must satisfy 0 < min <= max")

    def to_dict(self):
        return asdict(self)


def demo_spec(seed=config.DEMO_SEED, num_images=config.DEMO_IMAGES):
    """Two experts with equal recall: A overconfident with loose boxes, B underconfident with tight ones."""
    return SyntheticSceneSpec(
        num_images=num_images,
        gts_per_image=4,
        num_classes=2,
        experts=(
            ExpertSpec(noise=0.15, miss_prob=0.2, duplicates=0.5, fp_rate=0.5, miscalibration="power", gamma=0.25),
            ExpertSpec(noise=0.03, miss_prob=0.2, duplicates=0.5, fp_rate=0.5, miscalibration="power", gamma=4.0),
        ),
        seed=seed,
    )


# ============================================================================
# SCENE GENERATION
# ============================================================================


def _random_box(rng, spec):
    w = rng.uniform(spec.min_box_size, spec.max_box_size)
    h = rng.uniform(spec.min_box_size, spec.max_box_size)
    x = rng.uniform(0.0, spec.image_width - w)
    y = rng.uniform(0.0, spec.image_height - h)
    return AxisAlignedBox(float(x), float(y), float(x + w), float(y + h))


def _place_ground_truths(rng, spec):
    placed = []
    for _ in range(spec.gts_per_image):
        for _ in range(config.MAX_PLACEMENT_ATTEMPTS):
            box = _random_box(rng, spec)
            if all(iou(box, other) <= spec.min_gt_separation for other, _ in placed):
                placed.append((box, int(rng.integers(spec.num_classes))))
                break
    if len(placed) < spec.gts_per_image:
        warnings.warn(
            f"placed {len(placed)} of {spec.gts_per_image} ground truths; the image is too crowded", CalibrationWarning
        )
    return placed


def _jitter(rng, box, noise, spec):
    if noise == 0:
        return box
    w, h = box.width, box.height
    dx = rng.uniform(-noise, noise, size=2) * w
    dy = rng.uniform(-noise, noise, size=2) * h
    x_min = min(max(box.x_min + dx[0], 0.0), spec.image_width)
    x_max = min(max(box.x_max + dx[1], 0.0), spec.image_width)
    y_min = min(max(box.y_min + dy[0], 0.0), spec.image_height)
    y_max = min(max(box.y_max + dy[1], 0.0), spec.image_height)
    if x_max <= x_min or y_max <= y_min:
        return box
    return AxisAlignedBox(float(x_min), float(y_min), float(x_max), float(y_max))


def _false_positive(rng, gts, spec):
    """A near miss of a random ground truth (same class), else a background box."""
    for _ in range(config.MAX_PLACEMENT_ATTEMPTS):
        if gts:
            anchor, class_id = gts[int(rng.integers(len(gts)))]
            shift_x = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0) * anchor.width
            shift_y = rng.uniform(-0.5, 0.5) * anchor.height
            x_min = min(max(anchor.x_min + shift_x, 0.0), spec.image_width - 1.0)
            y_min = min(max(anchor.y_min + shift_y, 0.0), spec.image_height - 1.0)
            x_max = min(x_min + anchor.width, spec.image_width)
            y_max = min(y_min + anchor.height, spec.image_height)
            box = AxisAlignedBox(float(x_min), float(y_min), float(x_max), float(y_max))
        else:
            box, class_id = _random_box(rng, spec), int(rng.integers(spec.num_classes))
        if all(iou(box, other) < config.FP_MAX_IOU for other, _ in gts):
            return box, class_id
    return None


def _target(box, class_id, gts):
    overlaps = [iou(box, g) for g, c in gts if c == class_id]
    return max(overlaps) if overlaps else 0.0


def gen_synthetic(spec):
    """
    Generate one seeded scene set.

    Returns:
        (list of raw DetectionStore, one per expert, GroundTruthSet)
    """
    rng = np.random.default_rng(spec.seed)
    objects = []
    per_expert = [[] for _ in spec.experts]
    for index in range(spec.num_images):
        image_id = str(index + 1)
        gts = _place_ground_truths(rng, spec)
        for box, class_id in gts:
            objects.append(GroundTruth(image_id, class_id, box, gt_id=len(objects)))
        for e, expert in enumerate(spec.experts):
            out = per_expert[e]
            for box, class_id in gts:
                if rng.random() < expert.miss_prob:
                    continue
                for _ in range(1 + int(rng.poisson(expert.duplicates))):
                    det_box = _jitter(rng, box, expert.noise, spec)
                    score = expert.miscalibrate(_target(det_box, class_id, gts))
                    out.append(Detection(image_id, class_id, det_box, score, expert_id=e, det_id=len(out)))
            for _ in range(int(rng.poisson(expert.fp_rate))):
                placed = _false_positive(rng, gts, spec)
                if placed is None:
                    continue
                fp_box, class_id = placed
                score = expert.miscalibrate(_target(fp_box, class_id, gts))
                out.append(Detection(image_id, class_id, fp_box, score, expert_id=e, det_id=len(out)))
    return [DetectionStore(dets) for dets in per_expert], GroundTruthSet(objects)


# ============================================================================
# ORACLE MIXTURE & REFERENCES
# ============================================================================


def make_oracle_moe(stores, gts):
    """Replace every score by its psi-target IoU; boxes untouched."""
    return [store.with_scores(psi_targets(store, gts)) for store in stores]


def brute_force_ap(dets, gts, tau, rule="coco101"):
    """
    AP@tau from the definition, independent of coco_ap.

    Greedy matching, cumulative counts and the precision envelope are all
    recomputed with plain loops.
    """
    npos = {}
    for g in gts:
        if not g.ignore:
            npos[g.class_id] = npos.get(g.class_id, 0) + 1
    if not npos:
        return 0.0

    outcome = {}
    for image_id, class_id in {(d.image_id, d.class_id) for d in dets}:
        candidates = [d for d in dets if d.image_id == image_id and d.class_id == class_id]
        candidates.sort(key=lambda d: (-d.score, d.det_id))
        objects = sorted(
            [g for g in gts if g.image_id == image_id and g.class_id == class_id], key=lambda g: g.gt_id
        )
        used = set()
        for d in candidates:
            best, best_iou = None, -1.0
            for g in objects:
                if g.ignore or g.gt_id in used:
                    continue
                value = iou(d.box, g.box)
                if value >= tau and value > best_iou:
                    best, best_iou = g, value
            if best is not None:
                used.add(best.gt_id)
                outcome[d.det_id] = "tp"
            elif any(g.ignore and iou(d.box, g.box) >= tau for g in objects):
                outcome[d.det_id] = "ignore"
            else:
                outcome[d.det_id] = "fp"

    step = 1.0 / (config.RECALL_POINTS - 1)
    thresholds = [k * step for k in range(config.RECALL_POINTS - 1)] + [1.0]
    values = []
    for class_id, m in sorted(npos.items()):
        ranked = sorted(
            [d for d in dets if d.class_id == class_id and outcome[d.det_id] != "ignore"],
            key=lambda d: (-d.score, d.det_id),
        )
        n = len(ranked)
        if n == 0:
            values.append(0.0)
            continue
        recall, precision = [], []
        for k in range(1, n + 1):
            hits = sum(1 for d in ranked[:k] if outcome[d.det_id] == "tp")
            recall.append(hits / m)
            precision.append(hits / k)
        envelope = [max(precision[k:]) for k in range(n)]
        if rule == "continuous":
            terms = [(recall[k] - (recall[k - 1] if k else 0.0)) * envelope[k] for k in range(n)]
            values.append(math.fsum(terms))
        else:
            sampled = []
            for r in thresholds:
                first = next((k for k in range(n) if recall[k] >= r), None)
                sampled.append(envelope[first] if first is not None else 0.0)
            values.append(math.fsum(sampled) / len(sampled))
    return math.fsum(values) / len(values)


def reference_nms(store, gts, tau, iou_thr=config.IOU_NMS):
    """
    Post-processing that satisfies the optimality assumption by construction.

    For each ground truth, only the highest-scoring detection with IoU >= tau
    survives (det_id breaks ties); detections covering no ground truth go
    through standard NMS.
    """
    covering = {}
    winners = set()
    for image_id, class_id in store.groups():
        group = store.group(image_id, class_id)
        for g in gts.group(image_id, class_id):
            if g.ignore:
                continue
            hits = [d for d in group if iou(d.box, g.box) >= tau]
            for d in hits:
                covering[d.det_id] = True
            if hits:
                winners.add(min(hits, key=lambda d: (-d.score, d.det_id)).det_id)
    rest = standard_nms(store.filter(lambda d: d.det_id not in covering), iou_thr)
    kept = [d for d in store if d.det_id in winners] + list(rest)
    return store.with_detections(kept)


def expected_ap(raw_union, gts, tau):
    """Class mean of N_TP / M: ground truths covered at IoU >= tau by any raw detection."""
    covered = {}
    totals = {}
    for g in gts:
        if g.ignore:
            continue
        totals[g.class_id] = totals.get(g.class_id, 0) + 1
        if any(iou(d.box, g.box) >= tau for d in raw_union.group(g.image_id, g.class_id)):
            covered[g.class_id] = covered.get(g.class_id, 0) + 1
    if not totals:
        return 0.0, 0, 0
    value = math.fsum(covered.get(c, 0) / m for c, m in sorted(totals.items())) / len(totals)
    return value, sum(covered.values()), sum(totals.values())


def assumption_holds(fused, raw_union, gts, tau):
    """No coverable ground truth lost and no duplicate scored >= tau left behind."""
    result = greedy_tp_match(fused, gts, tau)
    for det in fused:
        m = result[det.det_id]
        if not m.is_tp and not m.ignored and det.score >= tau:
            return False
    matched = {m.matched_gt_id for m in result if m.is_tp}
    for g in gts:
        if g.ignore or g.gt_id in matched:
            continue
        if any(iou(d.box, g.box) >= tau for d in raw_union.group(g.image_id, g.class_id)):
            return False
    return True


# ============================================================================
# OPTIMALITY CHECK
# ============================================================================


@dataclass
class SceneCheck:
    scene: int
    seed: int
    tau: float
    n_tp: int
    m: int
    ap: float
    expected: float
    passed: bool
    rejections: int = 0


@dataclass
class OracleCheckReport:
    checks: list = field(default_factory=list)
    taus: tuple = config.ORACLE_TAUS
    post: str = "fusion"

    @property
    def num_scenes(self):
        return len({c.scene for c in self.checks})

    @property
    def num_passed(self):
        scenes = {}
        for c in self.checks:
            scenes[c.scene] = scenes.get(c.scene, True) and c.passed
        return sum(1 for ok in scenes.values() if ok)

    @property
    def rejections(self):
        per_scene = {c.scene: c.rejections for c in self.checks}
        return sum(per_scene.values())

    @property
    def passed(self):
        return self.num_passed == self.num_scenes

    def to_dict(self):
        return {
            "post": self.post,
            "taus": list(self.taus),
            "scenes": self.num_scenes,
            "passed": self.num_passed,
            "rejections": self.rejections,
            "checks": [asdict(c) for c in self.checks],
        }

    def to_table(self):
        rows = []
        for tau in self.taus:
            part = [c for c in self.checks if c.tau == tau]
            worst = max((abs(c.ap - c.expected) for c in part), default=0.0)
            rows.append([f"{tau:.2f}", len(part), sum(c.passed for c in part), f"{worst:.3e}"])
        headers = ["tau", "scenes", "passed", "max |AP - N_TP/M|"]
        return tabulate(rows, headers=headers, tablefmt="simple", disable_numparse=True)


def _fusion_config(cfg):
    if cfg is None:
        return FusionConfig(nms_kind="standard", score_voting=False, top_k=config.TOP_K_LVIS)
    if cfg.nms_kind != "standard":
        raise DomainError(f"the optimality check runs on standard NMS, got {cfg.nms_kind!r}")
    return cfg


def _check_scene(index, spec, cfg, taus, post):
    rejections = 0
    for attempt in range(config.MAX_SCENE_ATTEMPTS):
        seed = spec.seed + index * config.MAX_SCENE_ATTEMPTS + attempt
        raw, gts = gen_synthetic(replace(spec, seed=seed))
        oracle = make_oracle_moe(raw, gts)
        merged = concat_experts(oracle)
        checks = []
        held = True
        for tau in taus:
            if post == "reference":
                fused = reference_nms(merged, gts, tau, cfg.resolved_iou(merged.kind))
            else:
                fused = fuse_pipeline(oracle, [CalibratorSet.identity() for _ in oracle], cfg)
            if not assumption_holds(fused, merged, gts, tau):
                held = False
                break
            expected, n_tp, m = expected_ap(merged, gts, tau)
            ap = coco_ap(fused, gts, [tau], max_dets=None, rule="continuous")["ap"]
            checks.append(
                SceneCheck(index, seed, tau, n_tp, m, ap, expected, abs(ap - expected) <= config.ORACLE_TOLERANCE)
            )
        if held:
            return [replace(c, rejections=rejections) for c in checks]
        rejections += 1
    # every attempt violated the assumption; report the last one as failed
    return [SceneCheck(index, seed, tau, 0, 0, float("nan"), float("nan"), False, rejections) for tau in taus]


def verify_theorem(spec=None, cfg=None, taus=config.ORACLE_TAUS, num_scenes=config.ORACLE_SCENES, post="fusion"):
    """
    Check AP@tau == N_TP / M on seeded oracle-scored scenes.

    Args:
        spec: SyntheticSceneSpec; scene s uses a seed derived from spec.seed
        cfg: FusionConfig with standard NMS (default: IoU 0.65, no voting)
        taus: IoU thresholds checked per scene
        num_scenes: number of scenes
        post: "fusion" (fuse_pipeline) or "reference" (reference_nms)

    Returns:
        OracleCheckReport; scenes violating the post-processing assumption
        are regenerated and counted as rejections
    """
    if post not in ("fusion", "reference"):
        raise DomainError(f"post must be 'fusion' or 'reference', got {post!r}")
    spec = spec or SyntheticSceneSpec()
    cfg = _fusion_config(cfg)
    taus = tuple(taus)
    per_scene = parallel_map(lambda s: _check_scene(s, spec, cfg, taus, post), range(num_scenes))
    return OracleCheckReport([c for checks in per_scene for c in checks], taus, post)


# ============================================================================
# MISCALIBRATION DEMO
# ============================================================================


@dataclass
class DemoReport:
    table: pd.DataFrame
    shares: dict

    def to_dict(self):
        return {
            "models": self.table.to_dict(orient="records"),
            "shares": {name: {str(e): v for e, v in s.items()} for name, s in self.shares.items()},
        }

    def to_table(self):
        scale, places = config.PERCENT_SCALE, config.DECIMAL_PLACES
        rows = [
            [r["model"]] + [f"{r[k] * scale:.{places}f}" for k in ("ap", "ap50", "ap75", "ar", "laece")]
            for r in self.table.to_dict(orient="records")
        ]
        headers = ["Model", "AP", "AP50", "AP75", "AR", "LaECE"]
        models = tabulate(rows, headers=headers, tablefmt="simple", disable_numparse=True)
        share_rows = [
            [name] + [f"{v * scale:.{places}f}" for _, v in sorted(s.items())] for name, s in self.shares.items()
        ]
        experts = sorted(next(iter(self.shares.values())))
        headers = ["Fusion"] + [f"expert {e} %" for e in experts]
        shares = tabulate(share_rows, headers=headers, tablefmt="simple", disable_numparse=True)
        return models + "\n\n" + shares

    def row(self, model):
        return self.table[self.table["model"] == model].iloc[0]


def _final(raw, cfg):
    return [standard_nms(store, cfg.resolved_iou(store.kind)) for store in raw]


def _summary(name, dets, gts):
    metrics = coco_ap(dets, gts)
    return {
        "model": name,
        "ap": metrics["ap"],
        "ap50": metrics["ap50"],
        "ap75": metrics["ap75"],
        "ar": average_recall(dets, gts),
        "laece": laece(build_bins(dets, gts)) if len(dets) else 0.0,
    }


def miscalibration_demo(spec=None, cfg=None, mode="ca", method="ir"):
    """
    Single experts vs. vanilla mixture vs. calibrated mixture.

    Each expert's final detections are its standard-NMS output. Calibrators
    are fitted on a held-out scene set drawn with seed + 1.

    Returns:
        DemoReport with per-model AP / AP50 / AP75 / AR / LaECE and the
        per-expert survivor shares of both mixtures
    """
    spec = spec or demo_spec()
    cfg = cfg or FusionConfig(nms_kind="standard", score_voting=False)
    test_raw, test_gts = gen_synthetic(spec)
    held_raw, held_gts = gen_synthetic(replace(spec, seed=spec.seed + 1))
    test = _final(test_raw, cfg)
    held = _final(held_raw, cfg)

    calibrators = [fit_calibrator_set(store, held_gts, mode, method) for store in held]
    vanilla = fuse_pipeline(test, [CalibratorSet.identity() for _ in test], cfg)
    calibrated = fuse_pipeline(test, calibrators, cfg)

    rows = [_summary(f"expert {e}", store, test_gts) for e, store in enumerate(test)]
    rows.append(_summary("vanilla MoE", vanilla, test_gts))
    rows.append(_summary("calibrated MoE", calibrated, test_gts))
    experts = range(len(test))
    shares = {
        "vanilla": contribution_shares(vanilla, experts),
        "calibrated": contribution_shares(calibrated, experts),
    }
    return DemoReport(pd.DataFrame(rows, columns=["model", "ap", "ap50", "ap75", "ar", "laece"]), shares)
