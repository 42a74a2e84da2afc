"""
Evaluation Metrics
==================
Localisation-aware calibration errors, reliability-diagram data, COCO-style
AP / AR and the sweep studies built on top of them.

Calibration errors (per class c, averaged over classes with detections):
- LaECE = sum_j |D_j| / |D| * |mean_conf_j - precision_j * mean_iou_j|
- LaACE = mean over bins of the same gap (non-empty bins by default)
- LaMCE = max over non-empty bins of the same gap
The reduced form uses precision_j = 1 and the psi-target IoU of every
detection; the precision form validates TPs at tau and averages IoU over
TPs only.

Bin j covers [j/J, (j+1)/J); the last bin is closed at 1.0.
"""

import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from tabulate import tabulate

from mocae import config
from mocae.calib import CalibratorSet, apply_calibrators, fit_calibrator_set
from mocae.errors import CalibrationWarning, DomainError
from mocae.fuse import FusionConfig, background_removal, fuse_pipeline, standard_nms, top_k_survival
from mocae.matching import greedy_tp_match, psi_targets
from mocae.runtime import parallel_map

BIN_COLUMNS = ["class", "bin", "lo", "hi", "count", "mean_conf", "mean_iou", "precision"]
WEIGHTINGS = ("reduced", "precision")
AP_RULES = ("coco101", "continuous")

# ============================================================================
# RELIABILITY BINS
# ============================================================================


@dataclass
class ReliabilityBins:
    """
    J-bin summary per class.

    table columns: class, bin, lo, hi, count, mean_conf, mean_iou, precision
    (J rows per class that has at least one detection).
    """

    num_bins: int
    table: pd.DataFrame
    weighting: str = "reduced"
    tau: float = None

    def classes(self):
        return sorted(int(c) for c in self.table["class"].unique())

    @property
    def total(self):
        return int(self.table["count"].sum()) if len(self.table) else 0


def bin_index(score, num_bins):
    return min(int(math.floor(score * num_bins)), num_bins - 1)


def _bins_from_frame(frame, num_bins, weighting, tau):
    """frame columns: class, score, iou, tp (iou only counted where tp)."""
    if num_bins < 1:
        raise DomainError(f"bin count must be >= 1, got {num_bins}")
    if frame.empty:
        return ReliabilityBins(num_bins, pd.DataFrame(columns=BIN_COLUMNS), weighting, tau)
    frame = frame.copy()
    frame["bin"] = [bin_index(s, num_bins) for s in frame["score"]]
    frame["tp_iou"] = frame["iou"].where(frame["tp"], 0.0)
    grouped = frame.groupby(["class", "bin"]).agg(
        count=("score", "size"),
        conf_sum=("score", "sum"),
        iou_sum=("iou", "sum"),
        tp=("tp", "sum"),
        tp_iou_sum=("tp_iou", "sum"),
    )
    classes = sorted(frame["class"].unique())
    full = pd.MultiIndex.from_product([classes, range(num_bins)], names=["class", "bin"])
    grouped = grouped.reindex(full, fill_value=0).reset_index()

    count = grouped["count"].astype(int)
    safe = count.where(count > 0, 1)
    table = pd.DataFrame(
        {
            "class": grouped["class"].astype(int),
            "bin": grouped["bin"].astype(int),
            "lo": grouped["bin"] / num_bins,
            "hi": (grouped["bin"] + 1) / num_bins,
            "count": count,
            "mean_conf": (grouped["conf_sum"] / safe).where(count > 0, 0.0),
        }
    )
    if weighting == "reduced":
        table["mean_iou"] = (grouped["iou_sum"] / safe).where(count > 0, 0.0)
        table["precision"] = np.where(count > 0, 1.0, 0.0)
    else:
        tp = grouped["tp"].astype(int)
        table["mean_iou"] = (grouped["tp_iou_sum"] / tp.where(tp > 0, 1)).where(tp > 0, 0.0)
        table["precision"] = (tp / safe).where(count > 0, 0.0)
    return ReliabilityBins(num_bins, table[BIN_COLUMNS], weighting, tau)


def bins_from_pairs(pairs, num_bins=config.NUM_BINS):
    """
    Reduced-form bins straight from (score, target) pairs.

    Args:
        pairs: TargetPair objects or (score, target[, class_id]) tuples
    """
    rows = []
    for p in pairs:
        if hasattr(p, "score"):
            rows.append((p.class_id, p.score, p.target_iou))
        else:
            rows.append((p[2] if len(p) > 2 else 0, p[0], p[1]))
    frame = pd.DataFrame(rows, columns=["class", "score", "iou"])
    frame["tp"] = True
    return _bins_from_frame(frame, num_bins, "reduced", None)


def build_bins(dets, gts, num_bins=config.NUM_BINS, weighting="reduced", tau=config.LAECE_TAU, max_dets=None):
    """
    Reliability bins for a detection set.

    Args:
        dets: DetectionStore
        gts: GroundTruthSet
        num_bins: J
        weighting: "reduced" (psi targets, precision 1) or "precision"
            (greedy TPs at tau, IoU averaged over TPs)
        tau: TP validation threshold of the precision weighting
        max_dets: optional per-image cap applied first

    Returns:
        ReliabilityBins
    """
    if weighting not in WEIGHTINGS:
        raise DomainError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    if max_dets is not None:
        dets = top_k_survival(dets, max_dets)
    if weighting == "reduced":
        targets = psi_targets(dets, gts)
        rows = [(d.class_id, d.score, targets[d.det_id], True) for d in dets]
    else:
        result = greedy_tp_match(dets, gts, tau)
        rows = []
        for d in dets:
            m = result[d.det_id]
            if m.ignored:
                continue
            rows.append((d.class_id, d.score, m.iou_with_match, m.is_tp))
    frame = pd.DataFrame(rows, columns=["class", "score", "iou", "tp"])
    return _bins_from_frame(frame, num_bins, weighting, tau if weighting == "precision" else None)


# ============================================================================
# CALIBRATION ERRORS
# ============================================================================


def _gaps(bins):
    t = bins.table
    return (t["mean_conf"] - t["precision"] * t["mean_iou"]).abs()


def per_class_errors(bins, laace_denominator=config.LAACE_DENOMINATOR):
    """
    Per-class LaECE / LaACE / LaMCE.

    Returns:
        DataFrame with columns class, count, laece, laace, lamce
    """
    columns = ["class", "count", "laece", "laace", "lamce"]
    if bins.table.empty:
        return pd.DataFrame(columns=columns)
    if laace_denominator not in ("non-empty", "total"):
        raise DomainError(f"LaACE denominator must be 'non-empty' or 'total', got {laace_denominator!r}")
    t = bins.table.assign(gap=_gaps(bins))
    rows = []
    for class_id, part in t.groupby("class", sort=True):
        occupied = part[part["count"] > 0]
        n = int(occupied["count"].sum())
        if n == 0:
            continue
        laece_c = float((occupied["count"] / n * occupied["gap"]).sum())
        denom = len(occupied) if laace_denominator == "non-empty" else bins.num_bins
        laace_c = float(occupied["gap"].sum() / denom)
        lamce_c = float(occupied["gap"].max())
        rows.append((int(class_id), n, laece_c, laace_c, lamce_c))
    return pd.DataFrame(rows, columns=columns)


def _class_mean(bins, column, laace_denominator=config.LAACE_DENOMINATOR):
    errors = per_class_errors(bins, laace_denominator)
    if errors.empty:
        warnings.warn(f"{column}: no class has detections, reporting 0", CalibrationWarning)
        return 0.0
    return float(errors[column].mean())


def laece(bins):
    return _class_mean(bins, "laece")


def laace(bins, denominator=config.LAACE_DENOMINATOR):
    return _class_mean(bins, "laace", denominator)


def lamce(bins):
    return _class_mean(bins, "lamce")


def laece_precision(dets, gts, num_bins=config.NUM_BINS, tau=config.LAECE_TAU):
    """LaECE whose bin target is precision_j * mean TP IoU_j, TPs validated at tau."""
    return laece(build_bins(dets, gts, num_bins, weighting="precision", tau=tau))


# ============================================================================
# AVERAGE PRECISION / RECALL
# ============================================================================


def recall_thresholds():
    return np.linspace(0.0, 1.0, config.RECALL_POINTS)


def _class_entries(dets, result):
    """{class_id: [(score, det_id, is_tp)]} over non-ignored detections."""
    entries = {}
    for d in dets:
        m = result[d.det_id]
        if m.ignored:
            continue
        entries.setdefault(d.class_id, []).append((d.score, d.det_id, m.is_tp))
    return entries


def _precision_recall(entries, npos):
    entries = sorted(entries, key=lambda e: (-e[0], e[1]))
    tp = np.cumsum([1.0 if e[2] else 0.0 for e in entries])
    fp = np.cumsum([0.0 if e[2] else 1.0 for e in entries])
    recall = tp / npos
    precision = tp / (tp + fp)
    # monotone non-increasing envelope
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    return precision, recall


def _average_precision(entries, npos, rule):
    if not entries:
        return 0.0
    precision, recall = _precision_recall(entries, npos)
    if rule == "continuous":
        steps = np.diff(np.concatenate(([0.0], recall)))
        return math.fsum(float(s * p) for s, p in zip(steps, precision))
    inds = np.searchsorted(recall, recall_thresholds(), side="left")
    sampled = [float(precision[i]) if i < len(precision) else 0.0 for i in inds]
    return math.fsum(sampled) / len(sampled)


def _ap_at(dets, gts, tau, rule, area_range):
    result = greedy_tp_match(dets, gts, tau, area_range)
    entries = _class_entries(dets, result)
    return {
        class_id: _average_precision(entries.get(class_id, []), npos, rule)
        for class_id, npos in sorted(result.num_positives.items())
    }


def coco_ap(dets, gts, taus=config.AP_TAUS, max_dets=config.MAX_DETS, rule=config.AP_RULE, area_range=None):
    """
    COCO-style AP.

    Per (class, tau): detections capped at max_dets per image, ranked by
    score (det_id breaks ties), greedily matched, precision envelope taken,
    then either sampled at 101 recall points ("coco101") or integrated
    exactly ("continuous"). Classes without ground truth are skipped.

    Returns:
        dict with ap, ap50, ap75 (None when 0.50/0.75 not in taus),
        per_tau {tau: ap} and per_class {class_id: ap over taus}
    """
    taus = list(taus)
    if not taus:
        raise DomainError("at least one IoU threshold is required")
    if rule not in AP_RULES:
        raise DomainError(f"AP rule must be one of {AP_RULES}, got {rule!r}")
    if max_dets is not None:
        dets = top_k_survival(dets, max_dets)

    per_tau_class = parallel_map(lambda tau: _ap_at(dets, gts, tau, rule, area_range), taus)
    classes = sorted({c for table in per_tau_class for c in table})
    if not classes:
        warnings.warn("AP: no class has ground truth, reporting 0", CalibrationWarning)
    per_tau = {}
    for tau, table in zip(taus, per_tau_class):
        per_tau[tau] = math.fsum(table.values()) / len(table) if table else 0.0
    per_class = {c: math.fsum(t[c] for t in per_tau_class) / len(taus) for c in classes}
    return {
        "ap": math.fsum(per_tau.values()) / len(taus),
        "ap50": _lookup(per_tau, 0.50),
        "ap75": _lookup(per_tau, 0.75),
        "per_tau": per_tau,
        "per_class": per_class,
    }


def _lookup(per_tau, tau):
    for key, value in per_tau.items():
        if abs(key - tau) < 1e-9:
            return value
    return None


def recall_at(dets, gts, tau, max_dets=config.MAX_DETS):
    """Class-averaged recall N_TP / M at one threshold."""
    if max_dets is not None:
        dets = top_k_survival(dets, max_dets)
    result = greedy_tp_match(dets, gts, tau)
    class_of = {d.det_id: d.class_id for d in dets}
    hits = {}
    for m in result:
        if m.is_tp:
            hits[class_of[m.det_id]] = hits.get(class_of[m.det_id], 0) + 1
    recalls = [hits.get(c, 0) / npos for c, npos in sorted(result.num_positives.items())]
    return math.fsum(recalls) / len(recalls) if recalls else 0.0


def average_recall(dets, gts, taus=config.AP_TAUS, max_dets=config.MAX_DETS):
    """Mean recall over the IoU grid (COCO AR)."""
    taus = list(taus)
    if not taus:
        raise DomainError("at least one IoU threshold is required")
    recalls = parallel_map(lambda tau: recall_at(dets, gts, tau, max_dets), taus)
    return math.fsum(recalls) / len(recalls)


# ============================================================================
# EVALUATION REPORT
# ============================================================================


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    ar: float
    r50: float
    r75: float
    laece: float
    laace: float
    lamce: float
    num_dets: int
    num_gts: int
    per_class_ap: dict = field(default_factory=dict)

    def to_dict(self):
        payload = asdict(self)
        payload["per_class_ap"] = {str(k): v for k, v in sorted(self.per_class_ap.items())}
        return payload

    def to_table(self):
        """Rows scaled x100 with 4 decimals, counts as-is."""
        scale, places = config.PERCENT_SCALE, config.DECIMAL_PLACES
        rows = []
        for name in ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large", "ar", "r50", "r75", "laece", "laace", "lamce"):
            value = getattr(self, name)
            rows.append([name.upper(), "-" if value is None else f"{value * scale:.{places}f}"])
        rows.append(["DETECTIONS", self.num_dets])
        rows.append(["GROUND TRUTHS", self.num_gts])
        return tabulate(rows, headers=["Metric", "Value"], tablefmt="simple", disable_numparse=True)

    def per_class_table(self):
        scale, places = config.PERCENT_SCALE, config.DECIMAL_PLACES
        rows = [[c, f"{v * scale:.{places}f}"] for c, v in sorted(self.per_class_ap.items())]
        return tabulate(rows, headers=["Class", "AP"], tablefmt="simple", disable_numparse=True)


def evaluate(
    dets,
    gts,
    taus=config.AP_TAUS,
    max_dets=config.MAX_DETS,
    num_bins=config.NUM_BINS,
    rule=config.AP_RULE,
    laace_denominator=config.LAACE_DENOMINATOR,
):
    """AP family, AR and reduced-form calibration errors in one report."""
    capped = top_k_survival(dets, max_dets) if max_dets is not None else dets
    main = coco_ap(capped, gts, taus, None, rule)
    by_size = {
        name: coco_ap(capped, gts, taus, None, rule, area_range=rng)["ap"]
        for name, rng in config.AREA_RANGES.items()
    }
    bins = build_bins(capped, gts, num_bins)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        errors = (laece(bins), laace(bins, laace_denominator), lamce(bins)) if len(capped) else (0.0, 0.0, 0.0)
    return EvalReport(
        ap=main["ap"],
        ap50=main["ap50"],
        ap75=main["ap75"],
        ap_small=by_size["small"],
        ap_medium=by_size["medium"],
        ap_large=by_size["large"],
        ar=average_recall(capped, gts, taus, None),
        r50=recall_at(capped, gts, 0.50, None),
        r75=recall_at(capped, gts, 0.75, None),
        laece=errors[0],
        laace=errors[1],
        lamce=errors[2],
        num_dets=len(capped),
        num_gts=gts.num_positives(),
        per_class_ap=main["per_class"],
    )


# ============================================================================
# SWEEPS & STUDIES
# ============================================================================


def threshold_sweep(store, gts, thresholds, iou_thr=None, taus=config.AP_TAUS, max_dets=config.MAX_DETS, rule=config.AP_RULE):
    """
    Background-removal threshold study.

    For each threshold: background removal, standard NMS, AP. Counts are
    taken before NMS.

    Returns:
        DataFrame with columns threshold, surviving_count, mean_dets_per_image, ap
    """
    iou_thr = iou_thr if iou_thr is not None else FusionConfig().resolved_iou(store.kind)
    num_images = max(1, len(set(store.images()) | set(gts.images())))
    rows = []
    for threshold in thresholds:
        kept = background_removal(store, threshold)
        fused = standard_nms(kept, iou_thr)
        rows.append(
            {
                "threshold": float(threshold),
                "surviving_count": len(kept),
                "mean_dets_per_image": len(kept) / num_images,
                "ap": coco_ap(fused, gts, taus, max_dets, rule)["ap"],
            }
        )
    return pd.DataFrame(rows, columns=["threshold", "surviving_count", "mean_dets_per_image", "ap"])


def sigma_sweep(expert_stores, calibrator_sets, gts, sigmas, cfg=None, taus=config.AP_TAUS, max_dets=config.MAX_DETS, rule=config.AP_RULE):
    """
    Gaussian Soft NMS spread study over the fused mixture.

    Returns:
        DataFrame with columns sigma_nms, fused_count, ap
    """
    cfg = cfg or FusionConfig()
    rows = []
    for sigma in sigmas:
        trial = replace(cfg, nms_kind="soft-gaussian", sigma_nms=float(sigma))
        fused = fuse_pipeline(expert_stores, calibrator_sets, trial)
        rows.append({"sigma_nms": float(sigma), "fused_count": len(fused), "ap": coco_ap(fused, gts, taus, max_dets, rule)["ap"]})
    return pd.DataFrame(rows, columns=["sigma_nms", "fused_count", "ap"])


CALIBRATOR_GRID = (("ca", "ir"), ("ca", "lr"), ("cw", "ir"), ("cw", "lr"))


def calibrator_grid(fit_dets, fit_gts, test_dets, test_gts, num_bins=config.NUM_BINS, taus=config.AP_TAUS, max_dets=config.MAX_DETS, rule=config.AP_RULE):
    """
    Class-agnostic / class-wise x isotonic / linear study.

    Calibrators are fitted on (fit_dets, fit_gts) and scored on the test
    split; the first row is the uncalibrated detector.

    Returns:
        DataFrame with columns calibrator, ap, laece, laace, lamce
    """
    candidates = [("uncalibrated", CalibratorSet.identity())]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        for mode, method in CALIBRATOR_GRID:
            candidates.append((f"{mode.upper()} {method.upper()}", fit_calibrator_set(fit_dets, fit_gts, mode, method)))
        rows = []
        for name, cals in candidates:
            calibrated = top_k_survival(apply_calibrators(test_dets, cals), max_dets)
            bins = build_bins(calibrated, test_gts, num_bins)
            rows.append(
                {
                    "calibrator": name,
                    "ap": coco_ap(calibrated, test_gts, taus, None, rule)["ap"],
                    "laece": laece(bins),
                    "laace": laace(bins),
                    "lamce": lamce(bins),
                }
            )
    return pd.DataFrame(rows, columns=["calibrator", "ap", "laece", "laace", "lamce"])


def format_table(frame, percent_columns=()):
    """tabulate a DataFrame, scaling the named columns x100."""
    scale, places = config.PERCENT_SCALE, config.DECIMAL_PLACES
    shown = frame.copy()
    for column in percent_columns:
        shown[column] = [f"{v * scale:.{places}f}" for v in shown[column]]
    return tabulate(shown.values.tolist(), headers=list(shown.columns), tablefmt="simple", disable_numparse=True)


# ============================================================================
# RELIABILITY EXPORT
# ============================================================================


def reliability_export(bins, path, fmt="csv"):
    """
    Write reliability data as CSV (one row per class and bin) or as an SVG
    diagram of mean IoU per bin against the diagonal.
    """
    if fmt == "csv":
        bins.table.to_csv(path, index=False)
        return path
    if fmt == "svg":
        _write_svg(bins, path)
        return path
    raise DomainError(f"reliability format must be 'csv' or 'svg', got {fmt!r}")


def load_reliability_csv(path, num_bins=None, weighting="reduced"):
    table = pd.read_csv(path, float_precision="round_trip")
    if table.empty:
        table = pd.DataFrame(columns=BIN_COLUMNS)
        return ReliabilityBins(num_bins or config.NUM_BINS, table, weighting)
    table = table.astype({"class": int, "bin": int, "count": int})
    inferred = int(table["bin"].max()) + 1
    return ReliabilityBins(num_bins or inferred, table[BIN_COLUMNS], weighting)


def _write_svg(bins, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mocae-reliability"
    classes = bins.classes() or [None]
    ncols = min(4, len(classes))
    nrows = int(math.ceil(len(classes) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 3.2 * nrows), squeeze=False)
    width = 1.0 / bins.num_bins
    for ax, class_id in zip(axes.flat, classes):
        ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=1)
        if class_id is not None:
            part = bins.table[bins.table["class"] == class_id]
            target = part["precision"] * part["mean_iou"]
            ax.bar(part["lo"], target, width=width, align="edge", edgecolor="black", linewidth=0.5)
            ax.set_title(f"class {class_id}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("confidence")
        ax.set_ylabel("mean IoU")
    for ax in list(axes.flat)[len(classes):]:
        ax.axis("off")
    fig.tight_layout()
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
