"""
Post-hoc Calibration
====================
Fit and apply monotone score mappings zeta: [0, 1] -> [0, 1] so that the
confidence of a detection matches the IoU with the ground truth it
overlaps most.

Calibrators:
- IsotonicCalibrator: scikit-learn isotonic fit, linear interpolation
  between knots, constant extrapolation outside them.
- LinearCalibrator: ordinary least squares a*x + b, clamped to [0, 1].
- IdentityCalibrator: fallback for classes unseen at fit time.

A CalibratorSet is class-agnostic ("ca", one calibrator) or class-wise
("cw", one per class). The same operations serve early calibration (raw
pre-NMS detections) and late calibration (final detections); the caller
picks the file.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.isotonic import IsotonicRegression

from mocae import config
from mocae.detections import image_sort_key
from mocae.errors import CalibrationWarning, ConfigError, FitError, ParseError
from mocae.matching import match_psi

MODES = ("ca", "cw")
METHODS = ("ir", "lr", "identity")


def _xy(pairs):
    """Accept TargetPair objects or plain (score, target) tuples."""
    xs, ys = [], []
    for p in pairs:
        if hasattr(p, "score"):
            xs.append(p.score)
            ys.append(p.target_iou)
        else:
            xs.append(p[0])
            ys.append(p[1])
    return np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)


# ============================================================================
# CALIBRATOR TYPES
# ============================================================================

class IdentityCalibrator:
    method = "identity"

    def __call__(self, x):
        out = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    def to_dict(self):
        return {"type": "identity"}

    def __eq__(self, other):
        return isinstance(other, IdentityCalibrator)


@dataclass(frozen=True)
class IsotonicCalibrator:
    xs: tuple
    ys: tuple

    method = "ir"

    def __post_init__(self):
        if len(self.xs) != len(self.ys) or not self.xs:
            raise FitError("isotonic calibrator needs matching, non-empty knot lists")
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise FitError("isotonic knots must have strictly increasing x")
        if any(b < a for a, b in zip(self.ys, self.ys[1:])):
            raise FitError("isotonic knots must have non-decreasing y")

    @property
    def knots(self):
        return list(zip(self.xs, self.ys))

    def __call__(self, x):
        out = np.interp(np.asarray(x, dtype=float), self.xs, self.ys)
        out = np.clip(out, 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    def to_dict(self):
        return {"type": "ir", "knots": [[x, y] for x, y in self.knots]}


@dataclass(frozen=True)
class LinearCalibrator:
    a: float
    b: float

    method = "lr"

    def __call__(self, x):
        out = np.clip(self.a * np.asarray(x, dtype=float) + self.b, 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    def to_dict(self):
        return {"type": "lr", "a": self.a, "b": self.b}


def calibrator_from_dict(payload):
    kind = payload.get("type")
    if kind == "identity":
        return IdentityCalibrator()
    if kind == "ir":
        knots = payload.get("knots")
        if not isinstance(knots, list) or not knots:
            raise ParseError("isotonic calibrator needs a non-empty 'knots' list")
        return IsotonicCalibrator(tuple(float(k[0]) for k in knots), tuple(float(k[1]) for k in knots))
    if kind == "lr":
        try:
            return LinearCalibrator(float(payload["a"]), float(payload["b"]))
        except (KeyError, TypeError, ValueError):
            raise ParseError("linear calibrator needs numeric 'a' and 'b'")
    raise ParseError(f"unknown calibrator type: {kind!r}")


# ============================================================================
# FITTING
# ============================================================================

def fit_isotonic(pairs):
    """
    Isotonic (PAVA) calibrator.

    Pairs sharing a score are pooled to their mean target, so knots have
    strictly increasing x; fitted values are bounded to [0, 1].
    """
    x, y = _xy(pairs)
    if x.size == 0:
        raise FitError("cannot fit an isotonic calibrator on zero pairs")
    model = IsotonicRegression(y_min=0.0, y_max=1.0, increasing=True, out_of_bounds="clip")
    model.fit(x, y)
    xs = tuple(float(v) for v in model.X_thresholds_)
    ys = tuple(float(v) for v in model.y_thresholds_)
    return IsotonicCalibrator(xs, ys)


def fit_linear(pairs):
    """
    Ordinary least-squares calibrator y = a*x + b.

    A negative slope is applied as fitted but reported with a
    CalibrationWarning because it reverses the ranking.
    """
    x, y = _xy(pairs)
    if x.size < 2:
        raise FitError("linear calibration needs at least 2 pairs")
    dx = x - x.mean()
    var = float(np.dot(dx, dx))
    if var == 0.0:
        raise FitError("linear calibration is singular: all scores are equal")
    a = float(np.dot(dx, y - y.mean()) / var)
    b = float(y.mean() - a * x.mean())
    if a < 0:
        warnings.warn(f"linear calibrator has a negative slope ({a:.6f}); ranking is reversed", CalibrationWarning)
    return LinearCalibrator(a, b)


_FITTERS = {"ir": fit_isotonic, "lr": fit_linear}


# ============================================================================
# CALIBRATOR SETS
# ============================================================================

class CalibratorSet:
    """
    Class-agnostic or class-wise collection of fitted calibrators.

    Classes without a calibrator fall back to identity.
    """

    def __init__(self, mode, method, calibrators):
        if mode not in MODES:
            raise ConfigError(f"calibration mode must be one of {MODES}, got {mode!r}")
        if method not in METHODS:
            raise ConfigError(f"calibration method must be one of {METHODS}, got {method!r}")
        if mode == "ca" and set(calibrators) - {None}:
            raise ConfigError("a class-agnostic set holds a single calibrator keyed by None")
        self.mode = mode
        self.method = method
        self.calibrators = dict(calibrators)
        self.fallback = IdentityCalibrator()

    @classmethod
    def identity(cls):
        return cls("ca", "identity", {None: IdentityCalibrator()})

    def __len__(self):
        return len(self.calibrators)

    def __eq__(self, other):
        if not isinstance(other, CalibratorSet):
            return NotImplemented
        return (self.mode, self.method, self.calibrators) == (other.mode, other.method, other.calibrators)

    def calibrator_for(self, class_id):
        key = None if self.mode == "ca" else class_id
        return self.calibrators.get(key, self.fallback)

    def __call__(self, score, class_id=None):
        return self.calibrator_for(class_id)(score)

    def to_dict(self):
        entries = []
        for key in sorted(self.calibrators, key=lambda k: -1 if k is None else k):
            entry = {"class_id": key}
            entry.update(self.calibrators[key].to_dict())
            entries.append(entry)
        return {"mode": self.mode, "method": self.method, "calibrators": entries}

    @classmethod
    def from_dict(cls, payload):
        if not isinstance(payload, dict):
            raise ParseError("calibrator file must hold a JSON object")
        unknown = set(payload) - {"mode", "method", "calibrators"}
        if unknown:
            raise ParseError(f"unknown calibrator keys: {sorted(unknown)}")
        entries = payload.get("calibrators")
        if not isinstance(entries, list):
            raise ParseError("calibrator file needs a 'calibrators' list")
        calibrators = {}
        for entry in entries:
            if not isinstance(entry, dict) or "class_id" not in entry:
                raise ParseError("each calibrator entry needs a 'class_id'")
            calibrators[entry["class_id"]] = calibrator_from_dict(entry)
        return cls(payload.get("mode"), payload.get("method"), calibrators)


def fit_calibrator_set(dets, gts, mode=config.CALIBRATION_MODE, method=config.CALIBRATION_METHOD, max_images=None, seed=0):
    """
    Fit calibrators on a held-out split.

    Args:
        dets: DetectionStore from the held-out split
        gts: GroundTruthSet of the same split
        mode: "ca" or "cw"
        method: "ir", "lr" or "identity"
        max_images: optional cap; a seeded random subset of images is used
        seed: seed of the image subset

    Returns:
        CalibratorSet
    """
    if mode not in MODES:
        raise ConfigError(f"calibration mode must be one of {MODES}, got {mode!r}")
    if method not in METHODS:
        raise ConfigError(f"calibration method must be one of {METHODS}, got {method!r}")
    if method == "identity":
        return CalibratorSet.identity()

    if max_images is not None:
        dets, gts = subsample_images(dets, gts, max_images, seed)

    pairs = match_psi(dets, gts)
    if not pairs:
        raise FitError("no calibration pairs: the detection set is empty")

    fit = _FITTERS[method]
    if mode == "ca":
        return CalibratorSet(mode, method, {None: fit(pairs)})

    by_class = {}
    for p in pairs:
        by_class.setdefault(p.class_id, []).append(p)
    calibrators = {}
    for class_id in sorted(by_class):
        class_pairs = by_class[class_id]
        if len(class_pairs) < config.MIN_PAIRS_PER_CLASS:
            warnings.warn(f"class {class_id}: {len(class_pairs)} pair(s), using identity", CalibrationWarning)
            continue
        try:
            calibrators[class_id] = fit(class_pairs)
        except FitError as e:
            warnings.warn(f"class {class_id}: {e}; using identity", CalibrationWarning)
    return CalibratorSet(mode, method, calibrators)


def subsample_images(dets, gts, max_images, seed=0):
    """Restrict dets and gts to a seeded random subset of at most max_images images."""
    images = sorted(set(dets.images()) | set(gts.images()), key=image_sort_key)
    if max_images >= len(images):
        return dets, gts
    rng = np.random.default_rng(seed)
    picked = {images[i] for i in rng.choice(len(images), size=max_images, replace=False)}
    return dets.filter(lambda d: d.image_id in picked), gts.restrict_images(picked)


def apply_calibrators(store, cals):
    """Replace every score by zeta(score) of its class's calibrator."""
    scores = {d.det_id: float(np.clip(cals(d.score, d.class_id), 0.0, 1.0)) for d in store}
    return store.with_scores(scores)


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_calibrators(cals, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(cals.to_dict(), indent=2) + "\n")


def load_calibrators(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON ({e})")
    except UnicodeDecodeError as e:
        raise ParseError(f"{path}: not UTF-8 text ({e})")
    try:
        return CalibratorSet.from_dict(payload)
    except FitError as e:
        raise ParseError(f"{path}: invalid calibrator ({e})")
