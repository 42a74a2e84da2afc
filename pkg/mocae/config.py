"""
Configuration File for the MoCaE Toolkit
========================================
Modify these parameters to customize calibration, fusion and evaluation.
Every CLI flag and every config-file key falls back to the values below.
"""

import os

# ============================================================================
# PATHS
# ============================================================================

# Project root (the directory holding this package)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# Default destination for machine-readable outputs
REPORT_DIR = os.path.join(BASE_DIR, "Reports")

# ============================================================================
# POST-PROCESSING (NMS / SOFT NMS / SCORE VOTING)
# ============================================================================

# Standard NMS IoU threshold for axis-aligned boxes (COCO pipelines)
IOU_NMS = 0.65

# Standard NMS IoU threshold for rotated boxes (DOTA pipelines)
IOU_NMS_ROTATED = 0.35

# Gaussian Soft NMS spread; a smaller value suppresses more
SIGMA_NMS = 0.40

# Score Voting spread
SIGMA_SV = 0.04

# Detections kept per image after fusion (300 for LVIS-style inputs)
TOP_K = 100
TOP_K_LVIS = 300

# Rescored detections below this are dropped after Soft NMS
PRUNE_AFTER_SOFT = 1e-3

# Detector-side background removal threshold (used by sweeps)
BACKGROUND_THRESHOLD = 0.05

# Fusion inputs are final detections, so nothing is removed by default
FUSION_BACKGROUND_THRESHOLD = 0.0

# Supported NMS flavours
NMS_KINDS = ("standard", "soft-linear", "soft-gaussian")

# ============================================================================
# CALIBRATION
# ============================================================================

# "ir" (isotonic regression) or "lr" (linear regression)
CALIBRATION_METHOD = "ir"

# "ca" (class-agnostic) or "cw" (class-wise)
CALIBRATION_MODE = "ca"

# Held-out images usually sufficient to fit a class-agnostic calibrator
CALIBRATION_IMAGES = 500

# Class-wise calibrators need at least this many pairs, else identity
MIN_PAIRS_PER_CLASS = 2

# ============================================================================
# EVALUATION
# ============================================================================

# Reliability bins for LaECE / LaACE / LaMCE
NUM_BINS = 25

# TP validation threshold for the precision-weighted LaECE
LAECE_TAU = 0.10

# COCO IoU grid 0.50:0.05:0.95
AP_TAUS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

# Detections per image considered by the evaluator
MAX_DETS = 100

# Recall sampling points of the COCO interpolated AP
RECALL_POINTS = 101

# COCO object-size ranges (box area in squared pixels)
AREA_RANGES = {
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}

# "coco101" (sampled) or "continuous" (area under the precision envelope)
AP_RULE = "coco101"

# LaACE denominator: "non-empty" bins or "total" J
LAACE_DENOMINATOR = "non-empty"

# ============================================================================
# SYNTHETIC SCENES / ORACLE HARNESS
# ============================================================================

IMAGE_WIDTH = 640
IMAGE_HEIGHT = 480

# Ground-truth side lengths are drawn uniformly from this range
MIN_BOX_SIZE = 40.0
MAX_BOX_SIZE = 120.0

# False positives are placed below this IoU against every ground truth
FP_MAX_IOU = 0.30

# Attempts before giving up on placing a box or regenerating a scene
MAX_PLACEMENT_ATTEMPTS = 200
MAX_SCENE_ATTEMPTS = 20

ORACLE_SEED = 2024
ORACLE_SCENES = 100
ORACLE_TAUS = (0.50, 0.75)

# Exact-equality tolerance of the optimality check
ORACLE_TOLERANCE = 1e-9

DEMO_SEED = 7
DEMO_IMAGES = 200

# ============================================================================
# RUNTIME
# ============================================================================

# Environment fallback for --threads
THREADS_ENV = "MOCAE_THREADS"
DEFAULT_THREADS = 1

# ============================================================================
# DISPLAY OPTIONS
# ============================================================================

# Percentages are printed x100 with this many decimals
PERCENT_SCALE = 100
DECIMAL_PLACES = 4
