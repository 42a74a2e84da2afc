"""
Detections & Ground Truth
=========================
Canonical data model plus COCO "results"-shaped JSON ingestion and emission.

File schemas:
- detections: JSON array of {image_id, category_id, bbox, score[, expert_id]}
- ground truth: JSON object {"annotations": [{image_id, category_id, bbox, id[, iscrowd | ignore]}]}

bbox is [x, y, w, h] for axis-aligned stores and [cx, cy, w, h, theta] for
rotated stores. image_id may be a string or an integer in files; it is kept
as a string key internally.
"""

import json
import math
from collections import defaultdict
from dataclasses import dataclass, replace

import pandas as pd

from mocae.errors import DomainError, ParseError
from mocae.geometry import AABB, GEOMETRY_KINDS, box_from_wire

# ============================================================================
# RECORD TYPES
# ============================================================================


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: object
    score: float
    expert_id: int = 0
    det_id: int = 0


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: object
    gt_id: int
    ignore: bool = False


def image_sort_key(image_id):
    """Numeric ids sort numerically, everything else lexicographically after them."""
    if image_id.isascii() and image_id.isdecimal():
        return (0, int(image_id), image_id)
    return (1, 0, image_id)


def image_id_to_wire(image_id):
    if image_id.isascii() and image_id.isdecimal() and (image_id == "0" or not image_id.startswith("0")):
        return int(image_id)
    return image_id


def _image_key(raw):
    if isinstance(raw, bool) or not isinstance(raw, (str, int)):
        raise ParseError(f"image_id must be a string or an integer, got {raw!r}")
    return str(raw)


def _order_key(det):
    return (image_sort_key(det.image_id), det.class_id, -det.score, det.det_id)


def _check_kind(kind):
    if kind not in GEOMETRY_KINDS:
        raise DomainError(f"unknown geometry kind: {kind!r}")


def _check_box_kind(box, kind):
    if box.kind != kind:
        raise DomainError(f"store of kind {kind!r} cannot hold a {box.kind!r} box")


# ============================================================================
# DETECTION STORE
# ============================================================================


class DetectionStore:
    """
    Immutable collection of detections of one geometry kind.

    Iteration order is deterministic: image_id, class_id, score descending,
    det_id ascending. Detections are also indexed by (image_id, class_id).
    """

    def __init__(self, detections, kind=AABB):
        _check_kind(kind)
        seen = set()
        for det in detections:
            _check_box_kind(det.box, kind)
            if not 0.0 <= det.score <= 1.0:
                raise DomainError(f"score out of [0, 1]: {det.score}")
            if det.det_id in seen:
                raise DomainError(f"duplicate det_id {det.det_id}")
            seen.add(det.det_id)
        self.kind = kind
        self._dets = tuple(sorted(detections, key=_order_key))
        index = defaultdict(list)
        for det in self._dets:
            index[(det.image_id, det.class_id)].append(det)
        self._index = {key: tuple(group) for key, group in index.items()}
        self._by_id = {det.det_id: det for det in self._dets}

    @classmethod
    def empty(cls, kind=AABB):
        return cls((), kind)

    def __len__(self):
        return len(self._dets)

    def __iter__(self):
        return iter(self._dets)

    def __eq__(self, other):
        if not isinstance(other, DetectionStore):
            return NotImplemented
        return self.kind == other.kind and self._dets == other._dets

    def __repr__(self):
        return f"DetectionStore(kind={self.kind!r}, n={len(self)}, experts={self.experts})"

    @property
    def detections(self):
        return self._dets

    @property
    def experts(self):
        return tuple(sorted({d.expert_id for d in self._dets}))

    def groups(self):
        """(image_id, class_id) keys in deterministic order."""
        return sorted(self._index, key=lambda k: (image_sort_key(k[0]), k[1]))

    def group(self, image_id, class_id):
        return self._index.get((image_id, class_id), ())

    def images(self):
        return sorted({d.image_id for d in self._dets}, key=image_sort_key)

    def classes(self):
        return sorted({d.class_id for d in self._dets})

    def by_image(self):
        out = defaultdict(list)
        for det in self._dets:
            out[det.image_id].append(det)
        return dict(out)

    def get(self, det_id):
        return self._by_id[det_id]

    # ------------------------------------------------------------------
    # Derived stores (det_ids kept)
    # ------------------------------------------------------------------

    def filter(self, predicate):
        return DetectionStore([d for d in self._dets if predicate(d)], self.kind)

    def with_detections(self, detections):
        return DetectionStore(detections, self.kind)

    def with_scores(self, scores):
        """Replace scores from a {det_id: score} mapping; missing ids keep their score."""
        return DetectionStore(
            [replace(d, score=float(scores[d.det_id])) if d.det_id in scores else d for d in self._dets],
            self.kind,
        )

    def with_boxes(self, boxes):
        return DetectionStore(
            [replace(d, box=boxes[d.det_id]) if d.det_id in boxes else d for d in self._dets],
            self.kind,
        )

    def to_frame(self):
        """pandas view of the store in iteration order."""
        return pd.DataFrame(
            [
                {
                    "image_id": d.image_id,
                    "class_id": d.class_id,
                    "score": d.score,
                    "expert_id": d.expert_id,
                    "det_id": d.det_id,
                    "area": d.box.area,
                }
                for d in self._dets
            ],
            columns=["image_id", "class_id", "score", "expert_id", "det_id", "area"],
        )


# ============================================================================
# GROUND TRUTH SET
# ============================================================================


class GroundTruthSet:
    """Ground-truth objects indexed by (image_id, class_id)."""

    def __init__(self, objects, kind=AABB):
        _check_kind(kind)
        seen = set()
        for gt in objects:
            _check_box_kind(gt.box, kind)
            if gt.gt_id in seen:
                raise DomainError(f"duplicate ground-truth id {gt.gt_id}")
            seen.add(gt.gt_id)
        self.kind = kind
        self._objects = tuple(
            sorted(objects, key=lambda g: (image_sort_key(g.image_id), g.class_id, g.gt_id))
        )
        index = defaultdict(list)
        for gt in self._objects:
            index[(gt.image_id, gt.class_id)].append(gt)
        self._index = {key: tuple(group) for key, group in index.items()}

    @classmethod
    def empty(cls, kind=AABB):
        return cls((), kind)

    def __len__(self):
        return len(self._objects)

    def __iter__(self):
        return iter(self._objects)

    def __eq__(self, other):
        if not isinstance(other, GroundTruthSet):
            return NotImplemented
        return self.kind == other.kind and self._objects == other._objects

    def group(self, image_id, class_id):
        return self._index.get((image_id, class_id), ())

    def images(self):
        return sorted({g.image_id for g in self._objects}, key=image_sort_key)

    def classes(self):
        return sorted({g.class_id for g in self._objects})

    def num_positives(self, class_id=None):
        """Count of non-ignored objects, optionally for one class."""
        return sum(1 for g in self._objects if not g.ignore and (class_id is None or g.class_id == class_id))

    def restrict_images(self, image_ids):
        keep = set(image_ids)
        return GroundTruthSet([g for g in self._objects if g.image_id in keep], self.kind)


# ============================================================================
# FILE I/O
# ============================================================================


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON ({e})")
    except UnicodeDecodeError as e:
        raise ParseError(f"{path}: not UTF-8 text ({e})")


def _number(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{what} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise DomainError(f"{what} is not finite: {value}")
    return value


def _int(value, what):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{what} must be an integer, got {value!r}")
    return value


def _bbox(record, kind, where):
    bbox = record.get("bbox")
    if not isinstance(bbox, list):
        raise ParseError(f"{where}: bbox must be a list, got {bbox!r}")
    values = [_number(v, f"{where}: bbox entry") for v in bbox]
    return box_from_wire(values, kind)


def _dumps(payload):
    # json emits floats with repr(), the shortest round-trip form
    return json.dumps(payload, indent=2, sort_keys=False, allow_nan=False) + "\n"


def parse_detections(records, kind=AABB):
    """Build a store from already-decoded JSON records (det_ids follow list order)."""
    _check_kind(kind)
    if not isinstance(records, list):
        raise ParseError("detections file must hold a JSON array")
    dets = []
    for i, record in enumerate(records):
        where = f"record {i}"
        if not isinstance(record, dict):
            raise ParseError(f"{where}: expected an object")
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in record:
                raise ParseError(f"{where}: missing {key!r}")
        score = _number(record["score"], f"{where}: score")
        if not 0.0 <= score <= 1.0:
            raise DomainError(f"{where}: score out of [0, 1]: {score}")
        dets.append(
            Detection(
                image_id=_image_key(record["image_id"]),
                class_id=_int(record["category_id"], f"{where}: category_id"),
                box=_bbox(record, kind, where),
                score=score,
                expert_id=_int(record.get("expert_id", 0), f"{where}: expert_id"),
                det_id=i,
            )
        )
    return DetectionStore(dets, kind)


def load_detections(path, kind=AABB):
    """
    Load a detection-results JSON file.

    Args:
        path: file path
        kind: "aabb" or "rotated"

    Returns:
        DetectionStore with det_ids assigned in file order
    """
    return parse_detections(_read_json(path), kind)


def parse_ground_truth(payload, kind=AABB):
    _check_kind(kind)
    if not isinstance(payload, dict) or not isinstance(payload.get("annotations"), list):
        raise ParseError('ground-truth file must be an object with an "annotations" array')
    objects = []
    for i, record in enumerate(payload["annotations"]):
        where = f"annotation {i}"
        if not isinstance(record, dict):
            raise ParseError(f"{where}: expected an object")
        for key in ("image_id", "category_id", "bbox", "id"):
            if key not in record:
                raise ParseError(f"{where}: missing {key!r}")
        ignore = bool(record.get("iscrowd", 0)) or bool(record.get("ignore", 0))
        objects.append(
            GroundTruth(
                image_id=_image_key(record["image_id"]),
                class_id=_int(record["category_id"], f"{where}: category_id"),
                box=_bbox(record, kind, where),
                gt_id=_int(record["id"], f"{where}: id"),
                ignore=ignore,
            )
        )
    return GroundTruthSet(objects, kind)


def load_ground_truth(path, kind=AABB):
    return parse_ground_truth(_read_json(path), kind)


def detection_records(store):
    return [
        {
            "image_id": image_id_to_wire(d.image_id),
            "category_id": d.class_id,
            "bbox": d.box.to_wire(),
            "score": d.score,
            "expert_id": d.expert_id,
        }
        for d in store
    ]


def write_detections(store, path):
    """Write a store in the load_detections schema, in iteration order."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps(detection_records(store)))


def write_ground_truth(gts, path):
    annotations = [
        {
            "id": g.gt_id,
            "image_id": image_id_to_wire(g.image_id),
            "category_id": g.class_id,
            "bbox": g.box.to_wire(),
            "iscrowd": int(g.ignore),
        }
        for g in gts
    ]
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps({"annotations": annotations}))


# ============================================================================
# EXPERT UNION
# ============================================================================


def concat_experts(stores):
    """
    Union of several expert stores.

    expert_id becomes the position in the list; det_ids are re-issued in
    (position, store order).
    """
    stores = list(stores)
    if not stores:
        return DetectionStore.empty()
    kinds = {s.kind for s in stores}
    if len(kinds) > 1:
        raise DomainError(f"cannot concatenate stores of different geometry kinds: {sorted(kinds)}")
    merged = []
    next_id = 0
    for position, store in enumerate(stores):
        for det in store:
            merged.append(replace(det, expert_id=position, det_id=next_id))
            next_id += 1
    return DetectionStore(merged, stores[0].kind)

