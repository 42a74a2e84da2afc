"""Small constructors shared by the test modules."""

from mocae.detections import Detection, DetectionStore, GroundTruth, GroundTruthSet
from mocae.geometry import AxisAlignedBox


def box(x, y, w, h):
    return AxisAlignedBox.from_xywh(x, y, w, h)


def det(image_id, class_id, xywh, score, det_id=0, expert_id=0):
    return Detection(str(image_id), class_id, box(*xywh), score, expert_id, det_id)


def gt(image_id, class_id, xywh, gt_id=0, ignore=False):
    return GroundTruth(str(image_id), class_id, box(*xywh), gt_id, ignore)


def store(*rows):
    """rows: (image_id, class_id, xywh, score[, expert_id]); det_id is the row index."""
    return DetectionStore([det(r[0], r[1], r[2], r[3], det_id=i, expert_id=r[4] if len(r) > 4 else 0) for i, r in enumerate(rows)])


def truth(*rows):
    """rows: (image_id, class_id, xywh[, ignore]); gt_id is the row index."""
    return GroundTruthSet([gt(r[0], r[1], r[2], gt_id=i, ignore=r[3] if len(r) > 3 else False) for i, r in enumerate(rows)])
