"""From prediction grid to face boxes: dequantize the 13x13x18 output,
decode cell/anchor offsets into normalized boxes, suppress overlaps, and
score detections against ground truth with single-class average precision.

Channel contract per cell: 3 anchors x 6 values, anchor-major, i.e. channel
a*6+f holds field f of anchor a with fields (tx, ty, tw, th, objectness,
class_score), all already squashed to [0, 1] by the network's last
activation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import INPUT_SIZE, OUTPUT_CHANNELS, OUTPUT_GRID, PIXEL_SCALE, ModelConfig
from .qcore import QuantTensor

__all__ = [
    "Detection",
    "GroundTruthSet",
    "dequantize_output",
    "decode_grid",
    "iou",
    "nms",
    "evaluate_ap",
    "parse_widerface_gt",
    "to_pixel_box",
    "format_detection_line",
]

FIELDS_PER_ANCHOR = 6


@dataclass(frozen=True)
class Detection:
    """One box, center-form, normalized to [0,1] of the frame size."""

    cx: float
    cy: float
    w: float
    h: float
    objectness: float
    class_score: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h", "objectness", "class_score"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def score(self) -> float:
        return self.objectness * self.class_score


@dataclass(frozen=True)
class GroundTruthSet:
    """image id -> list of (x, y, w, h) pixel boxes, corner-origin."""

    boxes: dict

    def __post_init__(self) -> None:
        for image_id, items in self.boxes.items():
            for b in items:
                if len(b) != 4 or b[2] <= 0 or b[3] <= 0:
                    raise ValueError(f"{image_id}: degenerate box {b}")

    def total(self) -> int:
        return sum(len(v) for v in self.boxes.values())


def dequantize_output(grid: QuantTensor) -> np.ndarray:
    """8-bit prediction grid -> real values in [0, 1]."""
    want = (OUTPUT_GRID, OUTPUT_GRID, OUTPUT_CHANNELS)
    if grid.shape != want:
        raise ValueError(f"grid shape {grid.shape}, expected {want}")
    p = grid.params
    if p.bits != 8 or p.signed or p.scale != PIXEL_SCALE:
        raise ValueError("output grid must be 8-bit unsigned at scale 1/255")
    return grid.grid().astype(np.float64) * p.scale


def decode_grid(
    grid: np.ndarray,
    cfg: ModelConfig,
    conf_threshold: float,
    decode_mode: str = "anchor_pow2",
) -> list:
    """Real-valued grid -> detections above conf_threshold.

    Cell (row, col), anchor a with predictions p in [0,1]:
      cx = (p_tx + col) / 13, cy = (p_ty + row) / 13
      direct:      w = p_tw, h = p_th
      anchor_pow2: w = anchor_w * (2*p_tw)^2 / 416, likewise h
    anchor_pow2 keeps anchors meaningful although the squashed outputs can
    never express an exponential size term; p=0.5 reproduces the anchor
    itself. Sizes clamp to [0,1]. Kept detections need
    objectness * class_score >= conf_threshold.
    """
    grid = np.asarray(grid, dtype=np.float64)
    want = (OUTPUT_GRID, OUTPUT_GRID, OUTPUT_CHANNELS)
    if grid.shape != want:
        raise ValueError(f"grid shape {grid.shape}, expected {want}")
    if decode_mode not in ("direct", "anchor_pow2"):
        raise ValueError(f"unknown decode_mode {decode_mode!r}")
    out = []
    for row in range(OUTPUT_GRID):
        for col in range(OUTPUT_GRID):
            for a, (aw, ah) in enumerate(cfg.anchors):
                tx, ty, tw, th, obj, cls = grid[
                    row, col, a * FIELDS_PER_ANCHOR : (a + 1) * FIELDS_PER_ANCHOR
                ]
                if obj * cls < conf_threshold:
                    continue
                if decode_mode == "direct":
                    w, h = tw, th
                else:
                    w = aw * (2.0 * tw) ** 2 / cfg.input_size
                    h = ah * (2.0 * th) ** 2 / cfg.input_size
                out.append(
                    Detection(
                        cx=(tx + col) / OUTPUT_GRID,
                        cy=(ty + row) / OUTPUT_GRID,
                        w=min(w, 1.0),
                        h=min(h, 1.0),
                        objectness=obj,
                        class_score=cls,
                    )
                )
    return out


def iou(a, b) -> float:
    """Intersection over union of (x, y, w, h) corner-origin rectangles."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    # roundoff in (x + w) - x can push the ratio an ulp past 1 for
    # identical boxes; the true value never exceeds 1
    return min(1.0, inter / union)


def _corner(d: Detection):
    return (d.cx - d.w / 2.0, d.cy - d.h / 2.0, d.w, d.h)


def _nms_key(d: Detection):
    # score descending, then a total order so output never depends on
    # input order
    return (-d.score, d.cx, d.cy, d.w, d.h, d.objectness)


def nms(dets: list, iou_threshold: float) -> list:
    """Greedy suppression: keep the best, drop overlaps above the threshold
    (strict >), repeat. Output stays sorted best-first."""
    pending = sorted(dets, key=_nms_key)
    kept = []
    while pending:
        best = pending.pop(0)
        kept.append(best)
        bb = _corner(best)
        pending = [d for d in pending if iou(bb, _corner(d)) <= iou_threshold]
    return kept


def evaluate_ap(preds: list, gt: GroundTruthSet, iou_threshold: float = 0.5) -> float:
    """Single-class average precision.

    preds: (image_id, score, x, y, w, h) tuples in pixels. Each prediction,
    taken in descending score order, matches the highest-IoU not yet
    matched ground-truth box of its image when that IoU clears the
    threshold; otherwise it counts as a false positive. AP is the area
    under the precision-recall curve with all-points interpolation.

    No ground truth at all -> 0.0 by convention.
    """
    for p in preds:
        if p[0] not in gt.boxes:
            raise ValueError(f"prediction references unknown image {p[0]!r}")
    n_gt = gt.total()
    if n_gt == 0:
        return 0.0
    order = sorted(preds, key=lambda p: (-p[1], p[0], p[2], p[3], p[4], p[5]))
    matched = {img: [False] * len(boxes) for img, boxes in gt.boxes.items()}
    tp = np.zeros(len(order))
    for i, (img, _score, x, y, w, h) in enumerate(order):
        best_iou, best_j = 0.0, -1
        for j, box in enumerate(gt.boxes[img]):
            if matched[img][j]:
                continue
            v = iou((x, y, w, h), box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[img][best_j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(order) + 1)
    recall = cum_tp / n_gt
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _is_zero_placeholder(line: str) -> bool:
    toks = line.split()
    if len(toks) < 4:
        return False
    try:
        return all(float(t) == 0.0 for t in toks)
    except ValueError:
        return False


def parse_widerface_gt(path) -> GroundTruthSet:
    """Annotation text format: image filename line, face count line, then
    count lines each starting "x y w h" (trailing attribute columns are
    ignored). A count of 0 yields an empty list; some published annotation
    files follow a zero count with one all-zeros placeholder row, which is
    consumed and ignored."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    boxes: dict = {}
    i = 0
    while i < len(lines):
        image_id = lines[i].strip()
        if not image_id:
            i += 1
            continue
        if i + 1 >= len(lines):
            raise ValueError(f"line {i + 1}: file ends before face count")
        count_line = lines[i + 1].strip()
        try:
            count = int(count_line)
        except ValueError:
            raise ValueError(f"line {i + 2}: invalid face count {count_line!r}") from None
        if count < 0:
            raise ValueError(f"line {i + 2}: negative face count")
        if image_id in boxes:
            raise ValueError(f"line {i + 1}: duplicate image {image_id!r}")
        i += 2
        items = []
        for k in range(count):
            if i >= len(lines):
                raise ValueError(f"line {i + 1}: file ends inside face list")
            toks = lines[i].split()
            if len(toks) < 4:
                raise ValueError(f"line {i + 1}: expected at least x y w h")
            try:
                x, y, w, h = (int(t) for t in toks[:4])
            except ValueError:
                raise ValueError(f"line {i + 1}: non-integer box fields") from None
            if w <= 0 or h <= 0:
                raise ValueError(f"line {i + 1}: degenerate box {w}x{h}")
            items.append((float(x), float(y), float(w), float(h)))
            i += 1
        if count == 0 and i < len(lines) and _is_zero_placeholder(lines[i]):
            i += 1
        boxes[image_id] = items
    return GroundTruthSet(boxes=boxes)


def to_pixel_box(d: Detection, img_w: int, img_h: int):
    """Normalized center-form detection -> (x, y, w, h) pixels, corner-origin."""
    return (
        (d.cx - d.w / 2.0) * img_w,
        (d.cy - d.h / 2.0) * img_h,
        d.w * img_w,
        d.h * img_h,
    )


def format_detection_line(image_id: str, d: Detection, img_w: int, img_h: int) -> str:
    """Stable text export: "image_id score x y w h" (pixels)."""
    x, y, w, h = to_pixel_box(d, img_w, img_h)
    return f"{image_id} {d.score:.6f} {x:.2f} {y:.2f} {w:.2f} {h:.2f}"
