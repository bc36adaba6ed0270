"""Instance extraction, colony counting, and the evaluation metrics.

Colonies are the 4-connected components of each colony class in a mask;
border pixels (and every other label) act as separators, so an 8-connected
one-pixel border seam splits touching colonies. Counting therefore ignores
border pixels entirely.

Detection quality is scored per image and IoU threshold as
TP / (TP + FP + FN) with greedy descending-IoU matching of same-kind
instances, averaged over the threshold ladder 0.50..0.95 (step 0.05) and
then over images. Segmentation quality is pixel precision/recall per
class, where an empty denominator is reported as undefined (None) rather
than 0. All functions here are pure and safe to run in parallel across
images.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Optional, Sequence

import numpy as np

from .labels import BORDER, BVG_MINUS, BVG_PLUS, CLASS_NAMES, COLONY_KINDS

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclasses.dataclass(frozen=True)
class Instance:
    kind: int
    pixels: frozenset

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(min_row, min_col, max_row, max_col), inclusive."""
        rows = [p[0] for p in self.pixels]
        cols = [p[1] for p in self.pixels]
        return min(rows), min(cols), max(rows), max(cols)


@dataclasses.dataclass(frozen=True)
class InstanceSet:
    instances: tuple
    height: int
    width: int

    def of_kind(self, kind: int) -> list:
        return [inst for inst in self.instances if inst.kind == kind]

    def __len__(self):
        return len(self.instances)


def _require_2d(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a (h, w) mask, got shape {mask.shape}")
    return mask


def connected_components(mask, kind: int) -> InstanceSet:
    """4-connected components of the pixels labeled `kind`.

    Every other label (including border) separates components.
    """
    mask = _require_2d(mask)
    h, w = mask.shape
    target = mask == kind
    visited = np.zeros_like(target, dtype=bool)
    instances = []
    for r0, c0 in np.argwhere(target):
        if visited[r0, c0]:
            continue
        stack = [(int(r0), int(c0))]
        visited[r0, c0] = True
        pixels = []
        while stack:
            r, c = stack.pop()
            pixels.append((r, c))
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= nr < h and 0 <= nc < w and target[nr, nc] and not visited[nr, nc]:
                    visited[nr, nc] = True
                    stack.append((nr, nc))
        instances.append(Instance(kind, frozenset(pixels)))
    return InstanceSet(tuple(instances), h, w)


def extract_instances(mask) -> InstanceSet:
    """Instances of both colony kinds in one set (border pixels ignored)."""
    mask = _require_2d(mask)
    insts = []
    for kind in COLONY_KINDS:
        insts.extend(connected_components(mask, kind).instances)
    return InstanceSet(tuple(insts), mask.shape[0], mask.shape[1])


def count_colonies(mask) -> tuple[int, int]:
    """(number of bvg+ colonies, number of bvg- colonies) in a mask."""
    return (
        len(connected_components(mask, BVG_PLUS)),
        len(connected_components(mask, BVG_MINUS)),
    )


def mae(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> float:
    """Mean absolute per-image counting error."""
    if len(pred_counts) != len(gt_counts):
        raise ValueError(
            f"count lists differ in length: {len(pred_counts)} vs {len(gt_counts)}"
        )
    diffs = np.abs(
        np.asarray(pred_counts, dtype=np.float64) - np.asarray(gt_counts, dtype=np.float64)
    )
    return float(diffs.mean())


def confusion_counts(pred_mask, gt_mask, kind: int) -> tuple[int, int, int]:
    pred_mask = _require_2d(pred_mask)
    gt_mask = _require_2d(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(
            f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}"
        )
    p = pred_mask == kind
    g = gt_mask == kind
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def pixel_pr(pred_mask, gt_mask, kind: int):
    """Pixel (precision, recall) for one class; None where undefined."""
    tp, fp, fn = confusion_counts(pred_mask, gt_mask, kind)
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def instance_iou(a, b) -> float:
    """Intersection over union of two pixel sets."""
    a = frozenset(a)
    b = frozenset(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def match_at_threshold(pred: InstanceSet, gt: InstanceSet, threshold: float):
    """Greedy same-kind matching at one IoU threshold; returns (TP, FP, FN).

    Candidate pairs with IoU >= threshold are taken in descending IoU
    order (ties broken by ground-truth index, then prediction index);
    each instance matches at most once. A high-overlap pair of different
    kinds never matches: class errors are counting errors.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    candidates = []
    for gi, g in enumerate(gt.instances):
        for pi, p in enumerate(pred.instances):
            if g.kind != p.kind:
                continue
            iou = instance_iou(p.pixels, g.pixels)
            if iou >= threshold:
                candidates.append((-iou, gi, pi))
    candidates.sort()
    used_g = set()
    used_p = set()
    tp = 0
    for _, gi, pi in candidates:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        tp += 1
    return tp, len(pred.instances) - tp, len(gt.instances) - tp


def map_over_thresholds(
    pred_sets: Sequence[InstanceSet],
    gt_sets: Sequence[InstanceSet],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> float:
    """Mean of TP/(TP+FP+FN) over the IoU threshold ladder, then over images.

    An image with neither predictions nor ground truth scores 1 at every
    threshold.
    """
    if len(pred_sets) != len(gt_sets):
        raise ValueError("prediction and ground-truth lists must pair up per image")
    if not len(pred_sets):
        raise ValueError("need at least one image")
    image_scores = []
    for pred, gt in zip(pred_sets, gt_sets):
        scores = []
        for t in thresholds:
            tp, fp, fn = match_at_threshold(pred, gt, t)
            scores.append(1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn))
        image_scores.append(float(np.mean(scores)))
    return float(np.mean(image_scores))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ClassMetrics:
    mae: float
    precision: Optional[float]
    recall: Optional[float]


@dataclasses.dataclass
class MetricsReport:
    """Per-class counting and pixel metrics plus the instance mAP."""

    dataset_label: str
    bvg_plus: ClassMetrics
    bvg_minus: ClassMetrics
    border_precision: Optional[float]
    border_recall: Optional[float]
    map_score: float
    per_image: list

    def to_json_dict(self) -> dict:
        def cm(m: ClassMetrics) -> dict:
            return {"mae": m.mae, "precision": m.precision, "recall": m.recall}

        return {
            "dataset": self.dataset_label,
            "bvg_plus": cm(self.bvg_plus),
            "bvg_minus": cm(self.bvg_minus),
            "border": {"precision": self.border_precision, "recall": self.border_recall},
            "map_over_iou_thresholds": self.map_score,
            "per_image": self.per_image,
        }


def evaluate_masks(
    pred_masks: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    ids: Optional[Sequence[str]] = None,
    dataset_label: str = "test",
) -> MetricsReport:
    """Score predicted masks against ground truth over one dataset."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("need one prediction per ground-truth mask")
    if ids is None:
        ids = [str(i) for i in range(len(pred_masks))]
    totals = {kind: np.zeros(3, dtype=np.int64) for kind in (BVG_PLUS, BVG_MINUS, BORDER)}
    counts_pred = {BVG_PLUS: [], BVG_MINUS: []}
    counts_gt = {BVG_PLUS: [], BVG_MINUS: []}
    pred_sets = []
    gt_sets = []
    per_image = []
    for sample_id, pm, gm in zip(ids, pred_masks, gt_masks):
        for kind in (BVG_PLUS, BVG_MINUS, BORDER):
            totals[kind] += confusion_counts(pm, gm, kind)
        ps = extract_instances(pm)
        gs = extract_instances(gm)
        pred_sets.append(ps)
        gt_sets.append(gs)
        row = {"id": sample_id}
        for kind in COLONY_KINDS:
            npred = len(ps.of_kind(kind))
            ngt = len(gs.of_kind(kind))
            counts_pred[kind].append(npred)
            counts_gt[kind].append(ngt)
            name = CLASS_NAMES[kind].replace("+", "_plus").replace("-", "_minus")
            row[f"pred_{name}"] = npred
            row[f"gt_{name}"] = ngt
        per_image.append(row)

    def rate(tp, other):
        return tp / (tp + other) if tp + other else None

    def class_metrics(kind) -> ClassMetrics:
        tp, fp, fn = totals[kind]
        return ClassMetrics(
            mae=mae(counts_pred[kind], counts_gt[kind]),
            precision=rate(tp, fp),
            recall=rate(tp, fn),
        )

    btp, bfp, bfn = totals[BORDER]
    return MetricsReport(
        dataset_label=dataset_label,
        bvg_plus=class_metrics(BVG_PLUS),
        bvg_minus=class_metrics(BVG_MINUS),
        border_precision=rate(btp, bfp),
        border_recall=rate(btp, bfn),
        map_score=map_over_thresholds(pred_sets, gt_sets),
        per_image=per_image,
    )


def _fmt(value, digits=3) -> str:
    if value is None:
        return "n/a"
    return f"{value:.{digits}f}"


def report_text(reports: Sequence[MetricsReport]) -> str:
    """Plain-text table: class x dataset rows of MAE/precision/recall plus mAP."""
    lines = []
    header = f"{'Class':<8} {'Dataset':<10} {'MAE':>7} {'Precision':>10} {'Recall':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for name, getter in (
        ("bvg+", lambda r: (r.bvg_plus.mae, r.bvg_plus.precision, r.bvg_plus.recall)),
        ("bvg-", lambda r: (r.bvg_minus.mae, r.bvg_minus.precision, r.bvg_minus.recall)),
        ("border", lambda r: (None, r.border_precision, r.border_recall)),
    ):
        for rep in reports:
            m, p, rc = getter(rep)
            mae_txt = _fmt(m) if m is not None else ""
            lines.append(
                f"{name:<8} {rep.dataset_label:<10} {mae_txt:>7} {_fmt(p):>10} {_fmt(rc):>8}"
            )
    for rep in reports:
        lines.append(
            f"mAP over IoU thresholds 0.50:0.95 ({rep.dataset_label}): {_fmt(rep.map_score)}"
        )
    return "\n".join(lines) + "\n"


def write_report(reports: Sequence[MetricsReport], json_path, text_path) -> str:
    payload = {rep.dataset_label: rep.to_json_dict() for rep in reports}
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    text = report_text(reports)
    with open(text_path, "w") as fh:
        fh.write(text)
    return text


# ---------------------------------------------------------------------------
# qualitative overlay
# ---------------------------------------------------------------------------

_TINT = {
    BVG_PLUS: np.array([60, 220, 60], dtype=np.float32),
    BVG_MINUS: np.array([230, 80, 230], dtype=np.float32),
    BORDER: np.array([250, 220, 40], dtype=np.float32),
}
_BOX_COLOR = np.array([60, 110, 255], dtype=np.uint8)

_DIGITS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
}


def _draw_digits(img: np.ndarray, text: str, row: int, col: int) -> None:
    h, w = img.shape[:2]
    for ch in text:
        glyph = _DIGITS.get(ch)
        if glyph is None:
            continue
        for dr, bits in enumerate(glyph):
            for dc, bit in enumerate(bits):
                if bit == "1" and 0 <= row + dr < h and 0 <= col + dc < w:
                    img[row + dr, col + dc] = _BOX_COLOR
        col += 4


def _draw_box(img: np.ndarray, bbox) -> None:
    r0, c0, r1, c1 = bbox
    h, w = img.shape[:2]
    r0c = max(r0, 0)
    r1c = min(r1, h - 1)
    c0c = max(c0, 0)
    c1c = min(c1, w - 1)
    img[r0c, c0c : c1c + 1] = _BOX_COLOR
    img[r1c, c0c : c1c + 1] = _BOX_COLOR
    img[r0c : r1c + 1, c0c] = _BOX_COLOR
    img[r0c : r1c + 1, c1c] = _BOX_COLOR


def render_overlay(image: np.ndarray, mask_or_instances) -> np.ndarray:
    """Tint class pixels and box each instance with its index.

    Accepts either a label mask or an InstanceSet. An empty mask leaves
    the image unchanged.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected a (h, w, 3) image, got {image.shape}")
    out = image.astype(np.float32).copy()

    if isinstance(mask_or_instances, InstanceSet):
        instances = mask_or_instances
        if (instances.height, instances.width) != image.shape[:2]:
            raise ValueError("instance set dimensions do not match the image")
        mask = np.zeros(image.shape[:2], dtype=np.uint8)
        for inst in instances.instances:
            for r, c in inst.pixels:
                mask[r, c] = inst.kind
    else:
        mask = _require_2d(mask_or_instances)
        if mask.shape != image.shape[:2]:
            raise ValueError("mask dimensions do not match the image")
        instances = extract_instances(mask)

    for kind, tint in _TINT.items():
        sel = mask == kind
        out[sel] = 0.55 * out[sel] + 0.45 * tint
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)

    for idx, inst in enumerate(instances.instances, start=1):
        bbox = inst.bbox
        _draw_box(out, bbox)
        _draw_digits(out, str(idx), bbox[0] - 6, bbox[1])
    return out
