"""VOC-style average precision, mAP and forgetting analytics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .boxes import BoundingBox, iou

IOU_THRESHOLD = 0.5


def _as_image_dict(x) -> dict:
    if isinstance(x, Mapping):
        return dict(x)
    return {"__single__": list(x)}


def match_detections(dets: Mapping[str, Sequence[BoundingBox]], gts: Mapping[str, Sequence[BoundingBox]],
                     cls: int, iou_thr: float = IOU_THRESHOLD) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy matching for one class.

    Returns confidences and true-positive flags of the class's detections in
    descending confidence order (stable for ties), and the number of gt boxes.
    Each detection takes the highest-IoU gt of its image that is still
    unmatched, provided that IoU reaches ``iou_thr``.
    """
    flat = [(img, d) for img, ds in dets.items() for d in ds if d.label == cls]
    scores = np.array([d.score if d.score is not None else 0.0 for _, d in flat], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    cls_gts = {img: [g for g in gs if g.label == cls] for img, gs in gts.items()}
    used = {img: np.zeros(len(gs), dtype=bool) for img, gs in cls_gts.items()}
    n_gt = sum(len(g) for g in cls_gts.values())
    tp = np.zeros(len(flat), dtype=bool)
    for rank, k in enumerate(order):
        img, d = flat[k]
        best, best_j = -1.0, -1
        for j, g in enumerate(cls_gts.get(img, [])):
            if used[img][j]:
                continue
            o = iou(d, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thr:
            used[img][best_j] = True
            tp[rank] = True
    return scores[order], tp, n_gt


def ap_from_pr(recall: np.ndarray, precision: np.ndarray, use_07_metric: bool = False) -> float:
    """Area under the precision envelope (all-point), or the 11-point VOC07 mean."""
    if use_07_metric:
        ap = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            p = precision[recall >= t].max() if np.any(recall >= t) else 0.0
            ap += p / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(dets, gts, cls: int, iou_thr: float = IOU_THRESHOLD,
                      use_07_metric: bool = False) -> float:
    """AP of one class.

    ``dets`` and ``gts`` are either ``{image_id: boxes}`` mappings or, for a
    single image, plain lists. With no gt of the class the AP is 1.0 when
    there are also no detections of it and 0.0 otherwise; :func:`mean_ap`
    leaves such classes out of the mean.
    """
    dets, gts = _as_image_dict(dets), _as_image_dict(gts)
    _, tp, n_gt = match_detections(dets, gts, cls, iou_thr)
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return ap_from_pr(recall, precision, use_07_metric)


def per_class_ap(dets, gts, num_classes: int, iou_thr: float = IOU_THRESHOLD,
                 use_07_metric: bool = False) -> dict[int, float]:
    """AP for every class present in the ground truth."""
    gts = _as_image_dict(gts)
    present = sorted({g.label for gs in gts.values() for g in gs if g.label < num_classes})
    return {c: average_precision(dets, gts, c, iou_thr, use_07_metric) for c in present}


def mean_ap(dets, gts, num_classes: int, iou_thr: float = IOU_THRESHOLD, use_07_metric: bool = False) -> float:
    """Mean AP x 100 over the classes that occur in ``gts``."""
    aps = per_class_ap(dets, gts, num_classes, iou_thr, use_07_metric)
    if not aps:
        raise ValueError("no ground-truth boxes: mAP undefined")
    return 100.0 * float(np.mean(list(aps.values())))


def detect_split(model, task: str, images, batch_size: int = 32, score_thr: float = 0.05,
                 nms_thr: float = 0.5) -> dict[str, list[BoundingBox]]:
    from .detector import images_to_tensor, infer_tensor

    model.eval()
    dtype = next(model.parameters()).dtype
    out = {}
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        for im, d in zip(chunk, infer_tensor(model, task, images_to_tensor(chunk, dtype), score_thr, nms_thr)):
            out[im.image_id] = d
    return out


def map_score(model, task: str, test_ds, use_07_metric: bool = False,
              return_per_class: bool = False):
    """mAP (0..100) of ``model``'s ``task`` branch on the test split of ``test_ds``."""
    images = test_ds.test if hasattr(test_ds, "test") else list(test_ds)
    if not images:
        raise ValueError("empty test set")
    dets = detect_split(model, task, images)
    gts = {im.image_id: im.boxes for im in images}
    n = model.num_classes(task)
    aps = per_class_ap(dets, gts, n, use_07_metric=use_07_metric)
    if not aps:
        raise ValueError("test set has no ground-truth boxes")
    m = 100.0 * float(np.mean(list(aps.values())))
    return (m, aps) if return_per_class else m


# ---------------------------------------------------------------------------
# forgetting


class MissingCheckpointError(KeyError):
    pass


@dataclass
class ForgettingMatrix:
    tasks: list[str]
    # values[i][j] for j > i: mAP(task i after task j) - mAP(task i after task i); None elsewhere
    values: list[list[Optional[float]]] = field(default_factory=list)

    @property
    def row_sums(self) -> list[float]:
        return [float(sum(v for v in row if v is not None)) for row in self.values]

    @property
    def total(self) -> float:
        return float(sum(self.row_sums))

    def to_dict(self) -> dict:
        return {"tasks": self.tasks, "values": self.values, "row_sums": self.row_sums}

    @property
    def empty(self) -> bool:
        return all(v is None for row in self.values for v in row)


def forgetting_matrix(result) -> ForgettingMatrix:
    """Build the matrix from a sequence result's checkpoint mAP table.

    ``result.table[i][j]`` is mAP of task ``i`` after training task ``j``.
    """
    tasks = list(result.tasks)
    n = len(tasks)
    if getattr(result, "joint", False):
        return ForgettingMatrix(tasks, [[None] * n for _ in range(n)])
    values: list[list[Optional[float]]] = []
    for i in range(n):
        row: list[Optional[float]] = [None] * n
        base = _entry(result, i, i)
        for j in range(i + 1, n):
            row[j] = _entry(result, i, j) - base
        values.append(row)
    return ForgettingMatrix(tasks, values)


def _entry(result, i: int, j: int) -> float:
    try:
        v = result.table[i][j]
    except (IndexError, KeyError, TypeError):
        v = None
    if v is None:
        raise MissingCheckpointError(f"missing checkpoint entry: task {result.tasks[i]} after task {result.tasks[j]}")
    return float(v)


def format_table(result, per_class: Optional[dict] = None) -> str:
    """Aligned plain-text table of the checkpoint mAPs and forgetting."""
    tasks = list(result.tasks)
    w = max(8, max(len(t) for t in tasks) + 2)
    lines = ["mAP(task | after)".ljust(w + 2) + "".join(f"after {t}".rjust(w + 4) for t in tasks)]
    for i, t in enumerate(tasks):
        cells = []
        for j in range(len(tasks)):
            v = result.table[i][j] if j < len(result.table[i]) else None
            cells.append(("-" if v is None else f"{v:.1f}").rjust(w + 4))
        lines.append(t.ljust(w + 2) + "".join(cells))
    if not getattr(result, "joint", False) and len(tasks) > 1:
        fm = forgetting_matrix(result)
        lines.append("")
        lines.append("forgetting row sums: " + ", ".join(f"{t}={s:+.1f}" for t, s in zip(tasks, fm.row_sums)))
    return "\n".join(lines)


def write_results(result, path, per_class: Optional[dict] = None) -> Path:
    path = Path(path)
    fm = forgetting_matrix(result)
    blob = {
        "tasks": list(result.tasks),
        "map_table": result.table,
        "per_class_ap": per_class or {},
        "forgetting": fm.to_dict(),
    }
    path.write_text(json.dumps(blob, indent=1))
    path.with_suffix(".txt").write_text(format_table(result) + "\n")
    return path
