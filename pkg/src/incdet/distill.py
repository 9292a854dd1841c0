"""Feature-level distillation losses between a frozen teacher and a student.

Feature maps are ``[C, H, W]`` or batched ``[B, C, H, W]``; batched inputs give
the mean of the per-image losses. Spatial weight maps (self-attention or the
top-down overlap counts) are L2-normalised over all cells and multiply every
channel identically. A map whose norm is zero weights its features by zero.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch

from .boxes import BoundingBox, intersect, iou, project_to_grid

MASK_REGIONS = ("intersection", "proposal", "gt")


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x[None]
    if x.dim() != 4:
        raise ValueError(f"expected [C, H, W] or [B, C, H, W] features, got shape {list(x.shape)}")
    return x


def _check_pair(student: torch.Tensor, teacher: torch.Tensor):
    if student.shape != teacher.shape:
        raise ValueError(f"feature shape mismatch: student {list(student.shape)} vs teacher {list(teacher.shape)}")


def self_attention(fm: torch.Tensor) -> torch.Tensor:
    """Channel sum of squared activations: ``[C, H, W] -> [H, W]`` (or batched)."""
    return fm.pow(2).sum(dim=-3)


def normalize_map(a: torch.Tensor) -> torch.Tensor:
    """``a / ||a||_2`` over the spatial entries of each map; zero maps stay zero."""
    flat = a.flatten(-2)
    sq = flat.pow(2).sum(-1, keepdim=True)
    nonzero = sq > 0
    # sqrt only of positive values, so the zero branch back-propagates 0, not NaN
    norm = torch.where(nonzero, sq, torch.ones_like(sq)).sqrt()
    out = torch.where(nonzero, flat / norm, torch.zeros_like(flat))
    return out.view_as(a)


def weighted_map_loss(student: torch.Tensor, teacher: torch.Tensor,
                      student_map: torch.Tensor, teacher_map: torch.Tensor) -> torch.Tensor:
    """``1/2 || n(m_s) * F_s - n(m_t) * F_t ||^2`` with ``n`` the L2 normalisation."""
    s, t = _batched(student), _batched(teacher)
    _check_pair(s, t)
    ms = normalize_map(student_map.reshape(s.shape[0], *s.shape[-2:]))
    mt = normalize_map(teacher_map.reshape(t.shape[0], *t.shape[-2:]))
    diff = ms[:, None] * s - mt[:, None] * t
    return 0.5 * diff.pow(2).flatten(1).sum(1).mean()


def bottom_up_afd(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    return weighted_map_loss(student, teacher, self_attention(_batched(student)),
                             self_attention(_batched(teacher)))


def topdown_afd(student: torch.Tensor, teacher: torch.Tensor,
                student_mask: torch.Tensor, teacher_mask: torch.Tensor) -> torch.Tensor:
    s = _batched(student)
    for name, m in (("student", student_mask), ("teacher", teacher_mask)):
        if m.shape[-2:] != s.shape[-2:]:
            raise ValueError(f"{name} mask shape {list(m.shape)} does not match features {list(s.shape)}")
    return weighted_map_loss(student, teacher, student_mask.to(s.dtype), teacher_mask.to(s.dtype))


def feature_distill(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    s, t = _batched(student), _batched(teacher)
    _check_pair(s, t)
    return 0.5 * (s - t).pow(2).flatten(1).sum(1).mean()


def attention_distill(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    s, t = _batched(student), _batched(teacher)
    _check_pair(s, t)
    diff = normalize_map(self_attention(s)) - normalize_map(self_attention(t))
    return 0.5 * diff.pow(2).flatten(1).sum(1).mean()


# ---------------------------------------------------------------------------
# top-down masks


def topdown_threshold(gt: BoundingBox, proposals: Sequence[BoundingBox]) -> float:
    """Half of the best IoU between ``gt`` and any proposal (0 with no proposals)."""
    if not proposals:
        return 0.0
    return 0.5 * max(iou(gt, p) for p in proposals)


def qualifying_pairs(gts: Sequence[BoundingBox], proposals: Sequence[BoundingBox]) -> list[tuple[int, int]]:
    """``(gt index, proposal index)`` pairs whose IoU strictly exceeds the gt's threshold."""
    pairs = []
    for i, g in enumerate(gts):
        ious = [iou(g, p) for p in proposals]
        if not ious:
            continue
        th = 0.5 * max(ious)
        pairs.extend((i, j) for j, v in enumerate(ious) if v > th)
    return pairs


def topdown_mask(gts: Sequence[BoundingBox], proposals: Sequence[BoundingBox], grid: tuple[int, int],
                 stride: int, region: str = "intersection", dtype=torch.float32) -> torch.Tensor:
    """Count map ``[Hf, Wf]``: starts at zero and adds 1 on the cells of every
    qualifying gt/proposal overlap."""
    if region not in MASK_REGIONS:
        raise ValueError(f"unknown mask region {region!r}; expected one of {MASK_REGIONS}")
    mask = torch.zeros(grid, dtype=dtype)
    for i, j in qualifying_pairs(gts, proposals):
        g, p = gts[i], proposals[j]
        if region == "intersection":
            box = intersect(g, p)
        elif region == "proposal":
            box = p
        else:
            box = g
        if box is None:
            continue
        r = project_to_grid(box, stride, grid)
        mask[r.r1:r.r2, r.c1:r.c2] += 1
    return mask


def topdown_mask_tensor(gt_boxes: torch.Tensor, proposals: torch.Tensor, grid: tuple[int, int],
                        stride: int, region: str = "intersection") -> torch.Tensor:
    """Vectorised :func:`topdown_mask` for ``[G, 4]`` / ``[P, 4]`` box tensors."""
    from .boxes import box_iou_tensor

    if region not in MASK_REGIONS:
        raise ValueError(f"unknown mask region {region!r}; expected one of {MASK_REGIONS}")
    hf, wf = grid
    mask = torch.zeros(grid, dtype=torch.float64)
    if gt_boxes.numel() == 0 or proposals.numel() == 0:
        return mask
    gt_boxes = gt_boxes.double()
    proposals = proposals.double()
    ious = box_iou_tensor(gt_boxes, proposals)  # [G, P]
    th = 0.5 * ious.max(dim=1, keepdim=True).values
    gi, pj = torch.nonzero(ious > th, as_tuple=True)
    if gi.numel() == 0:
        return mask
    g, p = gt_boxes[gi], proposals[pj]
    if region == "intersection":
        boxes = torch.cat([torch.maximum(g[:, :2], p[:, :2]), torch.minimum(g[:, 2:], p[:, 2:])], dim=1)
    elif region == "proposal":
        boxes = p
    else:
        boxes = g
    c1 = torch.floor(boxes[:, 0] / stride).clamp(0, wf).long()
    r1 = torch.floor(boxes[:, 1] / stride).clamp(0, hf).long()
    c2 = torch.ceil(boxes[:, 2] / stride).clamp(0, wf).long()
    r2 = torch.ceil(boxes[:, 3] / stride).clamp(0, hf).long()
    c2 = torch.maximum(c2, c1)
    r2 = torch.maximum(r2, r1)
    # 2-D difference array, then prefix sums
    diff = torch.zeros((hf + 1, wf + 1), dtype=torch.float64)
    ones = torch.ones_like(r1, dtype=torch.float64)
    diff.index_put_((r1, c1), ones, accumulate=True)
    diff.index_put_((r1, c2), -ones, accumulate=True)
    diff.index_put_((r2, c1), -ones, accumulate=True)
    diff.index_put_((r2, c2), ones, accumulate=True)
    return diff.cumsum(0).cumsum(1)[:hf, :wf]


# ---------------------------------------------------------------------------
# model-level loss


def afd_from_features(student_fm: torch.Tensor, teacher_fm: torch.Tensor,
                      student_masks: Optional[torch.Tensor], teacher_masks: Optional[torch.Tensor],
                      variant: str = "afd") -> torch.Tensor:
    """Bottom-up plus top-down terms (or either alone) on ``[B, C, H, W]`` features."""
    loss = student_fm.new_zeros(())
    if variant in ("afd", "bu"):
        loss = loss + bottom_up_afd(student_fm, teacher_fm)
    if variant in ("afd", "td"):
        loss = loss + topdown_afd(student_fm, teacher_fm, student_masks, teacher_masks)
    if variant not in ("afd", "bu", "td"):
        raise ValueError(f"unknown AFD variant {variant!r}")
    return loss


def batch_masks(model, task: str, fm: torch.Tensor, gt_boxes: Sequence[torch.Tensor],
                region: str = "intersection") -> torch.Tensor:
    """Top-down masks ``[B, Hf, Wf]`` from ``model``'s own proposals for ``task``."""
    from .detector import propose_tensor

    cfg = model.cfg
    props = propose_tensor(model, task, fm.detach(), cfg.post_nms_train)
    grid = tuple(fm.shape[-2:])
    masks = [topdown_mask_tensor(g, p, grid, cfg.stride, region) for g, (p, _) in zip(gt_boxes, props)]
    return torch.stack(masks).to(fm.dtype)


def afd(student, teacher, student_task: str, teacher_task: str, images: torch.Tensor,
        gt_boxes: Sequence[torch.Tensor], variant: str = "afd", region: str = "intersection",
        student_fm: Optional[torch.Tensor] = None,
        masks: Optional[tuple[torch.Tensor, torch.Tensor]] = None) -> torch.Tensor:
    """Attentive feature distillation of ``student`` towards ``teacher`` on a batch.

    The student's masks come from its ``student_task`` proposals and the
    teacher's from its ``teacher_task`` proposals, both against the same
    ground-truth boxes. Gradients reach only the student. ``masks`` pins
    precomputed ``(student, teacher)`` masks.
    """
    if not getattr(teacher, "frozen", False):
        raise ValueError("teacher must be a frozen snapshot")
    s_fm = student.backbone(images) if student_fm is None else student_fm
    with torch.no_grad():
        t_fm = teacher.backbone(images)
    s_masks = t_masks = None
    if masks is not None:
        s_masks, t_masks = masks
    elif variant in ("afd", "td"):
        s_masks = batch_masks(student, student_task, s_fm, gt_boxes, region)
        t_masks = batch_masks(teacher, teacher_task, t_fm, gt_boxes, region)
    return afd_from_features(s_fm, t_fm, s_masks, t_masks, variant)
