"""Minimal two-stage detector with a shared backbone and per-task branches.

Layout::

    image -> backbone (shared) -> feature map [C, H/8, W/8]
                                   |-> branch[task].rpn  -> proposals
                                   '-> branch[task].head -> class scores + box deltas

Each task owns its proposal network and head (``share_rpn=True`` keeps one
proposal network for all tasks). Anchors are 4 scales x 3 ratios per cell.
RoI features are the proposal's grid cells average-pooled to ``roi_size``
bins, computed from a summed-area table so the whole batch pools at once.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, nms

from .boxes import (BoundingBox, box_iou_tensor, boxes_to_tensor, clip_boxes_tensor,
                    decode_deltas, encode_deltas)

HEAD_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
RPN_SMOOTH_L1_BETA = 1.0 / 9.0
HEAD_SMOOTH_L1_BETA = 1.0

# Proposal = BoundingBox with objectness score; Detection = BoundingBox with label and confidence.
Proposal = BoundingBox
Detection = BoundingBox


class UnknownTaskError(KeyError):
    pass


@dataclass
class DetectorConfig:
    image_size: tuple[int, int] = (128, 128)
    channels: tuple[int, ...] = (16, 32, 64, 64)
    anchor_scales: tuple[float, ...] = (12.0, 20.0, 32.0, 48.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_channels: Optional[int] = None
    head_hidden: int = 128
    roi_size: int = 4
    share_rpn: bool = False
    # RPN training
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    # proposals
    pre_nms_topk: int = 300
    post_nms_train: int = 128
    post_nms_test: int = 64
    rpn_nms: float = 0.7
    min_proposal_size: float = 2.0
    # head training
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    roi_pos_iou: float = 0.5

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.image_size
        return math.ceil(h / self.stride), math.ceil(w / self.stride)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        for k in ("image_size", "channels", "anchor_scales", "anchor_ratios"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class FeatureMap:
    values: torch.Tensor  # [C, Hf, Wf]
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return int(self.values.shape[-2]), int(self.values.shape[-1])


# ---------------------------------------------------------------------------
# modules


def _norm(c: int) -> nn.GroupNorm:
    groups = math.gcd(c, 8)
    return nn.GroupNorm(groups, c)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, downsample: bool):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=2 if downsample else 1, padding=1),
            _norm(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            _norm(cout),
            nn.ReLU(inplace=True),
        )


class Backbone(nn.Module):
    """Conv blocks; every block but the last halves the resolution."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        blocks = []
        cin = 3
        for i, c in enumerate(channels):
            blocks.append(ConvBlock(cin, c, downsample=i < len(channels) - 1))
            cin = c
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = cin

    def forward(self, x):
        return self.blocks(x)


class RPN(nn.Module):
    def __init__(self, cin: int, mid: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, mid, 3, padding=1)
        self.cls = nn.Conv2d(mid, num_anchors, 1)
        self.reg = nn.Conv2d(mid, 4 * num_anchors, 1)
        for layer in (self.cls, self.reg):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, fm):
        b, _, h, w = fm.shape
        t = F.relu(self.conv(fm))
        logits = self.cls(t).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.reg(t).view(b, -1, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)
        return logits, deltas


class Head(nn.Module):
    def __init__(self, in_features: int, hidden: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc = nn.Linear(in_features, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, 4 * num_classes)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.reg.bias)

    def forward(self, x):
        t = F.relu(self.fc(x))
        return self.cls(t), self.reg(t).view(-1, self.num_classes, 4)


class Branch(nn.Module):
    def __init__(self, cfg: DetectorConfig, cin: int, num_classes: int, with_rpn: bool):
        super().__init__()
        self.num_classes = num_classes
        self.rpn = RPN(cin, cfg.rpn_channels or cin, cfg.num_anchors) if with_rpn else None
        self.head = Head(cin * cfg.roi_size ** 2, cfg.head_hidden, num_classes)


class DetectorModel(nn.Module):
    def __init__(self, cfg: Optional[DetectorConfig] = None):
        super().__init__()
        self.cfg = cfg or DetectorConfig()
        self.backbone = Backbone(self.cfg.channels)
        c = self.backbone.out_channels
        self.shared_rpn = RPN(c, self.cfg.rpn_channels or c, self.cfg.num_anchors) if self.cfg.share_rpn else None
        self.branches = nn.ModuleDict()
        self.tasks: list[str] = []
        self.frozen = False
        self.register_buffer("anchors", make_anchors(self.cfg), persistent=False)

    # task management

    def add_task(self, name: str, num_classes: int) -> Branch:
        if name in self.branches:
            raise ValueError(f"task {name!r} already has a branch")
        branch = Branch(self.cfg, self.backbone.out_channels, num_classes, with_rpn=not self.cfg.share_rpn)
        branch.to(dtype=next(self.backbone.parameters()).dtype)
        self.branches[name] = branch
        self.tasks.append(name)
        return branch

    def branch(self, task: str) -> Branch:
        if task not in self.branches:
            raise UnknownTaskError(f"unknown task {task!r}; model has {self.tasks}")
        return self.branches[task]

    def rpn(self, task: str) -> RPN:
        return self.shared_rpn if self.cfg.share_rpn else self.branch(task).rpn

    def num_classes(self, task: str) -> int:
        return self.branch(task).num_classes

    def freeze_first_block(self):
        for p in self.backbone.blocks[0].parameters():
            p.requires_grad_(False)

    def forward(self, images):
        return self.backbone(images)


def make_anchors(cfg: DetectorConfig) -> torch.Tensor:
    """Anchors ``[Hf * Wf * A, 4]`` ordered (row, col, anchor)."""
    hf, wf = cfg.grid
    s = cfg.stride
    base = []
    for scale in cfg.anchor_scales:
        for ratio in cfg.anchor_ratios:  # ratio = h / w
            w = scale / math.sqrt(ratio)
            h = scale * math.sqrt(ratio)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
    base = torch.tensor(base, dtype=torch.float32)
    cy = (torch.arange(hf, dtype=torch.float32) + 0.5) * s
    cx = (torch.arange(wf, dtype=torch.float32) + 0.5) * s
    yy, xx = torch.meshgrid(cy, cx, indexing="ij")
    centers = torch.stack([xx, yy, xx, yy], dim=-1).reshape(-1, 1, 4)
    return (centers + base[None]).reshape(-1, 4)


# ---------------------------------------------------------------------------
# RoI pooling


def project_boxes_tensor(boxes: torch.Tensor, stride: int, grid: tuple[int, int]) -> torch.Tensor:
    """Integer cell rects ``[N, 4] = (r1, c1, r2, c2)``; never empty for in-image boxes."""
    hf, wf = grid
    c1 = torch.floor(boxes[:, 0] / stride).clamp(0, wf - 1)
    r1 = torch.floor(boxes[:, 1] / stride).clamp(0, hf - 1)
    c2 = torch.ceil(boxes[:, 2] / stride).clamp(max=wf)
    r2 = torch.ceil(boxes[:, 3] / stride).clamp(max=hf)
    c2 = torch.maximum(c2, c1 + 1)
    r2 = torch.maximum(r2, r1 + 1)
    return torch.stack([r1, c1, r2, c2], dim=1).long()


def roi_pool(fm: torch.Tensor, rects: torch.Tensor, out: int) -> torch.Tensor:
    """Adaptive average pool of each cell rect of ``fm [C, Hf, Wf]`` to ``out x out``.

    Bin ``p`` of a length-``L`` span covers ``[floor(p L / out), ceil((p + 1) L / out))``,
    which reproduces ``adaptive_avg_pool2d`` on the cropped region.
    """
    c, hf, wf = fm.shape
    if rects.numel() == 0:
        return fm.new_zeros((0, c * out * out))
    sat = F.pad(fm.cumsum(1).cumsum(2), (1, 0, 1, 0)).reshape(c, -1)  # [C, (Hf+1)(Wf+1)]
    p = torch.arange(out, device=fm.device)

    def bins(start, length):
        lo = start[:, None] + torch.div(p[None] * length[:, None], out, rounding_mode="floor")
        hi = start[:, None] + torch.div((p[None] + 1) * length[:, None] + out - 1, out, rounding_mode="floor")
        return lo, hi

    r_lo, r_hi = bins(rects[:, 0], rects[:, 2] - rects[:, 0])  # [R, out]
    c_lo, c_hi = bins(rects[:, 1], rects[:, 3] - rects[:, 1])
    stride = wf + 1

    def at(r, col):
        idx = (r[:, :, None] * stride + col[:, None, :]).reshape(-1)
        return sat[:, idx].reshape(c, r.shape[0], out, out)

    total = at(r_hi, c_hi) - at(r_lo, c_hi) - at(r_hi, c_lo) + at(r_lo, c_lo)
    area = ((r_hi - r_lo)[:, :, None] * (c_hi - c_lo)[:, None, :]).to(fm.dtype)
    pooled = total / area[None]
    return pooled.permute(1, 0, 2, 3).reshape(rects.shape[0], -1)


# ---------------------------------------------------------------------------
# losses


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float) -> torch.Tensor:
    """Elementwise smooth-L1, summed."""
    return F.smooth_l1_loss(pred, target, beta=beta, reduction="sum")


def _sample(labels: torch.Tensor, batch: int, pos_fraction: float, generator) -> tuple[torch.Tensor, torch.Tensor]:
    pos = torch.nonzero(labels == 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(pos.numel(), int(batch * pos_fraction))
    n_neg = min(neg.numel(), batch - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return pos, neg


def _rpn_targets(anchors, gt_boxes, cfg: DetectorConfig):
    labels = torch.zeros(anchors.shape[0], dtype=torch.long)
    matched = torch.zeros(anchors.shape[0], dtype=torch.long)
    if gt_boxes.numel() == 0:
        return labels, matched
    ious = box_iou_tensor(anchors, gt_boxes)  # [A, G]
    best_iou, matched = ious.max(dim=1)
    labels.fill_(-1)
    labels[best_iou < cfg.rpn_neg_iou] = 0
    labels[best_iou >= cfg.rpn_pos_iou] = 1
    # every gt keeps its best anchor(s)
    gt_best = ious.max(dim=0).values
    for g in range(gt_boxes.shape[0]):
        if gt_best[g] > 0:
            hits = torch.nonzero(ious[:, g] == gt_best[g]).flatten()
            labels[hits] = 1
            matched[hits] = g
    return labels, matched


@dataclass
class Target:
    boxes: torch.Tensor   # [G, 4]
    labels: torch.Tensor  # [G] long, 0-based category ids

    @classmethod
    def from_boxes(cls, boxes: Sequence[BoundingBox], dtype=torch.float32) -> "Target":
        return cls(boxes_to_tensor(list(boxes), dtype=dtype),
                   torch.tensor([b.label for b in boxes], dtype=torch.long))


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.pixels for im in images])).to(dtype)


def targets_from_images(images, dtype=torch.float32) -> list[Target]:
    return [Target.from_boxes(im.boxes, dtype=dtype) for im in images]


@dataclass
class LossParts:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    head_cls: torch.Tensor
    head_reg: torch.Tensor
    features: Optional[torch.Tensor] = field(default=None, repr=False)

    @property
    def total(self) -> torch.Tensor:
        return self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg


def rpn_outputs(model: DetectorModel, task: str, fm: torch.Tensor):
    return model.rpn(task)(fm)


def detection_loss(model: DetectorModel, task: str, images: torch.Tensor, targets: Sequence[Target],
                   generator: Optional[torch.Generator] = None,
                   proposals: Optional[Sequence[torch.Tensor]] = None,
                   features: Optional[torch.Tensor] = None) -> LossParts:
    """Classification (cross-entropy) plus regression (smooth-L1) losses of
    both stages, averaged over the images of the batch.

    ``proposals`` pins the second-stage inputs (otherwise they come from the
    current proposal network) and ``features`` reuses an already computed
    backbone output.
    """
    cfg = model.cfg
    branch = model.branch(task)
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    for t in targets:
        if t.labels.numel() and (t.labels.min() < 0 or t.labels.max() >= branch.num_classes):
            raise ValueError(f"label out of range for task {task!r} with {branch.num_classes} classes")
    fm = model.backbone(images) if features is None else features
    logits, deltas = rpn_outputs(model, task, fm)
    anchors = model.anchors.to(fm.dtype)
    n_img = images.shape[0]
    h, w = images.shape[-2:]

    rpn_cls = fm.new_zeros(())
    rpn_reg = fm.new_zeros(())
    if proposals is None:
        with torch.no_grad():
            proposals = [
                _proposals_from_outputs(logits[i].detach(), deltas[i].detach(), anchors, (h, w), cfg,
                                        cfg.post_nms_train)[0]
                for i in range(n_img)
            ]

    roi_feats, roi_labels, roi_targets, roi_counts = [], [], [], []
    for i in range(n_img):
        gt = targets[i].boxes.to(fm.dtype)
        gl = targets[i].labels
        # stage one
        labels, matched = _rpn_targets(anchors, gt, cfg)
        pos, neg = _sample(labels, cfg.rpn_batch, cfg.rpn_pos_fraction, generator)
        idx = torch.cat([pos, neg])
        if idx.numel():
            rpn_cls = rpn_cls + F.binary_cross_entropy_with_logits(
                logits[i, idx], labels[idx].to(fm.dtype), reduction="mean")
        if pos.numel():
            tgt = encode_deltas(anchors[pos], gt[matched[pos]], RPN_BOX_WEIGHTS)
            rpn_reg = rpn_reg + smooth_l1(deltas[i, pos], tgt, RPN_SMOOTH_L1_BETA) / max(idx.numel(), 1)
        # stage two
        rois = torch.cat([proposals[i].to(fm.dtype), gt]) if gt.numel() else proposals[i].to(fm.dtype)
        if rois.numel() == 0:
            roi_counts.append(0)
            continue
        if gt.numel():
            ious = box_iou_tensor(rois, gt)
            best, m = ious.max(dim=1)
            roi_lab = torch.where(best >= cfg.roi_pos_iou, 1, 0)
        else:
            best = rois.new_zeros(rois.shape[0])
            m = torch.zeros(rois.shape[0], dtype=torch.long)
            roi_lab = torch.zeros(rois.shape[0], dtype=torch.long)
        pos, neg = _sample(roi_lab, cfg.roi_batch, cfg.roi_pos_fraction, generator)
        keep = torch.cat([pos, neg])
        sel = rois[keep]
        cls_t = torch.zeros(keep.numel(), dtype=torch.long)
        if pos.numel():
            cls_t[: pos.numel()] = gl[m[pos]] + 1
        reg_t = torch.zeros((keep.numel(), 4), dtype=fm.dtype)
        if pos.numel():
            reg_t[: pos.numel()] = encode_deltas(sel[: pos.numel()], gt[m[pos]], HEAD_BOX_WEIGHTS)
        rects = project_boxes_tensor(sel, cfg.stride, fm.shape[-2:])
        roi_feats.append(roi_pool(fm[i], rects, cfg.roi_size))
        roi_labels.append(cls_t)
        roi_targets.append(reg_t)
        roi_counts.append(keep.numel())

    head_cls = fm.new_zeros(())
    head_reg = fm.new_zeros(())
    if roi_feats:
        cls_logits, box_deltas = branch.head(torch.cat(roi_feats))
        labels = torch.cat(roi_labels)
        reg_t = torch.cat(roi_targets)
        start = 0
        for i, n in enumerate(c for c in roi_counts if c > 0):
            sl = slice(start, start + n)
            head_cls = head_cls + F.cross_entropy(cls_logits[sl], labels[sl])
            fg = torch.nonzero(labels[sl] > 0).flatten() + start
            if fg.numel():
                pred = box_deltas[fg, labels[fg] - 1]
                head_reg = head_reg + smooth_l1(pred, reg_t[fg], HEAD_SMOOTH_L1_BETA) / n
            start += n
    return LossParts(rpn_cls / n_img, rpn_reg / n_img, head_cls / n_img, head_reg / n_img, features=fm)


# ---------------------------------------------------------------------------
# inference


def _proposals_from_outputs(logits, deltas, anchors, image_size, cfg: DetectorConfig, k: int):
    """Top-k proposals ``(boxes [k', 4], scores [k'])`` for one image."""
    h, w = image_size
    if k <= 0:
        return anchors.new_zeros((0, 4)), anchors.new_zeros((0,))
    n = min(cfg.pre_nms_topk, logits.numel())
    scores, order = logits.topk(n)
    boxes = decode_deltas(anchors[order], deltas[order], RPN_BOX_WEIGHTS)
    boxes = clip_boxes_tensor(boxes, h, w)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_proposal_size) & ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_proposal_size)
    boxes, scores = boxes[ok], scores[ok]
    keep = nms(boxes.float(), scores.float(), cfg.rpn_nms)[:k]
    return boxes[keep], torch.sigmoid(scores[keep])


def _check_image_tensor(model: DetectorModel, images: torch.Tensor):
    expected = tuple(model.cfg.image_size)
    actual = tuple(images.shape[-2:])
    if images.dim() != 4 or images.shape[1] != 3 or actual != expected:
        raise ValueError(f"image shape mismatch: expected [N, 3, {expected[0]}, {expected[1]}], "
                         f"got {list(images.shape)}")


def extract_features(model: DetectorModel, image) -> FeatureMap:
    """Backbone features of one ``LabeledImage`` (or ``[3, H, W]`` array)."""
    pixels = image.pixels if hasattr(image, "pixels") else image
    x = torch.as_tensor(np.asarray(pixels), dtype=next(model.parameters()).dtype)[None]
    _check_image_tensor(model, x)
    return FeatureMap(model.backbone(x)[0], model.cfg.stride)


def propose_tensor(model: DetectorModel, task: str, fm: torch.Tensor, k: int):
    """Batched proposals for features ``fm [B, C, Hf, Wf]``: list of (boxes, scores)."""
    with torch.no_grad():
        logits, deltas = rpn_outputs(model, task, fm)
        anchors = model.anchors.to(fm.dtype)
        return [_proposals_from_outputs(logits[i], deltas[i], anchors, model.cfg.image_size, model.cfg, k)
                for i in range(fm.shape[0])]


def propose(model: DetectorModel, task: str, fm: FeatureMap, k: int) -> list[Proposal]:
    """At most ``k`` proposals after objectness top-k and NMS at IoU 0.7."""
    model.branch(task)
    if k <= 0:
        return []
    boxes, scores = propose_tensor(model, task, fm.values[None], k)[0]
    return [BoundingBox(*map(float, b), label=0, score=float(s)) for b, s in zip(boxes.tolist(), scores.tolist())]


@torch.no_grad()
def infer_tensor(model: DetectorModel, task: str, images: torch.Tensor, score_thr: float = 0.05,
                 nms_thr: float = 0.5, max_detections: int = 100) -> list[list[Detection]]:
    branch = model.branch(task)
    _check_image_tensor(model, images)
    cfg = model.cfg
    fm = model.backbone(images)
    props = propose_tensor(model, task, fm, cfg.post_nms_test)
    h, w = cfg.image_size
    out: list[list[Detection]] = []
    for i, (boxes, _) in enumerate(props):
        if boxes.numel() == 0:
            out.append([])
            continue
        feats = roi_pool(fm[i], project_boxes_tensor(boxes, cfg.stride, fm.shape[-2:]), cfg.roi_size)
        cls_logits, deltas = branch.head(feats)
        probs = F.softmax(cls_logits, dim=1)[:, 1:]  # drop background
        n, c = probs.shape
        dec = decode_deltas(boxes.repeat_interleave(c, 0), deltas.reshape(-1, 4), HEAD_BOX_WEIGHTS)
        dec = clip_boxes_tensor(dec, h, w)
        scores = probs.reshape(-1)
        labels = torch.arange(c).repeat(n)
        ok = (scores >= score_thr) & (dec[:, 2] > dec[:, 0]) & (dec[:, 3] > dec[:, 1])
        dec, scores, labels = dec[ok], scores[ok], labels[ok]
        keep = batched_nms(dec.float(), scores.float(), labels, nms_thr)[:max_detections]
        dets = [BoundingBox(*map(float, dec[j].tolist()), label=int(labels[j]), score=float(scores[j]))
                for j in keep.tolist()]
        dets.sort(key=lambda d: -d.score)
        out.append(dets)
    return out


def infer(model: DetectorModel, task: str, image, score_thr: float = 0.05, nms_thr: float = 0.5,
          max_detections: int = 100) -> list[Detection]:
    """Detections for one image, class-wise NMS applied, sorted by confidence."""
    model.branch(task)
    x = torch.as_tensor(np.asarray(image.pixels if hasattr(image, "pixels") else image),
                        dtype=next(model.parameters()).dtype)[None]
    return infer_tensor(model, task, x, score_thr, nms_thr, max_detections)[0]


# ---------------------------------------------------------------------------
# teacher, optimiser, checkpoints


def snapshot_teacher(model: DetectorModel) -> DetectorModel:
    """Frozen deep copy: no gradients, eval mode, refused by :func:`make_optimizer`."""
    if not model.tasks:
        raise ValueError("cannot snapshot a model that has no trained task")
    teacher = copy.deepcopy(model)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.frozen = True
    return teacher


def make_optimizer(model: DetectorModel, lr: float, momentum: float = 0.9,
                   weight_decay: float = 1e-4) -> torch.optim.SGD:
    if getattr(model, "frozen", False):
        raise ValueError("refusing to optimise a frozen teacher model")
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def parameter_digest(model: nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: DetectorModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": model.cfg.to_dict(),
        "tasks": list(model.tasks),
        "num_classes": {t: model.num_classes(t) for t in model.tasks},
        "anchor_config": {"scales": list(model.cfg.anchor_scales), "ratios": list(model.cfg.anchor_ratios)},
        "stride": model.cfg.stride,
        "first_block_frozen": not any(p.requires_grad for p in model.backbone.blocks[0].parameters()),
    }
    torch.save({"meta": meta, "state_dict": model.state_dict()}, path)
    return path


def load_checkpoint(path) -> DetectorModel:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    meta = blob["meta"]
    model = DetectorModel(DetectorConfig.from_dict(meta["config"]))
    for t in meta["tasks"]:
        model.add_task(t, meta["num_classes"][t])
    model.load_state_dict(blob["state_dict"])
    if meta.get("first_block_frozen"):
        model.freeze_first_block()
    return model
