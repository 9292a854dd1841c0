"""Sequential training: first task, teacher snapshot, incremental tasks, joint upper bound.

Each incremental step minimises::

    det_loss(current batch, current task)
      + det_loss(exemplar batch, each exemplar's own task branch)
      + lam * distill(student features, teacher features)

One current-task batch and (when exemplars exist) one exemplar batch are drawn
per optimisation step. The teacher is a frozen copy of the model taken right
before the new task and is dropped once that task is trained.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import distill as D
from .detector import (DetectorConfig, DetectorModel, detection_loss, images_to_tensor, make_optimizer,
                       parameter_digest, save_checkpoint, snapshot_teacher, targets_from_images)
from .evaluation import map_score
from .sampling import ExemplarSet, exemplar_batches, per_class_budget, sample_exemplars
from .synthdata import LabeledImage, TaskDataset

log = logging.getLogger(__name__)

METHODS = ("finetune", "feature_distill", "attention_distill", "afd", "afd_bu", "afd_td", "joint")
DISTILL_METHODS = ("feature_distill", "attention_distill", "afd", "afd_bu", "afd_td")


class TrainingDiverged(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 0.01
    lr_drop_epoch: int = 10  # epochs from here on run at lr * 0.1
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    lam: float = 1e-4
    method: str = "finetune"
    exemplar_budget: int = 0  # total per finished task, split evenly over its classes
    exemplar_strategy: str = "adaptive"
    eta: int = 5
    exemplar_batch_size: int = 4
    rank_count: str = "class"
    mask_region: str = "intersection"
    freeze_first_block: bool = True
    seed: int = 0
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.exemplar_budget < 0:
            raise ValueError("exemplar_budget must be >= 0")
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig.from_dict(self.detector)

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.lr_drop_epoch else self.lr * 0.1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    task: str
    epoch: int
    lr: float
    det_current: float
    det_exemplar: float
    distill: float
    total: float


@dataclass
class SequenceResult:
    tasks: list[str]
    table: list[list[Optional[float]]]  # table[i][j] = mAP(task i after training task j)
    logs: dict[str, dict] = field(default_factory=dict)
    per_class: dict[str, dict] = field(default_factory=dict)
    joint: bool = False
    method: str = ""

    def entries(self) -> int:
        return sum(v is not None for row in self.table for v in row)

    def final(self, i: int) -> float:
        return self.table[i][-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceResult":
        for key in ("tasks", "table"):
            if key not in d:
                raise ValueError(f"result file missing field {key!r}")
        tasks, table = d["tasks"], d["table"]
        if not isinstance(tasks, list) or not all(isinstance(t, str) for t in tasks):
            raise ValueError("result field 'tasks' must be a list of task names")
        if not isinstance(table, list) or len(table) != len(tasks):
            raise ValueError("result field 'table' must have one row per task")
        for row in table:
            if not isinstance(row, list) or not all(v is None or isinstance(v, (int, float)) for v in row):
                raise ValueError("result field 'table' must hold numbers or nulls")
            for v in row:
                if v is not None and not (0.0 <= v <= 100.0):
                    raise ValueError(f"result field 'table' has mAP {v} outside [0, 100]")
        return cls(tasks=tasks, table=table, logs=d.get("logs", {}), per_class=d.get("per_class", {}),
                   joint=bool(d.get("joint", False)), method=d.get("method", ""))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "SequenceResult":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing result file {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt result file {path}: {exc}") from exc
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# helpers


def new_model(cfg: TrainConfig) -> DetectorModel:
    torch.manual_seed(cfg.seed)
    return DetectorModel(cfg.detector)


def _add_branch(model: DetectorModel, ds: TaskDataset, cfg: TrainConfig, index: int):
    if ds.name in model.branches:
        return
    torch.manual_seed(cfg.seed * 1009 + 17 * (index + 1))
    model.add_task(ds.name, ds.num_classes)


def _rngs(cfg: TrainConfig, stage: int):
    ss = np.random.SeedSequence([cfg.seed, stage])
    np_rng = np.random.default_rng(ss)
    gen = torch.Generator().manual_seed(int(ss.generate_state(1)[0]))
    return np_rng, gen


def joint_schedule(sizes: Sequence[int], batch_size: int, rng) -> list[tuple[int, np.ndarray]]:
    """One epoch of (task index, image indices) steps, round-robin over tasks.

    Every task contributes the same number of batches (that of the largest
    task); smaller tasks wrap around their shuffled order.
    """
    per_task = []
    for n in sizes:
        order = rng.permutation(n)
        per_task.append([order[s:s + batch_size] for s in range(0, n, batch_size)])
    n_rounds = max(len(b) for b in per_task)
    steps = []
    for r in range(n_rounds):
        for t, b in enumerate(per_task):
            steps.append((t, b[r % len(b)]))
    return steps


def _distill_variant(method: str) -> Optional[str]:
    return {"afd": "afd", "afd_bu": "bu", "afd_td": "td"}.get(method)


def distill_loss(method: str, student: DetectorModel, teacher: DetectorModel, images: torch.Tensor,
                 student_fm: torch.Tensor, gt_boxes: Sequence[torch.Tensor],
                 student_tasks: Sequence[str], teacher_tasks: Sequence[str],
                 region: str = "intersection") -> torch.Tensor:
    """Distillation term of ``method`` on a batch; per-image proposal branches
    pick which task's proposals feed each image's top-down masks."""
    with torch.no_grad():
        teacher_fm = teacher.backbone(images)
    if method == "feature_distill":
        return D.feature_distill(student_fm, teacher_fm)
    if method == "attention_distill":
        return D.attention_distill(student_fm, teacher_fm)
    variant = _distill_variant(method)
    if variant is None:
        raise ValueError(f"{method!r} is not a distillation method")
    s_masks = t_masks = None
    if variant in ("afd", "td"):
        s_masks = _masks_by_task(student, student_fm, gt_boxes, student_tasks, region)
        t_masks = _masks_by_task(teacher, teacher_fm, gt_boxes, teacher_tasks, region)
    return D.afd_from_features(student_fm, teacher_fm, s_masks, t_masks, variant)


def _masks_by_task(model, fm, gt_boxes, tasks, region):
    masks = torch.zeros((fm.shape[0], *fm.shape[-2:]), dtype=fm.dtype)
    for task in sorted(set(tasks)):
        idx = [i for i, t in enumerate(tasks) if t == task]
        masks[idx] = D.batch_masks(model, task, fm[idx], [gt_boxes[i] for i in idx], region)
    return masks


def step_losses(model: DetectorModel, teacher: Optional[DetectorModel], task: str,
                batch: Sequence[LabeledImage], ex_batch: Optional[Sequence[tuple[LabeledImage, str]]],
                cfg: TrainConfig, generator: Optional[torch.Generator] = None) -> dict:
    """Components and total of the composite objective for one step.

    ``teacher=None`` disables the distillation term. Exemplars are routed to
    their own task's branch and weighted by their share of the exemplar batch.
    """
    dtype = next(model.parameters()).dtype
    x = images_to_tensor(batch, dtype)
    targets = targets_from_images(batch, dtype)
    parts = detection_loss(model, task, x, targets, generator=generator)
    det_ex = x.new_zeros(())
    fm_all, x_all = [parts.features], [x]
    gts_all = [t.boxes for t in targets]
    teacher_task = teacher.tasks[-1] if teacher is not None else None
    s_tasks = [task] * len(batch)
    t_tasks = [teacher_task] * len(batch)
    if ex_batch:
        n_ex = len(ex_batch)
        for ex_task in sorted({t for _, t in ex_batch}):
            group = [im for im, t in ex_batch if t == ex_task]
            xg = images_to_tensor(group, dtype)
            tg = targets_from_images(group, dtype)
            p = detection_loss(model, ex_task, xg, tg, generator=generator)
            det_ex = det_ex + p.total * (len(group) / n_ex)
            fm_all.append(p.features)
            x_all.append(xg)
            gts_all += [t.boxes for t in tg]
            s_tasks += [ex_task] * len(group)
            t_tasks += [ex_task] * len(group)
    dist = x.new_zeros(())
    if teacher is not None:
        with torch.set_grad_enabled(cfg.lam > 0 and torch.is_grad_enabled()):
            dist = distill_loss(cfg.method, model, teacher, torch.cat(x_all), torch.cat(fm_all),
                                gts_all, s_tasks, t_tasks, cfg.mask_region)
    det_cur = parts.total
    total = det_cur + det_ex + cfg.lam * dist if cfg.lam > 0 else det_cur + det_ex
    return {"det_current": det_cur, "det_exemplar": det_ex, "distill": dist, "total": total, "parts": parts}


# ---------------------------------------------------------------------------
# core loop


def _fit(model: DetectorModel, datasets: Sequence[TaskDataset], cfg: TrainConfig, stage: int,
         teacher: Optional[DetectorModel] = None,
         exemplars: Optional[tuple[ExemplarSet, dict[str, LabeledImage]]] = None,
         log_file=None, on_step: Optional[Callable] = None) -> dict:
    np_rng, gen = _rngs(cfg, stage)
    distilling = teacher is not None and cfg.method in DISTILL_METHODS
    ex_stream = None
    if exemplars is not None and len(exemplars[0]):
        ex_stream = exemplar_batches(exemplars[0], exemplars[1], cfg.exemplar_batch_size,
                                     seed=int(np_rng.integers(2**31)))
    model.train()
    opt = make_optimizer(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    teacher_digest = parameter_digest(teacher) if teacher is not None else None
    step = 0
    sums = {"det_current": 0.0, "det_exemplar": 0.0, "distill": 0.0, "total": 0.0}
    t0 = time.time()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        schedule = joint_schedule([len(d.train) for d in datasets], cfg.batch_size, np_rng)
        for t_idx, idx in schedule:
            ds = datasets[t_idx]
            batch = [ds.train[k] for k in idx]
            ex_batch = next(ex_stream) if ex_stream is not None else None
            losses = step_losses(model, teacher if distilling else None, ds.name, batch, ex_batch, cfg, gen)
            total = losses["total"]
            if not torch.isfinite(total):
                parts = losses["parts"]
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, task {ds.name}): "
                    f"det_current={losses['det_current'].item()}, det_exemplar={losses['det_exemplar'].item()}, "
                    f"distill={losses['distill'].item()}, rpn_cls={parts.rpn_cls.item()}, "
                    f"rpn_reg={parts.rpn_reg.item()}, head_cls={parts.head_cls.item()}, "
                    f"head_reg={parts.head_reg.item()}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(opt.param_groups[0]["params"], cfg.grad_clip)
            opt.step()
            rec = StepRecord(step, ds.name, epoch, lr, losses["det_current"].item(), losses["det_exemplar"].item(),
                             losses["distill"].item(), total.item())
            for k in sums:
                sums[k] += getattr(rec, k)
            if log_file is not None:
                log_file.write(json.dumps(asdict(rec)) + "\n")
            if on_step is not None:
                on_step(rec, model, teacher)
            step += 1
    summary = {k: v / max(step, 1) for k, v in sums.items()}
    summary.update(steps=step, seconds=round(time.time() - t0, 2), last_total=rec.total if step else None)
    if teacher is not None:
        after = parameter_digest(teacher)
        if after != teacher_digest:
            raise RuntimeError("teacher parameters changed during training")
        summary["teacher_digest"] = after
    model.eval()
    return summary


def train_first_task(model: DetectorModel, ds: TaskDataset, cfg: TrainConfig, log_file=None,
                     on_step=None) -> tuple[DetectorModel, dict]:
    """Train a fresh model's branch for ``ds`` on the detection loss alone."""
    if model.tasks and model.tasks != [ds.name]:
        raise ValueError(f"train_first_task expects a fresh model, found tasks {model.tasks}")
    _add_branch(model, ds, cfg, 0)
    summary = _fit(model, [ds], cfg, stage=0, log_file=log_file, on_step=on_step)
    return model, summary


def check_teacher(model: DetectorModel, teacher: DetectorModel):
    ms, ts = model.backbone.state_dict(), teacher.backbone.state_dict()
    if ms.keys() != ts.keys() or any(ms[k].shape != ts[k].shape for k in ms):
        raise ValueError("teacher/model architecture mismatch: backbones differ")
    if not set(teacher.tasks) <= set(model.tasks):
        raise ValueError(f"teacher tasks {teacher.tasks} are not a subset of model tasks {model.tasks}")


def train_incremental(model: DetectorModel, teacher: Optional[DetectorModel], ds: TaskDataset,
                      exemplars: Optional[tuple[ExemplarSet, dict[str, LabeledImage]]], cfg: TrainConfig,
                      stage: int = 1, log_file=None, on_step=None) -> tuple[DetectorModel, dict]:
    """Add a branch for ``ds`` and train it with the composite objective."""
    if teacher is not None:
        check_teacher(model, teacher)
    if cfg.freeze_first_block:
        model.freeze_first_block()
    _add_branch(model, ds, cfg, stage)
    summary = _fit(model, [ds], cfg, stage=stage, teacher=teacher, exemplars=exemplars,
                   log_file=log_file, on_step=on_step)
    return model, summary


def joint_train(datasets: Sequence[TaskDataset], cfg: TrainConfig, model: Optional[DetectorModel] = None,
                log_file=None, on_step=None) -> tuple[DetectorModel, dict]:
    """Train all branches at once with batches interleaved round-robin over tasks."""
    if not datasets:
        raise ValueError("joint_train needs at least one dataset")
    model = model or new_model(cfg)
    for i, ds in enumerate(datasets):
        _add_branch(model, ds, cfg, i)
    summary = _fit(model, list(datasets), cfg, stage=0, log_file=log_file, on_step=on_step)
    return model, summary


def _evaluate(model, datasets, upto: int):
    maps, per_class = [], []
    for ds in datasets[: upto + 1]:
        m, aps = map_score(model, ds.name, ds, return_per_class=True)
        maps.append(m)
        per_class.append({ds.categories.names[c]: v for c, v in aps.items()})
    return maps, per_class


def run_sequence(datasets: Sequence[TaskDataset], cfg: TrainConfig, run_dir=None,
                 first_model: Optional[DetectorModel] = None, on_step=None,
                 save_checkpoints: bool = True) -> SequenceResult:
    """Train ``datasets`` in order and fill the checkpoint mAP table.

    ``first_model`` (a model already trained on the first task with the same
    config and seed) skips the first stage. Partial results are written to
    ``run_dir`` after every stage.
    """
    names = [d.name for d in datasets]
    n = len(datasets)
    if cfg.method == "joint":
        if n < 1:
            raise ValueError("joint training needs at least one dataset")
    elif n < 2:
        raise ValueError("a sequence needs at least 2 tasks")
    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
        log_file = open(run_dir / "loss_log.jsonl", "w")

    def persist(res: SequenceResult):
        if run_dir is not None:
            res.save(run_dir / "result.json")

    try:
        if cfg.method == "joint":
            result = SequenceResult(names, [[None] for _ in names], joint=True, method="joint")
            try:
                model, summary = joint_train(datasets, cfg, log_file=log_file, on_step=on_step)
                maps, per_class = _evaluate(model, datasets, n - 1)
            except Exception as exc:
                persist(result)
                raise StageError("joint", exc) from exc
            for i, m in enumerate(maps):
                result.table[i][0] = m
                result.per_class[names[i]] = {"joint": per_class[i]}
            result.logs["joint"] = summary
            if run_dir is not None and save_checkpoints:
                save_checkpoint(model, run_dir / "checkpoints" / "joint.pt")
            persist(result)
            return result

        result = SequenceResult(names, [[None] * n for _ in names], method=cfg.method)
        memory: list[ExemplarSet] = []
        lookup: dict[str, LabeledImage] = {}
        model = None
        for j, ds in enumerate(datasets):
            stage = f"train:{ds.name}"
            try:
                if j == 0:
                    if first_model is not None:
                        model, summary = first_model, {"reused": True}
                    else:
                        model, summary = train_first_task(new_model(cfg), ds, cfg, log_file, on_step)
                else:
                    teacher = snapshot_teacher(model) if cfg.method in DISTILL_METHODS else None
                    ex = None
                    if memory:
                        merged = ExemplarSet(items=[it for m in memory for it in m.items],
                                             per_class=memory[-1].per_class, strategy=cfg.exemplar_strategy,
                                             eta=cfg.eta, seed=cfg.seed)
                        ex = (merged, lookup)
                    model, summary = train_incremental(model, teacher, ds, ex, cfg, stage=j,
                                                       log_file=log_file, on_step=on_step)
                    del teacher  # the previous model is not kept past its task
                result.logs[ds.name] = summary
                if run_dir is not None and save_checkpoints:
                    save_checkpoint(model, run_dir / "checkpoints" / f"after_{ds.name}.pt")
                stage = f"eval:after_{ds.name}"
                maps, per_class = _evaluate(model, datasets, j)
                for i, m in enumerate(maps):
                    result.table[i][j] = m
                    result.per_class.setdefault(names[i], {})[f"after_{ds.name}"] = per_class[i]
                if cfg.exemplar_budget > 0 and j < n - 1:
                    stage = f"exemplars:{ds.name}"
                    s = per_class_budget(cfg.exemplar_budget, ds.num_classes)
                    ex_set = sample_exemplars(ds, s, cfg.eta, cfg.exemplar_strategy,
                                              seed=cfg.seed * 7919 + j, count=cfg.rank_count)
                    memory.append(ex_set)
                    lookup.update(ds.by_id("train"))
                    if run_dir is not None:
                        ex_set.save(run_dir / f"exemplars_{ds.name}.json")
                persist(result)
                log.info("after %s: %s", ds.name, [r[j] for r in result.table[: j + 1]])
            except StageError:
                raise
            except Exception as exc:
                persist(result)
                raise StageError(stage, exc) from exc
        return result
    finally:
        if log_file is not None:
            log_file.close()
