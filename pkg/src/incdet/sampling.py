"""Exemplar selection from a finished task: hard, random and adaptive sampling.

For each class the candidate images are ranked by how many boxes of that class
they contain. Adaptive sampling draws ``s`` images uniformly from the first
``eta * s`` ranked entries; ``eta = 1`` is hard sampling (the top ``s``) and
``eta >= K / s`` covers every candidate, i.e. random sampling.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .synthdata import LabeledImage, TaskDataset

log = logging.getLogger(__name__)

STRATEGIES = ("random", "hard", "adaptive")


@dataclass
class ExemplarSet:
    items: list[tuple[str, str]] = field(default_factory=list)  # (image id, source task)
    per_class: int = 0
    strategy: str = "adaptive"
    eta: int = 5
    seed: int = 0

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "strategy": self.strategy,
            "eta": self.eta if math.isfinite(self.eta) else None,
            "seed": self.seed,
            "items": [{"image_id": i, "task": t} for i, t in self.items],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExemplarSet":
        eta = d.get("eta")
        return cls(items=[(r["image_id"], r["task"]) for r in d["items"]], per_class=int(d["per_class"]),
                   strategy=d["strategy"], eta=math.inf if eta is None else int(eta), seed=int(d["seed"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "ExemplarSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _box_count(im: LabeledImage, cls: Optional[int]) -> int:
    if cls is None:
        return len(im.boxes)
    return sum(1 for b in im.boxes if b.label == cls)


def rank_by_boxes(ds: TaskDataset, cls: int, count: str = "class") -> list[str]:
    """Ids of train images containing ``cls``, most boxes first, ties by id.

    ``count="class"`` ranks by boxes of ``cls`` only, ``count="total"`` by all
    boxes in the image.
    """
    if not (0 <= cls < ds.num_classes):
        raise ValueError(f"unknown class {cls} for task {ds.name!r} with {ds.num_classes} classes")
    if count not in ("class", "total"):
        raise ValueError(f"count must be 'class' or 'total', got {count!r}")
    candidates = [im for im in ds.train if _box_count(im, cls) > 0]
    if not candidates:
        raise ValueError(f"class {cls} does not occur in the train split of task {ds.name!r}")
    key_cls = cls if count == "class" else None
    candidates.sort(key=lambda im: (-_box_count(im, key_cls), im.image_id))
    return [im.image_id for im in candidates]


def _resolve_eta(strategy: str, eta) -> float:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "hard":
        return 1
    if strategy == "random":
        return math.inf
    if eta < 1:
        raise ValueError(f"eta must be >= 1, got {eta}")
    return eta


def candidate_pool(ranked: list[str], s: int, eta) -> list[str]:
    """First ``min(eta * s, K)`` entries of a ranked list."""
    if math.isinf(eta):
        return list(ranked)
    return ranked[: min(int(eta) * s, len(ranked))]


def sample_exemplars(ds: TaskDataset, s: int, eta=5, strategy: str = "adaptive", seed: int = 0,
                     count: str = "class") -> ExemplarSet:
    """Pick up to ``s`` exemplar images per class of ``ds``.

    Classes are processed in label order. An image already taken for an
    earlier class is skipped; the shortfall is drawn from the rest of the
    pool and then from ranks beyond the pool, in rank order.
    """
    if s < 1:
        raise ValueError(f"per-class budget must be >= 1, got {s}")
    eta_eff = _resolve_eta(strategy, eta)
    rng = np.random.default_rng(seed)
    chosen: list[str] = []
    taken: set[str] = set()
    for cls in range(ds.num_classes):
        try:
            ranked = rank_by_boxes(ds, cls, count)
        except ValueError:
            log.warning("class %d absent from task %s; no exemplars for it", cls, ds.name)
            continue
        if s > len(ranked):
            log.warning("class %d of task %s has %d candidates < budget %d; taking all",
                        cls, ds.name, len(ranked), s)
        pool = candidate_pool(ranked, s, eta_eff)
        order = [pool[i] for i in rng.permutation(len(pool))]
        order += ranked[len(pool):]
        picked = 0
        for image_id in order:
            if picked >= s:
                break
            if image_id in taken:
                continue
            taken.add(image_id)
            chosen.append(image_id)
            picked += 1
    return ExemplarSet(items=[(i, ds.name) for i in chosen], per_class=s, strategy=strategy,
                       eta=eta_eff, seed=seed)


def per_class_budget(total: int, num_classes: int) -> int:
    """Split a total exemplar budget evenly across classes (at least 1 each)."""
    return max(1, total // num_classes)


def exemplar_batches(ex: ExemplarSet, lookup: dict[str, LabeledImage], batch_size: int,
                     seed: int = 0, cycles: Optional[int] = None) -> Iterator[list[tuple[LabeledImage, str]]]:
    """Batches of ``(image, source task)`` cycling over the exemplars.

    Each cycle is a fresh shuffle in which every exemplar appears exactly
    once; ``cycles=None`` repeats forever. An empty set yields nothing.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not ex.items:
        return
    rng = np.random.default_rng(seed)
    done = 0
    while cycles is None or done < cycles:
        order = rng.permutation(len(ex.items))
        for start in range(0, len(order), batch_size):
            yield [(lookup[ex.items[k][0]], ex.items[k][1]) for k in order[start:start + batch_size]]
        done += 1


def class_histogram(ex: ExemplarSet, lookup: dict[str, LabeledImage]) -> Counter:
    hist = Counter()
    for image_id, _ in ex.items:
        for b in lookup[image_id].boxes:
            hist[b.label] += 1
    return hist
