"""Procedural scenario datasets with separately controllable domain and categories.

A task is a (DomainStyle, CategorySet) pair. Two tasks with the same style and
disjoint categories give the "same domain, different categories" scenario, the
same categories under a different style give a pure domain shift, and changing
both gives the hardest case. The style knobs (background palette and texture,
pixel noise, solid or outlined objects) are one operationalisation of a domain
gap; they are not calibrated against any real dataset pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .boxes import BoundingBox, iou

SHAPES = ("circle", "square", "triangle", "cross", "star", "ring", "diamond", "bar")
TEXTURES = ("flat", "stripes", "speckle")
FILLS = ("solid", "outlined")
MAX_NOISE = 0.25
MAX_PLACEMENT_OVERLAP = 0.3
MIN_IMAGE_SIDE = 64

Color = tuple[int, int, int]


class RenderError(RuntimeError):
    pass


class DatasetFormatError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainStyle:
    name: str
    palette: tuple[Color, ...]
    texture: str = "flat"
    noise: float = 0.0
    fill: str = "solid"
    object_colors: tuple[Color, ...] = ((200, 30, 30),)

    def __post_init__(self):
        if not self.palette:
            raise ValueError("style palette must be non-empty")
        if not self.object_colors:
            raise ValueError("style needs at least one object color")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")
        if self.fill not in FILLS:
            raise ValueError(f"unknown fill {self.fill!r}; expected one of {FILLS}")
        if not (0.0 <= self.noise <= MAX_NOISE):
            raise ValueError(f"noise {self.noise} outside [0, {MAX_NOISE}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainStyle":
        return cls(
            name=d["name"],
            palette=tuple(tuple(c) for c in d["palette"]),
            texture=d["texture"],
            noise=float(d["noise"]),
            fill=d["fill"],
            object_colors=tuple(tuple(c) for c in d["object_colors"]),
        )


@dataclass(frozen=True)
class CategorySet:
    """Ordered shape names; the label id of a shape is its position."""

    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ValueError("category set must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate categories in {self.names}")
        unknown = [n for n in self.names if n not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shapes {unknown}; expected names from {SHAPES}")

    def __len__(self) -> int:
        return len(self.names)

    def label(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class TaskSpec:
    """One task of a scenario. ``distractors`` are shapes drawn into the images
    without boxes, i.e. unannotated background objects."""

    name: str
    style: DomainStyle
    categories: CategorySet
    distractors: Optional[CategorySet] = None
    distractor_count: tuple[int, int] = (1, 3)

    def __post_init__(self):
        if self.distractors is not None:
            shared = set(self.distractors.names) & set(self.categories.names)
            if shared:
                raise ValueError(f"distractor shapes {sorted(shared)} are also labeled categories")
            lo, hi = self.distractor_count
            if not (0 <= lo <= hi):
                raise ValueError(f"bad distractor_count range {self.distractor_count}")

    def to_dict(self) -> dict:
        d = {"name": self.name, "style": self.style.to_dict(), "categories": list(self.categories.names)}
        if self.distractors is not None:
            d["distractors"] = list(self.distractors.names)
            d["distractor_count"] = list(self.distractor_count)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        distractors = d.get("distractors")
        return cls(d["name"], DomainStyle.from_dict(d["style"]), CategorySet(tuple(d["categories"])),
                   CategorySet(tuple(distractors)) if distractors else None,
                   tuple(d.get("distractor_count", (1, 3))))


@dataclass(frozen=True)
class ScenarioSpec:
    tasks: tuple[TaskSpec, ...]
    n_train: int = 500
    n_test: int = 200
    image_size: tuple[int, int] = (128, 128)
    objects_per_image: tuple[int, int] = (1, 6)
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if len(self.tasks) < 2:
            raise ValueError("a scenario needs at least 2 tasks")
        if len({t.name for t in self.tasks}) != len(self.tasks):
            raise ValueError("task names must be unique")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        if min(self.image_size) < MIN_IMAGE_SIDE:
            raise ValueError(f"image size {self.image_size} below {MIN_IMAGE_SIDE}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("train and test splits must be non-empty")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "image_size": list(self.image_size),
            "objects_per_image": list(self.objects_per_image),
            "seed": self.seed,
            "tasks": [t.to_dict() for t in self.tasks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        tasks = tuple(TaskSpec.from_dict(t) for t in d["tasks"])
        return cls(
            tasks=tasks,
            n_train=int(d.get("n_train", 500)),
            n_test=int(d.get("n_test", 200)),
            image_size=tuple(d.get("image_size", (128, 128))),
            objects_per_image=tuple(d.get("objects_per_image", (1, 6))),
            seed=int(d.get("seed", 0)),
            name=d.get("name", "custom"),
        )


@dataclass
class LabeledImage:
    image_id: str
    data: np.ndarray  # uint8 [3, H, W]
    boxes: list[BoundingBox]

    @property
    def pixels(self) -> np.ndarray:
        """Float32 ``[3, H, W]`` image in ``[0, 1]``."""
        return self.data.astype(np.float32) / 255.0

    @property
    def size(self) -> tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])


@dataclass
class TaskDataset:
    name: str
    categories: CategorySet
    style: DomainStyle
    train: list[LabeledImage] = field(default_factory=list)
    test: list[LabeledImage] = field(default_factory=list)
    image_size: tuple[int, int] = (128, 128)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def by_id(self, split: str = "train") -> dict[str, LabeledImage]:
        return {im.image_id: im for im in getattr(self, split)}

    def summary(self) -> dict:
        def count(split):
            return sum(len(im.boxes) for im in split)
        return {
            "name": self.name,
            "style": self.style.name,
            "classes": list(self.categories.names),
            "train_images": len(self.train),
            "test_images": len(self.test),
            "train_boxes": count(self.train),
            "test_boxes": count(self.test),
        }


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, size: tuple[int, int], x0: float, y0: float, s: float,
                vertical: bool) -> np.ndarray:
    h, w = size
    canvas = Image.new("L", (w, h), 0)
    d = ImageDraw.Draw(canvas)
    x1, y1 = x0 + s, y0 + s
    cx, cy = x0 + s / 2, y0 + s / 2
    if shape == "circle":
        d.ellipse([x0, y0, x1, y1], fill=255)
    elif shape == "square":
        d.rectangle([x0, y0, x1, y1], fill=255)
    elif shape == "triangle":
        d.polygon([(cx, y0), (x1, y1), (x0, y1)], fill=255)
    elif shape == "cross":
        t = s / 6
        d.rectangle([cx - t, y0, cx + t, y1], fill=255)
        d.rectangle([x0, cy - t, x1, cy + t], fill=255)
    elif shape == "star":
        pts = []
        for k in range(10):
            r = s / 2 if k % 2 == 0 else s / 5
            a = -math.pi / 2 + k * math.pi / 5
            pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
        d.polygon(pts, fill=255)
    elif shape == "ring":
        d.ellipse([x0, y0, x1, y1], fill=255)
        m = s * 0.25
        d.ellipse([x0 + m, y0 + m, x1 - m, y1 - m], fill=0)
    elif shape == "diamond":
        d.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=255)
    elif shape == "bar":
        t = s / 6
        if vertical:
            d.rectangle([cx - t, y0, cx + t, y1], fill=255)
        else:
            d.rectangle([x0, cy - t, x1, cy + t], fill=255)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return np.asarray(canvas) > 127


def _outline(mask: np.ndarray, width: int = 2) -> np.ndarray:
    img = Image.fromarray(mask.astype(np.uint8) * 255)
    eroded = np.asarray(img.filter(ImageFilter.MinFilter(2 * width + 1))) > 127
    return mask & ~eroded


def _background(style: DomainStyle, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    palette = np.asarray(style.palette, dtype=np.float32) / 255.0
    base = palette[rng.integers(len(palette))]
    img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    if style.texture == "stripes":
        other = palette[rng.integers(len(palette))]
        if np.allclose(other, base) and len(palette) > 1:
            other = palette[(np.argmax((palette == base).all(1)) + 1) % len(palette)]
        period = int(rng.integers(6, 17))
        yy, xx = np.mgrid[0:h, 0:w]
        orient = rng.integers(3)
        coord = yy if orient == 0 else xx if orient == 1 else (xx + yy)
        band = ((coord // (period // 2)) % 2).astype(bool)
        img[:, band] = other[:, None]
    elif style.texture == "speckle":
        n = int(0.04 * h * w)
        ys = rng.integers(0, h, n)
        xs = rng.integers(0, w, n)
        cols = palette[rng.integers(len(palette), size=n)]
        for dy in (0, 1):
            for dx in (0, 1):
                img[:, np.minimum(ys + dy, h - 1), np.minimum(xs + dx, w - 1)] = cols.T
    return img


def _tight_box(mask: np.ndarray) -> Optional[tuple[float, float, float, float]]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def render_image(style: DomainStyle, categories: CategorySet, n_objects: int, seed,
                 size: tuple[int, int] = (128, 128), image_id: str = "img",
                 object_size: tuple[int, int] = (16, 44), max_retries: int = 200,
                 distractors: Optional[CategorySet] = None, n_distractors: int = 0) -> LabeledImage:
    """Render one image with ``n_objects`` shapes drawn from ``categories``.

    Every object gets one ground-truth box tight to its drawn pixels, and no
    two objects overlap by more than 0.3 IoU. ``n_distractors`` further shapes
    from ``distractors`` are drawn after them without boxes. Output depends
    only on ``seed``.
    """
    if n_objects < 1:
        raise ValueError(f"n_objects must be >= 1, got {n_objects}")
    h, w = size
    if min(h, w) < MIN_IMAGE_SIDE:
        raise ValueError(f"image size {size} below {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    rng = np.random.default_rng(seed)
    img = _background(style, size, rng)
    colors = np.asarray(style.object_colors, dtype=np.float32) / 255.0
    lo, hi = object_size
    hi = min(hi, min(h, w) - 2)

    if n_distractors and distractors is None:
        raise ValueError("n_distractors > 0 needs a distractor category set")

    boxes: list[BoundingBox] = []
    placed: list[BoundingBox] = []
    n_total = n_objects + n_distractors
    for k in range(n_total):
        cats = categories if k < n_objects else distractors
        for _attempt in range(max_retries):
            label = int(rng.integers(len(cats)))
            shape = cats.names[label]
            s = float(rng.integers(lo, hi + 1))
            x0 = float(rng.uniform(0, w - s - 1))
            y0 = float(rng.uniform(0, h - s - 1))
            mask = _shape_mask(shape, size, x0, y0, s, vertical=bool(rng.integers(2)))
            extent = _tight_box(mask)
            if extent is None:
                continue
            box = BoundingBox(*extent, label=label)
            if all(iou(box, other) <= MAX_PLACEMENT_OVERLAP for other in placed):
                break
        else:
            raise RenderError(
                f"{image_id}: could not place object {k + 1} of {n_total} "
                f"within IoU <= {MAX_PLACEMENT_OVERLAP} after {max_retries} retries")
        if style.fill == "outlined":
            mask = _outline(mask, width=2)
        img[:, mask] = colors[rng.integers(len(colors))][:, None]
        placed.append(box)
        if k < n_objects:
            boxes.append(box)

    if style.noise > 0:
        img = img + rng.normal(0.0, style.noise, size=img.shape).astype(np.float32)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return LabeledImage(image_id=image_id, data=data, boxes=boxes)


_SPLIT_CODE = {"train": 0, "test": 1}


def _image_seed(master: int, task_index: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master, task_index, _SPLIT_CODE[split], index])


def make_task(spec: ScenarioSpec, task_index: int) -> TaskDataset:
    task = spec.tasks[task_index]
    ds = TaskDataset(task.name, task.categories, task.style, image_size=tuple(spec.image_size))
    lo, hi = spec.objects_per_image
    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        images = getattr(ds, split)
        for i in range(count):
            seed = _image_seed(spec.seed, task_index, split, i)
            count_seed = np.random.SeedSequence([spec.seed, task_index, _SPLIT_CODE[split], i, 1])
            count_rng = np.random.default_rng(count_seed)
            n_obj = int(count_rng.integers(lo, hi + 1))
            n_dis = 0
            if task.distractors is not None:
                d_lo, d_hi = task.distractor_count
                n_dis = int(count_rng.integers(d_lo, d_hi + 1))
            image_id = f"{task.name}-{split}-{i:05d}"
            try:
                images.append(render_image(task.style, task.categories, n_obj, seed,
                                           size=tuple(spec.image_size), image_id=image_id,
                                           distractors=task.distractors, n_distractors=n_dis))
            except RenderError as exc:
                raise RenderError(f"task {task.name!r} ({split} image {i}): {exc}") from exc
    return ds


def make_scenario(spec: ScenarioSpec) -> list[TaskDataset]:
    return [make_task(spec, t) for t in range(len(spec.tasks))]


# ---------------------------------------------------------------------------
# presets

STUDIO = DomainStyle(
    name="studio",
    palette=((235, 235, 230), (220, 215, 200), (200, 210, 220)),
    texture="flat",
    noise=0.02,
    fill="solid",
    object_colors=((180, 30, 30), (30, 60, 170), (30, 120, 40), (60, 60, 60)),
)
NIGHT = DomainStyle(
    name="night",
    palette=((20, 20, 45), (45, 15, 25), (15, 45, 35), (60, 60, 80)),
    texture="stripes",
    noise=0.08,
    fill="solid",
    object_colors=((250, 230, 60), (90, 240, 250), (250, 250, 250), (250, 120, 200)),
)
# half-dark striped backdrop: a shift strong enough to cost some old-task mAP
# under fine-tuning, but milder than NIGHT
TWILIGHT = DomainStyle(
    name="twilight",
    palette=((60, 60, 80), (200, 200, 210)),
    texture="stripes",
    noise=0.06,
    fill="solid",
    object_colors=((200, 40, 40), (40, 80, 200), (250, 220, 60)),
)
PAPER = DomainStyle(
    name="paper",
    palette=((170, 150, 120), (140, 160, 130), (120, 120, 150), (200, 180, 160)),
    texture="speckle",
    noise=0.05,
    fill="solid",
    object_colors=((250, 250, 240), (20, 20, 20), (120, 0, 80)),
)

SHAPES_A = CategorySet(("circle", "square", "triangle", "cross"))
SHAPES_B = CategorySet(("star", "ring", "diamond", "bar"))

PRESETS = ("diff-both", "diff-domain", "diff-category", "same", "three-task")


def preset_spec(name: str, seed: int = 0, n_train: int = 500, n_test: int = 200,
                superset: bool = False, image_size: tuple[int, int] = (128, 128),
                objects_per_image: tuple[int, int] = (1, 6)) -> ScenarioSpec:
    """Named scenario presets.

    ``superset=True`` makes task B of ``diff-category`` cover task A's shapes
    plus the new ones, instead of a disjoint set.
    """
    if name == "diff-both":
        tasks = (TaskSpec("A", STUDIO, SHAPES_A), TaskSpec("B", NIGHT, SHAPES_B))
    elif name == "diff-domain":
        tasks = (TaskSpec("A", STUDIO, SHAPES_A), TaskSpec("B", TWILIGHT, SHAPES_A))
    elif name == "diff-category":
        # same domain: old shapes keep appearing in the new images, unannotated
        if superset:
            b = TaskSpec("B", STUDIO, CategorySet(SHAPES_A.names + SHAPES_B.names))
        else:
            b = TaskSpec("B", STUDIO, SHAPES_B, distractors=SHAPES_A)
        tasks = (TaskSpec("A", STUDIO, SHAPES_A), b)
    elif name == "same":
        tasks = (TaskSpec("A", STUDIO, SHAPES_A), TaskSpec("B", STUDIO, SHAPES_A))
    elif name == "three-task":
        tasks = (
            TaskSpec("A", STUDIO, CategorySet(("circle", "square", "triangle"))),
            TaskSpec("B", NIGHT, CategorySet(("star", "ring", "diamond"))),
            TaskSpec("C", PAPER, CategorySet(("cross", "bar"))),
        )
    else:
        raise KeyError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    return ScenarioSpec(tasks=tasks, n_train=n_train, n_test=n_test, image_size=image_size,
                        objects_per_image=objects_per_image, seed=seed, name=name)


# ---------------------------------------------------------------------------
# persistence
#
#   <dir>/manifest.json            dataset metadata, categories, split lists
#   <dir>/images/<id>.png          8-bit RGB, lossless
#   <dir>/annotations/<id>.json    {"image_id": ..., "boxes": [{x1, y1, x2, y2, label}, ...]}

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def save_dataset(ds: TaskDataset, directory) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in ("train", "test"):
        entries = []
        for im in getattr(ds, split):
            image_rel = f"images/{im.image_id}.png"
            ann_rel = f"annotations/{im.image_id}.json"
            Image.fromarray(np.transpose(im.data, (1, 2, 0))).save(root / image_rel)
            ann = {
                "image_id": im.image_id,
                "boxes": [{"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "label": b.label}
                          for b in im.boxes],
            }
            (root / ann_rel).write_text(json.dumps(ann, indent=1))
            entries.append({"id": im.image_id, "image": image_rel, "annotation": ann_rel})
        splits[split] = entries
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": ds.name,
        "categories": list(ds.categories.names),
        "style": ds.style.to_dict(),
        "image_size": list(ds.image_size),
        "splits": splits,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(directory) -> TaskDataset:
    root = Path(directory)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise DatasetFormatError(f"no manifest: {manifest_path} does not exist")
    try:
        manifest = json.loads(manifest_path.read_text())
        categories = CategorySet(tuple(manifest["categories"]))
        style = DomainStyle.from_dict(manifest["style"])
        ds = TaskDataset(manifest["name"], categories, style,
                         image_size=tuple(manifest["image_size"]))
        splits = manifest["splits"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"corrupt manifest {manifest_path}: {exc}") from exc

    for split in ("train", "test"):
        for entry in splits.get(split, []):
            image_id = entry["id"]
            image_path = root / entry["image"]
            ann_path = root / entry["annotation"]
            if not image_path.is_file():
                raise DatasetFormatError(f"image {image_id}: missing image file {image_path}")
            if not ann_path.is_file():
                raise DatasetFormatError(f"image {image_id}: missing annotation file {ann_path}")
            try:
                ann = json.loads(ann_path.read_text())
                boxes = [BoundingBox(float(b["x1"]), float(b["y1"]), float(b["x2"]), float(b["y2"]),
                                     label=int(b["label"])) for b in ann["boxes"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"image {image_id}: corrupt annotation {ann_path}: {exc}") from exc
            for b in boxes:
                if b.label >= len(categories):
                    raise DatasetFormatError(
                        f"image {image_id}: label {b.label} outside {len(categories)} categories")
            with Image.open(image_path) as pil:
                data = np.transpose(np.asarray(pil.convert("RGB")), (2, 0, 1)).copy()
            getattr(ds, split).append(LabeledImage(image_id, data, boxes))
    return ds


def save_scenario(datasets: Sequence[TaskDataset], spec: ScenarioSpec, directory) -> list[Path]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scenario.json").write_text(json.dumps(spec.to_dict(), indent=1))
    return [save_dataset(ds, root / f"task{i}_{ds.name}") for i, ds in enumerate(datasets)]


def load_scenario(directory) -> list[TaskDataset]:
    root = Path(directory)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / MANIFEST).exists()) if root.is_dir() else []
    if not dirs:
        raise DatasetFormatError(f"no task datasets found under {root}")
    return [load_dataset(p) for p in dirs]
