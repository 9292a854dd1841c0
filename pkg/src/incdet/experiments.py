"""Cached experiment cells and the directional comparison suite.

A cell is one training sequence (preset, method, exemplar settings, seed).
Results are cached under ``root/cells/<key>/`` where the key hashes the cell,
the training config and the scenario spec, so a changed setting never reuses
a stale result. Models trained on a scenario's first task are cached under
``root/first/`` and shared by every method on that scenario, since the first
stage does not depend on the method or the exemplar settings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .detector import load_checkpoint, save_checkpoint
from .evaluation import forgetting_matrix
from .synthdata import make_scenario, preset_spec
from .trainer import SequenceResult, TrainConfig, new_model, run_sequence, train_first_task

log = logging.getLogger(__name__)

TWO_TASK_PRESETS = ("diff-both", "diff-domain", "diff-category")
# distillation weight used by the comparison suite; see README for how it was chosen
SUITE_LAM = 1e-3
SUITE_BUDGET = 100
SUITE_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class Cell:
    preset: str
    method: str
    seed: int = 0
    exemplar_budget: int = 0
    exemplar_strategy: str = "adaptive"
    eta: int = 5
    lam: Optional[float] = None  # None: the runner's default

    @property
    def label(self) -> str:
        parts = [self.preset, self.method]
        if self.exemplar_budget:
            parts.append(f"ex{self.exemplar_budget}-{self.exemplar_strategy}")
            if self.exemplar_strategy == "adaptive":
                parts[-1] += f"{self.eta}"
        if self.lam is not None:
            parts.append(f"lam{self.lam:g}")
        parts.append(f"s{self.seed}")
        return "_".join(parts)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# fields that influence first-task training
_FIRST_STAGE_FIELDS = ("epochs", "lr", "lr_drop_epoch", "batch_size", "momentum", "weight_decay", "grad_clip",
                       "seed", "detector")


class Runner:
    """Runs cells with on-disk caching; ``force`` retrains everything."""

    def __init__(self, root, base: Optional[TrainConfig] = None, n_train: int = 500, n_test: int = 200,
                 force: bool = False, lam: float = SUITE_LAM):
        self.root = Path(root)
        self.base = base or TrainConfig()
        self.n_train = n_train
        self.n_test = n_test
        self.force = force
        self.lam = lam
        self._data_key = None
        self._data = None

    def spec(self, preset: str, seed: int):
        return preset_spec(preset, seed=seed, n_train=self.n_train, n_test=self.n_test,
                           image_size=tuple(self.base.detector.image_size))

    def datasets(self, preset: str, seed: int):
        key = (preset, seed)
        if self._data_key != key:
            self._data = None  # release the previous scenario first
            self._data = make_scenario(self.spec(preset, seed))
            self._data_key = key
        return self._data

    def config(self, cell: Cell) -> TrainConfig:
        return replace(self.base, method=cell.method, seed=cell.seed, exemplar_budget=cell.exemplar_budget,
                       exemplar_strategy=cell.exemplar_strategy, eta=cell.eta,
                       lam=self.lam if cell.lam is None else cell.lam)

    def cell_dir(self, cell: Cell) -> Path:
        cfg = self.config(cell)
        key = _digest({"cell": asdict(cell), "cfg": cfg.to_dict(), "spec": self.spec(cell.preset, cell.seed).to_dict()})
        return self.root / "cells" / f"{cell.label}-{key}"

    def first_model(self, preset: str, cfg: TrainConfig):
        spec = self.spec(preset, cfg.seed)
        stage = {k: v for k, v in cfg.to_dict().items() if k in _FIRST_STAGE_FIELDS}
        key = _digest({"task": spec.tasks[0].to_dict(), "n_train": spec.n_train, "n_test": spec.n_test,
                       "image_size": list(spec.image_size), "objects": list(spec.objects_per_image),
                       "seed": spec.seed, "cfg": stage})
        path = self.root / "first" / f"{spec.tasks[0].name}-s{cfg.seed}-{key}.pt"
        if path.is_file() and not self.force:
            return load_checkpoint(path)
        ds = self.datasets(preset, cfg.seed)[0]
        model, _ = train_first_task(new_model(cfg), ds, cfg)
        save_checkpoint(model, path)
        return load_checkpoint(path)

    def cached(self, cell: Cell) -> Optional[SequenceResult]:
        path = self.cell_dir(cell) / "result.json"
        if path.is_file() and not self.force:
            res = SequenceResult.load(path)
            if res.joint or res.entries() == len(res.tasks) * (len(res.tasks) + 1) // 2:
                return res
        return None

    def run(self, cell: Cell) -> SequenceResult:
        res = self.cached(cell)
        if res is not None:
            return res
        cfg = self.config(cell)
        run_dir = self.cell_dir(cell)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "cell.json").write_text(json.dumps(asdict(cell), indent=1))
        first = None if cell.method == "joint" else self.first_model(cell.preset, cfg)
        log.info("running %s", cell.label)
        return run_sequence(self.datasets(cell.preset, cell.seed), cfg, run_dir=run_dir, first_model=first,
                            save_checkpoints=False)

    def run_all(self, cells: Iterable[Cell]) -> dict[Cell, SequenceResult]:
        # group by scenario so each one is generated once
        cells = sorted(set(cells), key=lambda c: (c.seed, c.preset, c.method == "joint", c.label))
        return {c: self.run(c) for c in cells}


# ---------------------------------------------------------------------------
# the comparison suite


def suite_cells(seeds: Sequence[int] = SUITE_SEEDS, budget: int = SUITE_BUDGET) -> list[Cell]:
    cells = []
    for s in seeds:
        for p in TWO_TASK_PRESETS:
            cells += [Cell(p, "finetune", s), Cell(p, "afd", s), Cell(p, "joint", s)]
        cells += [Cell("diff-both", "finetune", s, budget)]
        for strategy in ("adaptive", "random", "hard"):
            cells.append(Cell("diff-both", "afd", s, budget, strategy))
        cells += [Cell("diff-both", "afd_bu", s, budget), Cell("diff-both", "afd_td", s, budget)]
        cells += [Cell("three-task", "finetune", s, budget), Cell("three-task", "afd", s, budget),
                  Cell("three-task", "joint", s)]
    return cells


@dataclass
class Verdict:
    criterion: int
    name: str
    passed: bool
    detail: str


def _mean(values) -> float:
    return statistics.fmean(values)


def _fmt(values) -> str:
    if len(values) > 1:
        return f"{_mean(values):.1f} +- {statistics.stdev(values):.1f}"
    return f"{values[0]:.1f}"


class SuiteResults:
    """Seed-mean views over the suite's results."""

    def __init__(self, results: dict[Cell, SequenceResult], seeds: Sequence[int], budget: int = SUITE_BUDGET):
        self.results = results
        self.seeds = list(seeds)
        self.budget = budget

    def _cells(self, preset, method, budget=0, strategy="adaptive"):
        return [self.results[Cell(preset, method, s, budget, strategy)] for s in self.seeds]

    def final(self, preset, method, task: int, budget=0, strategy="adaptive") -> list[float]:
        return [r.final(task) for r in self._cells(preset, method, budget, strategy)]

    def forgetting(self, preset, method, budget=0) -> list[float]:
        """Drop of task A's mAP between its own checkpoint and the end of the sequence."""
        return [r.table[0][0] - r.table[0][-1] for r in self._cells(preset, method, budget)]

    def total_forgetting(self, preset, method, budget=0) -> list[float]:
        return [-forgetting_matrix(r).total for r in self._cells(preset, method, budget)]

    def verdicts(self) -> list[Verdict]:
        b = self.budget
        out = []

        cat, dom = self.forgetting("diff-category", "finetune"), self.forgetting("diff-domain", "finetune")
        gap = _mean(cat) - _mean(dom)
        out.append(Verdict(7, "category gap forgets more than domain gap", gap >= 5.0,
                           f"finetune A-drop diff-category {_fmt(cat)} vs diff-domain {_fmt(dom)}: "
                           f"gap {gap:.1f} (need >= 5)"))

        parts, ok = [], True
        for p in TWO_TASK_PRESETS:
            a_gain = _mean(self.final(p, "afd", 0)) - _mean(self.final(p, "finetune", 0))
            b_diff = _mean(self.final(p, "afd", 1)) - _mean(self.final(p, "finetune", 1))
            ok &= a_gain >= 3.0 and abs(b_diff) <= 3.0
            parts.append(f"{p}: A +{a_gain:.1f}, B {b_diff:+.1f}")
        out.append(Verdict(8, "AFD beats fine-tuning", ok, "; ".join(parts) + " (need A >= +3, |B| <= 3)"))

        ft, ft_ex = self.final("diff-both", "finetune", 0), self.final("diff-both", "finetune", 0, b)
        gain = _mean(ft_ex) - _mean(ft)
        out.append(Verdict(9, "exemplars help fine-tuning", gain >= 10.0,
                           f"diff-both A: finetune {_fmt(ft)}, +{b} exemplars {_fmt(ft_ex)}: gain {gain:.1f} "
                           f"(need >= 10)"))

        ad = self.final("diff-both", "afd", 0, b, "adaptive")
        rnd = self.final("diff-both", "afd", 0, b, "random")
        hard = self.final("diff-both", "afd", 0, b, "hard")
        out.append(Verdict(10, "adaptive sampling >= random and hard", _mean(ad) >= max(_mean(rnd), _mean(hard)),
                           f"diff-both A with AFD+{b}: adaptive {_fmt(ad)}, random {_fmt(rnd)}, hard {_fmt(hard)}"))

        bu, td = self.final("diff-both", "afd_bu", 0, b), self.final("diff-both", "afd_td", 0, b)
        out.append(Verdict(11, "AFD >= each attention alone", _mean(ad) >= max(_mean(bu), _mean(td)) - 1.0,
                           f"diff-both A with {b} exemplars: AFD {_fmt(ad)}, bottom-up {_fmt(bu)}, "
                           f"top-down {_fmt(td)} (need AFD >= max - 1)"))

        worst, ok = [], True
        by_preset: dict[str, list[Cell]] = {}
        for c in self.results:
            if c.seed in self.seeds:
                by_preset.setdefault(c.preset, []).append(c)
        for p, cells in sorted(by_preset.items()):
            joint = [self.results[Cell(p, "joint", s)] for s in self.seeds]
            keys = sorted({(c.method, c.exemplar_budget, c.exemplar_strategy, c.eta, c.lam)
                           for c in cells if c.method != "joint"})
            for i, task in enumerate(joint[0].tasks):
                j = _mean([r.table[i][0] for r in joint])
                for m, bud, strat, eta, lam in keys:
                    inc = _mean([self.results[Cell(p, m, s, bud, strat, eta, lam)].final(i) for s in self.seeds])
                    margin = j - inc
                    if margin < -5.0:
                        ok = False
                    worst.append((margin, f"{p}/{task}: joint {j:.1f} vs {m}" + (f"+{bud}{strat}" if bud else "")
                                  + f" {inc:.1f}"))
        worst.sort()
        out.append(Verdict(12, "joint training is an upper bound", ok,
                           "closest: " + "; ".join(w for _, w in worst[:3]) + " (need joint >= method - 5)"))

        f_afd, f_ft = self.total_forgetting("three-task", "afd", b), self.total_forgetting("three-task", "finetune", b)
        out.append(Verdict(13, "AFD forgets less over three tasks", _mean(f_afd) < _mean(f_ft),
                           f"total row-sum forgetting with {b} exemplars: AFD {_fmt(f_afd)}, "
                           f"finetune {_fmt(f_ft)}"))
        return out

    def summary_table(self) -> str:
        rows = [("cell", "A@A", "A@end", "B@end", "seeds")]
        seen = {}
        for c, r in self.results.items():
            key = replace(c, seed=-1)
            seen.setdefault(key, []).append(r)
        for key in sorted(seen, key=lambda c: c.label):
            rs = seen[key]
            name = key.label.rsplit("_s", 1)[0]
            a0 = [r.table[0][0] for r in rs]
            a_end = [r.table[0][-1] for r in rs]
            b_end = [r.table[1][-1] for r in rs]
            rows.append((name, _fmt(a0), _fmt(a_end), _fmt(b_end), str(len(rs))))
        w = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(cell.ljust(w[i]) for i, cell in enumerate(row)) for row in rows)


def run_suite(root, seeds: Sequence[int] = SUITE_SEEDS, force: bool = False, lam: float = SUITE_LAM,
              base: Optional[TrainConfig] = None, n_train: int = 500, n_test: int = 200) -> SuiteResults:
    runner = Runner(root, base=base, n_train=n_train, n_test=n_test, force=force, lam=lam)
    results = runner.run_all(suite_cells(seeds))
    return SuiteResults(results, seeds)
