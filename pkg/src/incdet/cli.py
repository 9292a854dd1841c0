"""Command line: generate scenarios, run sequences and sweeps, evaluate, plot.

Exit codes: 0 success, 2 usage error, 3 runtime failure. Output defaults to
``$INCDET_OUT`` (or ``./runs``). Every run directory gets the verbatim
configuration in ``config.json``; an existing run is only overwritten with
``--force``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import statistics
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

from .detector import DetectorConfig, load_checkpoint
from .evaluation import forgetting_matrix, format_table, map_score, write_results
from .synthdata import (PRESETS, DatasetFormatError, ScenarioSpec, load_scenario, make_scenario, preset_spec,
                        save_scenario)
from .trainer import METHODS, SequenceResult, StageError, TrainConfig, run_sequence

log = logging.getLogger("incdet")

OUT_ENV = "INCDET_OUT"
SWEEP_PARAMS = {"eta": "eta", "budget": "exemplar_budget", "lam": "lam", "strategy": "exemplar_strategy",
                "method": "method"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


def default_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


# ---------------------------------------------------------------------------
# configuration


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return d


def experiment_config(args) -> dict:
    """Config file values overridden by any flag given on the command line."""
    cfg = _load_config_file(getattr(args, "config", None))
    for key in ("preset", "spec", "data", "method", "seed", "repeat", "epochs", "lam", "budget", "strategy", "eta",
                "n_train", "n_test", "lr", "batch_size", "mask_region", "rank_count"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg.setdefault("seed", 0)
    cfg.setdefault("repeat", 1)
    if int(cfg["repeat"]) < 1:
        raise UsageError("--repeat must be >= 1")
    sources = [k for k in ("preset", "spec", "data") if cfg.get(k)]
    if len(sources) > 1:
        raise UsageError("give only one of --preset, --spec, --data")
    if not sources:
        cfg["preset"] = "diff-both"
    if cfg.get("preset") and cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; valid presets: {', '.join(PRESETS)}")
    if cfg.get("spec") and not Path(cfg["spec"]).is_file():
        raise UsageError(f"scenario spec file not found: {cfg['spec']}")
    if cfg.get("data") and not Path(cfg["data"]).is_dir():
        raise UsageError(f"data directory not found: {cfg['data']}")
    if cfg.get("method", "finetune") not in METHODS:
        raise UsageError(f"unknown method {cfg['method']!r}; expected one of {', '.join(METHODS)}")
    return cfg


def train_config(cfg: dict, seed: int) -> TrainConfig:
    renames = {"budget": "exemplar_budget", "strategy": "exemplar_strategy"}
    kw = {}
    for key, value in cfg.items():
        name = renames.get(key, key)
        if name in _TRAIN_FIELDS:
            kw[name] = value
    if isinstance(kw.get("detector"), dict):
        kw["detector"] = DetectorConfig.from_dict(kw["detector"])
    if "eta" in kw and isinstance(kw["eta"], str):
        kw["eta"] = _parse_eta(kw["eta"])
    kw["seed"] = seed
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _parse_eta(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("inf", "k/s", "max", "random"):
        return math.inf
    return int(s)


def load_datasets(cfg: dict, seed: int):
    if cfg.get("data"):
        try:
            return load_scenario(cfg["data"])
        except (DatasetFormatError, FileNotFoundError) as exc:
            raise UsageError(str(exc)) from exc
    return make_scenario(scenario_spec(cfg, seed))


def scenario_spec(cfg: dict, seed: int) -> ScenarioSpec:
    """The preset or spec file named in ``cfg``, with seed and split sizes applied."""
    sizes = {k: int(cfg[k]) for k in ("n_train", "n_test") if cfg.get(k) is not None}
    if cfg.get("image_size"):
        sizes["image_size"] = tuple(cfg["image_size"])
    if cfg.get("spec"):
        try:
            d = json.loads(Path(cfg["spec"]).read_text())
            d.update(sizes, seed=seed)
            return ScenarioSpec.from_dict(d)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad scenario spec {cfg['spec']}: {exc}") from exc
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; valid presets: {', '.join(PRESETS)}")
    return preset_spec(cfg["preset"], seed=seed, **sizes)


def _prepare_dir(path: Path, force: bool, marker: str):
    if (path / marker).exists():
        if not force:
            raise UsageError(f"{path} already holds results; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _run_name(cfg: dict) -> str:
    src = cfg.get("preset") or Path(cfg.get("spec") or cfg["data"]).stem
    return f"{src}-{cfg.get('method', 'finetune')}"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _load_config_file(args.config)
    for key in ("preset", "spec", "n_train", "n_test"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if bool(cfg.get("preset")) == bool(cfg.get("spec")):
        raise UsageError("generate needs exactly one of --preset or --spec")
    if cfg.get("spec") and not Path(cfg["spec"]).is_file():
        raise UsageError(f"scenario spec file not found: {cfg['spec']}")
    spec = scenario_spec(cfg, args.seed)
    out = Path(args.out) if args.out else default_root() / "data" / f"{spec.name}-s{args.seed}"
    _prepare_dir(out, args.force, "scenario.json")
    datasets = make_scenario(spec)
    save_scenario(datasets, spec, out)
    for ds in datasets:
        s = ds.summary()
        print(f"{s['name']}: style={s['style']} classes={','.join(s['classes'])} "
              f"train={s['train_images']} images/{s['train_boxes']} boxes "
              f"test={s['test_images']} images/{s['test_boxes']} boxes")
    print(f"wrote {out}")
    return 0


def _run_once(cfg: dict, seed: int, run_dir: Path) -> SequenceResult:
    tcfg = train_config(cfg, seed)
    datasets = load_datasets(cfg, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "experiment.json").write_text(json.dumps({**cfg, "seed": seed}, indent=1))
    result = run_sequence(datasets, tcfg, run_dir=run_dir)
    write_results(result, run_dir / "results.json", per_class=result.per_class)
    return result


def aggregate(results: list[SequenceResult]) -> dict:
    """Per-cell mean and sample stdev of the mAP tables."""
    tasks = results[0].tasks
    n_cols = len(results[0].table[0])
    mean, std = [], []
    for i in range(len(tasks)):
        mrow, srow = [], []
        for j in range(n_cols):
            vals = [r.table[i][j] for r in results if r.table[i][j] is not None]
            mrow.append(statistics.fmean(vals) if vals else None)
            srow.append(statistics.stdev(vals) if len(vals) > 1 else (0.0 if vals else None))
        mean.append(mrow)
        std.append(srow)
    return {"tasks": tasks, "runs": len(results), "mean": mean, "stdev": std}


def format_aggregate(agg: dict) -> str:
    lines = []
    for i, t in enumerate(agg["tasks"]):
        cells = ["-" if m is None else f"{m:.1f} +- {s:.1f}" for m, s in zip(agg["mean"][i], agg["stdev"][i])]
        lines.append(f"{t}: " + " | ".join(cells))
    return "\n".join(lines)


def run_experiment(cfg: dict, out: Path, force: bool) -> tuple[list[SequenceResult], Optional[dict]]:
    _prepare_dir(out, force, "result.json" if int(cfg["repeat"]) == 1 else "aggregate.json")
    (out / "experiment_request.json").write_text(json.dumps(cfg, indent=1))
    seeds = [int(cfg["seed"]) + k for k in range(int(cfg["repeat"]))]
    if len(seeds) == 1:
        return [_run_once(cfg, seeds[0], out)], None
    results = [_run_once(cfg, s, out / f"seed_{s}") for s in seeds]
    agg = aggregate(results)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=1))
    return results, agg


def cmd_run(args) -> int:
    cfg = experiment_config(args)
    out = Path(args.out) if args.out else default_root() / f"{_run_name(cfg)}-s{cfg['seed']}"
    results, agg = run_experiment(cfg, out, args.force)
    if agg is None:
        print(format_table(results[0]))
    else:
        print(format_aggregate(agg))
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = experiment_config(args)
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {args.param!r}; expected one of {', '.join(SWEEP_PARAMS)}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values needs at least one value")
    out = Path(args.out) if args.out else default_root() / f"ablate-{args.param}-{_run_name(cfg)}-s{cfg['seed']}"
    _prepare_dir(out, args.force, "comparison.json")
    rows = []
    for raw in values:
        cell_cfg = dict(cfg)
        key = {"budget": "budget", "strategy": "strategy"}.get(args.param, args.param)
        if args.param == "eta":
            cell_cfg["eta"] = raw
            if "strategy" not in cfg:
                cell_cfg["strategy"] = "adaptive"
        elif args.param in ("budget",):
            cell_cfg[key] = int(raw)
        elif args.param == "lam":
            cell_cfg[key] = float(raw)
        else:
            cell_cfg[key] = raw
        if args.param == "method" and raw not in METHODS:
            raise UsageError(f"unknown method {raw!r}; expected one of {', '.join(METHODS)}")
        train_config(cell_cfg, int(cfg["seed"]))  # validate before training anything
        results, agg = run_experiment(cell_cfg, out / f"{args.param}={raw.replace('/', '_')}", force=True)
        if agg is None:
            agg = aggregate(results)
        rows.append({"value": raw, "final_mean": [row[-1] for row in agg["mean"]],
                     "final_stdev": [row[-1] for row in agg["stdev"]], "tasks": agg["tasks"]})
    (out / "comparison.json").write_text(json.dumps({"param": args.param, "rows": rows}, indent=1))
    tasks = rows[0]["tasks"]
    header = f"{args.param:>10}  " + "  ".join(f"{t + ' (final)':>16}" for t in tasks)
    lines = [header]
    for r in rows:
        cells = [f"{m:.1f} +- {s:.1f}".rjust(16) for m, s in zip(r["final_mean"], r["final_stdev"])]
        lines.append(f"{r['value']:>10}  " + "  ".join(cells))
    (out / "comparison.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    if args.run:
        res = SequenceResult.load(Path(args.run) / "result.json")
        print(format_table(res))
        if not res.joint:
            fm = forgetting_matrix(res)
            print(json.dumps(fm.to_dict()))
        return 0
    if not (args.checkpoint and args.data):
        raise UsageError("eval needs --run DIR, or --checkpoint FILE with --data DIR")
    model = load_checkpoint(args.checkpoint)
    try:
        datasets = load_scenario(args.data)
    except (DatasetFormatError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    for ds in datasets:
        if ds.name in model.tasks and (args.task is None or ds.name == args.task):
            m, aps = map_score(model, ds.name, ds, return_per_class=True)
            per = ", ".join(f"{ds.categories.names[c]}={100 * v:.1f}" for c, v in aps.items())
            print(f"{ds.name}: mAP {m:.2f} ({per})")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    res = SequenceResult.load(run / "result.json")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    n = len(res.tasks)
    written = []

    fig, ax = plt.subplots(figsize=(4 + 0.6 * n, 3 + 0.5 * n))
    cols = len(res.table[0])
    for i, t in enumerate(res.tasks):
        xs = [j for j in range(cols) if res.table[i][j] is not None]
        ax.plot(xs, [res.table[i][j] for j in xs], marker="o", label=t)
    ax.set_xticks(range(cols))
    ax.set_xticklabels(["joint"] if res.joint else [f"after {t}" for t in res.tasks])
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "map_curves.png", dpi=100)
    plt.close(fig)
    written.append(out / "map_curves.png")

    if not res.joint:
        import numpy as np

        fm = forgetting_matrix(res)
        grid = np.full((n, n), np.nan)
        for i in range(n):
            for j in range(n):
                if fm.values[i][j] is not None:
                    grid[i, j] = fm.values[i][j]
        fig, ax = plt.subplots(figsize=(2 + 0.8 * n, 1.5 + 0.8 * n))
        lim = max(1.0, float(np.nanmax(np.abs(grid))) if np.isfinite(grid).any() else 1.0)
        im = ax.imshow(grid, cmap="RdBu", vmin=-lim, vmax=lim)
        for i in range(n):
            for j in range(n):
                if not np.isnan(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", fontsize=8)
        ax.set_xticks(range(n))
        ax.set_xticklabels([f"after {t}" for t in res.tasks], rotation=45, ha="right")
        ax.set_yticks(range(n))
        ax.set_yticklabels(res.tasks)
        ax.set_title("forgetting (mAP change)")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(out / "forgetting_matrix.png", dpi=100)
        plt.close(fig)
        written.append(out / "forgetting_matrix.png")
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_suite(args) -> int:
    from .experiments import SUITE_LAM, run_suite

    seeds = [int(s) for s in args.seeds.split(",")]
    root = Path(args.out) if args.out else default_root() / "suite"
    lam = SUITE_LAM if args.lam is None else args.lam
    suite = run_suite(root, seeds=seeds, force=args.force, lam=lam)
    print(suite.summary_table())
    print()
    failed = 0
    for v in suite.verdicts():
        print(f"[{'PASS' if v.passed else 'FAIL'}] criterion {v.criterion}: {v.name}: {v.detail}")
        failed += not v.passed
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--out", default=None, help=f"output directory (default under ${OUT_ENV} or ./runs)")
    p.add_argument("--config", default=None, help="JSON config file; flags override its values")
    p.add_argument("--force", action="store_true", help="overwrite existing results")
    p.add_argument("--repeat", type=int, default=None, help="number of seeds (seed, seed+1, ...)")
    p.add_argument("-v", "--verbose", action="store_true")


def _experiment_flags(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default=None, help=f"scenario preset: {', '.join(PRESETS)}")
    src.add_argument("--spec", default=None, help="scenario spec JSON file")
    src.add_argument("--data", default=None, help="scenario directory written by 'generate'")
    p.add_argument("--method", default=None, help=", ".join(METHODS))
    p.add_argument("--lam", type=float, default=None, help="distillation weight")
    p.add_argument("--budget", type=int, default=None, help="exemplars kept per finished task")
    p.add_argument("--strategy", default=None, choices=("adaptive", "random", "hard"))
    p.add_argument("--eta", type=_parse_eta, default=None, help="adaptive pool factor (integer, or 'K/s')")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--mask-region", dest="mask_region", default=None, choices=("intersection", "proposal", "gt"))
    p.add_argument("--rank-count", dest="rank_count", default=None, choices=("class", "total"))
    p.add_argument("--n-train", dest="n_train", type=int, default=None)
    p.add_argument("--n-test", dest="n_test", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incdet", description="Incremental multi-task detection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a scenario preset to disk")
    p.add_argument("--preset", default=None, help=", ".join(PRESETS))
    p.add_argument("--spec", default=None, help="scenario spec JSON file instead of a preset")
    p.add_argument("--n-train", dest="n_train", type=int, default=None)
    p.add_argument("--n-test", dest="n_test", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="train a task sequence and write its mAP table")
    _experiment_flags(p)
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="one run per value of a swept parameter")
    _experiment_flags(p)
    p.add_argument("--param", required=True, help=", ".join(SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma separated values")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="print a run's table, or score a checkpoint on a scenario")
    p.add_argument("--run", default=None, help="run directory")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="scenario directory")
    p.add_argument("--task", default=None)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="forgetting heatmap and mAP curves of a run")
    p.add_argument("--run", required=True, help="run directory")
    _common(p)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("suite", help="the cached comparison suite with pass/fail per claim")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--lam", type=float, default=None)
    _common(p)
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on malformed usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "seed", None) is None and args.command in ("generate",):
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"incdet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"incdet {args.command}: training failed at {exc.stage}: {exc.cause}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"incdet {args.command}: failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
