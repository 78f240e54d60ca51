"""``dynlora`` command line: generate-data, train, eval, merge, ablate.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .adapter import AdapterConfigError
from .config import FILE_KEYS, ConfigError, TrainConfig, load_config, write_flat
from .glyphgen import FAMILIES, GlyphFormatError, GlyphRangeError, generate_dataset, read_gly1, write_gly1
from .metrics import EvalReport, ReportRow, emit_report, to_markdown
from .model import ModelConfigError
from .optim import NaNLossError
from .trainer import DataError, TaskSpec, evaluate, load_task, train_sequential

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
COMPONENTS = ("dynamic_rank", "mlp", "attention", "sparsity")

log = logging.getLogger("dynlora")


def manifest(command: str, config: TrainConfig | None = None, **extra) -> dict[str, object]:
    out: dict[str, object] = {"command": command}
    if config is not None:
        flat = config.to_flat()
        for key, attr in FILE_KEYS.items():
            out[key] = flat.pop(attr)
        out.update(flat)
    out.update(extra)
    return out


# --- generate-data ------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test_pc = args.test_per_class or max(2, args.per_class // 4)
    train = generate_dataset(args.family, args.per_class, args.seed, "train")
    test = generate_dataset(args.family, test_pc, args.seed, "test")
    write_gly1(train, out / "train.gly1")
    write_gly1(test, out / "test.gly1")
    write_flat(manifest("generate-data", family=args.family, per_class=args.per_class,
                        test_per_class=test_pc, seed=args.seed), out / "manifest.txt")
    print(f"wrote {len(train)} train / {len(test)} test glyphs of family {args.family} to {out}")
    return 0


# --- train --------------------------------------------------------------------

def _overrides(args) -> dict:
    kw = {}
    if getattr(args, "mode", None):
        kw["mode"] = args.mode
    if getattr(args, "no_merge", False):
        kw["merge"] = False
    if getattr(args, "no_augment", False):
        kw["augment"] = False
    if getattr(args, "pretrain_epochs", None) is not None:
        kw["pretrain_epochs"] = args.pretrain_epochs
    return kw


def _load_tasks(config: TrainConfig) -> list[TaskSpec]:
    if not config.tasks:
        raise ConfigError("config lists no tasks")
    return [load_task(t) for t in config.tasks]


def _rows(label: str, result) -> list[ReportRow]:
    rows = []
    F = result.forgetting + [0.0]
    for t, (name, rep) in enumerate(zip(result.task_names, result.reports)):
        res = result.task_results[t]
        head = result.heads[t].size
        rows.append(ReportRow(label, name, {
            **rep.headline(),
            "forgetting": F[t],
            "active_rank": float(sum(res.active_ranks.values())),
            "adapter_params": float(res.trainable_params - head if res.active_ranks else 0),
            "trainable_params": float(res.trainable_params),
        }))
    return rows


def cmd_train(args) -> int:
    config = load_config(args.config, **_overrides(args))
    tasks = _load_tasks(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = train_sequential(tasks, config, checkpoint_dir=out / "checkpoints")
    shutil.copyfile(result.checkpoints[-1], out / "model.dlra")
    emit_report(_rows(config.mode, result), out / "report.csv", title=f"train ({config.mode})")
    extra = {}
    for t, name in enumerate(result.task_names):
        extra[f"task.{t}"] = name
        extra[f"task.{t}.checkpoint_bytes"] = result.checkpoint_sizes[t]
        extra[f"task.{t}.trainable_params"] = result.trainable_params[t]
    for t, w in enumerate(result.wall_times):
        extra[f"wall_time.task.{t}"] = f"{w:.3f}"
    extra["wall_time.total"] = f"{time.perf_counter() - t0:.3f}"
    write_flat(manifest("train", config, **extra), out / "manifest.txt")
    for t, (name, rep) in enumerate(zip(result.task_names, result.reports)):
        res = result.task_results[t]
        ranks = " ".join(f"{k}:{v}" for k, v in res.active_ranks.items()) or "-"
        print(f"{name}: acc {rep.accuracy:.4f} recall {rep.macro_recall:.4f} f1 {rep.macro_f1:.4f} "
              f"trainable {res.trainable_params} active ranks [{ranks}]")
    if len(tasks) > 1:
        print("forgetting: " + " ".join(f"{f:+.4f}" for f in result.forgetting))
    return 0


# --- eval / merge -------------------------------------------------------------

def _dataset(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "test.gly1"
    if not p.is_file():
        raise DataError(f"missing dataset file {p}")
    return read_gly1(p)


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"missing checkpoint {args.checkpoint}")
    model, heads = ckpt.load_checkpoint(args.checkpoint)
    task = len(heads) - 1 if args.task is None else args.task
    if not 0 <= task < len(heads):
        raise ConfigError(f"checkpoint has {len(heads)} heads, no task {task}")
    from .trainer import _use_head
    _use_head(model, heads[task])
    data = _dataset(args.data)
    rep = evaluate(model, data)
    print(f"acc {rep.accuracy:.6f} recall {rep.macro_recall:.6f} f1 {rep.macro_f1:.6f}")
    return 0


def cmd_merge(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"missing checkpoint {args.checkpoint}")
    entries = ckpt.read_entries(args.checkpoint)
    merged = {k: v for k, v in entries.items() if ".lora." not in k}
    size = ckpt.write_entries(merged, args.out)
    print(f"wrote {args.out}: {len(merged)} tensors, {size} bytes, "
          f"dropped {len(entries) - len(merged)} adapter entries")
    return 0


# --- ablate -------------------------------------------------------------------

def _parse_grid(items: list[str]) -> dict[str, list[float]]:
    grid = {}
    for item in items:
        key, _, vals = item.partition("=")
        if key not in ("lr", "batch") or not vals:
            raise ConfigError(f"grid entries look like lr=1e-5,5e-6 or batch=1,2; got {item!r}")
        try:
            grid[key] = [float(v) if key == "lr" else int(v) for v in vals.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad grid values in {item!r}") from exc
    return grid


def component_config(base: TrainConfig, disabled: str | None) -> TrainConfig:
    """Config with one Dynamic LoRA component switched off (None = full configuration)."""
    base = base.with_(mode="dynamic")
    if disabled is None:
        return base
    if disabled == "dynamic_rank":
        return base.with_(train_importance=False)
    if disabled == "mlp":
        return base.with_(targets=("attention",))
    if disabled == "attention":
        return base.with_(targets=("mlp",))
    if disabled == "sparsity":
        return base.with_(lambda_sparsity=0.0)
    raise ConfigError(f"unknown component {disabled!r}; choose from {COMPONENTS}")


def run_cell(config: TrainConfig, task: TaskSpec, seeds: list[int], cell_dir: Path) -> dict[str, float]:
    """Train ``task`` alone for every seed; returns seed-averaged metrics."""
    cell_dir.mkdir(parents=True, exist_ok=True)
    reps, ranks = [], []
    for s in seeds:
        cfg = config.with_(seed=s)
        res = train_sequential([task], cfg)
        reps.append(res.reports[0])
        ranks.append(sum(res.active_ranks[0].values()))
    write_flat(manifest("ablate-cell", config, task_name=task.name,
                        seeds=",".join(map(str, seeds))), cell_dir / "manifest.txt")
    return {
        "accuracy": float(np.mean([r.accuracy for r in reps])),
        "macro_recall": float(np.mean([r.macro_recall for r in reps])),
        "macro_f1": float(np.mean([r.macro_f1 for r in reps])),
        "active_rank": float(np.mean(ranks)),
    }


def ablation_markdown(rows: list[ReportRow]) -> str:
    """One table per task with a row per disabled component and its accuracy delta."""
    lines = ["# Component ablation", ""]
    for task in dict.fromkeys(r.task for r in rows):
        full = next(r for r in rows if r.task == task and r.config == "full")
        m = full.metrics
        lines += [f"## {task}", "",
                  f"Full configuration: Acc {100 * m['accuracy']:.2f} / Recall {100 * m['macro_recall']:.2f}"
                  f" / F1 {100 * m['macro_f1']:.2f}", "",
                  "| Disabled | Acc | Recall | F1 | dAcc |", "|---|---|---|---|---|"]
        for r in rows:
            if r.task != task or r.config == "full":
                continue
            x = r.metrics
            lines.append(f"| {r.config.removeprefix('no_')} | {100 * x['accuracy']:.2f} | "
                         f"{100 * x['macro_recall']:.2f} | {100 * x['macro_f1']:.2f} | "
                         f"{100 * (x['accuracy'] - m['accuracy']):+.2f} |")
        lines.append("")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    if not args.grid and not args.components:
        raise ConfigError("ablate needs --grid or --components")
    config = load_config(args.config, **_overrides(args))
    tasks = _load_tasks(config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[ReportRow] = []
    t0 = time.perf_counter()
    if args.grid:
        grid = _parse_grid(args.grid)
        for task in tasks:
            for lr in grid.get("lr", [config.lr]):
                for batch in grid.get("batch", [config.effective_batch]):
                    label = f"lr={lr:g},batch={batch}"
                    cfg = config.with_(lr=lr, micro_batch=batch, accumulation_steps=1)
                    rows.append(ReportRow(label, task.name, run_cell(cfg, task, seeds, out / task.name / label)))
        emit_report(rows, out / "report.csv", title="Learning-rate / batch ablation")
    else:
        comps = [c.strip() for c in args.components.split(",") if c.strip()]
        for c in comps:
            if c not in COMPONENTS:
                raise ConfigError(f"unknown component {c!r}; choose from {', '.join(COMPONENTS)}")
        for task in tasks:
            for c in [None] + comps:
                label = "full" if c is None else f"no_{c}"
                cfg = component_config(config, c)
                rows.append(ReportRow(label, task.name, run_cell(cfg, task, seeds, out / task.name / label)))
        emit_report(rows, out / "report.csv", title="Component ablation")
        (out / "report.md").write_text(ablation_markdown(rows), encoding="utf-8")
    write_flat(manifest("ablate", config, seeds=",".join(map(str, seeds)),
                        grid=" ".join(args.grid or []), components=args.components or "",
                        **{"wall_time.total": f"{time.perf_counter() - t0:.3f}"}), out / "manifest.txt")
    print((out / "report.md").read_text(encoding="utf-8"))
    return 0


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynlora", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write train/test GLY1 files for one glyph family")
    g.add_argument("--family", type=int, choices=sorted(FAMILIES), required=True)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--test-per-class", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def train_flags(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--mode", choices=("dynamic", "fixed_rank", "full_ft"))
        sp.add_argument("--out", default="run")
        sp.add_argument("--no-merge", action="store_true",
                        help="keep per-task adapters instead of folding them into the backbone")
        sp.add_argument("--no-augment", action="store_true")
        sp.add_argument("--pretrain-epochs", type=int, default=None)

    t = sub.add_parser("train", help="sequential training over the config's task list")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy / macro recall / macro F1 of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="GLY1 file or task directory (uses test.gly1)")
    e.add_argument("--task", type=int, default=None, help="head index (default: last task)")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="fold adapters into the backbone and drop them")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    a = sub.add_parser("ablate", help="lr/batch grid or component ablation")
    train_flags(a)
    a.add_argument("--grid", nargs="+", metavar="KEY=V1,V2")
    a.add_argument("--components", metavar="C1,C2", help=f"any of {','.join(COMPONENTS)}")
    a.add_argument("--seeds", default=None, help="comma-separated seeds to average")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelConfigError, AdapterConfigError) as exc:
        print(f"dynlora: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GlyphFormatError, GlyphRangeError, ckpt.CheckpointFormatError, FileNotFoundError) as exc:
        print(f"dynlora: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NaNLossError, FloatingPointError) as exc:
        print(f"dynlora: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
