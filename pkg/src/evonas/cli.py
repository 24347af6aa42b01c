"""Command-line entry point: ``search``, ``train``, ``degrade``, ``report``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import weights as weights_io
from .baseline import baseline_genome
from .compiler import compile_genome, format_plan
from .evolution import (
    ConfigError, SearchConfig, TaskData, desk_config, evaluate_mse, run_search, train_individual,
    training_seed, write_generations_csv, write_individuals_csv,
)
from .genome import GenomeParseError, load as load_genome, save as save_genome
from .tasks import (
    ImageDataset, RestorationTask, TaskKind, degrade, format_psnr, input_psnr, load_image_folder,
    mse, psnr, read_png, synth_dataset, write_manifest, write_png,
)
from .tensor import NumericError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
UNLIMITED = 10 ** 12
SPLIT_NAMES = {"train": "Training", "validation": "Validation", "test": "Test"}


class UsageError(Exception):
    pass


def _task(name: str) -> RestorationTask:
    try:
        return RestorationTask(TaskKind(name))
    except ValueError:
        choices = ", ".join(k.value for k in TaskKind)
        raise UsageError(f"unknown task {name!r}; choose from {choices}") from None


def _dataset(args) -> ImageDataset:
    if args.data:
        return load_image_folder(args.data, args.size)
    return synth_dataset(args.data_seed, args.count, args.size)


def _read_config(args) -> SearchConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from e
        cfg = SearchConfig.from_dict(doc)
    else:
        cfg = desk_config()
    overrides = {}
    if args.budget_seconds is not None:
        overrides["wall_clock_budget"] = args.budget_seconds
    if args.mem_limit is not None:
        overrides["mem_limit_elements"] = args.mem_limit
    threads = 1 if args.deterministic else (args.threads or os.cpu_count() or 1)
    overrides["threads"] = threads
    return SearchConfig(**{**cfg.to_dict(), **overrides})


def _psnr_json(v: float):
    return v if math.isfinite(v) else ("exact" if v > 0 else "failed")


def _train_baseline(data: TaskData, cfg: SearchConfig, seed: int) -> dict[str, float]:
    g = baseline_genome()
    cfg = SearchConfig(**{**cfg.to_dict(), "mem_limit_elements": UNLIMITED})
    params, _ = train_individual(g, data, cfg.train_iters, cfg, np.random.default_rng(training_seed(seed, g)))
    plan = compile_genome(g, data.input_shape, UNLIMITED)
    return _split_psnr(plan, params, data, cfg.eval_chunk)


def _split_psnr(plan, params, data: TaskData, chunk: int) -> dict[str, float]:
    out = {}
    for name, x, y in (("train", data.train_x, data.train_y), ("validation", data.val_x, data.val_y),
                       ("test", data.test_x, data.test_y)):
        try:
            out[name] = psnr(evaluate_mse(plan, params, x, y, chunk))
        except NumericError:
            out[name] = -math.inf
    return out


def _input_psnr(data: TaskData) -> dict[str, float]:
    return {"train": input_psnr(data.train_x, data.train_y),
            "validation": input_psnr(data.val_x, data.val_y),
            "test": input_psnr(data.test_x, data.test_y)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_search(args) -> int:
    cfg = _read_config(args)
    task = _task(args.task)
    ds = _dataset(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    def progress(s):
        if not args.quiet:
            best = format_psnr(psnr(s.best_ever_mse)) if math.isfinite(s.best_ever_mse) else "failed"
            print(f"gen {s.generation:3d}  size {s.size:3d}  best-ever {best} dB  ({s.seconds:.1f}s)",
                  flush=True)

    ckpt = out / "checkpoints" if args.checkpoints else None
    res = run_search(cfg, task, ds, args.seed, checkpoint_dir=ckpt, progress=progress)
    save_genome(res.genome, out / "best_genome.json")
    weights_io.save(res.params, out / "best_weights.bin")
    write_individuals_csv(res.log, out / "individuals.csv")
    write_generations_csv(res.log, out / "generations.csv")
    (out / "plan.txt").write_text(format_plan(res.plan(), res.genome.optimizer))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(ds, out / "dataset.json")
    evolved = res.split_psnr()
    summary = {
        "task": task.kind.value, "seed": args.seed, "image_shape": list(ds.images.shape[1:]),
        "best_id": res.best.id, "generations": len(res.log.generations),
        "parameters": res.best.record.parameter_count,
        "psnr": {"evolved": {k: _psnr_json(v) for k, v in evolved.items()},
                 "input": {k: _psnr_json(v) for k, v in _input_psnr(res.data).items()}},
    }
    if args.baseline:
        base = _train_baseline(res.data, cfg, args.seed)
        summary["psnr"]["baseline"] = {k: _psnr_json(v) for k, v in base.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"best test PSNR: {format_psnr(evolved['test'])} dB "
          f"(corrupted input {format_psnr(summary['psnr']['input']['test'])} dB)")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.baseline:
        g = baseline_genome()
    elif args.genome:
        try:
            g = load_genome(args.genome)
        except FileNotFoundError:
            raise UsageError(f"genome file not found: {args.genome}") from None
    else:
        raise UsageError("pass a genome JSON file or --baseline")
    task = _task(args.task)
    ds = _dataset(args)
    cfg = desk_config(train_iters=args.iters, mem_limit_elements=args.mem_limit or UNLIMITED,
                      val_minibatches=args.val_minibatches, test_minibatches=args.val_minibatches)
    data = TaskData.build(ds, task, cfg, args.seed)
    rng = np.random.default_rng(training_seed(args.seed, g))
    params, rec = train_individual(g, data, args.iters, cfg, rng)
    plan = compile_genome(g, data.input_shape, cfg.mem_limit_elements)
    scores = _split_psnr(plan, params, data, cfg.eval_chunk)
    if rec.numeric_failure:
        print("training hit a numeric failure (non-finite loss or output)", file=sys.stderr)
    for k, v in scores.items():
        print(f"{SPLIT_NAMES[k]:<10} PSNR: {format_psnr(v)} dB")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        weights_io.save(params, out / "weights.bin")
        save_genome(g, out / "genome.json")
        (out / "plan.txt").write_text(format_plan(plan, g.optimizer))
        doc = {"task": task.kind.value, "iterations": rec.iterations, "seed": args.seed,
               "numeric_failure": rec.numeric_failure, "time_exceeded": rec.time_exceeded,
               "psnr": {k: _psnr_json(v) for k, v in scores.items()},
               "input_psnr": {k: _psnr_json(v) for k, v in _input_psnr(data).items()}}
        (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_RUNTIME if rec.numeric_failure else EXIT_OK


def cmd_degrade(args) -> int:
    task = _task(args.task)
    src, dst = Path(args.input), Path(args.output)
    if not src.is_dir():
        raise UsageError(f"input folder not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise UsageError(f"{src}: no PNG files found")
    dst.mkdir(parents=True, exist_ok=True)
    failed = 0
    rows = []
    for i, f in enumerate(files):
        try:
            clean = read_png(f, args.size)
            if task.kind is TaskKind.SUPERRES and (clean.shape[1] % 2 or clean.shape[2] % 2):
                raise ValueError("superresolution needs even image sides")
            bad = degrade(clean, task, np.random.default_rng([args.seed, i]))
            write_png(bad[:3], dst / f.name)
            if bad.shape[0] > 3:
                write_png(bad[3:4], dst / f"{f.stem}_mask.png")
            err = mse(bad[:3], clean)
            rows.append((f.name, repr(err), repr(psnr(err))))
        except (OSError, ValueError) as e:
            msg = str(e)
            print(msg if str(f) in msg else f"{f}: {msg}", file=sys.stderr)
            failed += 1
    with open(dst / "psnr.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("file", "mse", "psnr"))
        w.writerows(rows)
    return EXIT_RUNTIME if failed else EXIT_OK


def _fmt_cell(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, str):
        return v
    return f"{v:.4f}"


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    summary_path, gens_path = run / "summary.json", run / "generations.csv"
    missing = [p.name for p in (summary_path, gens_path) if not p.is_file()]
    if missing:
        print(f"{run}: missing {', '.join(missing)}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = json.loads(summary_path.read_text())
    scores = summary["psnr"]
    lines = [f"Mean PSNR (dB), task {summary['task']}, seed {summary['seed']}",
             f"{'Task':<20} | {'Subset':<10} | {'Input':>9} | {'Baseline':>9} | {'Evolved':>9}",
             "-" * 70]
    for key, label in SPLIT_NAMES.items():
        base = scores.get("baseline", {}).get(key)
        lines.append(f"{summary['task']:<20} | {label:<10} | {_fmt_cell(scores['input'][key]):>9} | "
                     f"{_fmt_cell(base):>9} | {_fmt_cell(scores['evolved'][key]):>9}")
    text = "\n".join(lines) + "\n"
    (run / "report.txt").write_text(text)

    with open(gens_path, newline="") as fh:
        gens = list(csv.DictReader(fh))
    with open(run / "fitness.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("generation", "size", "best_psnr", "best_ever_psnr", "mean_mse"))
        for row in gens:
            best_ever = float(row["best_ever_mse"])
            w.writerow((row["generation"], row["size"], row["best_psnr"],
                        repr(psnr(best_ever)) if math.isfinite(best_ever) else "-inf", row["mean_mse"]))
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="folder of PNG images (default: synthetic images)")
    p.add_argument("--size", type=int, default=16, help="image side in pixels")
    p.add_argument("--count", type=int, default=200, help="number of synthetic images")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evonas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="evolve an architecture for one task")
    p.add_argument("--config", help="JSON file of search settings (default: desk-scale settings)")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="training threads (default: all cores)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    p.add_argument("--budget-seconds", type=float, default=None)
    p.add_argument("--mem-limit", type=int, default=None, help="activation elements per sample")
    p.add_argument("--task", default=TaskKind.DENOISE_GAUSSIAN.value)
    p.add_argument("--baseline", action="store_true", help="also train the comparator network")
    p.add_argument("--checkpoints", action="store_true", help="save elites after every generation")
    p.add_argument("--quiet", action="store_true")
    _data_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train and evaluate a single genome")
    p.add_argument("genome", nargs="?", help="genome JSON file")
    p.add_argument("--baseline", action="store_true", help="train the built-in comparator instead")
    p.add_argument("--task", default=TaskKind.DENOISE_GAUSSIAN.value)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mem-limit", type=int, default=None)
    p.add_argument("--val-minibatches", type=int, default=16)
    p.add_argument("--output")
    _data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("degrade", help="write corrupted copies of PNG images")
    p.add_argument("--task", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None, help="center-crop and resize to this side")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("report", help="summarise a search run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:         # argparse exits 2 on bad usage, 0 on --help
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, GenomeParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, GenomeParseError):
            for v in e.violations:
                print(f"  {v}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
