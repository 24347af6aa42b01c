"""Desk-scale searches over several seeds; prints test PSNR against the corrupted input.

    python3 scripts/desk_search.py --task DenoiseGaussian --seeds 0 1 2 --out runs/denoise
"""

import argparse
import csv
import time
from pathlib import Path

from evonas.evolution import desk_config, run_search, write_generations_csv
from evonas.genome import save
from evonas.tasks import RestorationTask, TaskKind, input_psnr, synth_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--task", default=TaskKind.DENOISE_GAUSSIAN.value, choices=[k.value for k in TaskKind])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--generations", type=int, default=10)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    task = RestorationTask(TaskKind(args.task))
    cfg = desk_config(max_generations=args.generations, train_iters=args.iters)
    rows = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        res = run_search(cfg, task, synth_dataset(seed, args.count, args.size), seed)
        scores = res.split_psnr()
        base = input_psnr(res.data.test_x, res.data.test_y)
        row = dict(seed=seed, test_psnr=scores["test"], input_psnr=base, gain=scores["test"] - base,
                   params=res.best.record.parameter_count, seconds=time.perf_counter() - t0)
        rows.append(row)
        print(f"seed {seed}: test {row['test_psnr']:.2f} dB, input {base:.2f} dB, "
              f"gain {row['gain']:+.2f} dB, {row['params']} params, {row['seconds']:.0f}s", flush=True)
        if args.out:
            folder = args.out / f"seed{seed}"
            folder.mkdir(parents=True, exist_ok=True)
            save(res.genome, folder / "best_genome.json")
            write_generations_csv(res.log, folder / "generations.csv")
    if args.out:
        with open(args.out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
