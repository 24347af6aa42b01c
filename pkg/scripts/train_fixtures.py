"""Train the bundled reference genomes on their own tasks and report PSNR per split.

The superresolution genome is very wide; it is skipped unless --all is given.
"""

import argparse

import numpy as np

from evonas.compiler import compile_genome
from evonas.evolution import TaskData, desk_config, evaluate_mse, train_individual, training_seed
from evonas.genome import load_fixture
from evonas.tasks import RestorationTask, TaskKind, input_psnr, psnr, synth_dataset

TASKS = {
    "denoise_gaussian": TaskKind.DENOISE_GAUSSIAN,
    "compressive_sensing": TaskKind.COMPRESSIVE,
    "checkerboard": TaskKind.CHECKERBOARD,
    "superres": TaskKind.SUPERRES,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--all", action="store_true")
    args = ap.parse_args()

    ds = synth_dataset(args.seed, 200, args.size)
    cfg = desk_config(train_iters=args.iters, mem_limit_elements=10**12)
    for name, kind in TASKS.items():
        if name == "superres" and not args.all:
            continue
        g = load_fixture(name)
        data = TaskData.build(ds, RestorationTask(kind), cfg, args.seed)
        params, rec = train_individual(g, data, args.iters, cfg, np.random.default_rng(training_seed(args.seed, g)))
        plan = compile_genome(g, data.input_shape, cfg.mem_limit_elements)
        test = psnr(evaluate_mse(plan, params, data.test_x, data.test_y))
        print(f"{name:<20} {kind.value:<18} params {plan.parameter_count:>8}  "
              f"input {input_psnr(data.test_x, data.test_y):6.2f} dB  trained {test:6.2f} dB  "
              f"({rec.seconds:.1f}s{', numeric failure' if rec.numeric_failure else ''})")


if __name__ == "__main__":
    main()
