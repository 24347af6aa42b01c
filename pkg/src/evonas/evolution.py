"""Generational search: train, evaluate, halve, clone when small, elitism, crossover, mutation."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import weights as weights_io
from .compiler import ExecutionPlan, Parameters, compile_genome, execute, init_parameters
from .genome import Genome, GenomeConfig, random_genome, save as save_genome, serialize, validate
from .ops import mse_loss
from .optim import OptimizerState, optimizer_step
from .tasks import ImageDataset, RestorationTask, fixed_batches, psnr, sample_batch
from .tensor import NumericError, Tensor
from .variation import crossover, mutate


class ConfigError(ValueError):
    """Invalid search configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SearchConfig:
    initial_population: int = 32
    min_population: int = 8
    elites: int = 2
    crossover_prob: float = 0.5
    mutation_rate: float = 0.5
    train_iters: int = 20000
    batch_size: int = 8
    val_minibatches: int = 1000
    test_minibatches: int = 1000
    max_generations: int = 20
    wall_clock_budget: float = 7200.0          # seconds for the whole search
    mem_limit_elements: int = 1_000_000        # per-sample activation elements
    time_budget: float = 50.0                  # seconds allowed for the first time_window iterations
    time_window: int = 1000
    decay_every: int = 1000
    keep_elite_weights: bool = False
    min_nodes: int = 3
    max_nodes: int = 12
    eval_chunk: int = 64                       # images per forward pass at evaluation
    threads: int = 1

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        ints = ("initial_population", "min_population", "elites", "train_iters", "batch_size",
                "val_minibatches", "test_minibatches", "max_generations", "mem_limit_elements",
                "time_window", "decay_every", "min_nodes", "max_nodes", "eval_chunk", "threads")
        for name in ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(name, f"expected an integer, got {v!r}")
        for name in ("crossover_prob", "mutation_rate", "wall_clock_budget", "time_budget"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v):
                raise ConfigError(name, f"expected a number, got {v!r}")
        if not isinstance(self.keep_elite_weights, bool):
            raise ConfigError("keep_elite_weights", "expected true or false")
        if self.min_population < 2:
            raise ConfigError("min_population", "must be at least 2")
        if self.initial_population < self.min_population:
            raise ConfigError("initial_population", "must be >= min_population")
        if not 0 <= self.elites < self.min_population:
            raise ConfigError("elites", "must satisfy 0 <= elites < min_population")
        for name in ("crossover_prob", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")
        for name in ("batch_size", "val_minibatches", "test_minibatches", "max_generations",
                     "mem_limit_elements", "time_window", "decay_every", "eval_chunk", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        if self.train_iters < 0:
            raise ConfigError("train_iters", "must be non-negative")
        if self.wall_clock_budget < 0:
            raise ConfigError("wall_clock_budget", "must be non-negative")
        if self.time_budget <= 0:
            raise ConfigError("time_budget", "must be positive")
        if not 2 <= self.min_nodes <= self.max_nodes:
            raise ConfigError("min_nodes", "must satisfy 2 <= min_nodes <= max_nodes")

    @classmethod
    def from_dict(cls, doc: dict) -> SearchConfig:
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(key, "unknown config field")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def genome_config(self) -> GenomeConfig:
        return GenomeConfig(min_nodes=self.min_nodes, max_nodes=self.max_nodes)


def desk_config(**overrides) -> SearchConfig:
    """Small budgets suited to 16x16 images on one CPU core."""
    base = dict(initial_population=16, min_population=4, elites=2, train_iters=300,
                val_minibatches=16, test_minibatches=16, max_generations=10,
                wall_clock_budget=3600.0, mem_limit_elements=12_000, time_budget=50.0,
                max_nodes=8)
    base.update(overrides)
    return SearchConfig(**base)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskData:
    """Training images plus fixed, pre-corrupted evaluation batches."""
    task: RestorationTask
    train: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_x: np.ndarray                  # fixed batches from the training split, for reporting
    train_y: np.ndarray

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.val_x.shape[1:])

    @property
    def target_shape(self) -> tuple[int, int, int]:
        return tuple(self.val_y.shape[1:])

    @classmethod
    def build(cls, dataset: ImageDataset, task: RestorationTask, config: SearchConfig,
              seed: int) -> TaskData:
        s_val, s_test, s_train = (int(s.generate_state(1)[0])
                                  for s in np.random.SeedSequence(seed).spawn(3))
        train, val, test = (dataset.split(k) for k in ("train", "validation", "test"))
        for name, part in (("train", train), ("validation", val), ("test", test)):
            if len(part) == 0:
                raise ValueError(f"dataset has an empty {name} split ({len(dataset)} images)")
        bs = config.batch_size
        vx, vy = fixed_batches(val, task, config.val_minibatches, bs, s_val)
        tx, ty = fixed_batches(test, task, config.test_minibatches, bs, s_test)
        rx, ry = fixed_batches(train, task, config.val_minibatches, bs, s_train)
        return cls(task, train, vx, vy, tx, ty, rx, ry)


def evaluate_mse(plan: ExecutionPlan, params: Parameters, xs: np.ndarray, ys: np.ndarray,
                 chunk: int = 64) -> float:
    """Mean squared error over all pixels of all images, network in eval mode."""
    dtype = next(iter(params.tensors.values())).dtype if params.tensors else np.float32
    total = 0.0
    for a in range(0, len(xs), chunk):
        out = execute(plan, params, Tensor(xs[a:a + chunk].astype(dtype)), ys.shape[1:])
        d = out.data.astype(np.float64) - ys[a:a + chunk]
        total += float(np.sum(d * d))
    return total / ys.size


# ---------------------------------------------------------------------------
# training one individual
# ---------------------------------------------------------------------------

@dataclass
class FitnessRecord:
    genome_id: int
    generation: int
    parents: tuple[int, ...]
    val_mse: float
    val_psnr: float
    train_losses: list[float] = field(default_factory=list, repr=False)
    iterations: int = 0
    parameter_count: int = 0
    memory_elements: int = 0
    time_exceeded: bool = False
    mem_truncated: bool = False
    numeric_failure: bool = False
    seconds: float = 0.0
    elite: bool = False

    @property
    def fitness(self) -> float:
        return math.inf if self.numeric_failure else self.val_mse


def training_seed(seed: int, g: Genome) -> int:
    """Per-individual stream: a function of the run seed and the genome alone."""
    h = hashlib.sha256(f"{seed}\n{serialize(g)}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def train_individual(g: Genome, data: TaskData, iters: int, config: SearchConfig,
                     rng: np.random.Generator, init: Parameters | None = None,
                     genome_id: int = 0, generation: int = 0,
                     parents: tuple[int, ...] = ()) -> tuple[Parameters, FitnessRecord]:
    """Train ``g`` with its own optimizer genes and score it on the validation batches."""
    plan = compile_genome(g, data.input_shape, config.mem_limit_elements)
    params = init.copy() if init is not None else init_parameters(plan, rng)
    opt = OptimizerState(g.optimizer.kind, g.optimizer.lr0, g.optimizer.decay,
                         decay_every=config.decay_every)
    trainable = params.trainable()
    record = FitnessRecord(genome_id, generation, tuple(parents), math.inf, -math.inf,
                           parameter_count=plan.parameter_count,
                           memory_elements=plan.memory_elements,
                           mem_truncated=plan.truncated_at is not None)
    t0 = time.perf_counter()
    with np.errstate(all="ignore"):
        try:
            for it in range(iters):
                x, y = sample_batch(data.train, data.task, config.batch_size, rng)
                out = execute(plan, params, Tensor(x.astype(np.float32)), data.target_shape,
                              training=True)
                loss = mse_loss(out, y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError("non-finite loss")
                record.train_losses.append(value)
                if trainable:
                    for p in trainable:
                        p.grad = None
                    loss.backward()
                    optimizer_step(opt, [p.data for p in trainable],
                                   [p.grad if p.grad is not None else np.zeros_like(p.data)
                                    for p in trainable])
                record.iterations = it + 1
                if record.iterations <= config.time_window and \
                        time.perf_counter() - t0 > config.time_budget:
                    record.time_exceeded = True
                    break
            mse = evaluate_mse(plan, params, data.val_x, data.val_y, config.eval_chunk)
            if not math.isfinite(mse):
                raise NumericError("non-finite validation error")
            record.val_mse, record.val_psnr = mse, psnr(mse)
        except NumericError:
            record.numeric_failure = True
            record.val_mse, record.val_psnr = math.inf, -math.inf
    record.seconds = time.perf_counter() - t0
    return params, record


# ---------------------------------------------------------------------------
# population
# ---------------------------------------------------------------------------

@dataclass
class Individual:
    id: int
    genome: Genome
    parents: tuple[int, ...] = ()
    elite: bool = False
    record: FitnessRecord | None = None
    params: Parameters | None = None
    inherited: Parameters | None = None     # elite weights carried over, if enabled


def rank_key(ind: Individual):
    return (ind.record.fitness, ind.record.parameter_count, ind.id)


def ranked(pop: list[Individual]) -> list[Individual]:
    return sorted(pop, key=rank_key)


def next_population_size(size: int, min_population: int) -> int:
    half = max(1, size // 2)
    return 2 * half if half < min_population else half


def step_generation(pop: list[Individual], config: SearchConfig, rng: np.random.Generator,
                    ids) -> list[Individual]:
    """Kill the worst half, clone if too small, keep elites, recombine and mutate the rest."""
    order = ranked(pop)
    survivors = order[:max(1, len(order) // 2)]
    if len(survivors) < config.min_population:
        survivors = survivors + survivors
    out = []
    for k, ind in enumerate(survivors):
        if k < config.elites:
            carry = ind.params if config.keep_elite_weights else None
            out.append(Individual(next(ids), ind.genome, (ind.id,), elite=True, inherited=carry))
            continue
        g, parents = ind.genome, (ind.id,)
        if rng.random() < config.crossover_prob:
            mate = survivors[int(rng.integers(len(survivors)))]
            g = crossover(g, mate.genome, rng)
            parents = (ind.id, mate.id)
        g = mutate(g, config.mutation_rate, rng)
        out.append(Individual(next(ids), g, parents))
    return out


@dataclass
class GenerationSummary:
    generation: int
    size: int
    best_mse: float
    best_psnr: float
    mean_mse: float
    best_id: int
    best_ever_mse: float
    best_ever_id: int
    time_exceeded: int
    mem_truncated: int
    numeric_failures: int
    seconds: float


@dataclass
class SearchLog:
    individuals: list[FitnessRecord] = field(default_factory=list)
    generations: list[GenerationSummary] = field(default_factory=list)
    genomes: dict[int, str] = field(default_factory=dict)
    sizes: list[int] = field(default_factory=list)


@dataclass
class SearchResult:
    best: Individual
    log: SearchLog
    data: TaskData
    config: SearchConfig
    seed: int

    @property
    def genome(self) -> Genome:
        return self.best.genome

    @property
    def params(self) -> Parameters:
        return self.best.params

    def plan(self) -> ExecutionPlan:
        return compile_genome(self.best.genome, self.data.input_shape, self.config.mem_limit_elements)

    def split_psnr(self) -> dict[str, float]:
        """PSNR of the best network on fixed train / validation / test batches."""
        plan, chunk = self.plan(), self.config.eval_chunk
        if self.best.record.numeric_failure:
            return {k: -math.inf for k in ("train", "validation", "test")}
        out = {}
        for name, (x, y) in (("train", (self.data.train_x, self.data.train_y)),
                             ("validation", (self.data.val_x, self.data.val_y)),
                             ("test", (self.data.test_x, self.data.test_y))):
            try:
                out[name] = psnr(evaluate_mse(plan, self.best.params, x, y, chunk))
            except NumericError:
                out[name] = -math.inf
        return out


def _evaluate(pop: list[Individual], generation: int, data: TaskData, config: SearchConfig,
              seed: int, cache: dict) -> None:
    pending = []
    for ind in pop:
        key = serialize(ind.genome)
        if ind.inherited is None and key in cache:
            params, rec = cache[key]
            ind.params = params
            ind.record = dataclasses.replace(rec, genome_id=ind.id, generation=generation,
                                             parents=ind.parents, elite=ind.elite,
                                             train_losses=list(rec.train_losses))
        else:
            pending.append((ind, key))

    def work(item):
        ind, _ = item
        rng = np.random.default_rng(training_seed(seed, ind.genome))
        return train_individual(ind.genome, data, config.train_iters, config, rng,
                                init=ind.inherited, genome_id=ind.id, generation=generation,
                                parents=ind.parents)

    if config.threads > 1 and len(pending) > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(work, pending))
    else:
        results = [work(item) for item in pending]
    for (ind, key), (params, rec) in zip(pending, results):
        rec.elite = ind.elite
        ind.params, ind.record = params, rec
        if ind.inherited is None and key not in cache:
            cache[key] = (params, rec)


def run_search(config: SearchConfig, task: RestorationTask, dataset: ImageDataset, seed: int,
               checkpoint_dir=None, progress=None) -> SearchResult:
    """Evolve until ``max_generations`` or ``wall_clock_budget`` is reached.

    Returns the best individual ever evaluated, its trained parameters, and the log.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    data = TaskData.build(dataset, task, config, seed)
    ids = itertools.count()
    pop = [Individual(next(ids), random_genome(config.genome_config, rng))
           for _ in range(config.initial_population)]
    cache: dict = {}
    log = SearchLog()
    best: Individual | None = None
    for gen in range(config.max_generations):
        t_gen = time.perf_counter()
        for ind in pop:
            problems = validate(ind.genome)
            if problems:
                raise AssertionError(f"invalid genome {ind.id}: {problems}")
        _evaluate(pop, gen, data, config, seed, cache)
        order = ranked(pop)
        if best is None or rank_key(order[0])[:2] < rank_key(best)[:2]:
            best = order[0]
        log.sizes.append(len(pop))
        for ind in pop:
            log.individuals.append(ind.record)
            log.genomes[ind.id] = serialize(ind.genome)
        recs = [ind.record for ind in pop]
        finite = [r.val_mse for r in recs if math.isfinite(r.val_mse)]
        log.generations.append(GenerationSummary(
            generation=gen, size=len(pop), best_mse=order[0].record.fitness,
            best_psnr=order[0].record.val_psnr,
            mean_mse=float(np.mean(finite)) if finite else math.inf, best_id=order[0].id,
            best_ever_mse=best.record.fitness, best_ever_id=best.id,
            time_exceeded=sum(r.time_exceeded for r in recs),
            mem_truncated=sum(r.mem_truncated for r in recs),
            numeric_failures=sum(r.numeric_failure for r in recs),
            seconds=time.perf_counter() - t_gen))
        if checkpoint_dir is not None:
            write_checkpoint(Path(checkpoint_dir) / f"gen{gen:03d}", order[:max(1, config.elites)])
        if progress is not None:
            progress(log.generations[-1])
        if gen == config.max_generations - 1 or time.perf_counter() - start >= config.wall_clock_budget:
            break
        pop = step_generation(pop, config, rng, ids)
    return SearchResult(best, log, data, config, seed)


# ---------------------------------------------------------------------------
# logs and checkpoints
# ---------------------------------------------------------------------------

INDIVIDUAL_COLUMNS = ("generation", "id", "parents", "elite", "val_mse", "val_psnr", "final_train_loss",
                      "iterations", "params", "memory_elements", "time_exceeded", "mem_truncated",
                      "numeric_failure", "seconds")
GENERATION_COLUMNS = tuple(f.name for f in dataclasses.fields(GenerationSummary))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_individuals_csv(log: SearchLog, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDIVIDUAL_COLUMNS)
        for r in log.individuals:
            last = r.train_losses[-1] if r.train_losses else math.nan
            w.writerow([_fmt(v) for v in (
                r.generation, r.genome_id, " ".join(map(str, r.parents)), r.elite, r.val_mse,
                r.val_psnr, last, r.iterations, r.parameter_count, r.memory_elements,
                r.time_exceeded, r.mem_truncated, r.numeric_failure, r.seconds)])


def write_generations_csv(log: SearchLog, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GENERATION_COLUMNS)
        for s in log.generations:
            w.writerow([_fmt(getattr(s, k)) for k in GENERATION_COLUMNS])


def write_checkpoint(folder: Path, individuals: list[Individual]) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for rank, ind in enumerate(individuals):
        save_genome(ind.genome, folder / f"elite{rank}_id{ind.id}.json")
        if ind.params is not None:
            weights_io.save(ind.params, folder / f"elite{rank}_id{ind.id}.bin")
