"""Experiment orchestration: the comparison matrix, the incremental
task-augmentation ablation and the adaptation-stage augmentation study.

Every (condition, seed) cell is an independent, internally deterministic
job. Jobs run in-process by default; ``MI_THREADS`` (or ``max_workers``)
allows a process pool. Report assembly always happens in the parent, in plan
order, so the output does not depend on scheduling.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig, desk_config
from .meta import (
    AugmentConfig,
    FeatureStore,
    augment_tasks,
    fine_tune,
    meta_train,
    raw_augment,
    supervised_pretrain,
)
from .metrics import evaluate
from .model import init_params
from .tasks import Task, TargetTask, build_tasks, generate_corpus, load_audio, load_manifest, split_corpus

__all__ = [
    "CONDITIONS",
    "RECIPES",
    "ADAPT_METHODS",
    "Recipe",
    "World",
    "ExperimentPlan",
    "AblationPlan",
    "Cell",
    "ExperimentReport",
    "AblationPoint",
    "build_world",
    "run_cell",
    "run_matrix",
    "run_ablation",
    "run_adaptation_study",
    "evaluate",
    "emit_plot_data",
    "read_plot_data",
    "max_workers_from_env",
]

CONDITIONS = (
    "Baseline",
    "DataAugSP",
    "DataAugVTLP",
    "SPT",
    "MI",
    "MIRawAugSP",
    "MIRawAugVTLP",
    "MITaskAugSP",
    "MITaskAugVTLP",
)
ADAPT_METHODS = ("none", "sp", "vtlp", "specaug")


@dataclass(frozen=True)
class Recipe:
    # "random", "spt" or "mi"
    init: str
    meta_mode: str = "none"
    meta_method: str = "sp"
    adapt_augment: str = "none"


RECIPES = {
    "Baseline": Recipe("random"),
    "DataAugSP": Recipe("random", adapt_augment="sp"),
    "DataAugVTLP": Recipe("random", adapt_augment="vtlp"),
    "SPT": Recipe("spt"),
    "MI": Recipe("mi"),
    "MIRawAugSP": Recipe("mi", "raw", "sp"),
    "MIRawAugVTLP": Recipe("mi", "raw", "vtlp"),
    "MITaskAugSP": Recipe("mi", "task", "sp"),
    "MITaskAugVTLP": Recipe("mi", "task", "vtlp"),
}


# ------------------------------------------------------------------- data


@dataclass
class World:
    """Everything a cell reads: the task split plus a shared feature cache."""

    train_tasks: list[Task]
    valid_task: Task
    target: TargetTask
    store: FeatureStore


def build_world(config: RunConfig) -> World:
    data = config.data
    if data.manifest:
        records = load_audio(load_manifest(data.manifest), data.audio_root or Path(data.manifest).parent)
    else:
        records = generate_corpus(config.corpus)
    train, valid, target = build_tasks(split_corpus(records, data.split), data.target_group, data.valid_group)
    return World(train, valid, target, FeatureStore(config.features))


def _warm(world: World, recipes: Iterable[Recipe], factors: Sequence[float], adapt_factors: Sequence[float]) -> None:
    """Featurize every view the given recipes will touch, once, before forking."""
    store = world.store
    pool = [u for t in world.train_tasks for u in t.pool] + list(world.valid_task.pool)
    for u in pool + world.target.train + world.target.dev:
        store.logmel(u)
    for r in recipes:
        if r.init == "mi" and r.meta_mode != "none":
            for u in pool:
                for f in factors:
                    store.logmel(u.warped(r.meta_method, f))
        if r.adapt_augment in ("sp", "vtlp"):
            for u in world.target.train:
                for f in adapt_factors:
                    store.logmel(u.warped(r.adapt_augment, f))


# ------------------------------------------------------------------- cells


@dataclass
class Cell:
    condition: str
    seed: int
    status: str = "ok"
    dev_fer: float = math.nan
    dev_ce: float = math.nan
    test_fer: float = math.nan
    test_ce: float = math.nan
    test_uer: float = math.nan
    n_meta_tasks: int = 0
    seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def meta_task_list(world: World, recipe: Recipe, augment: AugmentConfig) -> list[Task]:
    """The tasks meta-training actually sees under ``recipe`` (after augmentation)."""
    base = list(world.train_tasks)
    if recipe.meta_mode == "task":
        return augment_tasks(base, recipe.meta_method, augment.factors)
    if recipe.meta_mode == "raw":
        return raw_augment(base, recipe.meta_method, augment.factors)
    return base


def run_cell(
    world: World,
    config: RunConfig,
    condition: str,
    seed: int,
    recipe: Recipe | None = None,
    meta_tasks: Sequence[Task] | None = None,
) -> Cell:
    """init -> optional MI/SPT -> fine_tune -> evaluate on the target test split.

    ``meta_tasks`` overrides the recipe's task construction (used by the
    ablation). Any exception is caught and recorded in the returned cell.
    """
    recipe = RECIPES[condition] if recipe is None else recipe
    cell = Cell(condition, seed)
    start = time.perf_counter()
    try:
        augment = dataclasses.replace(config.meta.augment, mode=recipe.meta_mode, method=recipe.meta_method)
        meta_cfg = dataclasses.replace(config.meta, seed=seed, augment=dataclasses.replace(augment, mode="none"))
        if recipe.init == "random":
            theta = init_params(config.model, seed)
        elif recipe.init == "spt":
            theta, _ = supervised_pretrain(world.train_tasks, meta_cfg, config.model, world.store)
        elif recipe.init == "mi":
            tasks = list(meta_tasks) if meta_tasks is not None else meta_task_list(world, recipe, augment)
            cell.n_meta_tasks = len(tasks)
            theta, _ = meta_train(tasks, world.valid_task, meta_cfg, config.model, world.store)
        else:
            raise ValueError(f"unknown init {recipe.init!r}")
        adapt_cfg = dataclasses.replace(config.adapt, seed=seed, augment=recipe.adapt_augment)
        tuned, metrics = fine_tune(theta, world.target.train, world.target.dev, adapt_cfg, world.store)
        test = evaluate(tuned, world.store.batch(world.target.test, allow_test=True))
        cell.dev_fer, cell.dev_ce = metrics["dev"]["fer"], metrics["dev"]["ce"]
        cell.test_fer, cell.test_ce, cell.test_uer = test["fer"], test["ce"], test["uer"]
    except Exception as exc:  # recorded, never propagated
        cell.status = "failed"
        cell.error = f"{type(exc).__name__}: {exc}"
    cell.seconds = time.perf_counter() - start
    return cell


# ------------------------------------------------------------ job running


def max_workers_from_env(default: int = 1) -> int:
    raw = os.environ.get("MI_THREADS")
    if raw is None or raw.strip() == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MI_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"MI_THREADS must be >= 1, got {n}")
    return n


_WORKER: dict = {}


def _job(args):
    kind, payload = args
    world, config = _WORKER["world"], _WORKER["config"]
    if kind == "cell":
        return run_cell(world, config, *payload)
    raise ValueError(kind)


def _run_jobs(world: World, config: RunConfig, jobs: list, workers: int) -> list[Cell]:
    _WORKER.update(world=world, config=config)
    try:
        if workers <= 1 or len(jobs) <= 1:
            return [_job(j) for j in jobs]
        # workers inherit the warmed feature cache through fork
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx) as pool:
            return list(pool.map(_job, jobs))
    finally:
        _WORKER.clear()


# ------------------------------------------------------------------ reports


REPORT_FIELDS = ("condition", "seed", "status", "dev_fer", "dev_ce", "test_fer", "test_ce", "test_uer", "n_meta_tasks", "seconds", "error")
METRICS = ("dev_fer", "dev_ce", "test_fer", "test_ce", "test_uer")


@dataclass
class ExperimentReport:
    cells: list[Cell]
    conditions: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.conditions:
            self.conditions = tuple(dict.fromkeys(c.condition for c in self.cells))

    @property
    def failed(self) -> list[Cell]:
        return [c for c in self.cells if not c.ok]

    def by_condition(self, condition: str) -> list[Cell]:
        return [c for c in self.cells if c.condition == condition]

    def metric(self, condition: str, name: str = "test_fer") -> dict[int, float]:
        """Per-seed values for the successful cells of ``condition``."""
        return {c.seed: getattr(c, name) for c in self.by_condition(condition) if c.ok}

    def aggregate(self) -> dict[str, dict[str, float]]:
        """Mean and sample standard deviation (ddof=1; 0 for one seed) over successful cells."""
        out = {}
        for cond in self.conditions:
            ok = [c for c in self.by_condition(cond) if c.ok]
            row = {"n": len(ok)}
            for m in METRICS:
                vals = np.array([getattr(c, m) for c in ok], dtype=np.float64)
                row[f"{m}_mean"] = float(vals.mean()) if len(vals) else math.nan
                row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else (0.0 if len(vals) else math.nan)
            out[cond] = row
        return out

    def rows(self) -> list[dict]:
        rows = [{k: getattr(c, k) for k in REPORT_FIELDS} for c in self.cells]
        for cond, agg in self.aggregate().items():
            for stat in ("mean", "std"):
                r = {k: "" for k in REPORT_FIELDS}
                r.update(condition=cond, seed=stat, status=f"n={agg['n']}")
                r.update({m: agg[f"{m}_{stat}"] for m in METRICS})
                rows.append(r)
        return rows

    def summary(self) -> str:
        lines = [f"{'condition':<16}{'n':>3}{'test FER %':>14}{'test CE':>10}{'dev FER %':>12}"]
        for cond, agg in self.aggregate().items():
            lines.append(
                f"{cond:<16}{agg['n']:>3}{agg['test_fer_mean']:>8.2f} ±{agg['test_fer_std']:<5.2f}"
                f"{agg['test_ce_mean']:>9.3f}{agg['dev_fer_mean']:>12.2f}"
            )
        for c in self.failed:
            lines.append(f"FAILED {c.condition} seed {c.seed}: {c.error}")
        return "\n".join(lines)


@dataclass(frozen=True)
class ExperimentPlan:
    conditions: tuple[str, ...] = CONDITIONS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    config: RunConfig = field(default_factory=desk_config)

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        unknown = [c for c in self.conditions if c not in RECIPES]
        if unknown:
            raise ValueError(f"unknown conditions {unknown}; expected a subset of {CONDITIONS}")
        if len(set(self.conditions)) != len(self.conditions) or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("conditions and seeds must be unique")
        if not self.conditions or not self.seeds:
            raise ValueError("plan needs at least one condition and one seed")

    @classmethod
    def from_config(cls, config: RunConfig) -> "ExperimentPlan":
        conds = config.plan.conditions or CONDITIONS
        return cls(tuple(conds), tuple(config.plan.seeds), config)


def run_matrix(plan: ExperimentPlan, world: World | None = None, max_workers: int | None = None) -> ExperimentReport:
    """Run every (condition, seed) cell; failures are recorded, never raised."""
    config = plan.config
    world = build_world(config) if world is None else world
    workers = max_workers_from_env() if max_workers is None else max_workers
    _warm(world, (RECIPES[c] for c in plan.conditions), config.meta.augment.factors, config.adapt.factors)
    jobs = [("cell", (cond, seed)) for cond in plan.conditions for seed in plan.seeds]
    return ExperimentReport(_run_jobs(world, config, jobs, workers), plan.conditions)


def run_adaptation_study(
    plan: ExperimentPlan,
    init_condition: str = "MITaskAugSP",
    methods: Sequence[str] = ADAPT_METHODS,
    world: World | None = None,
    max_workers: int | None = None,
) -> ExperimentReport:
    """Fix the initialization recipe and vary only the adaptation-stage augmentation."""
    base = RECIPES[init_condition]
    bad = [m for m in methods if m not in ADAPT_METHODS]
    if bad:
        raise ValueError(f"unknown adaptation methods {bad}")
    recipes = {f"{init_condition}+{m}": dataclasses.replace(base, adapt_augment=m) for m in methods}
    config = plan.config
    world = build_world(config) if world is None else world
    workers = max_workers_from_env() if max_workers is None else max_workers
    _warm(world, recipes.values(), config.meta.augment.factors, config.adapt.factors)
    jobs = [("cell", (name, seed, r)) for name, r in recipes.items() for seed in plan.seeds]
    return ExperimentReport(_run_jobs(world, config, jobs, workers), tuple(recipes))


# ----------------------------------------------------------------- ablation


ORDERS = ("forward", "reverse")


@dataclass(frozen=True)
class AblationPlan:
    """Warp-augment the first ``k`` meta-training groups, in age order or reversed.

    ``forward`` adds augmented copies of the youngest training group first.
    The unaugmented originals of all groups are always present, and the task
    list is kept in canonical order, so at full count both orders train on
    the same task set.
    """

    order: str = "forward"
    counts: tuple[int, ...] | None = None
    seeds: tuple[int, ...] = (0,)
    method: str = "sp"
    iterations: int | None = None
    config: RunConfig = field(default_factory=desk_config)

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.counts is not None:
            object.__setattr__(self, "counts", tuple(int(k) for k in self.counts))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass
class AblationPoint:
    order: str
    k: int
    seed: int
    dev: float
    test: float
    status: str = "ok"
    error: str = ""
    augmented: tuple[str, ...] = ()


def ablation_tasks(train_tasks: Sequence[Task], order: str, k: int, method: str, factors: Sequence[float]) -> list[Task]:
    """Original tasks plus warped variants for the first ``k`` groups in ``order``."""
    n = len(train_tasks)
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    ranked = list(range(n)) if order == "forward" else list(range(n))[::-1]
    chosen = set(ranked[:k])
    out = []
    for i, task in enumerate(train_tasks):
        if i in chosen:
            out.extend(augment_tasks([task], method, factors))
        else:
            out.append(task)
    return out


def run_ablation(plan: AblationPlan, world: World | None = None, max_workers: int | None = None) -> list[AblationPoint]:
    """MI + fine_tune for k = 0..n augmented groups; k = 0 is the plain MI pipeline."""
    config = plan.config
    if plan.iterations is not None:
        config = dataclasses.replace(config, meta=dataclasses.replace(config.meta, iterations=plan.iterations))
    world = build_world(config) if world is None else world
    workers = max_workers_from_env() if max_workers is None else max_workers
    n = len(world.train_tasks)
    counts = tuple(range(n + 1)) if plan.counts is None else plan.counts
    factors = config.meta.augment.factors
    _warm(world, [Recipe("mi", "task", plan.method)], factors, ())
    # "task" mode with pre-built variants: meta_train leaves them as they are
    recipe = Recipe("mi", "task", plan.method)
    jobs, tags = [], []
    for k in counts:
        tasks = ablation_tasks(world.train_tasks, plan.order, k, plan.method, factors)
        aug = tuple(t.task_id for t in tasks if t.augment_tag is not None)
        for seed in plan.seeds:
            r = recipe if k > 0 else RECIPES["MI"]
            jobs.append(("cell", (f"k={k}", seed, r, tasks)))
            tags.append((k, seed, tuple(dict.fromkeys(aug))))
    cells = _run_jobs(world, config, jobs, workers)
    return [
        AblationPoint(plan.order, k, seed, c.dev_fer, c.test_fer, c.status, c.error, aug)
        for (k, seed, aug), c in zip(tags, cells)
    ]


# -------------------------------------------------------------- plot data


CURVE_FIELDS = ("order", "k", "seed", "dev", "test")


def emit_plot_data(data: ExperimentReport | Sequence[AblationPoint], path: str | Path) -> Path:
    """Write a report or an ablation curve as CSV.

    Reports use the columns of :data:`REPORT_FIELDS` (with aggregate rows whose
    seed is ``mean``/``std``); curves use ``order, k, seed, dev, test``.
    """
    path = Path(path)
    if isinstance(data, ExperimentReport):
        if not data.cells:
            raise ValueError("empty report")
        fields, rows = REPORT_FIELDS, data.rows()
    else:
        points = list(data)
        if not points:
            raise ValueError("empty curve")
        fields = CURVE_FIELDS
        rows = [{k: getattr(p, k) for k in CURVE_FIELDS} for p in points]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(fields))
            w.writeheader()
            for r in rows:
                w.writerow({k: _csv_value(r[k]) for k in fields})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _csv_value(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _parse_value(v: str):
    if v == "":
        return math.nan
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_plot_data(path: str | Path) -> list[dict]:
    """Rows of an emitted CSV with numbers parsed back (floats round-trip exactly)."""
    with open(path, newline="") as fh:
        return [{k: _parse_value(v) for k, v in row.items()} for row in csv.DictReader(fh)]
