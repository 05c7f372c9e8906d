"""First-order MAML meta-initialization, task augmentation, supervised
pre-training and the adaptation (fine-tuning) stage."""

from __future__ import annotations

import csv
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import DEFAULT_FACTORS, WARP_METHODS, SpecAugParams, check_factor, speed_perturb, spec_augment
from .features import FeatureConfig, logmel, stack_frames
from .metrics import evaluate
from .model import LabeledBatch, ModelConfig, ParameterSet, backward, clip_grads, init_params
from .optim import ADAPT_SCHEDULE, META_SCHEDULE, AdamState, MultiStepSchedule, adam_init, adam_step, schedule_lr, sgd_step
from .tasks import Task, UtteranceRecord

AUGMENT_MODES = ("none", "task", "raw")


class LeakageError(RuntimeError):
    """A training path was handed held-out test data."""


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class AugmentConfig:
    method: str = "sp"
    factors: tuple[float, ...] = DEFAULT_FACTORS
    mode: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(float(f) for f in self.factors))
        if self.mode not in AUGMENT_MODES:
            raise ValueError(f"augment mode must be one of {AUGMENT_MODES}, got {self.mode!r}")
        if self.mode != "none":
            if self.method == "specaug":
                raise ValueError("SpecAug masks are not consistent within a task; it cannot be used for task augmentation")
            if self.method not in WARP_METHODS:
                raise ValueError(f"augmentation method must be one of {WARP_METHODS}, got {self.method!r}")
        if 1.0 not in self.factors:
            raise ValueError("factors must include 1.0")
        for f in self.factors:
            check_factor(f)


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 2e-4
    inner_steps: int = 1
    outer_schedule: MultiStepSchedule = META_SCHEDULE
    episode_batch: int = 16
    iterations: int = 6800
    # None: every task contributes to every outer step
    tasks_per_step: int | None = None
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0
    valid_every: int = 50
    pretrain_epochs: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.inner_lr < 0:
            raise ValueError("inner_lr must be >= 0")
        if self.inner_steps < 1 or self.episode_batch < 1 or self.iterations < 0 or self.valid_every < 1:
            raise ValueError(f"invalid meta config {self}")
        if self.tasks_per_step is not None and self.tasks_per_step < 1:
            raise ValueError("tasks_per_step must be positive")


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 15
    batch_size: int = 16
    schedule: MultiStepSchedule = ADAPT_SCHEDULE
    # "none", "sp", "vtlp" or "specaug"; warp methods draw a factor per utterance
    augment: str = "none"
    factors: tuple[float, ...] = DEFAULT_FACTORS
    spec_params: SpecAugParams = SpecAugParams()
    seed: int = 0

    def __post_init__(self):
        if self.augment not in ("none", "specaug") + WARP_METHODS:
            raise ValueError(f"unknown adaptation augmentation {self.augment!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid adapt config {self}")


# ----------------------------------------------------------- feature store


class FeatureStore:
    """Featurizes records on demand and memoizes the (unstacked) log-mel per utterance view.

    Warped views are computed from the cached waveform the first time they are
    requested. Records tagged ``split == "test"`` are refused unless the caller
    explicitly opts in (evaluation only).
    """

    def __init__(self, config: FeatureConfig = FeatureConfig()):
        self.config = config
        self._cache: dict[str, np.ndarray] = {}

    def logmel(self, utt: UtteranceRecord) -> np.ndarray:
        feats = self._cache.get(utt.utt_id)
        if feats is None:
            if utt.waveform is None:
                raise ValueError(f"{utt.utt_id}: no waveform loaded")
            wav, warp = utt.waveform, 1.0
            if utt.warp is not None:
                method, factor = utt.warp
                if method == "sp":
                    wav = speed_perturb(wav, factor)
                else:
                    warp = factor
            feats = logmel(wav, self.config, warp).astype(np.float32)
            self._cache[utt.utt_id] = feats
        return feats

    def batch(
        self,
        utts: Sequence[UtteranceRecord],
        allow_test: bool = False,
        specaug: SpecAugParams | None = None,
        rng: np.random.Generator | None = None,
    ) -> LabeledBatch:
        if not allow_test:
            leaked = [u.utt_id for u in utts if u.split == "test"]
            if leaked:
                raise LeakageError(f"test-split utterances in a training batch: {leaked[:3]}")
        feats = []
        for u in utts:
            x = self.logmel(u).astype(np.float64)
            if specaug is not None:
                x = spec_augment(x, rng, specaug)
            feats.append(stack_frames(x, self.config.n_append))
        labels = tuple(np.full(x.shape[0], u.label, dtype=np.int64) for x, u in zip(feats, utts))
        return LabeledBatch(tuple(feats), labels, tuple((u.utt_id, u.split or "") for u in utts))


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class Episode:
    task: str
    support: LabeledBatch
    query: LabeledBatch


def draw_episode_indices(pool_size: int, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    if pool_size < 2 * batch_size:
        raise ValueError(f"pool of {pool_size} is too small for two disjoint batches of {batch_size}")
    perm = rng.permutation(pool_size)
    return perm[:batch_size], perm[batch_size : 2 * batch_size]


def sample_episode(task: Task, rng: np.random.Generator, batch_size: int, store: FeatureStore) -> Episode:
    """Fresh random disjoint support/query batches from one task."""
    sup, que = draw_episode_indices(len(task.pool), rng, batch_size)
    return Episode(
        task.name,
        store.batch([task.pool[i] for i in sup]),
        store.batch([task.pool[i] for i in que]),
    )


# ---------------------------------------------------------------- FOMAML


def inner_adapt(theta: ParameterSet, support: LabeledBatch, alpha: float, steps: int = 1) -> ParameterSet:
    """``steps`` plain SGD steps on the support batch, starting from theta."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if alpha == 0:
        return theta
    phi = theta
    for _ in range(steps):
        _, g = backward(phi, support)
        phi = sgd_step(phi, g, alpha)
    return phi


def _sum_grads(parts: Sequence[tuple[float, dict[str, np.ndarray]]]):
    """Fixed-order reduction so every execution strategy sums identically."""
    total_loss = 0.0
    total = None
    for loss_i, g in parts:
        total_loss += loss_i
        if total is None:
            total = {k: v.copy() for k, v in g.items()}
        else:
            for k in total:
                total[k] += g[k]
    return total_loss, total


def _episode_grad(theta, episode, alpha, steps):
    phi = inner_adapt(theta, episode.support, alpha, steps)
    return backward(phi, episode.query)


def meta_objective(
    theta: ParameterSet, episodes: Sequence[Episode], alpha: float, steps: int = 1, workers: int = 1
) -> tuple[float, dict[str, np.ndarray]]:
    """Summed query loss after adaptation, and its first-order gradient.

    The gradient of each query loss is taken at the adapted parameters and
    applied to theta directly, i.e. the adaptation Jacobian is treated as the
    identity.
    """
    if not episodes:
        raise ValueError("need at least one episode")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda ep: _episode_grad(theta, ep, alpha, steps), episodes))
    else:
        parts = [_episode_grad(theta, ep, alpha, steps) for ep in episodes]
    return _sum_grads(parts)


def outer_step(
    theta: ParameterSet, adam_state: AdamState, episodes: Sequence[Episode], config: MetaConfig, iteration: int
) -> tuple[ParameterSet, AdamState, float]:
    """One Adam step on theta along the first-order meta-gradient; also returns the meta-loss."""
    lr = schedule_lr(config.outer_schedule, iteration)
    meta_loss, grads = meta_objective(theta, episodes, config.inner_lr, config.inner_steps, config.workers)
    if theta.config.clip_norm is not None:
        grads = clip_grads(grads, theta.config.clip_norm)
    adam_state, theta = adam_step(adam_state, theta, grads, lr)
    return theta, adam_state, meta_loss


# ------------------------------------------------------- task augmentation


def augment_tasks(tasks: Sequence[Task], method: str, factors: Sequence[float] = DEFAULT_FACTORS) -> list[Task]:
    """Each task becomes one task per warp factor; the factor-1.0 entry is the original object."""
    if method == "specaug":
        raise ValueError("SpecAug cannot be used for task augmentation: masks are not consistent within a task")
    if method not in WARP_METHODS:
        raise ValueError(f"task augmentation method must be one of {WARP_METHODS}, got {method!r}")
    if 1.0 not in factors:
        raise ValueError("factors must include 1.0")
    out = []
    for task in tasks:
        for f in factors:
            check_factor(f)
            if f == 1.0:
                out.append(task)
            else:
                out.append(Task(task.task_id, [u.warped(method, f) for u in task.pool], (method, float(f))))
    return out


def original_tasks(tasks: Sequence[Task]) -> list[Task]:
    return [t for t in tasks if t.augment_tag is None]


def raw_augment(tasks: Sequence[Task], method: str, factors: Sequence[float] = DEFAULT_FACTORS) -> list[Task]:
    """Merge warped copies of every utterance into its own task's pool (no new tasks)."""
    if method not in WARP_METHODS:
        raise ValueError(f"raw augmentation method must be one of {WARP_METHODS}, got {method!r}")
    return [Task(t.task_id, [u.warped(method, f) for u in t.pool for f in factors]) for t in tasks]


def _group_variants(tasks: Sequence[Task]) -> list[list[Task]]:
    groups: dict[str, list[Task]] = {}
    for t in tasks:
        groups.setdefault(t.task_id, []).append(t)
    return list(groups.values())


# ------------------------------------------------------------------ logs


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    task_losses: list[dict[str, float]] = field(default_factory=list)
    initial_valid_loss: float = math.nan

    def valid_trace(self) -> list[tuple[int, float]]:
        return [(r["iteration"], r["valid_loss"]) for r in self.rows if not math.isnan(r["valid_loss"])]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["iteration", "meta_loss", "valid_loss", "lr"])
            w.writeheader()
            w.writerow({"iteration": 0, "meta_loss": "", "valid_loss": self.initial_valid_loss, "lr": ""})
            for r in self.rows:
                w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()})


def _validation_loss(theta, episode: Episode | None, alpha, steps) -> float:
    if episode is None:
        return math.nan
    phi = inner_adapt(theta, episode.support, alpha, steps)
    return backward(phi, episode.query)[0]


def _draw_episodes(groups, rng, config: MetaConfig, store) -> list[Episode]:
    """Per outer step: choose tasks, pick one warp variant per task, sample an episode from each."""
    idx = range(len(groups))
    if config.tasks_per_step is not None and config.tasks_per_step < len(groups):
        idx = sorted(rng.choice(len(groups), config.tasks_per_step, replace=False).tolist())
    episodes = []
    for i in idx:
        variants = groups[i]
        task = variants[int(rng.integers(len(variants)))] if len(variants) > 1 else variants[0]
        episodes.append(sample_episode(task, rng, config.episode_batch, store))
    return episodes


def _prepare_tasks(tasks: Sequence[Task], config: MetaConfig) -> list[list[Task]]:
    aug = config.augment
    if aug.mode == "raw":
        tasks = raw_augment(original_tasks(tasks) or tasks, aug.method, aug.factors)
    elif aug.mode == "task" and all(t.augment_tag is None for t in tasks):
        tasks = augment_tasks(tasks, aug.method, aug.factors)
    return _group_variants(tasks)


def meta_train(
    tasks: Sequence[Task],
    valid_task: Task | None,
    config: MetaConfig,
    model_config: ModelConfig,
    store: FeatureStore,
    init: ParameterSet | None = None,
    callback: Callable[[int, ParameterSet], None] | None = None,
) -> tuple[ParameterSet, TrainLog]:
    """Run ``config.iterations`` FOMAML outer steps and return the final initialization.

    In task mode each task id may have several warp variants (from
    :func:`augment_tasks`); one is chosen at random per task per step. In raw
    mode the warped utterances are pooled into the original tasks.
    """
    if valid_task is not None and any(t.task_id == valid_task.task_id for t in tasks):
        raise ValueError(f"validation task {valid_task.task_id} is also a training task")
    groups = _prepare_tasks(tasks, config)
    rng = np.random.default_rng(config.seed)
    theta = init_params(model_config, config.seed) if init is None else init
    state = adam_init(theta, lr_base=config.outer_schedule.lr_base)

    valid_ep = None
    if valid_task is not None:
        valid_ep = sample_episode(valid_task, np.random.default_rng([config.seed, 1]), config.episode_batch, store)
    log = TrainLog(initial_valid_loss=_validation_loss(theta, valid_ep, config.inner_lr, config.inner_steps))

    for it in range(config.iterations):
        episodes = _draw_episodes(groups, rng, config, store)
        lr = schedule_lr(config.outer_schedule, it)
        theta, state, meta_loss = outer_step(theta, state, episodes, config, it)
        done = it + 1
        valid = math.nan
        if done % config.valid_every == 0 or done == config.iterations:
            valid = _validation_loss(theta, valid_ep, config.inner_lr, config.inner_steps)
        log.rows.append({"iteration": done, "meta_loss": meta_loss, "valid_loss": valid, "lr": lr})
        if callback is not None:
            callback(it, theta)
    return theta, log


def supervised_pretrain(
    tasks: Sequence[Task],
    config: MetaConfig,
    model_config: ModelConfig,
    store: FeatureStore,
    init: ParameterSet | None = None,
    batching: str = "pooled",
    callback: Callable[[int, ParameterSet], None] | None = None,
) -> tuple[ParameterSet, TrainLog]:
    """Plain cross-entropy training on the union of the task pools.

    ``batching="pooled"`` runs ``config.pretrain_epochs`` shuffled epochs of
    ``config.episode_batch`` utterances. ``batching="episodic"`` draws batches
    exactly like :func:`meta_train` and trains on the summed query losses,
    which makes the two directly comparable step for step.
    """
    theta = init_params(model_config, config.seed) if init is None else init
    state = adam_init(theta, lr_base=config.outer_schedule.lr_base)
    rng = np.random.default_rng(config.seed)
    log = TrainLog()

    if batching == "episodic":
        groups = _prepare_tasks(tasks, config)
        for it in range(config.iterations):
            episodes = _draw_episodes(groups, rng, config, store)
            lr = schedule_lr(config.outer_schedule, it)
            total, grads = _sum_grads([backward(theta, ep.query) for ep in episodes])
            if theta.config.clip_norm is not None:
                grads = clip_grads(grads, theta.config.clip_norm)
            state, theta = adam_step(state, theta, grads, lr)
            log.rows.append({"iteration": it + 1, "meta_loss": total, "valid_loss": math.nan, "lr": lr})
            if callback is not None:
                callback(it, theta)
        return theta, log
    if batching != "pooled":
        raise ValueError(f"unknown batching {batching!r}")

    pool = [u for t in tasks for u in t.pool]
    if not pool:
        raise ValueError("no training data")
    B = config.episode_batch
    step = 0
    for epoch in range(config.pretrain_epochs):
        perm = rng.permutation(len(pool))
        losses = []
        for start in range(0, len(pool), B):
            batch = store.batch([pool[i] for i in perm[start : start + B]])
            loss, grads = backward(theta, batch)
            if theta.config.clip_norm is not None:
                grads = clip_grads(grads, theta.config.clip_norm)
            state, theta = adam_step(state, theta, grads, schedule_lr(config.outer_schedule, step))
            losses.append(loss)
            step += 1
        log.rows.append(
            {"iteration": epoch + 1, "meta_loss": float(np.mean(losses)), "valid_loss": math.nan, "lr": math.nan}
        )
        if callback is not None:
            callback(epoch, theta)
    return theta, log


# ------------------------------------------------------------- adaptation


def _adapt_views(utts, config: AdaptConfig, rng) -> list[UtteranceRecord]:
    if config.augment in WARP_METHODS:
        picks = rng.integers(len(config.factors), size=len(utts))
        return [u.warped(config.augment, config.factors[k]) for u, k in zip(utts, picks)]
    return list(utts)


def fine_tune(
    init: ParameterSet,
    target_train: Sequence[UtteranceRecord],
    target_dev: Sequence[UtteranceRecord],
    adapt_config: AdaptConfig | None,
    store: FeatureStore,
) -> tuple[ParameterSet, dict]:
    """Adam fine-tuning on the target training split; keeps the best-on-dev epoch.

    Returns the selected parameters and a metrics dict with the per-epoch
    trace and the dev metrics of the selected epoch.
    """
    config = AdaptConfig() if adapt_config is None else adapt_config
    if not target_train:
        raise ValueError("empty target training split")
    if not target_dev:
        raise ValueError("empty target dev split")
    rng = np.random.default_rng(config.seed)
    dev_batch = store.batch(target_dev)
    theta = init
    state = adam_init(theta, lr_base=config.schedule.lr_base)
    specaug = config.spec_params if config.augment == "specaug" else None
    best, best_key, best_metrics, best_epoch = None, None, None, -1
    trace = []
    for epoch in range(config.epochs):
        lr = schedule_lr(config.schedule, epoch)
        perm = rng.permutation(len(target_train))
        losses = []
        for start in range(0, len(perm), config.batch_size):
            utts = _adapt_views([target_train[i] for i in perm[start : start + config.batch_size]], config, rng)
            batch = store.batch(utts, specaug=specaug, rng=rng)
            loss, grads = backward(theta, batch)
            if theta.config.clip_norm is not None:
                grads = clip_grads(grads, theta.config.clip_norm)
            state, theta = adam_step(state, theta, grads, lr)
            losses.append(loss)
        dev = evaluate(theta, dev_batch)
        trace.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "dev_fer": dev["fer"], "dev_ce": dev["ce"]})
        key = (dev["fer"], dev["ce"])
        if best_key is None or key < best_key:
            best, best_key, best_metrics, best_epoch = theta, key, dev, epoch
    return best, {"dev": best_metrics, "best_epoch": best_epoch, "trace": trace}
