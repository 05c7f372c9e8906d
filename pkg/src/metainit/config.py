"""INI-style run configuration.

Sections map onto the library dataclasses::

    [model]     ModelConfig fields
    [features]  FeatureConfig fields
    [optim]     outer-loop schedule: lr_base, milestones = [..], gamma
    [meta]      MetaConfig scalars (inner_lr, iterations, episode_batch, ...)
    [augment]   method, factors, mode
    [adapt]     epochs, batch_size, lr_base, milestones, gamma, augment, factors, seed
    [data]      manifest, audio_root, target_group, valid_group, split ratios
    [corpus]    SynthSpec fields, used when no manifest is given
    [plan]      conditions, seeds, ablation_seeds, ablation_iterations

Values are Python literals (``[2000]``, ``1e-3``, ``true``); anything that
does not parse as a literal is kept as a string. Missing keys keep their
defaults, unknown keys are an error.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import SpecAugParams
from .features import FeatureConfig
from .meta import AdaptConfig, AugmentConfig, MetaConfig
from .model import ModelConfig
from .optim import ADAPT_SCHEDULE, META_SCHEDULE, MultiStepSchedule, matched_schedule
from .tasks import SplitSpec, SynthSpec, split_counts


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    # JSONL manifest; None means "synthesize from [corpus]"
    manifest: str | None = None
    audio_root: str | None = None
    target_group: str = "K"
    valid_group: str = "G1"
    split: SplitSpec = SplitSpec()


@dataclass(frozen=True)
class PlanSettings:
    conditions: tuple[str, ...] | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ablation_seeds: tuple[int, ...] = (0,)
    # None: same iteration count as [meta]
    ablation_iterations: int | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    features: FeatureConfig = FeatureConfig()
    meta: MetaConfig = MetaConfig()
    adapt: AdaptConfig = AdaptConfig()
    data: DataConfig = DataConfig()
    corpus: SynthSpec = SynthSpec()
    plan: PlanSettings = field(default_factory=PlanSettings)


# Reference run lengths the desk schedules are matched against. The
# adaptation figure assumes ~4 h of target speech in ~3 s utterances and
# batches of 16, i.e. ~300 optimizer steps per epoch.
REFERENCE_META_ITERATIONS = 6800
REFERENCE_ADAPT_STEPS_PER_EPOCH = 300
DESK_META_ITERATIONS = 100


def adapt_steps_per_epoch(corpus: SynthSpec, split: SplitSpec, batch_size: int) -> int:
    """Optimizer steps in one adaptation epoch over the synthetic target task."""
    n_train = split_counts(corpus.speakers_per_group, split)[0] * corpus.utterances_per_speaker
    return math.ceil(n_train / batch_size)


def desk_config() -> RunConfig:
    """Defaults sized for a single workstation.

    A 1x16 BLSTM and 100 outer steps replace the large model and the long
    meta-training run. Both learning-rate schedules keep their shape
    (milestone positions, decay ratios, 15 adaptation epochs) and are
    rescaled by :func:`matched_schedule` so that the summed step size over
    the shorter run equals that of the reference run.
    """
    adapt = AdaptConfig()
    steps = adapt_steps_per_epoch(SynthSpec(), SplitSpec(), adapt.batch_size)
    return RunConfig(
        model=ModelConfig(layers=1, hidden=16),
        meta=MetaConfig(
            iterations=DESK_META_ITERATIONS,
            outer_schedule=matched_schedule(META_SCHEDULE, REFERENCE_META_ITERATIONS, DESK_META_ITERATIONS),
            valid_every=25,
        ),
        adapt=dataclasses.replace(
            adapt,
            schedule=matched_schedule(ADAPT_SCHEDULE, adapt.epochs, adapt.epochs, REFERENCE_ADAPT_STEPS_PER_EPOCH, steps),
        ),
    )


def _literal(raw: str) -> Any:
    text = raw.strip()
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _update(obj, values: dict[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        return dataclasses.replace(obj, **{k: _tuplify(v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _pop_schedule(values: dict, base: MultiStepSchedule, section: str) -> MultiStepSchedule:
    keys = {k: values.pop(k) for k in ("lr_base", "milestones", "gamma") if k in values}
    return _update(base, keys, section) if keys else base


SECTIONS = ("model", "features", "optim", "meta", "augment", "adapt", "data", "corpus", "plan")


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    extra = sorted(set(parser.sections()) - set(SECTIONS))
    if extra:
        raise ConfigError(f"{source}: unknown sections {extra}")
    cfg = desk_config() if base is None else base
    sec = {name: {k: _literal(v) for k, v in parser[name].items()} if parser.has_section(name) else {} for name in SECTIONS}

    model = _update(cfg.model, sec["model"], "model")
    features = _update(cfg.features, sec["features"], "features")

    outer = _update(cfg.meta.outer_schedule, sec["optim"], "optim")
    augment = _update(cfg.meta.augment, sec["augment"], "augment")
    meta = _update(cfg.meta, {**sec["meta"], "outer_schedule": outer, "augment": augment}, "meta")

    adapt_vals = dict(sec["adapt"])
    schedule = _pop_schedule(adapt_vals, cfg.adapt.schedule, "adapt")
    spec_keys = {f.name for f in dataclasses.fields(SpecAugParams)}
    spec_vals = {k: adapt_vals.pop(k) for k in list(adapt_vals) if k in spec_keys}
    spec_params = _update(cfg.adapt.spec_params, spec_vals, "adapt")
    adapt = _update(cfg.adapt, {**adapt_vals, "schedule": schedule, "spec_params": spec_params}, "adapt")

    data_vals = dict(sec["data"])
    split_vals = {k: data_vals.pop(k) for k in ("train", "dev", "test") if k in data_vals}
    if "split_seed" in data_vals:
        split_vals["seed"] = data_vals.pop("split_seed")
    split = _update(cfg.data.split, split_vals, "data")
    data = _update(cfg.data, {**data_vals, "split": split}, "data")

    corpus = _update(cfg.corpus, sec["corpus"], "corpus")
    plan = _update(cfg.plan, sec["plan"], "plan")
    return RunConfig(model, features, meta, adapt, data, corpus, plan)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base, source=str(path))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return repr(list(_fmt_inner(v) for v in value))
    return repr(value) if isinstance(value, str) else str(value)


def _fmt_inner(value):
    return list(_fmt_inner(v) for v in value) if isinstance(value, tuple) else value


def dump_config(cfg: RunConfig) -> str:
    """Serialize to the INI form accepted by :func:`parse_config`."""

    def flat(obj, skip=()):
        return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name not in skip}

    out = configparser.ConfigParser(interpolation=None)
    out["model"] = {k: _fmt(v) for k, v in flat(cfg.model).items()}
    out["features"] = {k: _fmt(v) for k, v in flat(cfg.features).items()}
    out["optim"] = {k: _fmt(v) for k, v in flat(cfg.meta.outer_schedule).items()}
    out["meta"] = {k: _fmt(v) for k, v in flat(cfg.meta, ("outer_schedule", "augment")).items()}
    out["augment"] = {k: _fmt(v) for k, v in flat(cfg.meta.augment).items()}
    adapt = flat(cfg.adapt, ("schedule", "spec_params"))
    adapt.update(flat(cfg.adapt.schedule))
    adapt.update(flat(cfg.adapt.spec_params))
    out["adapt"] = {k: _fmt(v) for k, v in adapt.items()}
    data = flat(cfg.data, ("split",))
    split = flat(cfg.data.split)
    data.update(train=split["train"], dev=split["dev"], test=split["test"], split_seed=split["seed"])
    out["data"] = {k: _fmt(v) for k, v in data.items()}
    out["corpus"] = {k: _fmt(v) for k, v in flat(cfg.corpus).items()}
    out["plan"] = {k: _fmt(v) for k, v in flat(cfg.plan).items()}
    buf = io.StringIO()
    out.write(buf)
    return buf.getvalue()
