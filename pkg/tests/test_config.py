import pytest

from metainit.config import (
    ConfigError,
    RunConfig,
    adapt_steps_per_epoch,
    desk_config,
    dump_config,
    load_config,
    parse_config,
)
from metainit.optim import ADAPT_SCHEDULE, MultiStepSchedule, schedule_sum
from metainit.tasks import SplitSpec, SynthSpec


def test_empty_config_is_desk_defaults():
    assert parse_config("") == desk_config()


def test_sections_map_to_dataclasses():
    cfg = parse_config(
        """
[model]
layers = 2
hidden = 8
bidirectional = false   # inline comment
cell = rnn
[optim]
lr_base = 2e-4
milestones = [2000]
gamma = 0.15
[meta]
iterations = 6800
inner_lr = 2e-4
[augment]
method = vtlp
mode = task
factors = [0.9, 1.0, 1.1]
[adapt]
lr_base = 1e-5
milestones = [2]
gamma = 0.1
augment = specaug
time_mask_width_max = 4
[data]
manifest = /data/m.jsonl
train = 0.6
dev = 0.2
test = 0.2
split_seed = 3
[plan]
conditions = ['Baseline', 'MI']
seeds = [0, 1]
"""
    )
    assert cfg.model.layers == 2 and cfg.model.hidden == 8 and cfg.model.bidirectional is False
    assert cfg.model.cell == "rnn"
    assert cfg.meta.outer_schedule == MultiStepSchedule(2e-4, (2000,), 0.15)
    assert cfg.meta.iterations == 6800
    assert cfg.meta.augment.method == "vtlp" and cfg.meta.augment.mode == "task"
    assert cfg.adapt.schedule == MultiStepSchedule(1e-5, (2,), 0.1)
    assert cfg.adapt.augment == "specaug" and cfg.adapt.spec_params.time_mask_width_max == 4
    assert cfg.data.manifest == "/data/m.jsonl" and cfg.data.split.seed == 3 and cfg.data.split.dev == 0.2
    assert cfg.plan.conditions == ("Baseline", "MI") and cfg.plan.seeds == (0, 1)


@pytest.mark.parametrize(
    "text",
    [
        "[model]\nwidth = 3\n",
        "[bogus]\nx = 1\n",
        "[optim]\nlr = 1\n",
        "[augment]\nmethod = specaug\nmode = task\n",
        "[model]\nlayers\n",
        "[optim]\nlr_base = -1\n",
    ],
)
def test_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_round_trip():
    cfg = parse_config("[meta]\niterations = 7\n[corpus]\nspeaker_jitter = 0.2\n[data]\nmanifest = x.jsonl\n")
    assert parse_config(dump_config(cfg)) == cfg
    base = RunConfig()
    assert parse_config(dump_config(base), base=base) == base


def test_load_config_file(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[meta]\niterations = 3\n")
    assert load_config(p).meta.iterations == 3
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_desk_adapt_schedule_tracks_corpus_size():
    # 24 speakers -> 17 train speakers x 10 utterances -> 11 batches of 16
    assert adapt_steps_per_epoch(SynthSpec(), SplitSpec(), 16) == 11
    assert adapt_steps_per_epoch(SynthSpec(speakers_per_group=12), SplitSpec(), 16) == 5
    sched = desk_config().adapt.schedule
    assert schedule_sum(sched, 15, 11) == pytest.approx(schedule_sum(ADAPT_SCHEDULE, 15, 300), rel=1e-9)
