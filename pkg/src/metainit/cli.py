"""Command-line entry point: ``metainit <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentSpec, apply_augment, speed_perturb
from .config import ConfigError, RunConfig, desk_config, dump_config, load_config
from .features import logmel, stack_frames, write_features
from .harness import (
    AblationPlan,
    ExperimentPlan,
    build_world,
    emit_plot_data,
    run_ablation,
    run_matrix,
)
from .meta import fine_tune, meta_train, supervised_pretrain
from .metrics import evaluate
from .model import load_checkpoint, save_checkpoint
from .tasks import generate_corpus, load_audio, load_manifest, write_manifest, write_wav

log = logging.getLogger("metainit")


def _config(path: str | None) -> RunConfig:
    return desk_config() if path is None else load_config(path)


def _records(manifest: str):
    return load_audio(load_manifest(manifest), Path(manifest).parent)


def _safe(utt_id: str) -> str:
    return utt_id.replace("/", "_")


# ------------------------------------------------------------- subcommands


def cmd_featurize(args) -> int:
    cfg = _config(args.config).features
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = _records(args.manifest)
    for r in records:
        feats = stack_frames(logmel(r.waveform, cfg, args.warp), args.stack)
        write_features(feats.astype(np.float32), out / f"{_safe(r.utt_id)}.mifb")
    log.info("wrote %d feature files to %s", len(records), out)
    return 0


def cmd_augment(args) -> int:
    cfg = _config(args.config).features
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    spec = AugmentSpec(args.method, args.factor if args.method != "specaug" else None)
    new = []
    for r in _records(args.input):
        utt = f"{r.utt_id}~{args.method}{args.factor:g}" if args.method != "specaug" else f"{r.utt_id}~specaug"
        if args.method == "sp":
            name = f"{_safe(utt)}.wav"
            write_wav(speed_perturb(r.waveform, args.factor), out / name)
        else:
            data = r.waveform if args.method == "vtlp" else logmel(r.waveform, cfg)
            feats = apply_augment(data, spec, rng, cfg)
            if args.method == "specaug":
                feats = stack_frames(feats, cfg.n_append)
            name = f"{_safe(utt)}.mifb"
            write_features(feats.astype(np.float32), out / name)
        new.append(dataclasses.replace(r, utt_id=utt, source=name, waveform=None))
    write_manifest(new, out / "manifest.jsonl")
    log.info("augmented %d utterances (%s) into %s", len(new), args.method, out)
    return 0


def cmd_synth_tasks(args) -> int:
    cfg = _config(args.spec)
    out = Path(args.out)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    records = generate_corpus(cfg.corpus)
    written = []
    for r in records:
        name = f"wav/{_safe(r.utt_id)}.wav"
        write_wav(r.waveform, out / name)
        written.append(dataclasses.replace(r, source=name, waveform=None))
    write_manifest(written, out / "manifest.jsonl")
    log.info("synthesized %d utterances into %s", len(written), out)
    return 0


def _write_log(train_log, ckpt: Path) -> Path:
    path = ckpt.with_suffix(ckpt.suffix + ".log.csv")
    train_log.to_csv(path)
    return path


def cmd_meta_train(args) -> int:
    cfg = _config(args.config)
    world = build_world(cfg)
    theta, train_log = meta_train(world.train_tasks, world.valid_task, cfg.meta, cfg.model, world.store)
    out = Path(args.out)
    save_checkpoint(theta, out)
    log.info("checkpoint %s, log %s", out, _write_log(train_log, out))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    world = build_world(cfg)
    theta, train_log = supervised_pretrain(world.train_tasks, cfg.meta, cfg.model, world.store)
    out = Path(args.out)
    save_checkpoint(theta, out)
    log.info("checkpoint %s, log %s", out, _write_log(train_log, out))
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args.config)
    world = build_world(cfg)
    init = load_checkpoint(args.init)
    if init.config != cfg.model:
        log.warning("checkpoint model %s differs from config model; using the checkpoint's", init.config)
    tuned, metrics = fine_tune(init, world.target.train, world.target.dev, cfg.adapt, world.store)
    test = evaluate(tuned, world.store.batch(world.target.test, allow_test=True))
    result = {"dev": metrics["dev"], "test": test, "best_epoch": metrics["best_epoch"]}
    if args.out:
        save_checkpoint(tuned, args.out)
    print(json.dumps(result, indent=2))
    return 0


def cmd_run_matrix(args) -> int:
    cfg = _config(args.plan)
    plan = ExperimentPlan.from_config(cfg)
    report = run_matrix(plan)
    emit_plot_data(report, args.out)
    print(report.summary())
    return 1 if report.failed else 0


def cmd_run_ablation(args) -> int:
    cfg = _config(args.plan)
    plan = AblationPlan(
        order=args.order,
        seeds=cfg.plan.ablation_seeds,
        method=args.method,
        iterations=cfg.plan.ablation_iterations,
        config=cfg,
    )
    points = run_ablation(plan)
    emit_plot_data(points, args.out)
    for p in points:
        print(f"{p.order} k={p.k} seed={p.seed} dev={p.dev:.2f} test={p.test:.2f} {p.status}")
    return 1 if any(p.status != "ok" for p in points) else 0


def cmd_dump_config(args) -> int:
    sys.stdout.write(dump_config(_config(args.config)))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metainit", description="Meta-initialization with age-based task augmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("featurize", help="log-mel features for every manifest entry (MIFB files)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--warp", type=float, default=1.0, help="VTLP filterbank warp factor")
    s.add_argument("--stack", type=int, default=1, help="number of following frames to append")
    s.add_argument("--config")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("augment", help="write augmented copies of a manifest")
    s.add_argument("--method", choices=("sp", "vtlp", "specaug"), required=True)
    s.add_argument("--factor", type=float, default=1.0, help="warp factor (ignored by specaug)")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("synth-tasks", help="synthesize the age-group corpus (WAV + manifest)")
    s.add_argument("--spec", help="config file; its [corpus] section is used")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_tasks)

    for name, func, help_ in (
        ("meta-train", cmd_meta_train, "first-order MAML meta-initialization"),
        ("pretrain", cmd_pretrain, "supervised multi-task pre-training"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config")
        s.add_argument("--out", default=f"{name.replace('-', '_')}.mick")
        s.set_defaults(func=func)

    s = sub.add_parser("adapt", help="fine-tune a checkpoint on the target task and report metrics")
    s.add_argument("--init", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("run-matrix", help="every condition x seed; CSV report")
    s.add_argument("--plan")
    s.add_argument("--out", default="report.csv")
    s.set_defaults(func=cmd_run_matrix)

    s = sub.add_parser("run-ablation", help="incremental task augmentation curve")
    s.add_argument("--order", choices=("forward", "reverse"), required=True)
    s.add_argument("--plan")
    s.add_argument("--method", choices=("sp", "vtlp"), default="sp")
    s.add_argument("--out", default="curve.csv")
    s.set_defaults(func=cmd_run_ablation)

    s = sub.add_parser("dump-config", help="print the effective configuration")
    s.add_argument("--config")
    s.set_defaults(func=cmd_dump_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"metainit {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
