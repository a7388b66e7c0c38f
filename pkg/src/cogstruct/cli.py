"""Command-line entry point: ``cogstruct <subcommand> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import torch

from .dataset import (
    DatasetError,
    load_interactions,
    load_planted,
    load_qmatrix,
    split_dataset,
    synth_generate,
    write_interactions,
    write_planted,
    write_qmatrix,
)
from .denoiser import CheckpointError, Denoiser, load_checkpoint, save_checkpoint
from .diffusion import make_schedule, sample
from .downstream import StructureCache, train_cd, train_kt
from .pipeline import (
    CognitiveStructureGenerator,
    ConfigError,
    RunConfig,
    SimulatedStructureTransformer,
    all_contexts,
    fill_cache,
    planted_oracle_report,
    run_variant,
)
from .pretrain import pretrain
from .rl import finetune
from .simulate import build_pretrain_corpus
from .structures import CONSTRUCTED, DiscreteStructure

logger = logging.getLogger("cogstruct")

INTERACTIONS = "interactions.csv"
QMATRIX = "qmatrix.csv"
PLANTED = "planted.json"
CHECKPOINT = "model.json"

GREEN, RED = "green", "red"


def export_dot(g: DiscreteStructure, path=None, labels=None) -> str:
    """DOT text with constructed elements green and unconstructed red."""
    L = g.n_concepts
    labels = list(labels) if labels is not None else [f"c{i}" for i in range(L)]
    if len(labels) != L:
        raise ValueError(f"need {L} labels, got {len(labels)}")
    lines = ["graph cognitive_structure {"]
    for i in range(L):
        color = GREEN if g.node_states[i] == CONSTRUCTED else RED
        lines.append(f'  n{i} [label="{labels[i]}", color={color}];')
    for i in range(L):
        for j in range(i + 1, L):
            color = GREEN if g.edge_states[i, j] == CONSTRUCTED else RED
            lines.append(f"  n{i} -- n{j} [color={color}];")
    lines.append("}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "steps", None) is not None:
        cfg.pretrain.max_steps = args.steps
        cfg.rl.n_updates = args.steps
    if getattr(args, "reward_mode", None) is not None:
        cfg.reward.mode = args.reward_mode
    if getattr(args, "n_samples", None) is not None:
        cfg.n_samples = args.n_samples
    cfg.validate()
    return cfg


def write_run_json(out: Path, command: str, cfg: RunConfig, inputs: dict) -> None:
    doc = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {name: file_sha256(p) for name, p in sorted(inputs.items())},
    }
    (out / "run.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _load_data(data_dir):
    d = Path(data_dir)
    qm = load_qmatrix(d / QMATRIX)
    ds = load_interactions(d / INTERACTIONS, qm)
    return ds, {INTERACTIONS: d / INTERACTIONS, QMATRIX: d / QMATRIX}


def _load_model(path, ds) -> Denoiser:
    return load_checkpoint(path, ds.qmatrix.n_concepts, ds.qmatrix.n_questions)


# -- subcommands -------------------------------------------------------------


def cmd_synth(args, cfg, out):
    ds, planted = synth_generate(cfg.synth, cfg.seed)
    write_interactions(ds, out / INTERACTIONS)
    write_qmatrix(ds.qmatrix, out / QMATRIX)
    write_planted(planted, out / PLANTED)
    return {}


def cmd_simulate(args, cfg, out):
    ds, inputs = _load_data(args.data)
    corpus = build_pretrain_corpus(ds, stride=cfg.split.corpus_stride, threshold=cfg.split.threshold)
    corpus.to_jsonl(out / "corpus.jsonl")
    return inputs


def cmd_pretrain(args, cfg, out):
    ds, inputs = _load_data(args.data)
    train = split_dataset(ds, cfg.split.ratios, cfg.seed)[0]
    corpus = build_pretrain_corpus(train, stride=cfg.split.corpus_stride, threshold=cfg.split.threshold)
    pcfg = dataclasses.replace(cfg.pretrain, seed=cfg.seed, out_dir=str(out / "checkpoints"))
    model, log = pretrain(corpus, cfg.diffusion, cfg.denoiser, pcfg, ds.qmatrix.n_questions)
    log.to_csv(out / "train_log.csv")
    save_checkpoint(model, out / CHECKPOINT)
    return inputs


def cmd_finetune(args, cfg, out):
    ds, inputs = _load_data(args.data)
    if args.no_pretrain or args.checkpoint is None:
        model = Denoiser(cfg.denoiser, ds.qmatrix.n_concepts, ds.qmatrix.n_questions, cfg.diffusion.c, cfg.diffusion.T, cfg.seed)
    else:
        model = _load_model(args.checkpoint, ds)
        inputs["checkpoint"] = args.checkpoint
    train = split_dataset(ds, cfg.split.ratios, cfg.seed)[0]
    rlcfg = dataclasses.replace(cfg.rl, seed=cfg.seed)
    model, log = finetune(model, train, cfg.diffusion, rlcfg, cfg.reward)
    log.to_csv(out / "reward_log.csv")
    save_checkpoint(model, out / CHECKPOINT)
    return inputs


def cmd_sample(args, cfg, out):
    ds, inputs = _load_data(args.data)
    model = _load_model(args.checkpoint, ds)
    inputs["checkpoint"] = args.checkpoint
    if args.student not in ds.students:
        raise DatasetError([f"unknown student {args.student!r}"])
    events = ds.students[args.student]
    k = len(events) if args.prefix is None else args.prefix
    if not 1 <= k <= len(events):
        raise DatasetError([f"prefix must lie in [1, {len(events)}]"])
    history = events[:k]
    traj = sample(model.sampler(), history, model.n_concepts, make_schedule(cfg.diffusion), cfg.seed, None, cfg.diffusion.c)
    traj.guidance = [[e.question_id, e.response, e.position] for e in history]
    traj.dump(out / "trajectory.json")
    export_dot(traj.final, out / "structure.dot")
    return inputs


def _structure_source(args, cfg, ds, train):
    if args.checkpoint is None:
        return SimulatedStructureTransformer(cfg.split.threshold, seed=cfg.seed).fit(train), "simulated"
    model = _load_model(args.checkpoint, ds)
    gen = CognitiveStructureGenerator.from_model(
        model, cfg.diffusion, n_samples=cfg.n_samples, use_discrete=cfg.use_discrete, seed=cfg.seed
    )
    return gen, gen.checkpoint_tag()


def _heads(args, cfg, out, tasks):
    ds, inputs = _load_data(args.data)
    if args.checkpoint is not None:
        inputs["checkpoint"] = args.checkpoint
    splits = split_dataset(ds, cfg.split.ratios, cfg.seed)
    source, tag = _structure_source(args, cfg, ds, splits[0])
    cache = fill_cache(source, splits[0], all_contexts(splits), StructureCache(args.cache_dir, tag, cfg.seed))
    if "kt" in tasks:
        _, rep = train_kt(splits, cache, dataclasses.replace(cfg.kt, seed=cfg.seed), ds.qmatrix.n_questions)
        rep.dump(out / "kt_report.json")
    if "cd" in tasks:
        _, rep = train_cd(splits, cache, dataclasses.replace(cfg.cd, seed=cfg.seed), ds.qmatrix.weights)
        rep.dump(out / "cd_report.json")
    planted = Path(args.data) / PLANTED
    if planted.exists():
        planted_oracle_report(load_planted(planted), ds.qmatrix, splits).dump(out / "oracle_report.json")
    return inputs


def cmd_train_kt(args, cfg, out):
    return _heads(args, cfg, out, ("kt",))


def cmd_train_cd(args, cfg, out):
    return _heads(args, cfg, out, ("cd",))


def cmd_eval(args, cfg, out):
    return _heads(args, cfg, out, ("kt", "cd"))


def cmd_export_dot(args, cfg, out):
    rec = json.loads(Path(args.structure).read_text())
    if "final" in rec:
        rec = rec["final"]
    g = DiscreteStructure.from_upper(rec["nodes"], rec["edges_upper"])
    g.validate(cfg.diffusion.c)
    export_dot(g, out / "structure.dot", args.labels.split(",") if args.labels else None)
    return {"structure": args.structure}


def cmd_variant(args, cfg, out):
    ds, inputs = _load_data(args.data)
    if args.no_pretrain and args.id in (2, 5, 6):
        raise ConfigError(f"variant {args.id} requires pretraining; drop --no-pretrain")
    result = run_variant(ds, args.id, cfg, cfg.seed, cache_dir=args.cache_dir)
    result.kt.dump(out / "kt_report.json")
    result.cd.dump(out / "cd_report.json")
    model = getattr(result.transformer, "model_", None)
    if model is not None:
        save_checkpoint(model, out / CHECKPOINT)
    for name in ("pretrain_log_", "reward_log_"):
        log = getattr(result.transformer, name, None)
        if log is not None:
            log.to_csv(out / f"{name.rstrip('_')}.csv")
    return inputs


COMMANDS = {
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "train-kt": cmd_train_kt,
    "train-cd": cmd_train_cd,
    "eval": cmd_eval,
    "export-dot": cmd_export_dot,
    "variant": cmd_variant,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help=f"directory with {INTERACTIONS} and {QMATRIX}")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", help="denoiser checkpoint (model.json)")

    heads = argparse.ArgumentParser(add_help=False)
    heads.add_argument("--cache-dir", help="on-disk structure cache")
    heads.add_argument("--n-samples", type=int, help="chains averaged per structure")

    parser = argparse.ArgumentParser(prog="cogstruct", description="Cognitive structure generation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a planted-structure dataset")
    sub.add_parser("simulate", parents=[common, data], help="rule-based structures for every prefix")
    p = sub.add_parser("pretrain", parents=[common, data], help="pretrain the denoiser")
    p.add_argument("--steps", type=int)
    p = sub.add_parser("finetune", parents=[common, data, ckpt], help="reward fine-tuning")
    p.add_argument("--steps", type=int)
    p.add_argument("--reward-mode", choices=("solo", "generic"))
    p.add_argument("--no-pretrain", action="store_true", help="start from fresh parameters")
    p = sub.add_parser("sample", parents=[common, data, ckpt], help="sample one structure")
    p.add_argument("--student", required=True)
    p.add_argument("--prefix", type=int)
    for name in ("train-kt", "train-cd", "eval"):
        sub.add_parser(name, parents=[common, data, ckpt, heads], help="train prediction heads and report")
    p = sub.add_parser("export-dot", parents=[common], help="write a structure as DOT")
    p.add_argument("--structure", required=True, help="JSON with nodes and edges_upper (or a trajectory)")
    p.add_argument("--labels", help="comma-separated concept names")
    p = sub.add_parser("variant", parents=[common, data, heads], help="run an ablation variant end to end")
    p.add_argument("--id", type=int, required=True, choices=range(1, 7))
    p.add_argument("--steps", type=int)
    p.add_argument("--reward-mode", choices=("solo", "generic"))
    p.add_argument("--no-pretrain", action="store_true")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        cfg = resolve_config(args)
        if args.command in ("variant",) and args.reward_mode is not None:
            logger.info("--reward-mode is ignored by variant; the variant fixes the reward")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](args, cfg, out)
        write_run_json(out, args.command, cfg, inputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
