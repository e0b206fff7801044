"""Command-line entry point: synth-data, train, evaluate, and morph
subcommands, all driven by one YAML config file and one global seed.

Exit codes: 0 success, 1 configuration error, 2 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from . import evaluation as eval_mod
from . import morphing as morph_mod
from . import training as train_mod
from .errors import CheckpointError, ConfigError, DataError
from .model import ModelConfig, default_model_config
from .rng import stream_seed


def load_run_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    cfg.setdefault("seed", 0)
    cfg.setdefault("out_dir", "runs/out")
    for section in ("data", "model", "training", "evaluation", "morph"):
        cfg.setdefault(section, {})
    source = cfg["data"].get("source", "procedural")
    if source not in ("procedural", "upna"):
        raise ConfigError(f"data.source must be 'procedural' or 'upna', got {source!r}")
    return cfg


def _archive_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


def _procedural_config(cfg: dict) -> data_mod.ProceduralConfig:
    d = cfg["data"]
    return data_mod.ProceduralConfig(
        n_subjects=d.get("n_subjects", 5),
        frames_per_subject=d.get("frames_per_subject", 400),
        image_size=tuple(d.get("image_size", (32, 32, 3))),
        seed=d.get("seed", cfg["seed"]),
        videos_per_subject=d.get("videos_per_subject", 4),
        pose_range_deg=d.get("pose_range_deg", 60.0),
    )


def load_dataset(cfg: dict) -> data_mod.Dataset:
    d = cfg["data"]
    if d.get("source", "procedural") == "upna":
        if "root" not in d:
            raise ConfigError("data.root is required for the upna source")
        size = tuple(d.get("image_size", (64, 64, 3)))
        return data_mod.load_upna(d["root"], image_size=size[:2],
                                  manifest_name=d.get("manifest", "manifest.yaml"))
    archive = d.get("archive")
    if archive and Path(archive).exists():
        return data_mod.load_archive(archive)
    return data_mod.generate_procedural(_procedural_config(cfg))


def make_split(cfg: dict, dataset: data_mod.Dataset) -> data_mod.SplitPair:
    d = cfg["data"]
    fraction = d.get("train_fraction", 0.8)
    split_seed = d.get("split_seed", stream_seed(cfg["seed"], "split"))
    return data_mod.split_per_video(dataset, fraction, split_seed)


def build_model_config(cfg: dict, dataset: data_mod.Dataset) -> ModelConfig:
    m = cfg["model"]
    if "blocks" in m:  # explicit per-network block specs
        return ModelConfig.from_dict({**m["blocks"],
                                      "image_size": list(dataset.image_size),
                                      "n_subjects": dataset.n_subjects})
    return default_model_config(dataset.image_size, dataset.n_subjects,
                                d_z=m.get("d_z", 64), width=m.get("width", 1.0),
                                head_mode=m.get("head_mode", "flatten"),
                                shared_trunk=m.get("shared_trunk", False))


def build_train_config(cfg: dict) -> train_mod.TrainConfig:
    t = dict(cfg["training"])
    t.setdefault("seed", cfg["seed"])
    return train_mod.TrainConfig.from_dict(t)


def build_attacker_config(cfg: dict) -> eval_mod.AttackerConfig:
    e = cfg["evaluation"].get("attacker", {})
    return eval_mod.AttackerConfig(**e)


def cmd_synth_data(cfg: dict, out_dir: Path, force: bool) -> int:
    if cfg["data"].get("source", "procedural") != "procedural":
        raise ConfigError("synth-data only applies to the procedural source")
    dataset = data_mod.generate_procedural(_procedural_config(cfg))
    archive = Path(cfg["data"].get("archive") or out_dir / "dataset.zip")
    data_mod.save_archive(dataset, archive, force=force)
    summary = data_mod.dataset_summary(dataset)
    (out_dir / "summary.txt").write_text(summary + "\n")
    _archive_config(cfg, out_dir)
    print(f"wrote {archive}")
    print(summary)
    return 0


def cmd_train(cfg: dict, out_dir: Path, resume: bool) -> int:
    dataset = load_dataset(cfg)
    split = make_split(cfg, dataset)
    model_config = build_model_config(cfg, dataset)
    train_config = build_train_config(cfg)
    ckpt_dir = out_dir / "checkpoints"
    resume_from = None
    if resume:
        candidates = sorted(ckpt_dir.glob("ckpt_*.zip"))
        if not candidates:
            raise ConfigError(f"--resume given but no checkpoint under {ckpt_dir}")
        final = ckpt_dir / "ckpt_final.zip"
        resume_from = final if final.exists() else candidates[-1]

    _archive_config(cfg, out_dir)
    state, records = train_mod.train(train_config, split.train, model_config,
                                     checkpoint_dir=ckpt_dir, resume_from=resume_from)
    include_wall = not cfg.get("determinism", True)
    train_mod.write_log(records, out_dir / "train_log.jsonl", include_wall_time=include_wall)
    last_loss = next((r for r in reversed(records) if r.get("event") == "loss"), None)
    summary = {"g_steps": state.g_step, "d_steps": state.d_step,
               "train_samples": len(split.train), "test_samples": len(split.test),
               "final": last_loss}
    (out_dir / "summary.txt").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"trained {state.g_step} generator steps / {state.d_step} critic steps; "
          f"checkpoint at {ckpt_dir / 'ckpt_final.zip'}")
    return 0


def _parse_scenarios(arg: str | None, cfg: dict) -> list[eval_mod.ScenarioId]:
    if arg:
        names = [s.strip() for s in arg.split(",") if s.strip()]
    else:
        names = cfg["evaluation"].get("scenarios",
                                      [s.value for s in eval_mod.SCENARIO_ORDER])
    try:
        wanted = {eval_mod.ScenarioId(name) for name in names}
    except ValueError as exc:
        raise ConfigError(f"unknown scenario in {names}: {exc}") from exc
    return [s for s in eval_mod.SCENARIO_ORDER if s in wanted]


def cmd_evaluate(cfg: dict, out_dir: Path, checkpoint: str, scenarios_arg: str | None) -> int:
    if not checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    state = train_mod.load_checkpoint(checkpoint)
    dataset = load_dataset(cfg)
    split = make_split(cfg, dataset)
    attacker_config = build_attacker_config(cfg)
    scenarios = _parse_scenarios(scenarios_arg, cfg)
    seed = cfg["evaluation"].get("seed", stream_seed(cfg["seed"], "evaluation"))

    reports = [eval_mod.run_scenario(s, state.bundle, split, attacker_config, seed)
               for s in scenarios]
    _archive_config(cfg, out_dir)
    eval_mod.save_reports(reports, out_dir / "reports.jsonl")
    table = eval_mod.render_table(reports)
    (out_dir / "table.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_morph(cfg: dict, out_dir: Path, checkpoint: str, args) -> int:
    if not checkpoint:
        raise ConfigError("morph needs --checkpoint")
    state = train_mod.load_checkpoint(checkpoint)
    bundle = state.bundle
    dataset = load_dataset(cfg)
    split = make_split(cfg, dataset)
    test = split.test
    steps = args.steps or cfg["morph"].get("steps", 9)
    _archive_config(cfg, out_dir)

    def sample(index):
        if not 0 <= index < len(test):
            raise ConfigError(f"frame index {index} outside test split of {len(test)}")
        return test[index]

    if args.mode == "replace-all":
        # One example input per identity (top row) and its synthesis for a
        # single shared target identity (bottom row).
        target = args.target_identity or 1
        frames_in, frames_out = [], []
        for identity in range(1, dataset.n_subjects + 1):
            idx = int(np.flatnonzero(test.identities == identity)[0])
            frames_in.append(test.images[idx])
            frames_out.append(morph_mod.identity_replace(bundle, test.images[idx], target))
        out_path = out_dir / "replace_all.png"
        morph_mod.write_image_strip(frames_in + frames_out, out_path, rows=2)
        print(f"wrote {out_path}")
        return 0

    sample_a = sample(args.frame_a)
    if args.mode == "pose":
        candidates = np.flatnonzero(test.identities == sample_a.identity)
        frame_b = args.frame_b if args.frame_b is not None else int(candidates[-1])
        sample_b = sample(frame_b)
        request = morph_mod.MorphRequest(
            mode=morph_mod.MorphMode.POSE_MORPH, steps=steps,
            image_a=sample_a.image, image_b=sample_b.image,
            identity_a=sample_a.identity, identity_b=sample_b.identity)
    elif args.mode == "identity":
        request = morph_mod.MorphRequest(
            mode=morph_mod.MorphMode.IDENTITY_MORPH, steps=steps,
            image_a=sample_a.image, identity_a=sample_a.identity,
            identity_b=args.target_identity or dataset.n_subjects)
    elif args.mode == "replace":
        request = morph_mod.MorphRequest(
            mode=morph_mod.MorphMode.IDENTITY_REPLACE, steps=steps,
            image_a=sample_a.image, target_identity=args.target_identity or 1)
    else:
        raise ConfigError(f"unknown morph mode {args.mode!r}")

    frames = morph_mod.morph_sequence(bundle, request)
    out_path = out_dir / f"morph_{args.mode}.png"
    morph_mod.write_image_strip(frames, out_path)
    poses = morph_mod.pose_track(bundle, frames)
    morph_mod.write_pose_annotations(poses, out_dir / f"morph_{args.mode}_pose.jsonl")
    print(f"wrote {out_path} ({len(frames)} frames)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseanon",
        description="Pose-preserving identity replacement: data synthesis, training, "
                    "privacy-attack evaluation, and morphing.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")

    p = sub.add_parser("synth-data", help="write the procedural dataset archive")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing archive")

    p = sub.add_parser("train", help="train the generator/discriminator")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    p = sub.add_parser("evaluate", help="run privacy-attack scenarios")
    common(p)
    p.add_argument("--checkpoint", required=False, help="trained checkpoint path")
    p.add_argument("--scenarios", default=None,
                   help="comma list: unconstrained,attack_i,attack_ii,attack_iii")

    p = sub.add_parser("morph", help="identity replacement and morphing grids")
    common(p)
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--mode", default="pose", choices=("pose", "identity", "replace", "replace-all"))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--frame-a", type=int, default=0, help="test-split index of the initial endpoint")
    p.add_argument("--frame-b", type=int, default=None, help="test-split index of the final endpoint")
    p.add_argument("--target-identity", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out_dir = Path(args.out or cfg["out_dir"])
        if args.command == "synth-data":
            return cmd_synth_data(cfg, out_dir, args.force)
        if args.command == "train":
            return cmd_train(cfg, out_dir, args.resume)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out_dir, args.checkpoint, args.scenarios)
        if args.command == "morph":
            return cmd_morph(cfg, out_dir, args.checkpoint, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime/numeric failures
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
