import json
import shutil

import numpy as np
import pytest
import yaml
from PIL import Image

from poseanon.cli import main
from poseanon.data import load_archive


def write_config(path, **overrides):
    cfg = {
        "seed": 3,
        "out_dir": str(path.parent / "out"),
        "data": {
            "source": "procedural",
            "n_subjects": 3,
            "frames_per_subject": 16,
            "image_size": [16, 16, 3],
            "videos_per_subject": 2,
            "train_fraction": 0.8,
            "split_seed": 1,
        },
        "model": {"d_z": 6, "width": 0.4},
        "training": {
            "batch_size": 8,
            "epochs": 1,
            "critic_steps_per_generator_step": 1,
            "log_every": 2,
            "lambdas_g": [1, 1, 10, 3, 1],
        },
        "evaluation": {"attacker": {"epochs": 1}},
        "morph": {"steps": 3},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path.write_text(yaml.safe_dump(cfg))
    return cfg


def test_synth_data_roundtrip_and_force(tmp_path, capsys):
    cfg_path = tmp_path / "run.yaml"
    write_config(cfg_path)
    out = tmp_path / "out"
    assert main(["synth-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    archive = out / "dataset.zip"
    assert archive.exists()
    assert (out / "summary.txt").exists()
    assert (out / "config.yaml").exists()

    loaded = load_archive(archive)
    from poseanon.cli import load_run_config, _procedural_config
    from poseanon.data import generate_procedural
    regenerated = generate_procedural(_procedural_config(load_run_config(cfg_path)))
    assert np.array_equal(loaded.images, regenerated.images)

    # refuses to overwrite without --force
    assert main(["synth-data", "--config", str(cfg_path), "--out", str(out)]) == 1
    assert main(["synth-data", "--config", str(cfg_path), "--out", str(out), "--force"]) == 0


def test_train_and_artifacts(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    write_config(cfg_path)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "checkpoints/ckpt_final.zip").exists()
    assert (out / "train_log.jsonl").exists()
    assert (out / "summary.txt").exists()
    records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert any(r.get("event") == "loss" for r in records)
    assert all("wall_time" not in r for r in records)  # determinism mode default


def test_train_zero_epochs_emits_initialization(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    write_config(cfg_path, training={"epochs": 0, "batch_size": 8,
                                     "critic_steps_per_generator_step": 1})
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "checkpoints/ckpt_final.zip").exists()


def test_train_invalid_config_exits_1(tmp_path, capsys):
    cfg_path = tmp_path / "run.yaml"
    write_config(cfg_path, training={"batch_size": 1})
    assert main(["train", "--config", str(cfg_path)]) == 1
    assert "batch_size" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 1


def test_train_runtime_failure_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "run.yaml"
    write_config(cfg_path, training={"batch_size": 8, "epochs": 2,
                                     "critic_steps_per_generator_step": 1,
                                     "adam": {"learning_rate": 1e25}})
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "out")]) == 2


def test_train_resume_bit_exact(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    write_config(cfg_path, training={"batch_size": 8, "epochs": 2,
                                     "critic_steps_per_generator_step": 1,
                                     "checkpoint_every": 4})
    out_a = tmp_path / "a"
    assert main(["train", "--config", str(cfg_path), "--out", str(out_a)]) == 0
    final = (out_a / "checkpoints/ckpt_final.zip").read_bytes()

    # simulate an interrupted run: keep only the first scheduled checkpoint
    out_b = tmp_path / "b"
    (out_b / "checkpoints").mkdir(parents=True)
    first_sched = sorted((out_a / "checkpoints").glob("ckpt_0*.zip"))[0]
    shutil.copy(first_sched, out_b / "checkpoints" / first_sched.name)
    assert main(["train", "--config", str(cfg_path), "--out", str(out_b), "--resume"]) == 0
    assert (out_b / "checkpoints/ckpt_final.zip").read_bytes() == final


def test_resume_without_checkpoint_exits_1(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    write_config(cfg_path)
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o"),
                 "--resume"]) == 1


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_run")
    cfg_path = base / "run.yaml"
    write_config(cfg_path)
    out = base / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out / "checkpoints/ckpt_final.zip", base


def test_evaluate_full_table(trained_run, capsys):
    cfg_path, ckpt, base = trained_run
    out = base / "eval"
    assert main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--out", str(out)]) == 0
    table = (out / "table.txt").read_text().splitlines()
    assert len(table) == 5
    assert table[1].startswith("Privacy Unconstrained")
    assert table[4].startswith("Attack Scenario III")
    reports = (out / "reports.jsonl").read_text().splitlines()
    assert len(reports) == 4


def test_evaluate_reproducible(trained_run):
    cfg_path, ckpt, base = trained_run
    out1, out2 = base / "eval_r1", base / "eval_r2"
    assert main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--out", str(out1), "--scenarios", "attack_i"]) == 0
    assert main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--out", str(out2), "--scenarios", "attack_i"]) == 0
    assert (out1 / "reports.jsonl").read_bytes() == (out2 / "reports.jsonl").read_bytes()


def test_evaluate_scenario_subset(trained_run):
    cfg_path, ckpt, base = trained_run
    out = base / "eval_sub"
    assert main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--out", str(out), "--scenarios", "unconstrained"]) == 0
    assert len((out / "table.txt").read_text().splitlines()) == 2


def test_evaluate_missing_checkpoint(trained_run):
    cfg_path, _, base = trained_run
    assert main(["evaluate", "--config", str(cfg_path), "--checkpoint",
                 str(base / "nope.zip"), "--out", str(base / "e")]) == 1
    assert main(["evaluate", "--config", str(cfg_path), "--out", str(base / "e2")]) == 1


def test_morph_pose_strip(trained_run):
    cfg_path, ckpt, base = trained_run
    out = base / "morph"
    assert main(["morph", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--out", str(out), "--mode", "pose", "--steps", "2",
                 "--frame-a", "0"]) == 0
    with Image.open(out / "morph_pose.png") as img:
        assert img.size == (2 * 16, 16)  # exactly two frames
    assert (out / "morph_pose_pose.jsonl").exists()


def test_morph_replace_all_grid(trained_run):
    cfg_path, ckpt, base = trained_run
    out = base / "morph_all"
    assert main(["morph", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--out", str(out), "--mode", "replace-all", "--target-identity", "2"]) == 0
    with Image.open(out / "replace_all.png") as img:
        assert img.size == (3 * 16, 2 * 16)  # one column per identity, two rows


def test_morph_missing_checkpoint(trained_run):
    cfg_path, _, base = trained_run
    assert main(["morph", "--config", str(cfg_path), "--checkpoint",
                 str(base / "gone.zip"), "--out", str(base / "m")]) == 1


def test_seed_override_changes_outputs(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    write_config(cfg_path)
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["synth-data", "--config", str(cfg_path), "--out", str(out1)]) == 0
    assert main(["synth-data", "--config", str(cfg_path), "--out", str(out2),
                 "--seed", "99"]) == 0
    a = load_archive(out1 / "dataset.zip")
    b = load_archive(out2 / "dataset.zip")
    assert not np.array_equal(a.poses, b.poses)
