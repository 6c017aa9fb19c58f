import json
import os

import numpy as np
import pytest

from poisonlab import cli, config, datapipe


def _tiny_raw(**over):
    raw = {
        "name": "tiny",
        "data": {"classes": 3, "per_class": 12, "val_per_class": 6,
                 "image_size": 10, "variant_count": 6, "known_count": 2},
        "train": {"epochs": 2, "batch": 8, "drop_epochs": [],
                  "augment": {"enabled": False}},
        "craft": {"steps": 4, "retrain_count": 1, "budget": 0.06,
                  "augment": {"enabled": False}},
        "repeats": 1,
        "seed": 5,
    }
    raw.update(over)
    return raw


def _write_cfg(tmp_path, **over):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(_tiny_raw(**over)))
    return str(path)


def test_parser_knows_every_verb():
    parser = cli.build_parser()
    for verb, extra in [
        ("run", ["--config", "x.json"]),
        ("heatmap", ["--config", "x.json", "--bins", "3"]),
        ("ablate", ["--config", "x.json", "--axis", "budget",
                    "--values", "0.01"]),
        ("proplab", []),
        ("export-poisons", ["--config", "x.json"]),
        ("apply-defense", ["--config", "x.json", "--input", "a", "--output", "b"]),
    ]:
        args = parser.parse_args([verb] + extra)
        assert args.verb == verb


def test_run_verb_end_to_end(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path)
    out = str(tmp_path / "runs")
    code = cli.main(["run", "--config", cfg_path, "--out", out])
    assert code == 0
    printed = capsys.readouterr().out
    assert "run dir:" in printed and "digest:" in printed
    run_dir = printed.split("run dir:")[1].splitlines()[0].strip()
    assert os.path.exists(os.path.join(run_dir, "report.json"))
    assert os.path.exists(os.path.join(run_dir, "success_by_viewpoint.png"))


def test_run_refuses_overwrite_then_force(tmp_path):
    cfg_path = _write_cfg(tmp_path)
    out = str(tmp_path / "runs")
    assert cli.main(["run", "--config", cfg_path, "--out", out]) == 0
    assert cli.main(["run", "--config", cfg_path, "--out", out]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", cfg_path, "--out", out, "--force"]) == 0


def test_run_rejects_bad_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["run", "--config", str(path)]) == cli.EXIT_CONFIG
    missing = str(tmp_path / "absent.json")
    assert cli.main(["run", "--config", missing]) == cli.EXIT_CONFIG


def test_run_runtime_failure_writes_manifest(tmp_path):
    cfg_path = _write_cfg(tmp_path, craft=dict(_tiny_raw()["craft"],
                                               budget=0.002))
    out = str(tmp_path / "runs")
    code = cli.main(["run", "--config", cfg_path, "--out", out])
    assert code == cli.EXIT_RUNTIME
    cfg = config.load_config(cfg_path)
    raw = config.canonical_dict(cfg)
    raw["out_dir"] = out
    cfg = config.from_dict(raw)
    run_dir = os.path.join(out, f"tiny-{config.fingerprint(cfg)}-s5")
    manifest = json.loads(open(os.path.join(run_dir, "failure.json")).read())
    assert manifest["failed_stage"] == "craft"


def test_loss_override_changes_poison_manifest(tmp_path):
    cfg_path = _write_cfg(tmp_path)
    out = str(tmp_path / "runs")
    code = cli.main(["export-poisons", "--config", cfg_path, "--out", out,
                     "--loss", "cosine"])
    assert code == 0
    run_dirs = os.listdir(out)
    assert len(run_dirs) == 1
    manifest = json.loads(open(os.path.join(
        out, run_dirs[0], "poisons.bin.json")).read())
    assert manifest["config"]["loss"] == "cosine"


def test_seed_override_changes_run_dir(tmp_path):
    cfg_path = _write_cfg(tmp_path)
    out = str(tmp_path / "runs")
    assert cli.main(["run", "--config", cfg_path, "--out", out,
                     "--seed", "9"]) == 0
    assert any(d.endswith("-s9") for d in os.listdir(out))


def test_ablate_verb_writes_sweep(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path)
    out = str(tmp_path / "runs")
    code = cli.main(["ablate", "--config", cfg_path, "--out", out,
                     "--axis", "epsilon", "--values", "0,8"])
    assert code == 0
    printed = capsys.readouterr().out
    assert "epsilon=0.0" in printed and "epsilon=8.0" in printed
    run_dir = printed.split("run dir:")[1].splitlines()[0].strip()
    assert os.path.exists(os.path.join(run_dir, "sweep_epsilon.csv"))
    assert os.path.exists(os.path.join(run_dir, "sweep_epsilon.png"))


def test_ablate_rejects_bad_values(tmp_path):
    cfg_path = _write_cfg(tmp_path)
    assert cli.main(["ablate", "--config", cfg_path, "--axis", "budget",
                     "--values", ""]) == cli.EXIT_CONFIG


def test_heatmap_verb(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path, data=dict(_tiny_raw()["data"],
                                              known_count=1,
                                              known_mode="contiguous"))
    out = str(tmp_path / "runs")
    code = cli.main(["heatmap", "--config", cfg_path, "--out", out,
                     "--bins", "2"])
    assert code == 0
    printed = capsys.readouterr().out
    run_dir = printed.split("run dir:")[1].splitlines()[0].strip()
    assert os.path.exists(os.path.join(run_dir, "heatmap.csv"))
    assert os.path.exists(os.path.join(run_dir, "heatmap_edges.json"))
    assert os.path.exists(os.path.join(run_dir, "heatmap.png"))


def test_proplab_verb(tmp_path, capsys):
    out = str(tmp_path / "prop")
    code = cli.main(["proplab", "--dimension", "10", "--instances", "4",
                     "--probes", "25", "--collinear", "--out", out])
    assert code == 0
    payload = json.loads(open(os.path.join(out, "proplab.json")).read())
    assert payload["pass_rate"] == 1.0
    assert payload["collinear"]["all_within_tolerance"]
    printed = capsys.readouterr().out
    assert "pass rate 1.0000" in printed


def test_apply_defense_round_trip(tmp_path):
    ds, _ = datapipe.generate_multiview(seed=3, class_count=3, per_class=4,
                                        target_class=0, variant_count=4,
                                        known_count=1, image_size=10)
    src = str(tmp_path / "records.bin")
    datapipe.save_records(ds, src)
    cfg_path = _write_cfg(tmp_path, defense={"kind": "bit-depth-reduction",
                                             "bits": 3})
    dest = str(tmp_path / "defended.bin")
    code = cli.main(["apply-defense", "--config", cfg_path,
                     "--input", src, "--output", dest])
    assert code == 0
    out = datapipe.load_records(dest, 10, 10, 3, 3)
    assert len(out.images) == len(ds.images)
    assert len(np.unique(out.images[0].pixels)) <= 8
    # refuses to clobber without --force
    assert cli.main(["apply-defense", "--config", cfg_path,
                     "--input", src, "--output", dest]) == cli.EXIT_CONFIG
