import json

import pytest

from poisonlab import config, craft, datapipe, defense, models, victim


def test_default_config_is_valid_and_fingerprints():
    cfg = config.ExperimentConfig()
    fp = config.fingerprint(cfg)
    assert len(fp) == 16
    assert fp == config.fingerprint(config.ExperimentConfig())


def test_from_dict_round_trips_canonical_dict():
    cfg = config.ExperimentConfig(
        name="ref",
        craft=config.CraftSection(loss="cosine", steps=12),
        repeats=3, seed=7)
    again = config.from_dict(config.canonical_dict(cfg))
    assert again == cfg
    assert config.fingerprint(again) == config.fingerprint(cfg)


def test_fingerprint_changes_with_any_field():
    base = config.ExperimentConfig()
    variants = [
        config.ExperimentConfig(seed=1),
        config.ExperimentConfig(repeats=2),
        config.ExperimentConfig(craft=config.CraftSection(loss="ed")),
        config.ExperimentConfig(data=config.DataSection(per_class=100)),
        config.ExperimentConfig(train=config.TrainSection(lr=0.01)),
        config.ExperimentConfig(defense=config.DefenseSection(kind="gaussian-blur")),
    ]
    fps = {config.fingerprint(v) for v in variants}
    assert config.fingerprint(base) not in fps
    assert len(fps) == len(variants)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys.*bogus"):
        config.from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="craft.*unknown keys"):
        config.from_dict({"craft": {"stepz": 10}})
    with pytest.raises(ValueError, match="train.augment.*unknown keys"):
        config.from_dict({"train": {"augment": {"pda": 1}}})


def test_from_dict_rejects_bad_section_shape():
    with pytest.raises(ValueError, match="expected a mapping"):
        config.from_dict({"craft": "mul"})


def test_section_validation_bubbles_up():
    for raw in [
        {"data": {"source": "parquet"}},
        {"data": {"target_class": 9}},
        {"data": {"source": "cifar"}},            # missing path
        {"surrogate": {"arch": "resnet"}},
        {"craft": {"loss": "huber"}},
        {"defense": {"kind": "jpeg"}},
        {"repeats": 0},
    ]:
        with pytest.raises(ValueError):
            config.from_dict(raw)


def test_config_file_round_trip(tmp_path):
    cfg = config.ExperimentConfig(name="disk", seed=3,
                                  craft=config.CraftSection(budget=0.005))
    path = tmp_path / "exp.json"
    config.save_config(cfg, path)
    loaded = config.load_config(path)
    assert loaded == cfg
    # the saved file is plain JSON with sorted keys
    raw = json.loads(path.read_text())
    assert list(raw) == sorted(raw)


def test_load_config_rejects_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(ValueError, match="not valid JSON"):
        config.load_config(path)


def test_drop_epochs_list_becomes_tuple():
    cfg = config.from_dict({"train": {"drop_epochs": [5, 9]}})
    assert cfg.train.drop_epochs == (5, 9)
    recipe = cfg.train.recipe(seed=1)
    assert recipe.drop_epochs == (5, 9)


def test_builders_produce_module_objects():
    cfg = config.ExperimentConfig(
        train=config.TrainSection(epochs=4, batch=8, lr=0.1),
        craft=config.CraftSection(loss="add", steps=9, retrain_count=1),
        defense=config.DefenseSection(kind="bit-depth-reduction", bits=5))
    recipe = cfg.train.recipe(seed=11)
    assert isinstance(recipe, victim.TrainConfig)
    assert (recipe.epochs, recipe.batch, recipe.lr, recipe.seed) == (4, 8, 0.1, 11)
    ccfg = cfg.craft.config(seed=12)
    assert isinstance(ccfg, craft.CraftConfig)
    assert (ccfg.loss, ccfg.steps, ccfg.seed) == ("add", 9, 12)
    pol = cfg.defense.policy()
    assert isinstance(pol, defense.DefensePolicy)
    assert (pol.kind, pol.bits) == ("bit-depth-reduction", 5)
    spec = cfg.victim_spec(seed=13)
    assert isinstance(spec, models.ModelSpec)
    assert spec.arch == "convnet-tiny"
    assert isinstance(cfg.craft.augment.policy(), datapipe.AugmentPolicy)


def test_transfer_flag_tracks_arch_mismatch():
    same = config.ExperimentConfig()
    assert not same.transfer
    cross = config.ExperimentConfig(surrogate=config.ModelSection(arch="mlp-small"))
    assert cross.transfer


def test_invalid_loss_rejected_even_when_craft_disabled():
    with pytest.raises(ValueError):
        config.from_dict({"craft": {"enabled": False, "loss": "nope"}})
