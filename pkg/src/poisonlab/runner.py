"""Experiment orchestration: data, surrogate, craft, defense, victims, report.

Every random stream is derived from the master seed via named stage seeds, so
a config plus its seed pins the whole pipeline.  Victim streams depend only on
the master seed and the repeat index, never on crafting internals; a zero
perturbation therefore reproduces the unpoisoned baseline bit for bit.
Evaluation repeats and sweep points run on a small thread pool; the stages of
a single experiment run sequentially.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import os

import numpy as np

from . import config as configmod
from . import craft, datapipe, defense, models, victim
from .seeding import stage_seed


@dataclass
class World:
    """Materialized data for one experiment: train set, val set, target."""

    train: datapipe.Dataset
    val: datapipe.Dataset
    target: datapipe.TargetSpec


class StageFailure(RuntimeError):
    """A pipeline stage failed; carries the stage name for the manifest."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _workers(n: int) -> int:
    return max(1, min(n, os.cpu_count() or 1, 4))


def build_world(cfg: configmod.ExperimentConfig, master: int) -> World:
    """Materialize train/val data and the target from the config's source."""
    d = cfg.data
    if d.source == "synthetic":
        train, target = datapipe.generate_multiview(
            seed=stage_seed(master, "data"), class_count=d.classes,
            per_class=d.per_class, target_class=d.target_class,
            variant_count=d.variant_count, known_count=d.known_count,
            image_size=d.image_size, channels=d.channels,
            known_mode=d.known_mode, contiguous_start=d.contiguous_start,
            y_adv=d.adversarial_class, noise=d.noise)
        val, _ = datapipe.generate_multiview(
            seed=stage_seed(master, "val"), class_count=d.classes,
            per_class=d.val_per_class, target_class=d.target_class,
            variant_count=d.variant_count, known_count=d.known_count,
            image_size=d.image_size, channels=d.channels, noise=d.noise)
        return World(train, val, target)
    if d.source == "cifar":
        full = datapipe.load_cifar_binary(d.path, num_classes=d.classes)
        val_rows = d.val_per_class * d.classes
        if val_rows >= len(full.images):
            raise ValueError("validation split leaves no training rows")
        train = datapipe.Dataset(full.images[:-val_rows], d.classes)
        val = datapipe.Dataset(full.images[-val_rows:], d.classes)
    else:  # folder base: synthetic backdrop with file-based target variants
        train, _ = datapipe.generate_multiview(
            seed=stage_seed(master, "data"), class_count=d.classes,
            per_class=d.per_class, target_class=d.target_class,
            variant_count=d.variant_count, known_count=d.known_count,
            image_size=d.image_size, channels=d.channels, noise=d.noise)
        val, _ = datapipe.generate_multiview(
            seed=stage_seed(master, "val"), class_count=d.classes,
            per_class=d.val_per_class, target_class=d.target_class,
            variant_count=d.variant_count, known_count=d.known_count,
            image_size=d.image_size, channels=d.channels, noise=d.noise)
    if not d.variant_folder:
        raise ValueError(f"data.variant_folder is required for source {d.source!r}")
    label = d.variant_label if d.variant_label is not None else d.target_class
    variants = datapipe.load_variant_folder(d.variant_folder, d.image_size, label)
    y_adv = d.adversarial_class
    if y_adv is None:
        y_adv = (label + 1) % d.classes
    idx = set(datapipe.known_view_indices(len(variants), d.known_count,
                                          d.known_mode, d.contiguous_start))
    known = [v for i, v in enumerate(variants) if i in idx]
    heldout = [v for i, v in enumerate(variants) if i not in idx]
    target = datapipe.TargetSpec(y_adv=y_adv, known=known, heldout=heldout)
    return World(train, val, target)


def train_surrogate(cfg: configmod.ExperimentConfig, world: World,
                    master: int) -> models.ModelState:
    spec = cfg.surrogate_spec(stage_seed(master, "surrogate-init"))
    recipe = cfg.train.recipe(stage_seed(master, "surrogate-train"))
    return victim.train(world.train, recipe, spec=spec)


def craft_poisons(cfg: configmod.ExperimentConfig, world: World,
                  surrogate: models.ModelState, master: int) -> craft.CraftResult:
    ccfg = cfg.craft.config(stage_seed(master, "craft"))
    recipe = cfg.train.recipe(stage_seed(master, "craft-retrain"))
    return craft.craft(world.train, world.target, surrogate, ccfg,
                       retrain_recipe=recipe)


def train_one_victim(cfg: configmod.ExperimentConfig, dataset: datapipe.Dataset,
                     master: int, repeat: int) -> models.ModelState:
    spec = cfg.victim_spec(stage_seed(master, f"victim-init-{repeat}"))
    recipe = cfg.train.recipe(stage_seed(master, f"victim-train-{repeat}"))
    return victim.train(dataset, recipe, spec=spec)


def train_victims(cfg: configmod.ExperimentConfig, dataset: datapipe.Dataset,
                  master: int) -> list:
    repeats = range(cfg.repeats)
    with ThreadPoolExecutor(max_workers=_workers(cfg.repeats)) as pool:
        return list(pool.map(
            lambda r: train_one_victim(cfg, dataset, master, r), repeats))


@dataclass
class ExperimentResult:
    """Everything run_experiment produced, before report serialization."""

    config: configmod.ExperimentConfig
    master: int
    world: World
    craft_result: craft.CraftResult | None
    victims: list
    evaluations: list
    aggregate: dict


def _aggregate(evaluations: list) -> dict:
    keys = ("validation_accuracy", "sr_known", "sr_heldout", "sr_overall")
    agg = {}
    for key in keys:
        vals = [e[key] for e in evaluations]
        agg[f"mean_{key}"] = float(np.mean(vals))
        agg[f"min_{key}"] = float(np.min(vals))
        agg[f"max_{key}"] = float(np.max(vals))
    return agg


def run_pipeline(cfg: configmod.ExperimentConfig,
                 master: int | None = None) -> ExperimentResult:
    """All stages except report writing; raises StageFailure on any error."""
    master = cfg.seed if master is None else master

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise StageFailure(name, exc) from exc

    world = stage("data", lambda: build_world(cfg, master))
    craft_result = None
    poisoned = world.train
    if cfg.craft.enabled:
        surrogate = stage("surrogate",
                          lambda: train_surrogate(cfg, world, master))
        craft_result = stage("craft",
                             lambda: craft_poisons(cfg, world, surrogate, master))
        poisoned = craft_result.poison.apply(world.train)
    defended = stage("defense",
                     lambda: defense.apply_policy(poisoned, cfg.defense.policy()))
    victims = stage("victims", lambda: train_victims(cfg, defended, master))
    evaluations = stage("evaluate", lambda: [
        victim.evaluate(v, world.val, world.target) for v in victims])
    return ExperimentResult(config=cfg, master=master, world=world,
                            craft_result=craft_result, victims=victims,
                            evaluations=evaluations,
                            aggregate=_aggregate(evaluations))


def run_heatmap_matrix(cfg: configmod.ExperimentConfig, bins: int,
                       master: int | None = None):
    """Craft from one view per bin, count successes per view bin.

    Returns (matrix, edges, column_views, world).  Each column crafts with a
    single known view (the middle of its bin) and trains one victim.
    """
    master = cfg.seed if master is None else master
    world = build_world(cfg, master)
    variants = world.target.all_variants()

    def pipeline(view):
        sub = stage_seed(master, f"heatmap-{view.id}")
        target = datapipe.TargetSpec(y_adv=world.target.y_adv, known=[view],
                                     heldout=[v for v in variants
                                              if v.id != view.id])
        spec = cfg.surrogate_spec(stage_seed(sub, "surrogate-init"))
        recipe = cfg.train.recipe(stage_seed(sub, "surrogate-train"))
        surrogate = victim.train(world.train, recipe, spec=spec)
        ccfg = cfg.craft.config(stage_seed(sub, "craft"))
        retrain = cfg.train.recipe(stage_seed(sub, "craft-retrain"))
        result = craft.craft(world.train, target, surrogate, ccfg,
                             retrain_recipe=retrain)
        return train_one_victim(cfg, result.poison.apply(world.train),
                                sub, 0)

    matrix, edges, column_views = victim.heatmap(
        variants, pipeline, bins, world.target.y_adv)
    return matrix, edges, column_views, world


_ABLATION_AXES = ("budget", "epsilon", "retrain", "known-variants")


def ablation_config(cfg: configmod.ExperimentConfig, axis: str,
                    value) -> configmod.ExperimentConfig:
    """A copy of cfg with one swept field replaced."""
    if axis not in _ABLATION_AXES:
        raise ValueError(f"axis must be one of {_ABLATION_AXES}")
    raw = configmod.canonical_dict(cfg)
    if axis == "budget":
        raw["craft"]["budget"] = float(value)
    elif axis == "epsilon":
        raw["craft"]["eps"] = float(value)
    elif axis == "retrain":
        raw["craft"]["retrain_count"] = int(value)
    else:
        raw["data"]["known_count"] = int(value)
    return configmod.from_dict(raw)


def run_ablation_rows(cfg: configmod.ExperimentConfig, axis: str,
                      values) -> list:
    """One pipeline per value, fixed master seed; failures become rows."""
    points = [ablation_config(cfg, axis, v) for v in values]

    def run_point(pair):
        value, point = pair
        row = {"axis": axis, "value": value,
               "fingerprint": configmod.fingerprint(point)}
        try:
            result = run_pipeline(point, master=cfg.seed)
        except StageFailure as exc:
            row.update({"error": str(exc), "failed_stage": exc.stage})
            return row
        row.update(result.aggregate)
        return row

    with ThreadPoolExecutor(max_workers=_workers(len(points))) as pool:
        return list(pool.map(run_point, zip(values, points)))
