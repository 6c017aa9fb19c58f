"""Victim-side training and evaluation.

The desk-scale recipe: SGD with momentum 0.9 over shuffled minibatches of 64,
30 epochs, learning rate 0.02 dropped tenfold at epochs 18 and 25, with the
flip-and-crop augmentation policy.  All evaluation thresholds in the test
suite are calibrated against this recipe.  Training is bitwise deterministic
for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import datapipe, models


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 64
    lr: float = 0.02
    drop_epochs: tuple = (18, 25)
    drop_factor: float = 0.1
    momentum: float = 0.9
    augment: datapipe.AugmentPolicy = field(default_factory=datapipe.AugmentPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")
        if self.lr < 0 or not (0.0 <= self.momentum < 1.0):
            raise ValueError("need lr >= 0 and momentum in [0, 1)")


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr
    for drop in cfg.drop_epochs:
        if epoch >= drop:
            lr *= cfg.drop_factor
    return lr


def train(dataset: datapipe.Dataset, cfg: TrainConfig,
          spec: models.ModelSpec | None = None,
          state: models.ModelState | None = None) -> models.ModelState:
    """Train from scratch (``spec``) or continue from a checkpoint (``state``).

    The input state is never mutated; a trained copy is returned.
    """
    if (spec is None) == (state is None):
        raise ValueError("pass exactly one of spec or state")
    state = models.build(spec) if state is None else state.copy()
    pixels = dataset.stack_pixels()
    labels = dataset.labels()
    n = len(dataset)
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p) for p in state.params]
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch)):
            take = order[start:start + cfg.batch]
            xb = pixels[take]
            if cfg.augment.enabled:
                xb = datapipe.augment_batch(xb, cfg.augment, rng)
            loss, grads = models.loss_and_param_grads(state, xb, labels[take])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi}")
            for p, g, v in zip(state.params, grads, velocity):
                v *= cfg.momentum
                v -= lr * g
                p += v
        state.epochs_trained += 1
    return state


# --- evaluation ---------------------------------------------------------------

def success_rate(state: models.ModelState, variants, y_adv: int):
    """Fraction of variants classified as the adversarial label, plus flags."""
    if not variants:
        return 0.0, []
    preds = models.predict(state, np.stack([v.pixels for v in variants]))
    flags = [int(p) == y_adv for p in preds]
    return sum(flags) / len(flags), flags


def validation_accuracy(state: models.ModelState, dataset: datapipe.Dataset) -> float:
    preds = models.predict(state, dataset.stack_pixels())
    return float(np.mean(preds == dataset.labels()))


def evaluate(state: models.ModelState, val: datapipe.Dataset,
             target: datapipe.TargetSpec) -> dict:
    """Metrics for one trained victim against one target."""
    sr_known, flags_known = success_rate(state, target.known, target.y_adv)
    sr_held, flags_held = success_rate(state, target.heldout, target.y_adv)
    m, total = len(target.known), target.variant_count()
    sr_overall = (sum(flags_known) + sum(flags_held)) / total
    preds = models.predict(state, np.stack([v.pixels for v in target.all_variants()]))
    rows = [
        {"id": v.id, "viewpoint": v.viewpoint, "predicted": int(p),
         "success": bool(int(p) == target.y_adv), "known": i < m}
        for i, (v, p) in enumerate(zip(target.all_variants(), preds))
    ]
    return {
        "validation_accuracy": validation_accuracy(state, val),
        "sr_known": sr_known,
        "sr_heldout": sr_held,
        "sr_overall": sr_overall,
        "variants": rows,
    }


def heatmap(variants, pipeline, bins: int, y_adv: int):
    """Success counts over viewpoint bins when crafting from single views.

    ``pipeline(view)`` must return a trained victim model given one known
    variant.  Entry (r, c) counts successes among test-view bin ``r`` for the
    victim attacked from the representative view of bin ``c``.  Returns
    ``(matrix, bin_edges, column_views)``.
    """
    if len(variants) < bins:
        raise ValueError(f"need at least {bins} variants for {bins} bins")
    if bins < 1:
        raise ValueError("bins must be positive")
    ordered = sorted(variants, key=lambda v: v.viewpoint)
    groups = np.array_split(np.arange(len(ordered)), bins)
    edges = [float(ordered[g[0]].viewpoint) for g in groups]
    edges.append(float(ordered[-1].viewpoint))
    column_views = [ordered[int(g[len(g) // 2])] for g in groups]
    matrix = np.zeros((bins, bins), dtype=np.int64)
    all_pixels = np.stack([v.pixels for v in ordered])
    for c, view in enumerate(column_views):
        state = pipeline(view)
        preds = models.predict(state, all_pixels)
        hits = preds == y_adv
        for r, g in enumerate(groups):
            matrix[r, c] = int(hits[g].sum())
    return matrix, edges, column_views
