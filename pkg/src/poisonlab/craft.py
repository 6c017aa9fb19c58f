"""Perturbation crafting by gradient matching.

The attacker owns a small set of training rows drawn from the adversarial
class and perturbs them, within an infinity-norm budget on the 0-255 byte
scale, so that the surrogate's training gradient on the perturbed rows lines
up with its gradient on the known target views relabeled adversarially.  Four
matching losses over the two gradient vectors are supported:

- ``cosine``: 1 - cos(poison_grad, target_grad)
- ``ed``: squared Euclidean distance
- ``add``: Euclidean distance normalized by the target norm, plus cosine
- ``mul``: squared Euclidean distance times cosine

The loop follows a projected first-order scheme: adaptive moment estimation
on the perturbation (optionally sign-only updates), cosine-decayed step size,
projection to the byte-scale ball and the pixel box after every step, and
periodic surrogate retraining on the current poisoned set at steps
floor(S/(R+1)) * {1..R}.  Poisoned rows keep their original labels
throughout; the perturbed pixels use the attacker's augmentation policy when
computing the poison gradient, while target gradients are computed on raw
views.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
import json
import struct

import numpy as np

from . import datapipe, diffcore as dc, models, victim
from .seeding import stage_seed

LOSS_TAGS = ("cosine", "ed", "add", "mul")

_DEGENERATE_NORM = 1e-12
_MAGIC = b"PLPS"
_VERSION = 1
_HEADER = struct.Struct("<IIIIddI")  # version, h, w, c, eps, budget, count


class CraftDivergedError(RuntimeError):
    """Matching loss became non-finite during crafting."""


# --- matching losses ----------------------------------------------------------

def _cosine_term(poison_grad: dc.Tensor, target_grad: np.ndarray,
                 target_norm: float) -> dc.Tensor:
    # below the degenerate threshold the cosine is defined as 1 and
    # contributes no gradient
    p_norm = dc.norm2(poison_grad)
    if float(p_norm.data) < _DEGENERATE_NORM or target_norm < _DEGENERATE_NORM:
        return dc.constant(1.0)
    inner = dc.dot(poison_grad, dc.constant(target_grad))
    return dc.sub(dc.constant(1.0), dc.div(inner, dc.scale(p_norm, target_norm)))


def _distance_term(poison_grad: dc.Tensor, target_grad: np.ndarray) -> dc.Tensor:
    diff = dc.sub(poison_grad, dc.constant(target_grad))
    return dc.dot(diff, diff)


def matching_loss_tape(tag: str, poison_grad: dc.Tensor,
                       target_grad: np.ndarray, target_norm: float) -> dc.Tensor:
    """Scalar matching loss on the tape; differentiable through poison_grad."""
    if tag == "cosine":
        return _cosine_term(poison_grad, target_grad, target_norm)
    if tag == "ed":
        return _distance_term(poison_grad, target_grad)
    if tag == "add":
        if target_norm < _DEGENERATE_NORM:
            raise ValueError("add loss needs a nonzero target gradient")
        dist = dc.scale(dc.sqrt(_distance_term(poison_grad, target_grad)),
                        1.0 / target_norm)
        return dc.add(dist, _cosine_term(poison_grad, target_grad, target_norm))
    if tag == "mul":
        return dc.mul(_distance_term(poison_grad, target_grad),
                      _cosine_term(poison_grad, target_grad, target_norm))
    raise ValueError(f"unknown loss tag {tag!r}")


def _loss_value(tag: str, poison_grad, target_grad) -> float:
    poison_grad = np.asarray(poison_grad, dtype=np.float64)
    target_grad = np.asarray(target_grad, dtype=np.float64)
    if poison_grad.shape != target_grad.shape or poison_grad.ndim != 1:
        raise ValueError("gradient vectors must share one flat shape")
    return float(matching_loss_tape(tag, dc.constant(poison_grad), target_grad,
                                    float(np.linalg.norm(target_grad))).data)


def loss_cos(poison_grad, target_grad) -> float:
    """1 - cosine similarity; 1 when either gradient is degenerate."""
    return _loss_value("cosine", poison_grad, target_grad)


def loss_ed(poison_grad, target_grad) -> float:
    """Squared Euclidean distance between the gradient vectors."""
    return _loss_value("ed", poison_grad, target_grad)


def loss_add(poison_grad, target_grad) -> float:
    """Normalized Euclidean distance plus cosine distance."""
    return _loss_value("add", poison_grad, target_grad)


def loss_mul(poison_grad, target_grad) -> float:
    """Squared Euclidean distance multiplied by cosine distance."""
    return _loss_value("mul", poison_grad, target_grad)


# --- crafting state -----------------------------------------------------------

@dataclass
class MatchState:
    """Target-side gradient, frozen between surrogate retrainings."""

    gradient: np.ndarray
    norm: float

    @staticmethod
    def compute(state: models.ModelState, known_variants, y_adv: int) -> "MatchState":
        pixels = np.stack([v.pixels for v in known_variants])
        labels = np.full(len(known_variants), y_adv, dtype=np.int64)
        _, grads = models.loss_and_param_grads(state, pixels, labels)
        vec = models.flatten_params(grads)
        norm = float(np.linalg.norm(vec))
        if norm < _DEGENERATE_NORM:
            raise ValueError("target gradient is numerically zero")
        return MatchState(vec, norm)


@dataclass
class CraftConfig:
    loss: str = "mul"
    steps: int = 100
    retrain_count: int = 2
    eps: float = 16.0            # infinity budget on the 0-255 byte scale
    budget: float = 0.01         # poison fraction of the training set
    step_size: float | None = None  # pixel-scale; default eps / 4 / 255
    signed: bool = True
    selection: str = "adv-class"  # or "any-class"
    retrain_mode: str = "continue"  # or "scratch"
    retrain_epoch_frac: float = 0.25
    retrain_lr: float | None = None
    augment: datapipe.AugmentPolicy = field(default_factory=datapipe.AugmentPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_TAGS:
            raise ValueError(f"loss must be one of {LOSS_TAGS}")
        if self.steps < 1 or self.retrain_count < 0:
            raise ValueError("need steps >= 1 and retrain_count >= 0")
        if self.steps // (self.retrain_count + 1) < 1:
            raise ValueError("retrain_count too large for the step budget")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if not (0.0 < self.budget <= 1.0):
            raise ValueError("budget must be a fraction in (0, 1]")
        if self.selection not in ("adv-class", "any-class"):
            raise ValueError("selection must be adv-class or any-class")
        if self.retrain_mode not in ("continue", "scratch"):
            raise ValueError("retrain_mode must be continue or scratch")

    def resolved_step_size(self) -> float:
        """Pixel-scale step size, defaulting to a quarter of the ball radius."""
        if self.step_size is not None:
            return self.step_size
        return (self.eps / 4.0) / 255.0


@dataclass
class PoisonSet:
    """Perturbed rows: ids, original labels, base pixels and deltas.

    The perturbation is the stored quantity; pixels are derived as
    base + deltas, which the projection guarantees lies in [0, 1].
    """

    ids: list
    labels: np.ndarray
    base: np.ndarray     # (k, h, w, c)
    deltas: np.ndarray   # same shape, |delta| <= eps / 255
    eps: float           # byte scale
    budget: float

    @property
    def pixels(self) -> np.ndarray:
        return self.base + self.deltas

    def apply(self, dataset: datapipe.Dataset) -> datapipe.Dataset:
        """New dataset with poisoned pixels swapped in; labels untouched."""
        px = self.pixels
        return datapipe.replace_pixels(
            dataset, {rid: px[i] for i, rid in enumerate(self.ids)})


@dataclass
class CraftResult:
    poison: PoisonSet
    loss_trace: list
    retrain_steps: list
    surrogate: models.ModelState
    step_stats: list  # per step: (max_abs_delta, pixel_min, pixel_max)
    config: CraftConfig


def retrain_steps_for(steps: int, retrain_count: int) -> list:
    """Retraining happens at floor(S/(R+1)) * {1..R}; never at the final step."""
    period = steps // (retrain_count + 1)
    return [period * r for r in range(1, retrain_count + 1)]


def select_poison_rows(dataset: datapipe.Dataset, y_adv: int, k: int, rng,
                       selection: str = "adv-class"):
    """Pick k distinct rows, by default from the adversarial class."""
    if selection == "adv-class":
        candidates = [im for im in dataset.images if im.label == y_adv]
    else:
        candidates = list(dataset.images)
    if k < 1:
        raise ValueError("poison budget rounds down to zero rows")
    if k > len(candidates):
        raise ValueError(f"need {k} poison rows but only {len(candidates)} candidates")
    chosen = rng.choice(len(candidates), size=k, replace=False)
    rows = [candidates[i] for i in sorted(chosen)]
    return rows


def project_linf(delta: np.ndarray, eps_scaled: float, base: np.ndarray):
    """Project onto the infinity ball, then re-derive against the pixel box.

    The box constraint base + delta in [0, 1] is applied in delta
    coordinates, clamping to [-base, 1 - base]; that clamp only ever shrinks
    a magnitude, so the ball bound survives it exactly and the whole map is
    bitwise idempotent.  Returns ``(delta, pixels)`` with pixels in [0, 1]
    and ``|delta| <= eps_scaled`` elementwise.
    """
    d = np.clip(delta, -eps_scaled, eps_scaled)
    d = np.clip(d, -base, 1.0 - base)
    return d, base + d


def _retrain_recipe(recipe: victim.TrainConfig, cfg: CraftConfig,
                    event: int) -> victim.TrainConfig:
    if cfg.retrain_mode == "scratch":
        return replace(recipe, seed=stage_seed(cfg.seed, f"retrain-{event}"))
    epochs = max(1, int(round(cfg.retrain_epoch_frac * recipe.epochs)))
    lr = cfg.retrain_lr if cfg.retrain_lr is not None else recipe.lr * recipe.drop_factor
    return replace(recipe, epochs=epochs, lr=lr, drop_epochs=(),
                   seed=stage_seed(cfg.seed, f"retrain-{event}"))


def matching_objective(state: models.ModelState, base: np.ndarray,
                       delta: np.ndarray, labels: np.ndarray,
                       match: MatchState, tag: str, augment=None):
    """One crafting objective evaluation as a differentiable tape.

    ``augment`` is either None or ``(flat_indices, pad)`` as produced by
    :func:`datapipe.batch_augment_indices`; fixed indices keep the transform
    differentiable.  Returns ``(loss_tensor, delta_tensor)``.
    """
    delta_t = dc.tensor(delta, requires_grad=True)
    x = dc.add(dc.constant(base), delta_t)
    if augment is not None:
        idx, pad = augment
        x = dc.take(dc.pad2d(x, pad), idx.reshape(base.shape))
    grads_t, _ = models.param_grad_tape(state, x, labels)
    poison_vec = dc.concat([dc.reshape(g, (-1,)) for g in grads_t])
    loss = matching_loss_tape(tag, poison_vec, match.gradient, match.norm)
    return loss, delta_t


def craft(dataset: datapipe.Dataset, target: datapipe.TargetSpec,
          surrogate: models.ModelState, cfg: CraftConfig,
          retrain_recipe: victim.TrainConfig | None = None) -> CraftResult:
    """Run the crafting loop; the caller's surrogate is never mutated."""
    train_ids = set(dataset.ids())
    for v in target.all_variants():
        if v.id in train_ids:
            raise ValueError("target variants must not appear in the training set")
    if retrain_recipe is None:
        retrain_recipe = victim.TrainConfig()

    rng = np.random.default_rng(stage_seed(cfg.seed, "craft-loop"))
    k = int(np.floor(cfg.budget * len(dataset)))
    rows = select_poison_rows(dataset, target.y_adv, k, rng, cfg.selection)
    ids = [im.id for im in rows]
    labels = np.array([im.label for im in rows], dtype=np.int64)
    base = np.stack([im.pixels for im in rows]).astype(dc.default_dtype())
    eps_scaled = cfg.eps / 255.0
    h, w, c = base.shape[1:]

    delta = rng.uniform(-eps_scaled, eps_scaled, size=base.shape)
    delta, pixels = project_linf(delta, eps_scaled, base)

    surr = surrogate.copy()
    match = MatchState.compute(surr, target.known, target.y_adv)

    step_size = cfg.resolved_step_size()
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(delta)
    v = np.zeros_like(delta)

    events = set(retrain_steps_for(cfg.steps, cfg.retrain_count))
    loss_trace, step_stats, retrain_log = [], [], []

    for s in range(1, cfg.steps + 1):
        if cfg.augment.enabled:
            idx = datapipe.batch_augment_indices(len(rows), h, w, c, cfg.augment, rng)
            augment = (idx, cfg.augment.pad)
        else:
            augment = None
        loss, delta_t = matching_objective(surr, base, delta, labels, match,
                                           cfg.loss, augment)
        value = float(loss.data)
        if not np.isfinite(value):
            raise CraftDivergedError(f"non-finite matching loss at step {s}")
        loss_trace.append(value)

        if loss.requires_grad:
            (g,) = dc.grad(loss, [delta_t])
        else:  # degenerate cosine plateau: no usable direction this step
            g = np.zeros_like(delta)
        decay = 0.5 * (1.0 + np.cos(np.pi * (s - 1) / cfg.steps))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** s)
        v_hat = v / (1 - beta2 ** s)
        update = m_hat / (np.sqrt(v_hat) + adam_eps)
        if cfg.signed:
            update = np.sign(update)
        delta = delta - step_size * decay * update
        delta, pixels = project_linf(delta, eps_scaled, base)
        step_stats.append((float(np.max(np.abs(delta))),
                           float(pixels.min()), float(pixels.max())))

        if s in events:
            event = len(retrain_log) + 1
            retrain_log.append(s)
            poisoned = datapipe.replace_pixels(
                dataset, {rid: pixels[i] for i, rid in enumerate(ids)})
            recipe = _retrain_recipe(retrain_recipe, cfg, event)
            if cfg.retrain_mode == "scratch":
                fresh = models.ModelSpec(surr.spec.arch, surr.spec.input_shape,
                                         surr.spec.classes,
                                         seed=stage_seed(cfg.seed, f"retrain-init-{event}"))
                surr = victim.train(poisoned, recipe, spec=fresh)
            else:
                surr = victim.train(poisoned, recipe, state=surr)
            match = MatchState.compute(surr, target.known, target.y_adv)

    poison = PoisonSet(ids=ids, labels=labels, base=base, deltas=delta,
                       eps=cfg.eps, budget=cfg.budget)
    return CraftResult(poison=poison, loss_trace=loss_trace,
                       retrain_steps=retrain_log, surrogate=surr,
                       step_stats=step_stats, config=cfg)


# --- poison export ------------------------------------------------------------

def save_poisons(poison: PoisonSet, path, config: CraftConfig | None = None) -> None:
    """Binary export (header then row-id, delta pairs) plus a JSON manifest.

    The manifest lands next to the binary at ``<path>.json`` and records the
    perturbation summary and, when given, the crafting configuration and seed
    so an export can be audited without parsing the binary.
    """
    k, h, w, c = poison.base.shape
    deltas = poison.deltas.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(_VERSION, h, w, c, poison.eps, poison.budget, k))
        for i, rid in enumerate(poison.ids):
            fh.write(struct.pack("<q", int(rid)))
            fh.write(deltas[i].tobytes())
    manifest = {
        "format": _MAGIC.decode("ascii"),
        "version": _VERSION,
        "count": k,
        "image_shape": [h, w, c],
        "eps": poison.eps,
        "budget": poison.budget,
        "row_ids": [int(r) for r in poison.ids],
        "labels": [int(y) for y in poison.labels],
        "max_abs_delta": float(np.abs(poison.deltas).max()) if k else 0.0,
    }
    if config is not None:
        cfg = dataclasses.asdict(config)
        cfg["step_size"] = config.resolved_step_size()
        manifest["config"] = cfg
        manifest["seed"] = config.seed
    with open(str(path) + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_poisons(path):
    """Read a poison export; returns (eps, budget, (h, w, c), [(id, delta)])."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a poison export (magic {magic!r})")
        version, h, w, c, eps, budget, k = _HEADER.unpack(fh.read(_HEADER.size))
        if version != _VERSION:
            raise ValueError(f"unsupported poison export version {version}")
        pairs = []
        for _ in range(k):
            raw = fh.read(8 + h * w * c * 8)
            if len(raw) != 8 + h * w * c * 8:
                raise ValueError("poison export truncated")
            (rid,) = struct.unpack("<q", raw[:8])
            delta = np.frombuffer(raw[8:], dtype="<f8").reshape(h, w, c)
            pairs.append((rid, delta.astype(dc.default_dtype())))
    return eps, budget, (h, w, c), pairs


def apply_poison_file(dataset: datapipe.Dataset, path) -> datapipe.Dataset:
    """Re-apply an exported poison set to a compatible dataset."""
    eps, _, dims, pairs = load_poisons(path)
    eps_scaled = eps / 255.0
    updates = {}
    for rid, delta in pairs:
        row = dataset.by_id(rid)
        if row.pixels.shape != dims:
            raise ValueError(f"row {rid}: dataset shape {row.pixels.shape} != export {dims}")
        _, px = project_linf(delta, eps_scaled, row.pixels)
        updates[rid] = px
    return datapipe.replace_pixels(dataset, updates)
