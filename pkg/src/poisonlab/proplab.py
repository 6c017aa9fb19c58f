"""Numerical laboratory for the magnitude-aware matching guarantee.

The claim under test: suppose two candidate update directions share the same
cosine level c > 0 with a reference gradient g_t,

    cos(g_t, g_our) = cos(g_t, g_cos) = c,

the first is closer in Euclidean distance, and the second is short,
norm(g_cos) < c * norm(g_t).  Then for every probe gradient g = g_t + d with

    norm(d) < <g_t, g_our - g_cos> / norm(g_our - g_cos),

one descent step along g_our reduces the probe's loss more than a step along
g_cos, to first order: <g, g_our> > <g, g_cos>.  In the collinear case c = 1
the radius simplifies to c * norm(g_t).

This module constructs instances satisfying the hypotheses, samples probes
inside the admissible ball, checks the linearized inequality exactly, probes
the boundary for tightness, and replays the claim on a real tiny model with
actual parameter steps and Taylor-remainder accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc, models

_HYP_TOL = 1e-9


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


@dataclass
class PropInstance:
    """One hypothesis-satisfying triple plus step bookkeeping."""

    g_t: np.ndarray
    g_our: np.ndarray
    g_cos: np.ndarray
    c: float
    eta: float = 1e-3
    remainder_budget: float = 0.1

    def __post_init__(self):
        self.g_t = np.asarray(self.g_t, dtype=np.float64)
        self.g_our = np.asarray(self.g_our, dtype=np.float64)
        self.g_cos = np.asarray(self.g_cos, dtype=np.float64)
        if not (0.0 < self.c <= 1.0):
            raise ValueError("cosine level c must lie in (0, 1]")
        if self.eta <= 0:
            raise ValueError("step size eta must be positive")
        if self.remainder_budget <= 0:
            raise ValueError("remainder budget must be positive")
        if abs(_cosine(self.g_t, self.g_our) - self.c) > _HYP_TOL:
            raise ValueError("hypothesis violated: cos(g_t, g_our) != c")
        if abs(_cosine(self.g_t, self.g_cos) - self.c) > _HYP_TOL:
            raise ValueError("hypothesis violated: cos(g_t, g_cos) != c")
        if not (np.linalg.norm(self.g_t - self.g_our)
                < np.linalg.norm(self.g_t - self.g_cos)):
            raise ValueError("hypothesis violated: g_our is not the closer gradient")
        if not (np.linalg.norm(self.g_cos) < self.c * np.linalg.norm(self.g_t)):
            raise ValueError("hypothesis violated: norm(g_cos) >= c * norm(g_t)")


@dataclass
class NeighborSample:
    """A probe gradient g_t + delta at distance radius from g_t."""

    delta: np.ndarray
    radius: float = field(init=False)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.radius = float(np.linalg.norm(self.delta))


def _orthonormal_to(u: np.ndarray, rng) -> np.ndarray:
    """A unit vector orthogonal to unit vector u."""
    for _ in range(64):
        v = rng.standard_normal(u.size)
        v -= np.dot(v, u) * u
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n
    raise RuntimeError("failed to draw an orthogonal direction")


def _on_cone(u: np.ndarray, v: np.ndarray, c: float, length: float) -> np.ndarray:
    """A vector of the given length at cosine c from u, tilted toward v."""
    return length * (c * u + np.sqrt(max(0.0, 1.0 - c * c)) * v)


def build_instance(dimension: int, c: float, ratio: float, seed: int,
                   q: float = 1.0, eta: float = 1e-3,
                   remainder_budget: float = 0.1,
                   shared_tilt: bool = False) -> PropInstance:
    """Random instance: g_cos and g_our on the cosine-c cone around g_t.

    ``ratio`` = norm(g_cos) / (c * norm(g_t)) must lie in (0, 1) so the
    short-gradient hypothesis holds; ``q`` = norm(g_our) / (c * norm(g_t))
    must lie in (ratio, 2 - ratio) so g_our is strictly closer to g_t.
    With ``shared_tilt`` both candidates sit on the same cone ray, the
    collinear case where the admissible radius collapses to c * norm(g_t).
    """
    if dimension < 3:
        raise ValueError("need dimension >= 3 for two independent tilts")
    if not (0.0 < c <= 1.0):
        raise ValueError("cosine level c must lie in (0, 1]")
    if not (0.0 < ratio < 1.0):
        raise ValueError("magnitude ratio must lie in (0, 1)")
    if not (ratio < q < 2.0 - ratio):
        raise ValueError(
            f"q={q} violates the distance hypothesis; need {ratio} < q < {2.0 - ratio}")
    rng = np.random.default_rng(seed)
    g_t = rng.standard_normal(dimension)
    g_t *= 10.0 ** rng.uniform(-1, 1)
    u = g_t / np.linalg.norm(g_t)
    v_cos = _orthonormal_to(u, rng)
    v_our = v_cos if shared_tilt else _orthonormal_to(u, rng)
    level = c * float(np.linalg.norm(g_t))
    g_cos = _on_cone(u, v_cos, c, ratio * level)
    g_our = _on_cone(u, v_our, c, q * level)
    return PropInstance(g_t, g_our, g_cos, c, eta=eta,
                        remainder_budget=remainder_budget)


def admissible_radius(inst: PropInstance) -> float:
    """Largest probe distance the guarantee covers."""
    d = inst.g_our - inst.g_cos
    nd = float(np.linalg.norm(d))
    if nd < 1e-15:
        raise ValueError("g_our == g_cos: admissible ball undefined")
    return float(np.dot(inst.g_t, d) / nd)


def key_identity_gap(inst: PropInstance) -> float:
    """| <g_t, g_our-g_cos> - c*norm(g_t)*(norm(g_our)-norm(g_cos)) |."""
    lhs = float(np.dot(inst.g_t, inst.g_our - inst.g_cos))
    rhs = inst.c * float(np.linalg.norm(inst.g_t)) * (
        float(np.linalg.norm(inst.g_our)) - float(np.linalg.norm(inst.g_cos)))
    return abs(lhs - rhs)


def sample_probes(inst: PropInstance, count: int, seed: int,
                  radius: float | None = None) -> list:
    """Uniform samples in the ball: Gaussian direction, U^(1/dim) radius."""
    r = admissible_radius(inst) if radius is None else float(radius)
    rng = np.random.default_rng(seed)
    n = inst.g_t.size
    probes = []
    for _ in range(count):
        direction = rng.standard_normal(n)
        direction /= np.linalg.norm(direction)
        mag = r * rng.random() ** (1.0 / n)
        probes.append(NeighborSample(mag * direction))
    return probes


def directional_probe(inst: PropInstance, margin: float) -> NeighborSample:
    """The worst-case probe direction -(g_our - g_cos), scaled.

    ``margin`` < 0 places the probe just inside the admissible ball,
    ``margin`` > 0 just outside; the linearized inequality flips sign
    across the boundary along this direction.
    """
    d = inst.g_our - inst.g_cos
    unit = d / np.linalg.norm(d)
    rho = admissible_radius(inst) * (1.0 + margin)
    return NeighborSample(-rho * unit)


@dataclass
class ProbeVerdict:
    in_ball: bool
    holds: bool
    margin: float  # <g, g_our - g_cos>, positive iff the inequality holds


def verify_linearized(inst: PropInstance, probes) -> list:
    """Exact first-order check per probe; out-of-ball probes are flagged."""
    r = admissible_radius(inst)
    d = inst.g_our - inst.g_cos
    out = []
    for p in probes:
        g = inst.g_t + p.delta
        gap = float(np.dot(g, d))
        out.append(ProbeVerdict(in_ball=p.radius < r, holds=gap > 0.0, margin=gap))
    return out


# --- replay on a real model -----------------------------------------------------

@dataclass
class ModelProbeRow:
    radius: float
    in_ball: bool
    loss_our: float
    loss_cos: float
    ordered: bool
    remainder_ratio: float
    conclusive: bool


@dataclass
class ModelVerdict:
    eta: float
    rows: list

    @property
    def in_ball_rows(self):
        return [r for r in self.rows if r.in_ball]

    @property
    def ordered_fraction(self) -> float:
        """Fraction of conclusive in-ball probes with the predicted ordering."""
        rows = [r for r in self.in_ball_rows if r.conclusive]
        if not rows:
            return 0.0
        return sum(r.ordered for r in rows) / len(rows)


def instance_from_model(state: models.ModelState, images: np.ndarray,
                        y_adv: int, c: float = 0.9, ratio: float = 0.5,
                        q: float = 1.0, seed: int = 0, eta: float = 1e-3,
                        remainder_budget: float = 0.1) -> PropInstance:
    """Cone construction in the parameter space of a real model.

    g_t is the model's actual mean gradient on (images, y_adv); g_cos and
    g_our are synthetic directions placed around it, so probe distances
    measured against model gradients are meaningful.
    """
    labels = np.full(len(images), y_adv, dtype=np.int64)
    _, grads = models.loss_and_param_grads(state, images, labels)
    g_t = models.flatten_params(grads)
    norm = float(np.linalg.norm(g_t))
    if norm < 1e-12:
        raise ValueError("model target gradient is numerically zero")
    rng = np.random.default_rng(seed)
    u = g_t / norm
    v_cos = _orthonormal_to(u, rng)
    v_our = _orthonormal_to(u, rng)
    level = c * norm
    g_cos = _on_cone(u, v_cos, c, ratio * level)
    g_our = _on_cone(u, v_our, c, q * level)
    return PropInstance(g_t, g_our, g_cos, c, eta=eta,
                        remainder_budget=remainder_budget)


def _loss_on(state: models.ModelState, image: np.ndarray, label: int) -> float:
    logits = models.logits_of(state, image[None])
    t = dc.cross_entropy(dc.constant(logits), np.array([label], dtype=np.int64))
    return float(t.data)


def _stepped(state: models.ModelState, direction: np.ndarray, eta: float):
    stepped = state.copy()
    parts = models.unflatten_params(state.spec, direction)
    for p, d in zip(stepped.params, parts):
        p -= eta * d
    return stepped


def verify_on_model(state: models.ModelState, inst: PropInstance,
                    probe_images: np.ndarray, y_adv: int,
                    eta: float | None = None) -> ModelVerdict:
    """One real step along g_our vs g_cos; compare true losses per probe.

    Probes are images; a probe participates when its parameter gradient lies
    inside the admissible ball around g_t.  The Taylor remainder of each
    side is recorded; a probe whose remainder exceeds the instance's budget
    (relative to the first-order term) is reported as inconclusive rather
    than as a failure.
    """
    eta = inst.eta if eta is None else float(eta)
    r = admissible_radius(inst)
    ours = _stepped(state, inst.g_our, eta)
    coss = _stepped(state, inst.g_cos, eta)
    rows = []
    for image in probe_images:
        lab = np.array([y_adv], dtype=np.int64)
        _, grads = models.loss_and_param_grads(state, image[None], lab)
        g_x = models.flatten_params(grads)
        radius = float(np.linalg.norm(g_x - inst.g_t))
        base = _loss_on(state, image, y_adv)
        l_our = _loss_on(ours, image, y_adv)
        l_cos = _loss_on(coss, image, y_adv)
        fo_our = -eta * float(np.dot(g_x, inst.g_our))
        fo_cos = -eta * float(np.dot(g_x, inst.g_cos))
        rem_our = (l_our - base) - fo_our
        rem_cos = (l_cos - base) - fo_cos
        floor = 1e-18
        ratio = max(abs(rem_our) / max(abs(fo_our), floor),
                    abs(rem_cos) / max(abs(fo_cos), floor))
        rows.append(ModelProbeRow(
            radius=radius,
            in_ball=radius < r,
            loss_our=l_our,
            loss_cos=l_cos,
            ordered=l_our < l_cos,
            remainder_ratio=ratio,
            conclusive=bool(eta > 0 and ratio < inst.remainder_budget),
        ))
    return ModelVerdict(eta=eta, rows=rows)


# --- Monte-Carlo driver -----------------------------------------------------------

def run_trials(dimension: int = 50, instances: int = 100, probes: int = 100,
               seed: int = 0, collinear: bool = False,
               radius_tol: float = 1e-9) -> dict:
    """Randomized campaign over constructed instances.

    For every instance: all in-ball probes must satisfy the linearized
    inequality, and a probe placed just outside the ball along the worst-case
    direction must violate it (tightness witness).  With ``collinear`` each
    instance also gets a shared-tilt sibling whose admissible radius must
    equal c * norm(g_t) within ``radius_tol``.
    """
    if instances < 0 or probes < 0:
        raise ValueError("instances and probes must be non-negative")
    rng = np.random.default_rng(seed)
    passes = 0
    total = 0
    witnesses = 0
    max_identity_gap = 0.0
    collinear_rows = []
    for i in range(instances):
        c = float(rng.uniform(0.05, 0.95))
        ratio = float(rng.uniform(0.1, 0.85))
        q = float(rng.uniform(ratio + 0.05, 2.0 - ratio - 0.05))
        inst_seed = int(rng.integers(0, 2**63 - 1))
        inst = build_instance(dimension, c, ratio, inst_seed, q=q)
        scale = float(np.linalg.norm(inst.g_t)) ** 2
        max_identity_gap = max(max_identity_gap,
                               key_identity_gap(inst) / max(scale, 1e-30))
        batch = sample_probes(inst, probes, seed=inst_seed + 1)
        for verdict in verify_linearized(inst, batch):
            total += 1
            if verdict.in_ball and verdict.holds:
                passes += 1
        outside = directional_probe(inst, margin=1e-3)
        if not verify_linearized(inst, [outside])[0].holds:
            witnesses += 1
        if collinear:
            sib = build_instance(dimension, c, ratio, inst_seed, q=q,
                                 shared_tilt=True)
            want = sib.c * float(np.linalg.norm(sib.g_t))
            err = abs(admissible_radius(sib) - want)
            collinear_rows.append(err)
    summary = {
        "dimension": dimension,
        "instances": instances,
        "probes_per_instance": probes,
        "total_probes": total,
        "passes": passes,
        "pass_rate": 1.0 if total == 0 else passes / total,
        "tightness_witnesses": witnesses,
        "witness_rate": 1.0 if instances == 0 else witnesses / instances,
        "max_scaled_identity_gap": max_identity_gap,
        "seed": seed,
    }
    if collinear:
        worst = max(collinear_rows) if collinear_rows else 0.0
        summary["collinear"] = {
            "instances": len(collinear_rows),
            "max_radius_error": worst,
            "all_within_tolerance": bool(worst <= radius_tol),
        }
    return summary
