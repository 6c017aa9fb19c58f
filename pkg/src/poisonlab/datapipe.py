"""Datasets: synthetic multi-view rendering, record IO, augmentation.

The synthetic generator rasterizes one filled 2-D shape per class (ellipse,
box, triangle, cross, ring, bar) with per-instance color, size, aspect and
center jitter, on a noisy background with a multiplicative lighting factor in
[0.6, 1.4].  Rotating a shape over 360 degrees stands in for a camera orbit:
one designated instance becomes the target and is rendered at
``variant_count`` evenly spaced angles, a ``known_count`` subset of which is
handed to the attacker.

Augmentation (horizontal flip, zero-pad, random crop) is expressed as an
index map into the padded image, so the same selection can be replayed as a
differentiable gather on the crafting tape.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

_SHAPE_KINDS = ("ellipse", "ring", "box", "triangle", "cross", "bar")
_SUPERSAMPLE = 3


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (h, w, c) float in [0, 1]
    label: int
    id: int
    viewpoint: float | None = None


@dataclass
class Dataset:
    images: list
    num_classes: int

    def __post_init__(self):
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("dataset row ids must be unique")
        for im in self.images:
            if not (0 <= im.label < self.num_classes):
                raise ValueError(f"label {im.label} out of range for row {im.id}")
            lo, hi = float(im.pixels.min()), float(im.pixels.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"pixels outside [0, 1] in row {im.id}")

    def __len__(self):
        return len(self.images)

    def ids(self):
        return [im.id for im in self.images]

    def stack_pixels(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.images])

    def labels(self) -> np.ndarray:
        return np.array([im.label for im in self.images], dtype=np.int64)

    def by_id(self, row_id: int) -> LabeledImage:
        for im in self.images:
            if im.id == row_id:
                return im
        raise KeyError(f"no row with id {row_id}")


def replace_pixels(dataset: Dataset, new_pixels: dict) -> Dataset:
    """New dataset with the given rows' pixels swapped; labels and ids stay."""
    missing = set(new_pixels) - set(dataset.ids())
    if missing:
        raise KeyError(f"unknown row ids {sorted(missing)}")
    rows = []
    for im in dataset.images:
        if im.id in new_pixels:
            rows.append(LabeledImage(np.array(new_pixels[im.id]), im.label, im.id, im.viewpoint))
        else:
            rows.append(im)
    return Dataset(rows, dataset.num_classes)


@dataclass
class TargetSpec:
    """One attacked object: adversarial label plus known/held-out variants."""

    y_adv: int
    known: list
    heldout: list

    def __post_init__(self):
        if len(self.known) < 1:
            raise ValueError("need at least one known variant")
        if len(self.heldout) < 1:
            raise ValueError("need at least one held-out variant")
        ids = [im.id for im in self.known] + [im.id for im in self.heldout]
        if len(set(ids)) != len(ids):
            raise ValueError("known and held-out variants must be disjoint")
        for im in self.known + self.heldout:
            if im.label == self.y_adv:
                raise ValueError("a target variant carries the adversarial label")

    def all_variants(self):
        return list(self.known) + list(self.heldout)

    def variant_count(self) -> int:
        return len(self.known) + len(self.heldout)


# --- synthetic rendering ---------------------------------------------------

@dataclass
class _Instance:
    kind: str
    size: float
    aspect: float
    color: np.ndarray
    cx: float
    cy: float


def _draw_instance(rng, class_index: int) -> _Instance:
    kind = _SHAPE_KINDS[class_index % len(_SHAPE_KINDS)]
    # saturated colors: one strong, one middling, one weak channel per
    # instance, so hue is a stable identity cue across views and lighting
    color = np.array([rng.uniform(0.75, 1.0), rng.uniform(0.30, 0.70),
                      rng.uniform(0.02, 0.30)])
    rng.shuffle(color)
    return _Instance(
        kind=kind,
        size=float(rng.uniform(0.26, 0.40)),
        aspect=float(rng.uniform(0.45, 0.75)),
        color=color,
        cx=float(rng.uniform(-0.06, 0.06)),
        cy=float(rng.uniform(-0.06, 0.06)),
    )


def _shape_mask(inst: _Instance, angle_deg: float, res: int) -> np.ndarray:
    n = res * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n - 0.5
    xg, yg = np.meshgrid(coords, coords, indexing="xy")
    t = np.deg2rad(angle_deg)
    xr = np.cos(t) * (xg - inst.cx) + np.sin(t) * (yg - inst.cy)
    yr = -np.sin(t) * (xg - inst.cx) + np.cos(t) * (yg - inst.cy)
    s, a = inst.size, inst.aspect
    if inst.kind == "ellipse":
        member = (xr / s) ** 2 + (yr / (s * a)) ** 2 <= 1.0
    elif inst.kind == "box":
        member = (np.abs(xr) <= s) & (np.abs(yr) <= s * a)
    elif inst.kind == "triangle":
        member = (xr >= -s) & (xr <= s) & (np.abs(yr) <= a * (s - xr) / 2.0)
    elif inst.kind == "cross":
        arm = s * a * 0.45
        member = ((np.abs(xr) <= s) & (np.abs(yr) <= arm)) | (
            (np.abs(yr) <= s) & (np.abs(xr) <= arm))
    elif inst.kind == "ring":
        rr = np.sqrt(xr ** 2 + yr ** 2)
        member = (rr <= s) & (rr >= s * (1.0 - 0.55 * a))
    elif inst.kind == "bar":
        member = (np.abs(xr) <= s) & (np.abs(yr) <= s * a * 0.25)
    else:  # pragma: no cover
        raise ValueError(f"unknown shape kind {inst.kind}")
    mask = member.astype(np.float64)
    return mask.reshape(res, _SUPERSAMPLE, res, _SUPERSAMPLE).mean(axis=(1, 3))


def _render(inst: _Instance, angle_deg: float, res: int, channels: int, rng,
            noise: float) -> np.ndarray:
    base = rng.uniform(0.06, 0.32)
    bg = base + rng.uniform(-noise, noise, size=(res, res, channels))
    mask = _shape_mask(inst, angle_deg, res)[:, :, None]
    color = inst.color[:channels][None, None, :]
    img = bg * (1.0 - mask) + color * mask
    light = rng.uniform(0.6, 1.4)
    return np.clip(img * light, 0.0, 1.0)


def known_view_indices(variant_count: int, known_count: int, mode: str,
                       start: int = 0) -> list:
    """Which of the ordered variants the attacker sees.

    ``interleaved`` takes every floor(M/m)-th view; ``contiguous`` takes an
    arc of m consecutive views beginning at ``start`` (wrapping).
    """
    if not (1 <= known_count < variant_count):
        raise ValueError("need 1 <= known_count < variant_count")
    if mode == "interleaved":
        step = variant_count // known_count
        return [i * step for i in range(known_count)]
    if mode == "contiguous":
        return [(start + i) % variant_count for i in range(known_count)]
    raise ValueError(f"unknown known-view mode {mode!r}")


def generate_multiview(seed: int, class_count: int, per_class: int,
                       target_class: int, variant_count: int,
                       known_count: int, image_size: int = 18,
                       channels: int = 3, known_mode: str = "interleaved",
                       contiguous_start: int = 0, y_adv: int | None = None,
                       noise: float = 0.10):
    """Render a training set plus one multi-view target instance.

    Returns ``(dataset, target_spec)``.  The target's views never enter the
    training set; ids are disjoint by construction.
    """
    if not (2 <= class_count <= len(_SHAPE_KINDS)):
        raise ValueError(f"class_count must be in [2, {len(_SHAPE_KINDS)}]")
    if not (0 <= target_class < class_count):
        raise ValueError("target_class out of range")
    if y_adv is None:
        y_adv = (target_class + 1) % class_count
    if y_adv == target_class:
        raise ValueError("adversarial label must differ from the target's label")

    rng = np.random.default_rng(seed)
    rows, next_id = [], 0
    for cls in range(class_count):
        for _ in range(per_class):
            inst = _draw_instance(rng, cls)
            angle = float(rng.uniform(0.0, 360.0))
            rows.append(LabeledImage(
                _render(inst, angle, image_size, channels, rng, noise),
                cls, next_id, viewpoint=angle))
            next_id += 1
    dataset = Dataset(rows, class_count)

    target_inst = _draw_instance(rng, target_class)
    angles = np.linspace(0.0, 360.0, variant_count, endpoint=False)
    variants = [
        LabeledImage(_render(target_inst, float(a), image_size, channels, rng, noise),
                     target_class, 1_000_000 + i, viewpoint=float(a))
        for i, a in enumerate(angles)
    ]
    known_idx = set(known_view_indices(variant_count, known_count, known_mode,
                                       contiguous_start))
    known = [v for i, v in enumerate(variants) if i in known_idx]
    heldout = [v for i, v in enumerate(variants) if i not in known_idx]
    return dataset, TargetSpec(y_adv=y_adv, known=known, heldout=heldout)


# --- binary record IO -------------------------------------------------------

def load_records(path, height: int, width: int, channels: int,
                 num_classes: int) -> Dataset:
    """Read label-byte plus channel-plane records; rejects truncation."""
    raw = np.fromfile(path, dtype=np.uint8)
    rec = 1 + height * width * channels
    count, tail = divmod(raw.size, rec)
    if tail:
        raise ValueError(
            f"truncated record: file ends {tail} bytes into the record at byte offset {count * rec}")
    if count == 0:
        raise ValueError("no records in file")
    rows = []
    for i in range(count):
        chunk = raw[i * rec:(i + 1) * rec]
        label = int(chunk[0])
        if label >= num_classes:
            raise ValueError(f"record {i}: label byte {label} out of range for {num_classes} classes")
        planes = chunk[1:].reshape(channels, height, width)
        pixels = planes.transpose(1, 2, 0).astype(np.float64) / 255.0
        rows.append(LabeledImage(pixels, label, i, viewpoint=float(i)))
    return Dataset(rows, num_classes)


def load_cifar_binary(path, num_classes: int = 10) -> Dataset:
    """CIFAR-style binary: 1 label byte + 3072 pixel bytes per record."""
    return load_records(path, 32, 32, 3, num_classes)


def save_records(dataset: Dataset, path) -> None:
    """Inverse of :func:`load_records` at the dataset's own resolution."""
    with open(path, "wb") as fh:
        for im in dataset.images:
            if im.label > 255:
                raise ValueError("labels above 255 cannot be stored in one byte")
            fh.write(bytes([im.label]))
            q = np.floor(im.pixels * 255.0 + 0.5).astype(np.uint8)
            fh.write(q.transpose(2, 0, 1).tobytes())


# --- PPM variant folders ----------------------------------------------------

def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise ValueError(f"{path}: incomplete PPM header")
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if data.size < w * h * 3:
        raise ValueError(f"{path}: pixel data truncated")
    return data[:w * h * 3].reshape(h, w, 3).astype(np.float64) / 255.0


def _resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(height) + 0.5) * h / height, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(width) + 0.5) * w / width, w - 1).astype(np.int64)
    return img[rows][:, cols]


def load_variant_folder(folder, resolution, true_label: int) -> list:
    """Load ``<angle>_<scene>.ppm`` target variants, sorted by angle."""
    names = sorted(n for n in os.listdir(folder) if n.endswith(".ppm"))
    if not names:
        raise ValueError(f"no .ppm files in {folder}")
    variants = []
    for i, name in enumerate(names):
        m = re.match(r"^(-?\d+(?:\.\d+)?)_.+\.ppm$", name)
        if not m:
            raise ValueError(f"cannot parse viewpoint angle from filename {name!r}")
        angle = float(m.group(1))
        img = _resize_nearest(_read_ppm(os.path.join(folder, name)), *resolution)
        variants.append(LabeledImage(img, true_label, 2_000_000 + i, viewpoint=angle))
    variants.sort(key=lambda im: im.viewpoint)
    return variants


# --- augmentation -----------------------------------------------------------

@dataclass
class AugmentPolicy:
    enabled: bool = True
    flip_prob: float = 0.5
    pad: int = 4

    def __post_init__(self):
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must be in [0, 1]")
        if self.pad < 0:
            raise ValueError("pad must be non-negative")


def batch_augment_indices(batch: int, h: int, w: int, c: int,
                          policy: AugmentPolicy, rng) -> np.ndarray:
    """Flat gather indices, shape (batch, h*w*c), into the zero-padded batch.

    Encodes flip-then-pad-then-crop as one selection map; replaying the map
    as a tape gather keeps the transform differentiable for fixed randomness.
    """
    p = policy.pad
    hp, wp = h + 2 * p, w + 2 * p
    flips = rng.random(batch) < policy.flip_prob
    oys = rng.integers(0, 2 * p + 1, size=batch)
    oxs = rng.integers(0, 2 * p + 1, size=batch)
    rows = oys[:, None] + np.arange(h)[None, :]                  # (B, h)
    cols = oxs[:, None] + np.arange(w)[None, :]                  # (B, w)
    cols = np.where(flips[:, None], wp - 1 - cols, cols)
    plane = rows[:, :, None] * wp + cols[:, None, :]             # (B, h, w)
    idx = plane[:, :, :, None] * c + np.arange(c)[None, None, None, :]
    idx = idx + (np.arange(batch) * (hp * wp * c))[:, None, None, None]
    return idx.reshape(batch, h * w * c)


def augment_batch(pixels: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    """Apply the policy to a (B, h, w, c) stack of images."""
    if not policy.enabled:
        return pixels
    b, h, w, c = pixels.shape
    p = policy.pad
    padded = np.pad(pixels, ((0, 0), (p, p), (p, p), (0, 0)))
    idx = batch_augment_indices(b, h, w, c, policy, rng)
    return padded.ravel()[idx].reshape(b, h, w, c)


def augment(image: LabeledImage, policy: AugmentPolicy, rng) -> LabeledImage:
    """Augment one image; label, id and viewpoint are untouched."""
    if not policy.enabled:
        return image
    out = augment_batch(image.pixels[None], policy, rng)[0]
    return LabeledImage(out, image.label, image.id, image.viewpoint)
