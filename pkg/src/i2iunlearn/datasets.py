"""Procedural labeled image dataset, class-disjoint splits and manifests."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, derive_seed

IMAGE_SIZE = 32
SHAPE_KINDS = ("disk", "square", "cross", "stripe")
MANIFEST_VERSION = 1
IDX_MAGIC = 0x00000803

# texture variants per shape kind: (cycles/image, orientation, base intensity)
_FREQS = (2.0, 3.5, 5.0)
_INTENSITIES = (0.55, 0.95)
_ORIENT_STEP = math.pi / 5


@dataclass(frozen=True)
class ShapeTexClass:
    class_id: int
    shape_kind: str
    texture_freq: float
    orientation: float
    base_intensity: float

    def key(self):
        return (self.shape_kind, round(self.texture_freq, 9),
                round(self.orientation % math.pi, 9), round(self.base_intensity, 9))


@dataclass
class Dataset:
    images: np.ndarray            # [N, 1, 32, 32] in [0, 1]
    labels: np.ndarray            # [N] int64
    classes: list
    seed: int
    samples_per_class: int
    jitter: float

    @property
    def num_classes(self):
        return len(self.classes)

    def indices_of(self, class_ids):
        return np.flatnonzero(np.isin(self.labels, list(class_ids)))


@dataclass(frozen=True)
class SplitSpec:
    retain_classes: tuple
    forget_classes: tuple
    proxy_classes: tuple
    samples_per_class: int
    heldout_per_class: int = 16

    def __post_init__(self):
        sets = [set(self.retain_classes), set(self.forget_classes), set(self.proxy_classes)]
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise ValueError("retain/forget/proxy class sets must be pairwise disjoint")


@dataclass
class Splits:
    spec: SplitSpec
    seed: int
    num_classes: int
    retain: np.ndarray
    forget: np.ndarray
    proxy: np.ndarray
    heldout: np.ndarray
    heldout_by_split: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Splits):
            return NotImplemented
        same = (self.spec == other.spec and self.seed == other.seed
                and self.num_classes == other.num_classes)
        return same and all(np.array_equal(getattr(self, k), getattr(other, k))
                            for k in ("retain", "forget", "proxy", "heldout"))


def class_catalog(num_classes):
    """Deterministic class definitions; raises on parameter collisions."""
    capacity = len(SHAPE_KINDS) * len(_FREQS) * len(_INTENSITIES)
    if num_classes > capacity:
        raise ValueError(f"at most {capacity} distinct classes, asked for {num_classes}")
    out, seen = [], set()
    for c in range(num_classes):
        kind = SHAPE_KINDS[c % 4]
        variant = c // 4
        cls = ShapeTexClass(
            class_id=c,
            shape_kind=kind,
            texture_freq=_FREQS[variant % len(_FREQS)],
            orientation=(variant * _ORIENT_STEP + (c % 4) * math.pi / 13) % math.pi,
            base_intensity=_INTENSITIES[(variant // len(_FREQS)) % len(_INTENSITIES)],
        )
        if cls.key() in seen:
            raise ValueError(f"class {c} duplicates an earlier class definition")
        seen.add(cls.key())
        out.append(cls)
    return out


def _grid():
    ax = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE * 2.0 - 1.0
    return np.meshgrid(ax, ax, indexing="xy")


_U, _V = _grid()


def render(cls, dx=0.0, dy=0.0, dtheta=0.0, dint=0.0, phase=0.0):
    theta = cls.orientation + dtheta
    u, v = _U - dx, _V - dy
    ct, st = math.cos(theta), math.sin(theta)
    ru, rv = ct * u + st * v, -st * u + ct * v
    wave = 0.5 + 0.5 * np.cos(2 * math.pi * cls.texture_freq * 0.5 * ru + phase)
    intensity = min(max(cls.base_intensity + dint, 0.0), 1.0)
    background = intensity * wave
    if cls.shape_kind == "disk":
        inside = u * u + v * v < 0.62 ** 2
    elif cls.shape_kind == "square":
        inside = np.maximum(np.abs(ru), np.abs(rv)) < 0.55
    elif cls.shape_kind == "cross":
        inside = ((np.abs(ru) < 0.2) | (np.abs(rv) < 0.2)) & (np.maximum(np.abs(ru), np.abs(rv)) < 0.8)
    else:
        inside = np.abs(rv) < 0.3
    img = np.where(inside, 1.0 - 0.8 * wave, background)
    return np.clip(img, 0.0, 1.0)


def gen_dataset(num_classes=24, samples_per_class=80, jitter=1.0, seed=0):
    """Render ``samples_per_class`` jittered images of each class.

    The result is a pure function of the arguments.
    """
    if num_classes < 4:
        raise ValueError("num_classes must be >= 4")
    if samples_per_class < 8:
        raise ValueError("samples_per_class must be >= 8")
    classes = class_catalog(num_classes)
    rng = Rng(derive_seed(seed, "dataset"))
    n = num_classes * samples_per_class
    images = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    jit = rng.gen.uniform(-1.0, 1.0, size=(n, 5)) * jitter
    for i in range(n):
        dx, dy, dth, dint, ph = jit[i]
        images[i, 0] = render(classes[labels[i]], dx=0.12 * dx, dy=0.12 * dy,
                              dtheta=0.15 * dth, dint=0.08 * dint, phase=0.6 * ph)
    return Dataset(images, labels, classes, int(seed), samples_per_class, float(jitter))


def make_splits(dataset, spec):
    """Class-disjoint retain/forget/proxy training indices plus per-class heldout."""
    all_ids = set(range(dataset.num_classes))
    for name in ("retain_classes", "forget_classes", "proxy_classes"):
        missing = set(getattr(spec, name)) - all_ids
        if missing:
            raise ValueError(f"{name} not in dataset: {sorted(missing)}")
    need = spec.samples_per_class + spec.heldout_per_class
    if need > dataset.samples_per_class:
        raise ValueError(f"{need} images per class requested, dataset has {dataset.samples_per_class}")
    rng = Rng(derive_seed(dataset.seed, "heldout"))
    train, heldout = {}, []
    for c in sorted(set(spec.retain_classes) | set(spec.forget_classes) | set(spec.proxy_classes)):
        idx = np.flatnonzero(dataset.labels == c)
        perm = idx[rng.gen.permutation(idx.size)]
        held = np.sort(perm[: spec.heldout_per_class])
        heldout.append(held)
        train[c] = np.sort(perm[spec.heldout_per_class: need])

    def gather(cs):
        parts = [train[c] for c in sorted(cs)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    splits = Splits(
        spec=spec, seed=dataset.seed, num_classes=dataset.num_classes,
        retain=gather(spec.retain_classes), forget=gather(spec.forget_classes),
        proxy=gather(spec.proxy_classes), heldout=np.sort(np.concatenate(heldout)),
    )
    _attach_heldout(splits, dataset.labels)
    return splits


def _attach_heldout(splits, labels):
    held = splits.heldout
    for name, cs in (("retain", splits.spec.retain_classes),
                     ("forget", splits.spec.forget_classes),
                     ("proxy", splits.spec.proxy_classes)):
        splits.heldout_by_split[name] = held[np.isin(labels[held], list(cs))]


def default_split_spec(num_classes=24, per_group=8, samples_per_class=64, heldout_per_class=16, seed=0):
    """Random class-disjoint groups of ``per_group`` classes each."""
    if 3 * per_group > num_classes:
        raise ValueError("not enough classes for three disjoint groups")
    perm = Rng(derive_seed(seed, "classes")).gen.permutation(num_classes)
    groups = [tuple(sorted(int(c) for c in perm[i * per_group:(i + 1) * per_group])) for i in range(3)]
    return SplitSpec(*groups, samples_per_class=samples_per_class, heldout_per_class=heldout_per_class)


def save_manifest(splits, path, jitter=1.0, dataset_samples_per_class=None):
    doc = {
        "version": MANIFEST_VERSION,
        "seed": splits.seed,
        "num_classes": splits.num_classes,
        "samples_per_class": splits.spec.samples_per_class,
        "heldout_per_class": splits.spec.heldout_per_class,
        "dataset_samples_per_class": dataset_samples_per_class
        or splits.spec.samples_per_class + splits.spec.heldout_per_class,
        "jitter": jitter,
        "retain_classes": list(splits.spec.retain_classes),
        "forget_classes": list(splits.spec.forget_classes),
        "proxy_classes": list(splits.spec.proxy_classes),
        "retain_indices": splits.retain.tolist(),
        "forget_indices": splits.forget.tolist(),
        "proxy_indices": splits.proxy.tolist(),
        "heldout_indices": splits.heldout.tolist(),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    """Inverse of :func:`save_manifest`; returns ``(splits, extras)``."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version in {path}")
    try:
        spec = SplitSpec(tuple(doc["retain_classes"]), tuple(doc["forget_classes"]),
                         tuple(doc["proxy_classes"]), doc["samples_per_class"],
                         doc["heldout_per_class"])
        splits = Splits(spec=spec, seed=doc["seed"], num_classes=doc["num_classes"],
                        retain=np.asarray(doc["retain_indices"], dtype=np.int64),
                        forget=np.asarray(doc["forget_indices"], dtype=np.int64),
                        proxy=np.asarray(doc["proxy_indices"], dtype=np.int64),
                        heldout=np.asarray(doc["heldout_indices"], dtype=np.int64))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed manifest {path}: {exc}") from exc
    extras = {"jitter": doc.get("jitter", 1.0),
              "dataset_samples_per_class": doc.get("dataset_samples_per_class")}
    return splits, extras


def regenerate(splits, extras):
    """Rebuild the dataset a manifest was written from."""
    ds = gen_dataset(splits.num_classes, extras["dataset_samples_per_class"],
                     extras["jitter"], splits.seed)
    _attach_heldout(splits, ds.labels)
    return ds


def read_idx_images(path):
    """Read an IDX unsigned-byte image file into ``[N, 1, H, W]`` floats in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_MAGIC:
        raise ValueError(f"{path}: bad IDX magic {magic:#010x}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if body.size != n * h * w:
        raise ValueError(f"{path}: expected {n * h * w} pixels, found {body.size}")
    return body.reshape(n, 1, h, w).astype(np.float64) / 255.0


def write_idx_images(images, path):
    images = np.asarray(images)
    n, _, h, w = images.shape
    data = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_MAGIC, n, h, w))
        f.write(data.tobytes())
