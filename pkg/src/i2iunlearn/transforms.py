"""Patch-grid masks implementing the information-removal operator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import Rng

PATCH = 4
GRID = (8, 8)
KINDS = ("center_crop", "random", "extend_up", "extend_down",
         "extend_left", "extend_right", "outpaint")


@dataclass(frozen=True)
class MaskSpec:
    """``size`` is patches per side for center_crop/outpaint, a ratio in
    [0, 1] for random, and a row/column count for the extend_* kinds.

    For outpaint, ``size`` is the side of the central block that is kept.
    """

    kind: str = "center_crop"
    size: float = 4
    grid: tuple = GRID
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], size=d["size"], grid=tuple(d.get("grid", GRID)),
                   seed=int(d.get("seed", 0)))

    @property
    def tag(self):
        return f"{self.kind}{self.size:g}"


def _center_block(rows, cols, s):
    r0, c0 = (rows - s) // 2, (cols - s) // 2
    block = np.zeros((rows, cols), dtype=bool)
    block[r0:r0 + s, c0:c0 + s] = True
    return block


def make_mask(spec):
    """Boolean ``[rows, cols]`` patch mask; True marks a removed patch."""
    rows, cols = spec.grid
    kind = spec.kind
    if kind not in KINDS:
        raise ValueError(f"unknown mask kind {kind!r}")
    if kind == "random":
        if not 0.0 <= spec.size <= 1.0:
            raise ValueError("random mask ratio must be in [0, 1]")
        k = int(round(spec.size * rows * cols))
        chosen = Rng(spec.seed).gen.choice(rows * cols, size=k, replace=False)
        mask = np.zeros(rows * cols, dtype=bool)
        mask[chosen] = True
        return mask.reshape(rows, cols)
    s = int(spec.size)
    if s != spec.size or s < 0:
        raise ValueError(f"{kind} size must be a non-negative integer")
    if kind in ("center_crop", "outpaint"):
        if s > min(rows, cols):
            raise ValueError(f"{kind} size {s} exceeds grid {spec.grid}")
        block = _center_block(rows, cols, s)
        return block if kind == "center_crop" else ~block
    limit = rows if kind in ("extend_up", "extend_down") else cols
    if s > limit:
        raise ValueError(f"{kind} size {s} exceeds grid {spec.grid}")
    mask = np.zeros((rows, cols), dtype=bool)
    if s:
        if kind == "extend_up":
            mask[:s] = True
        elif kind == "extend_down":
            mask[rows - s:] = True
        elif kind == "extend_left":
            mask[:, :s] = True
        else:
            mask[:, cols - s:] = True
    return mask


def pixel_mask(mask, patch=PATCH):
    """Expand a patch mask (``[R, C]`` or per-image ``[B, R, C]``) to pixels."""
    return np.repeat(np.repeat(mask, patch, axis=-2), patch, axis=-1)


def apply_mask(images, mask, patch=PATCH):
    """Zero-fill masked patches of ``[B, C, H, W]`` images.

    ``mask`` is shared by the batch (``[R, C]``) or given per image
    (``[B, R, C]``).
    """
    images = np.asarray(images, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = images.shape[-2:]
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    if mask.shape[-2:] != (h // patch, w // patch):
        raise ValueError(f"mask grid {mask.shape[-2:]} does not match image {h}x{w}")
    if mask.ndim == 3:
        if mask.shape[0] != images.shape[0]:
            raise ValueError("per-image mask count differs from batch size")
        keep = ~pixel_mask(mask, patch)[:, None]
    else:
        keep = ~pixel_mask(mask, patch)
    return np.where(keep, images, 0.0)


def per_image_masks(spec, n):
    """Independent random masks per image (seeded from ``spec.seed``)."""
    rng = Rng(spec.seed)
    return np.stack([make_mask(MaskSpec(spec.kind, spec.size, spec.grid,
                                        int(rng.gen.integers(0, 2 ** 63))))
                     for _ in range(n)])


def complementary(a, b):
    return bool(np.all(a ^ b))
