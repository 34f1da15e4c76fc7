"""Paired image/mask augmentation for deriving pseudo-queries from supports.

Geometric ops (flips, 90-degree rotation) are applied identically to image
and mask; photometric ops (brightness, hue) touch the image only.  Each call
samples an op subset independently (probability 0.5 per enabled op) and
records exactly what was applied so the geometric part can be inverted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import rgb_to_hsv, hsv_to_rgb

GEOMETRIC_OPS = ("hflip", "vflip", "rot90")
PHOTOMETRIC_OPS = ("brightness", "hue")
ALL_OPS = GEOMETRIC_OPS + PHOTOMETRIC_OPS


@dataclass(frozen=True)
class AugSpec:
    ops: tuple = ALL_OPS
    brightness_range: tuple = (0.7, 1.3)
    hue_degrees: float = 18.0
    probability: float = 0.5

    def __post_init__(self):
        unknown = set(self.ops) - set(ALL_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")
        lo, hi = self.brightness_range
        if not (0 < lo <= hi):
            raise ValueError("brightness_range must satisfy 0 < lo <= hi")


@dataclass
class AugRecord:
    """Applied ops in order, with sampled parameters."""

    applied: list = field(default_factory=list)  # [(op, param), ...]


def derive_query(image: np.ndarray, mask: np.ndarray, spec: AugSpec, rng) -> tuple:
    """Transform a (image, mask) support pair into a pseudo-query pair.

    Returns (image, mask, AugRecord).  Ops are tried in ALL_OPS order, each
    included with ``spec.probability``; the mask stays strictly binary.
    """
    if image.shape[:2] != mask.shape:
        raise ValueError("image and mask dims must match")
    img = image.copy()
    msk = mask.copy()
    record = AugRecord()
    for op in ALL_OPS:
        if op not in spec.ops:
            continue
        if rng.random() >= spec.probability:
            continue
        if op == "hflip":
            img = img[:, ::-1].copy()
            msk = msk[:, ::-1].copy()
            record.applied.append((op, None))
        elif op == "vflip":
            img = img[::-1].copy()
            msk = msk[::-1].copy()
            record.applied.append((op, None))
        elif op == "rot90":
            img = np.rot90(img).copy()
            msk = np.rot90(msk).copy()
            record.applied.append((op, None))
        elif op == "brightness":
            factor = rng.uniform(*spec.brightness_range)
            img = np.clip(img * factor, 0.0, 1.0)
            record.applied.append((op, factor))
        elif op == "hue":
            shift = rng.uniform(-spec.hue_degrees, spec.hue_degrees)
            img = _shift_hue(img, shift)
            record.applied.append((op, shift))
    return img, msk, record


def invert_mask(mask: np.ndarray, record: AugRecord) -> np.ndarray:
    """Undo the recorded geometric ops on a mask (photometric ops are no-ops)."""
    out = mask
    for op, _ in reversed(record.applied):
        if op == "hflip":
            out = out[:, ::-1]
        elif op == "vflip":
            out = out[::-1]
        elif op == "rot90":
            out = np.rot90(out, -1)
    return out.copy()


def _shift_hue(image: np.ndarray, degrees: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + degrees / 360.0) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0).astype(image.dtype)
