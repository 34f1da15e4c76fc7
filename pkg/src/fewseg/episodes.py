"""Episode construction, synthetic cross-domain data, and dataset IO.

A dataset is a set of categories, each holding (image, mask) samples with
exactly one foreground object per image.  Synthetic domains draw objects from
one shape family (blobs, stripes, or rings) with per-category foreground
colors, so intra-object pixels stay more similar than cross-object pixels.

Directory layout for external data:
    root/<category>/images/<id>.png   RGB, any size
    root/<category>/masks/<id>.png    8-bit grayscale, foreground 255
Image and mask ids must match one to one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .protos import shrink_mask

log = logging.getLogger(__name__)

SHAPE_FAMILIES = ("blobs", "stripes", "rings")


class SamplingError(RuntimeError):
    """No category can supply the requested episode."""


class DatasetLoadError(RuntimeError):
    """Directory dataset violates the documented layout."""


@dataclass
class Sample:
    image: np.ndarray  # HxWx3 float32 in [0,1]
    mask: np.ndarray   # HxW uint8 in {0,1}
    sample_id: str


@dataclass
class Category:
    name: str
    cat_id: int
    samples: list


@dataclass
class Dataset:
    domain_id: str
    categories: dict  # name -> Category, insertion order sorted by name

    def __len__(self):
        return sum(len(c.samples) for c in self.categories.values())

    def category_ids(self) -> set:
        return {c.cat_id for c in self.categories.values()}


@dataclass
class Episode:
    support: list      # K (image, mask) pairs
    query_image: np.ndarray
    query_mask: np.ndarray | None
    category_id: int
    domain_id: str


@dataclass(frozen=True)
class SyntheticDomainSpec:
    shape_family: str = "blobs"
    palette: tuple = ((0.9, 0.2, 0.5),)        # one fg RGB per category
    background: tuple = (0.15, 0.15, 0.5)
    noise_sigma: float = 0.03
    scale_range: tuple = (0.3, 0.6)            # object extent, fraction of image
    categories: int = 1
    images_per_category: int = 10
    image_size: int = 64
    category_id_start: int = 0
    domain_id: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"shape_family must be one of {SHAPE_FAMILIES}")
        if len(self.palette) < self.categories:
            raise ValueError("palette must provide one color per category")


# ---- synthetic generation ----------------------------------------------


def _shape_mask(family: str, size: int, scale_range, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    scale = rng.uniform(*scale_range)
    if family == "blobs":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        ry = scale / 2 * rng.uniform(0.7, 1.0)
        rx = scale / 2 * rng.uniform(0.7, 1.0)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    elif family == "stripes":
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(0.35, 0.65)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        mask = np.abs(proj - offset * (np.cos(theta) + np.sin(theta))) <= scale / 4
    else:  # rings
        cy, cx = rng.uniform(0.35, 0.65, size=2)
        r_out = scale / 2
        r_in = r_out * 0.45
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = (r <= r_out) & (r >= r_in)
    return mask.astype(np.uint8)


def generate_synthetic(spec: SyntheticDomainSpec) -> Dataset:
    """Deterministic (seed-keyed) synthetic dataset, one object per image."""
    rng = np.random.default_rng(spec.seed)
    categories = {}
    for c in range(spec.categories):
        cat_id = spec.category_id_start + c
        name = f"cat{cat_id:03d}"
        fg = np.asarray(spec.palette[c], dtype=np.float32)
        bg = np.asarray(spec.background, dtype=np.float32)
        samples = []
        for i in range(spec.images_per_category):
            mask = _shape_mask(spec.shape_family, spec.image_size, spec.scale_range, rng)
            while mask.sum() == 0:
                mask = _shape_mask(spec.shape_family, spec.image_size, spec.scale_range, rng)
            img = np.empty((spec.image_size, spec.image_size, 3), dtype=np.float32)
            img[:] = bg
            img[mask == 1] = fg
            img += rng.normal(0.0, spec.noise_sigma, size=img.shape).astype(np.float32)
            np.clip(img, 0.0, 1.0, out=img)
            samples.append(Sample(image=img, mask=mask, sample_id=f"{name}_{i:04d}"))
        categories[name] = Category(name=name, cat_id=cat_id, samples=samples)
    return Dataset(domain_id=spec.domain_id, categories=categories)


# ---- episode sampling ---------------------------------------------------


def sample_episode(
    dataset: Dataset,
    k: int,
    rng,
    feature_shape: tuple | None = None,
    with_query_mask: bool = True,
    category: str | None = None,
    max_retries: int = 50,
) -> Episode:
    """Draw K supports plus one query from a single category.

    No image is reused within the episode.  When ``feature_shape`` is given,
    draws whose support (or supervised query) mask vanishes after
    downsampling to feature resolution are rejected and resampled.
    """
    if category is not None:
        eligible = [category] if len(dataset.categories[category].samples) > k else []
    else:
        eligible = [n for n, c in dataset.categories.items() if len(c.samples) > k]
    if not eligible:
        raise SamplingError(f"no category holds the {k + 1} distinct images needed")

    for _ in range(max_retries):
        name = eligible[rng.integers(len(eligible))]
        cat = dataset.categories[name]
        picks = rng.choice(len(cat.samples), size=k + 1, replace=False)
        members = [cat.samples[int(i)] for i in picks]
        if feature_shape is not None:
            checked = members if with_query_mask else members[:-1]
            if any(shrink_mask(s.mask, feature_shape).sum() == 0 for s in checked):
                continue
        return Episode(
            support=[(s.image, s.mask) for s in members[:-1]],
            query_image=members[-1].image,
            query_mask=members[-1].mask if with_query_mask else None,
            category_id=cat.cat_id,
            domain_id=dataset.domain_id,
        )
    raise SamplingError(f"exhausted {max_retries} draws without a usable episode")


# ---- directory adapter --------------------------------------------------


def save_dataset(dataset: Dataset, root) -> None:
    """Write a dataset in the documented directory layout (PNG files)."""
    root = Path(root)
    for name, cat in dataset.categories.items():
        img_dir = root / name / "images"
        mask_dir = root / name / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for s in cat.samples:
            Image.fromarray(
                np.round(s.image * 255).astype(np.uint8)
            ).save(img_dir / f"{s.sample_id}.png")
            Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(
                mask_dir / f"{s.sample_id}.png"
            )


def load_directory(root, domain_id: str | None = None) -> Dataset:
    """Load a directory-layout dataset; category order is name-sorted."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetLoadError(f"dataset root is not a directory: {root}")
    categories = {}
    cat_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not cat_dirs:
        log.warning("dataset root %s contains no category directories", root)
    for cat_id, cat_dir in enumerate(cat_dirs):
        img_dir = cat_dir / "images"
        mask_dir = cat_dir / "masks"
        if not img_dir.is_dir() or not mask_dir.is_dir():
            raise DatasetLoadError(f"missing images/ or masks/ under {cat_dir}")
        samples = []
        for img_path in sorted(img_dir.glob("*.png")):
            mask_path = mask_dir / img_path.name
            if not mask_path.is_file():
                raise DatasetLoadError(f"no mask for image {img_path}")
            image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
            mask_raw = np.asarray(Image.open(mask_path).convert("L"))
            values = set(np.unique(mask_raw).tolist())
            if not values <= {0, 255}:
                raise DatasetLoadError(
                    f"mask {mask_path} holds values outside {{0, 255}}: {sorted(values)}"
                )
            samples.append(
                Sample(image=image, mask=(mask_raw == 255).astype(np.uint8),
                       sample_id=img_path.stem)
            )
        stray = {p.name for p in mask_dir.glob("*.png")} - {p.name for p in img_dir.glob("*.png")}
        if stray:
            raise DatasetLoadError(f"masks without images under {mask_dir}: {sorted(stray)}")
        categories[cat_dir.name] = Category(name=cat_dir.name, cat_id=cat_id, samples=samples)
    return Dataset(domain_id=domain_id or root.name, categories=categories)
