"""Resin-code datasets: ingestion, synthetic stand-in, splitting and sampling."""
from __future__ import annotations

import enum
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SIZE = 105
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
# WaDaBa encodes the plastic type as "a<2 digits>" after the running number,
# e.g. "0001_a01b01c1d0e0f0g090h1.jpg".
WADABA_NAME = re.compile(r"^\d+_a(\d{2})b", re.IGNORECASE)


class Category(enum.IntEnum):
    """Resin-code categories present in WaDaBa; the value is the resin numeral."""

    PET = 1
    PEHD = 2
    PP = 5
    PS = 6
    OTHER = 7

    @property
    def dirname(self) -> str:
        return f"{self.value:02d}_{self.name}"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {Category.PET: "PET", Category.PEHD: "PE-HD", Category.PP: "PP", Category.PS: "PS", Category.OTHER: "Other"}


CATEGORIES = tuple(Category)


@dataclass(frozen=True)
class LabeledImage:
    id: str
    category: Category
    pixels: np.ndarray  # float32, 1×105×105, values in [0, 1]


@dataclass
class Dataset:
    images: list
    by_category: dict = field(init=False)

    def __post_init__(self):
        self.by_category = {c: [] for c in CATEGORIES}
        for pos, img in enumerate(self.images):
            self.by_category[img.category].append(pos)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, pos: int) -> LabeledImage:
        return self.images[pos]

    def counts(self) -> dict:
        return {c: len(v) for c, v in self.by_category.items()}

    def present(self) -> list:
        return [c for c, v in self.by_category.items() if v]

    def subset(self, positions: Sequence[int]) -> "Dataset":
        return Dataset([self.images[p] for p in positions])

    def stacked(self) -> np.ndarray:
        return np.stack([img.pixels for img in self.images]) if self.images else np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE), np.float32)


@dataclass(frozen=True)
class PairSample:
    first: LabeledImage
    second: LabeledImage
    label: int  # 0 same category, 1 different


@dataclass(frozen=True)
class TripletSample:
    anchor: LabeledImage
    positive: LabeledImage
    negative: LabeledImage


# ---------------------------------------------------------------- preprocessing


def _unit_from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255)


def preprocess(gray: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear-resize a 2-D [0, 1] luminance array to ``1×size×size`` float32.

    Already-sized input is returned unchanged, so the step is idempotent.
    """
    gray = np.asarray(gray, dtype=np.float32)
    if gray.ndim == 3 and gray.shape[0] == 1:
        gray = gray[0]
    if gray.shape != (size, size):
        img = Image.fromarray(gray, mode="F").resize((size, size), Image.BILINEAR)
        gray = np.asarray(img, dtype=np.float32)
    return np.clip(gray, 0.0, 1.0)[None].copy()


def decode_image(path: Path, size: int = IMAGE_SIZE) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "L":
                unit = _unit_from_uint8(np.asarray(img, dtype=np.uint8))
            else:
                rgb = np.asarray(img.convert("RGB"), dtype=np.int64)
                # Integer weights keep pure white exactly at 255.
                lum = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2]) / 1000.0
                unit = (lum / 255.0).astype(np.float32)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return preprocess(unit, size)


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, size: int = IMAGE_SIZE) -> Dataset:
    """Load ``root/<01_PET|02_PEHD|05_PP|06_PS|07_OTHER>/*.png|jpg``.

    If none of the category directories exist, images directly under ``root``
    are labelled from the WaDaBa filename pattern instead.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    dirs = {c: root / c.dirname for c in CATEGORIES}
    if not any(d.is_dir() for d in dirs.values()):
        return _load_wadaba_flat(root, size)
    images = []
    for cat, d in dirs.items():
        if not d.is_dir():
            raise FileNotFoundError(f"missing category directory {d}")
        for path in _image_files(d):
            images.append(LabeledImage(f"{d.name}/{path.name}", cat, decode_image(path, size)))
    return Dataset(images)


def _load_wadaba_flat(root: Path, size: int) -> Dataset:
    files = [p for p in _image_files(root) if WADABA_NAME.match(p.name)]
    if not files:
        missing = ", ".join(c.dirname for c in CATEGORIES)
        raise FileNotFoundError(f"{root}: missing category directories ({missing}) and no WaDaBa-named files")
    found = []
    for path in files:
        code = int(WADABA_NAME.match(path.name).group(1))
        try:
            cat = Category(code)
        except ValueError:
            raise ValueError(f"{path}: resin code {code:02d} is not a WaDaBa category") from None
        found.append((cat, path))
    found.sort(key=lambda cp: (cp[0].value, cp[1].name))
    return Dataset([LabeledImage(f"{c.dirname}/{p.name}", c, decode_image(p, size)) for c, p in found])


# ---------------------------------------------------------------- synthetic data


def _render(cat: Category, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 + rng.uniform(-5, 5, 2)
    r = size * 0.28 * rng.uniform(0.75, 1.2)
    dy, dx = yy - cy, xx - cx
    if cat is Category.PET:  # filled disk
        mask = dy**2 + dx**2 <= r**2
    elif cat is Category.PEHD:  # hollow square
        inner = r * rng.uniform(0.55, 0.7)
        m = np.maximum(np.abs(dy), np.abs(dx))
        mask = (m <= r) & (m > inner)
    elif cat is Category.PP:  # upward triangle
        t = (dy + r) / (2 * r)
        mask = (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    elif cat is Category.PS:  # horizontal stripes
        period = r * rng.uniform(0.35, 0.5)
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        mask = box & (np.floor((dy + r) / period) % 2 == 0)
    else:  # checkerboard
        cell = r * rng.uniform(0.4, 0.55)
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        mask = box & ((np.floor((dy + r) / cell) + np.floor((dx + r) / cell)) % 2 == 0)
    bg, fg = rng.uniform(0.05, 0.25), rng.uniform(0.7, 0.95)
    img = np.where(mask, fg, bg) + rng.normal(0.0, 0.05, (size, size))
    # Quantise to 8 bits so a PNG round trip is lossless.
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def gen_synthetic_uint8(seed: int, n_per_class: int, size: int = IMAGE_SIZE) -> list[tuple[Category, str, np.ndarray]]:
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    out = []
    for cat in CATEGORIES:
        for i in range(n_per_class):
            out.append((cat, f"{cat.dirname}/{i:04d}.png", _render(cat, rng, size)))
    return out


def gen_synthetic(seed: int, n_per_class: int, size: int = IMAGE_SIZE) -> Dataset:
    """Five separable shape families (disk, hollow square, triangle, stripes,
    checkerboard), randomly shifted, scaled and noised; deterministic in ``seed``."""
    return Dataset(
        [LabeledImage(name, cat, _unit_from_uint8(arr)[None]) for cat, name, arr in gen_synthetic_uint8(seed, n_per_class, size)]
    )


def write_synthetic(out_dir, seed: int, n_per_class: int) -> list[Path]:
    """Materialise :func:`gen_synthetic` as 8-bit grayscale PNGs in the category layout."""
    out_dir = Path(out_dir)
    written = []
    for cat, name, arr in gen_synthetic_uint8(seed, n_per_class):
        path = out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr, mode="L").save(path, format="PNG")
        written.append(path)
    for cat in CATEGORIES:
        (out_dir / cat.dirname).mkdir(parents=True, exist_ok=True)
    return written


# ---------------------------------------------------------------- splitting


def split(dataset: Dataset, test_fraction: float = 0.25, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; each category keeps at least one image on each side when it has two."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_pos, test_pos = [], []
    for cat in CATEGORIES:
        positions = dataset.by_category[cat]
        n = len(positions)
        if n == 0:
            continue
        if n == 1:
            warnings.warn(f"category {cat.name} has a single image; it goes to the train side")
            train_pos += positions
            continue
        n_test = min(max(math.floor(n * test_fraction + 0.5), 1), n - 1)
        perm = rng.permutation(n)
        test_pos += [positions[i] for i in perm[:n_test]]
        train_pos += [positions[i] for i in perm[n_test:]]
    return dataset.subset(sorted(train_pos)), dataset.subset(sorted(test_pos))


# ---------------------------------------------------------------- sampling


def sample_pair(train: Dataset, rng: np.random.Generator, same: Optional[bool] = None) -> PairSample:
    """Balanced pair draw: same class with probability 0.5 unless ``same`` forces a path."""
    present = train.present()
    eligible = [c for c in present if len(train.by_category[c]) >= 2]
    if same is None:
        same = bool(rng.random() < 0.5)
    if same and not eligible:
        same = False
    if same:
        cat = eligible[rng.integers(len(eligible))]
        pos = train.by_category[cat]
        i, j = rng.choice(len(pos), size=2, replace=False)
        return PairSample(train[pos[i]], train[pos[j]], 0)
    if len(present) < 2:
        raise ValueError(f"cross-category pair needs two non-empty categories; counts {_stats(train)}")
    ci, cj = rng.choice(len(present), size=2, replace=False)
    a = train.by_category[present[ci]]
    b = train.by_category[present[cj]]
    return PairSample(train[a[rng.integers(len(a))]], train[b[rng.integers(len(b))]], 1)


def sample_triplet(train: Dataset, rng: np.random.Generator) -> TripletSample:
    """Random anchor/positive/negative; no hard-negative mining."""
    eligible = [p for c in CATEGORIES if len(train.by_category[c]) >= 2 for p in train.by_category[c]]
    if not eligible or len(train.present()) < 2:
        raise ValueError(f"triplets need a category with >=2 images and >=2 categories; counts {_stats(train)}")
    a = eligible[rng.integers(len(eligible))]
    same = train.by_category[train[a].category]
    j = int(rng.integers(len(same) - 1))
    rank = same.index(a)
    p = same[j + 1] if j >= rank else same[j]
    negatives = [q for c in CATEGORIES if c is not train[a].category for q in train.by_category[c]]
    n = negatives[rng.integers(len(negatives))]
    anchor, positive, negative = train[a], train[p], train[n]
    return TripletSample(anchor, positive, negative)


def _stats(ds: Dataset) -> dict:
    return {c.name: n for c, n in ds.counts().items()}
