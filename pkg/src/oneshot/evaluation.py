"""1-shot 5-way episodes and leave-one-out KNN over stored embeddings."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .backbone import BackboneParams, embed, embed_triplet
from .data import CATEGORIES, Category, Dataset, LabeledImage

Embedder = Callable[[np.ndarray], np.ndarray]
Model = Union[BackboneParams, Embedder]
EMBED_CHUNK = 32


def eval_threads() -> int:
    """Worker cap from ``ONESHOT_THREADS`` (default: CPU count)."""
    raw = os.environ.get("ONESHOT_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def embedder(model: Model, head: str) -> Embedder:
    """Turn ``BackboneParams`` into a batch function images -> vectors; pass callables through."""
    if not isinstance(model, BackboneParams):
        return model
    if head == "siamese":
        return lambda x: embed(model, x).data
    if head == "triplet":
        if not model.has_triplet_head:
            raise ValueError("triplet head requested but the backbone has none")
        return lambda x: embed_triplet(model, x).data
    raise ValueError(f"head must be 'siamese' or 'triplet', got {head!r}")


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: tuple
    categories: tuple  # Category per entry
    vectors: np.ndarray  # count × dim, read-only

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float32, copy=True)
        if vec.ndim != 2 or len(vec) != len(self.ids) or len(self.ids) != len(self.categories):
            raise ValueError("index needs equal-length ids, categories and a 2-D vector table")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "categories", tuple(Category(c) for c in self.categories))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


def build_index(model: Model, dataset: Dataset, head: str = "siamese", threads: Optional[int] = None) -> EmbeddingIndex:
    """Embed every image in dataset order, in fixed-size chunks run on a thread pool."""
    fn = embedder(model, head)
    images = dataset.images
    chunks = [images[i : i + EMBED_CHUNK] for i in range(0, len(images), EMBED_CHUNK)]

    def run(chunk):
        return np.asarray(fn(np.stack([img.pixels for img in chunk])), dtype=np.float32)

    workers = min(threads or eval_threads(), max(len(chunks), 1))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    vectors = np.concatenate(parts) if parts else np.zeros((0, 1), np.float32)
    return EmbeddingIndex(tuple(i.id for i in images), tuple(i.category for i in images), vectors)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    protocol: str
    k: Optional[int]
    per_category_accuracy: dict  # category label -> percentage; absent categories omitted
    average: float
    episodes_or_queries: int
    seed: Optional[int]
    flags: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def render(self, method: str = "") -> str:
        """Plain-text table laid out like the published accuracy tables."""
        if self.protocol == "oneshot":
            rows = [("Method", "Accuracy"), (method or "model", f"{self.average:.2f}")]
        else:
            head = ["Method", "KNN"] + [c.label for c in CATEGORIES] + ["Average"]
            cells = [method or "model", f"K = {self.k}"]
            cells += [_pct(self.per_category_accuracy.get(c.label)) for c in CATEGORIES]
            cells.append(f"{self.average:.2f}")
            rows = [tuple(head), tuple(cells)]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [" | ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        if self.flags:
            lines.append("flags: " + ", ".join(self.flags))
        return "\n".join(lines) + "\n"


def _pct(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def average_accuracy(per_category: dict) -> float:
    """Unweighted mean of the per-category percentages that are present."""
    values = [v for v in per_category.values() if v is not None]
    return float(np.mean(values)) if values else 0.0


# ---------------------------------------------------------------- 1-shot 5-way


def _predict(distances: Sequence[float], support_categories: Sequence[Category]) -> Category:
    # Support is ordered by resin numeral, so argmin's first-hit rule is the tie-break.
    order = np.argsort([c.value for c in support_categories], kind="stable")
    d = np.asarray(distances, dtype=np.float64)[order]
    return support_categories[order[int(np.argmin(d))]]


def _distances(mode: str, query: np.ndarray, support: np.ndarray) -> np.ndarray:
    diff = support.astype(np.float64) - query.astype(np.float64)
    sq = (diff * diff).sum(axis=-1)
    # Siamese ranks by the raw Euclidean distance that feeds the score sigmoid.
    return np.sqrt(sq) if mode == "siamese" else sq


def one_shot_episode(model: Model, mode: str, sample: LabeledImage, support: Sequence[LabeledImage]) -> Category:
    """Assign ``sample`` to the category of its nearest support image."""
    cats = [s.category for s in support]
    if len(support) != len(CATEGORIES) or set(cats) != set(CATEGORIES):
        raise ValueError(f"support must hold exactly one image per category, got {[c.name for c in cats]}")
    if any(s.id == sample.id for s in support):
        raise ValueError("the sample must not be part of its own support set")
    fn = embedder(model, mode)
    vecs = np.asarray(fn(np.stack([sample.pixels] + [s.pixels for s in support])))
    return _predict(_distances(mode, vecs[0], vecs[1:]), cats)


def eval_one_shot(
    model: Model,
    mode: str,
    dataset: Dataset,
    episodes: int = 400,
    seed: int = 0,
    index: Optional[EmbeddingIndex] = None,
) -> EvalReport:
    """Run ``episodes`` random 1-shot N-way trials.

    Embeddings are computed once per image (or taken from ``index``) and each
    episode compares the stored vectors. A category with no images drops out of
    every support set and the report is flagged as a degraded run.
    """
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    present = [c for c in CATEGORIES if dataset.by_category[c]]
    if len(present) < 2:
        raise ValueError("one-shot evaluation needs at least two non-empty categories")
    flags = []
    if len(present) < len(CATEGORIES):
        missing = [c.name for c in CATEGORIES if c not in present]
        flags.append(f"degraded {len(present)}-way: no images for {', '.join(missing)}")
    # A sample whose category has no other member could never be matched.
    candidates = [p for c in present if len(dataset.by_category[c]) >= 2 for p in dataset.by_category[c]]
    if not candidates:
        raise ValueError("no category has two images to form an episode")
    if index is None:
        index = build_index(model, dataset, mode)
    vectors = index.vectors

    rng = np.random.default_rng(seed)
    correct = {c: 0 for c in present}
    seen = {c: 0 for c in present}
    for _ in range(episodes):
        q = candidates[rng.integers(len(candidates))]
        support = []
        for c in present:
            pool = [p for p in dataset.by_category[c] if p != q]
            support.append(pool[rng.integers(len(pool))])
        pred = _predict(_distances(mode, vectors[q], vectors[support]), present)
        truth = dataset[q].category
        seen[truth] += 1
        correct[truth] += int(pred is truth)

    per_cat = {c.label: 100.0 * correct[c] / seen[c] for c in present if seen[c]}
    average = 100.0 * sum(correct.values()) / episodes
    return EvalReport("oneshot", None, per_cat, average, episodes, seed, flags)


# ---------------------------------------------------------------- KNN


def _sq_distance_rows(vectors: np.ndarray, rows: Sequence[int]) -> np.ndarray:
    """Squared Euclidean distances from ``vectors[rows]`` to every entry, in float64."""
    v = vectors.astype(np.float64)
    q = v[list(rows)]
    d = (q * q).sum(1)[:, None] + (v * v).sum(1)[None, :] - 2.0 * (q @ v.T)
    return np.maximum(d, 0.0)


def _vote(dist_row: np.ndarray, query: int, categories: Sequence[Category], k: int) -> Category:
    others = np.delete(np.arange(len(dist_row)), query)
    # Stable sort on distance keeps entry order as the distance tie-break.
    nearest = others[np.argsort(dist_row[others], kind="stable")[:k]]
    tally: dict = {}
    for i in nearest:
        tally.setdefault(categories[i], []).append(dist_row[i])
    best = max(len(v) for v in tally.values())
    tied = [c for c, v in tally.items() if len(v) == best]
    return min(tied, key=lambda c: (float(np.mean(tally[c])), c.value))


def knn_classify(index: EmbeddingIndex, query_position: int, k: int = 3) -> Category:
    """Leave-one-out majority vote among the ``k`` nearest other entries."""
    if k < 1 or k >= len(index):
        raise ValueError(f"k={k} needs an index larger than k (size {len(index)})")
    row = _sq_distance_rows(index.vectors, [query_position])[0]
    return _vote(row, query_position, index.categories, k)


def eval_knn(index: EmbeddingIndex, k: int = 3, block: int = 256) -> EvalReport:
    """Classify every entry leave-one-out; average is the unweighted per-category mean."""
    n = len(index)
    if k < 1 or k >= n:
        raise ValueError(f"k={k} needs an index larger than k (size {n})")
    correct = {c: 0 for c in CATEGORIES}
    total = {c: 0 for c in CATEGORIES}
    for lo in range(0, n, block):
        rows = range(lo, min(lo + block, n))
        dist = _sq_distance_rows(index.vectors, rows)
        for r, q in enumerate(rows):
            truth = index.categories[q]
            total[truth] += 1
            correct[truth] += int(_vote(dist[r], q, index.categories, k) is truth)
    per_cat = {c.label: 100.0 * correct[c] / total[c] for c in CATEGORIES if total[c]}
    flags = [f"no entries for {c.name}" for c in CATEGORIES if not total[c]]
    return EvalReport("knn", k, per_cat, average_accuracy(per_cat), n, None, flags)
