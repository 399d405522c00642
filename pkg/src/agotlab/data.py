"""Synthetic image-caption datasets: class prototypes plus Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParseError

FORMAT_TAG = "SYNCLIP"
FORMAT_VERSION = "v1"

CLASS_NAMES = (
    "cat", "dog", "car", "tree", "boat", "bird", "horse", "plane", "train", "chair",
    "flower", "house", "bridge", "truck", "apple", "clock", "lamp", "river", "cup", "shoe",
    "bike", "guitar", "kite", "sheep", "cake", "tower", "fish", "bear", "book", "phone",
)
SINGLE_TEMPLATE = ("a photo of a {}",)
TEMPLATE_POOL = (
    "a photo of a {}",
    "a picture of the {}",
    "an image showing a {}",
    "a close up photo of the {}",
    "a blurry photo of a {}",
    "a bright picture of one {}",
)


def class_name(c: int) -> str:
    return CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"


@dataclass(frozen=True)
class LabeledExample:
    image_feature: tuple[float, ...]
    caption: str
    class_id: int


@dataclass(frozen=True)
class DatasetManifest:
    num_classes: int = 8
    raw_dim: int = 32
    sigma: float = 0.15
    seed: int = 0
    multi_template: bool = False
    base_fraction: float = 0.5

    @property
    def templates(self) -> tuple[str, ...]:
        return TEMPLATE_POOL if self.multi_template else SINGLE_TEMPLATE

    def prototypes(self) -> np.ndarray:
        """One unit-sphere prototype per class, each from its own derived seed."""
        out = np.empty((self.num_classes, self.raw_dim))
        for c in range(self.num_classes):
            v = np.random.default_rng([self.seed, c, 0]).normal(size=self.raw_dim)
            out[c] = v / np.linalg.norm(v)
        return out


@dataclass
class Dataset:
    raw_dim: int
    num_classes: int
    examples: list[LabeledExample] = field(default_factory=list)
    # class id -> label text, fixed when the full dataset is built so subsets agree
    canonical: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.canonical:
            for e in self.examples:
                self.canonical.setdefault(e.class_id, e.caption)

    def __len__(self) -> int:
        return len(self.examples)

    def features(self) -> np.ndarray:
        if not self.examples:
            return np.zeros((0, self.raw_dim))
        return np.array([e.image_feature for e in self.examples], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([e.class_id for e in self.examples], dtype=np.int64)

    def captions(self) -> list[str]:
        return [e.caption for e in self.examples]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.raw_dim, self.num_classes, [self.examples[i] for i in indices], self.canonical)

    def restrict(self, classes: Iterable[int]) -> "Dataset":
        keep = set(classes)
        kept = [e for e in self.examples if e.class_id in keep]
        return Dataset(self.raw_dim, self.num_classes, kept, self.canonical)

    def class_captions(self) -> dict[int, str]:
        """Canonical label text of each class present: its first caption in the full dataset."""
        present = set(self.labels().tolist())
        return {c: t for c, t in sorted(self.canonical.items()) if c in present}


def generate_synthetic(manifest: DatasetManifest, n_per_class: int) -> Dataset:
    if manifest.sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {manifest.sigma}")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if manifest.num_classes < 1 or manifest.raw_dim < 1:
        raise ConfigError("num_classes and raw_dim must be positive")
    protos = manifest.prototypes()
    templates = manifest.templates
    examples = []
    for c in range(manifest.num_classes):
        rng = np.random.default_rng([manifest.seed, c, 1])
        noise = rng.normal(0.0, 1.0, size=(n_per_class, manifest.raw_dim)) * manifest.sigma
        picks = rng.integers(0, len(templates), size=n_per_class)
        name = class_name(c)
        for i in range(n_per_class):
            feat = protos[c] + noise[i]
            examples.append(LabeledExample(tuple(float(x) for x in feat), templates[picks[i]].format(name), c))
    return Dataset(manifest.raw_dim, manifest.num_classes, examples)


def split_base_new(manifest: DatasetManifest) -> tuple[list[int], list[int]]:
    """Seeded disjoint partition of the classes into base and new."""
    c = manifest.num_classes
    if c < 2:
        raise ConfigError(f"base/new split needs at least 2 classes, got {c}")
    n_base = min(max(int(round(c * manifest.base_fraction)), 1), c - 1)
    perm = np.random.default_rng([manifest.seed, 2]).permutation(c)
    return sorted(int(i) for i in perm[:n_base]), sorted(int(i) for i in perm[n_base:])


def sample_few_shot(dataset: Dataset, k: int, seed: int, classes: Sequence[int] | None = None) -> Dataset:
    """``k`` examples per class drawn without replacement, kept in file order."""
    return dataset.subset(few_shot_indices(dataset, k, seed, classes))


def few_shot_indices(dataset: Dataset, k: int, seed: int, classes: Sequence[int] | None = None) -> list[int]:
    labels = dataset.labels()
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    chosen: list[int] = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise DataError(f"class {c} has {idx.size} examples, fewer than k={k}")
        pick = np.random.default_rng([seed, int(c), 3]).choice(idx, size=k, replace=False)
        chosen.extend(int(i) for i in pick)
    return sorted(chosen)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION} raw_dim={dataset.raw_dim} classes={dataset.num_classes}"]
    for e in dataset.examples:
        if "\t" in e.caption or "\n" in e.caption:
            raise DataError(f"caption may not contain tabs or newlines: {e.caption!r}")
        lines.append(f"{e.class_id}\t{e.caption}\t{','.join(repr(x) for x in e.image_feature)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file, missing header")
    raw_dim, num_classes = _parse_header(lines[0])
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
        try:
            cid = int(parts[0])
        except ValueError:
            raise ParseError(f"bad class id {parts[0]!r}", lineno) from None
        if not 0 <= cid < num_classes:
            raise ParseError(f"class id {cid} outside [0, {num_classes})", lineno)
        try:
            feat = tuple(float(x) for x in parts[2].split(","))
        except ValueError:
            raise ParseError(f"bad feature value in {parts[2][:40]!r}", lineno) from None
        if len(feat) != raw_dim:
            raise ParseError(f"expected {raw_dim} features, got {len(feat)}", lineno)
        if not all(np.isfinite(feat)):
            raise ParseError("non-finite feature value", lineno)
        examples.append(LabeledExample(feat, parts[1], cid))
    return Dataset(raw_dim, num_classes, examples)


def _parse_header(line: str) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != FORMAT_TAG:
        raise FormatError(f"not a {FORMAT_TAG} dataset header: {line!r}")
    if parts[1] != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {parts[1]!r}, expected {FORMAT_VERSION}")
    try:
        kv = dict(p.split("=", 1) for p in parts[2:])
        return int(kv["raw_dim"]), int(kv["classes"])
    except (KeyError, ValueError):
        raise ParseError(f"malformed header {line!r}", 1) from None
