"""Synthetic image datasets, label-skew partitioners and the KS skewness score."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

TASK_KINDS = ("classification", "regression")


@dataclass(frozen=True)
class LabeledDataset:
    images: torch.Tensor  # (N, C, H, W) float32
    labels: torch.Tensor  # (N,) int64 for classification, float32 for regression
    task_kind: str = "classification"
    num_classes: int = 2
    patterns: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task_kind {self.task_kind!r}")
        n = self.images.shape[0]
        if n < 1 or self.labels.shape != (n,):
            raise ValueError(f"need N >= 1 images with one label each, got {n} / {tuple(self.labels.shape)}")
        if self.task_kind == "classification":
            if self.labels.dtype.is_floating_point:
                raise ValueError("classification labels must be integers")
            if int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
        elif not bool(torch.isfinite(self.labels).all()):
            raise ValueError("regression labels must be finite")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        if idx.numel() == 0:
            raise ValueError("cannot build an empty dataset")
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.task_kind, self.num_classes, self.patterns
        )

    def label_array(self) -> np.ndarray:
        return self.labels.numpy()


@dataclass(frozen=True)
class DatasetSpec:
    task_kind: str = "classification"
    num_classes: int = 2
    image_size: int = 16
    channels: int = 1
    samples_per_class: int = 500
    n: int = 2000  # regression only
    noise_sigma: float = 0.1
    contrast: float = 1.0
    modes_per_class: int = 1
    seed: int = 0
    pattern_seed: int = 0


def _smooth_field(rng: np.random.Generator, channels: int, size: int) -> np.ndarray:
    """Low-frequency random image in [0, 1]: coarse noise upsampled and blurred."""
    coarse = rng.uniform(0.0, 1.0, size=(channels, 4, 4))
    rep = size // 4 if size >= 4 else 1
    img = np.kron(coarse, np.ones((1, rep, rep)))[:, :size, :size]
    if img.shape[1] < size:
        img = np.pad(img, ((0, 0), (0, size - img.shape[1]), (0, size - img.shape[2])), mode="edge")
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    blurred = sum(
        padded[:, 1 + dy:1 + dy + size, 1 + dx:1 + dx + size]
        for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    ) / 9.0
    return blurred


def make_synthetic_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Build a deterministic toy image dataset.

    Classification: each class has a fixed base pattern (drawn from
    ``pattern_seed``); samples are ``clip(pattern + N(0, noise_sigma))``.
    Regression: the target ``t ~ U[0, 1]`` sets the mean image intensity,
    on top of a fixed zero-mean texture and pixel noise.
    """
    if spec.task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task_kind {spec.task_kind!r}")
    if spec.image_size < 4:
        raise ValueError("image_size must be >= 4")
    if spec.noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if spec.channels < 1:
        raise ValueError("channels must be >= 1")
    c, s = spec.channels, spec.image_size
    prng = np.random.default_rng(spec.pattern_seed)
    rng = np.random.default_rng(spec.seed)

    if spec.task_kind == "classification":
        if spec.num_classes < 2 or spec.samples_per_class < 1:
            raise ValueError("need num_classes >= 2 and samples_per_class >= 1")
        if spec.modes_per_class < 1:
            raise ValueError("modes_per_class must be >= 1")
        m = spec.modes_per_class
        fields = np.stack([_smooth_field(prng, c, s) for _ in range(spec.num_classes * m)])
        center = fields.mean(axis=0, keepdims=True)
        # pattern j belongs to class j // m
        patterns = np.clip(0.5 + spec.contrast * (fields - center) + (center - center.mean()), 0.0, 1.0)
        labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
        modes = labels * m + rng.integers(0, m, size=labels.size)
        noise = rng.normal(0.0, 1.0, size=(labels.size, c, s, s)) * spec.noise_sigma
        images = np.clip(patterns[modes] + noise, 0.0, 1.0)
        return LabeledDataset(
            torch.from_numpy(images.astype(np.float32)),
            torch.from_numpy(labels.astype(np.int64)),
            "classification",
            spec.num_classes,
            torch.from_numpy(patterns.astype(np.float32)),
        )

    if spec.n < 1:
        raise ValueError("n must be >= 1")
    texture = _smooth_field(prng, c, s)
    texture = 0.3 * (texture - texture.mean())
    targets = rng.uniform(0.0, 1.0, size=spec.n)
    noise = rng.normal(0.0, 1.0, size=(spec.n, c, s, s)) * spec.noise_sigma
    images = np.clip(0.2 + 0.6 * targets[:, None, None, None] + texture + noise, 0.0, 1.0)
    return LabeledDataset(
        torch.from_numpy(images.astype(np.float32)),
        torch.from_numpy(targets.astype(np.float32)),
        "regression",
        1,
        torch.from_numpy(texture.astype(np.float32))[None],
    )


def nearest_pattern_accuracy(ds: LabeledDataset) -> float:
    """Accuracy of assigning each image to its closest class pattern (L2)."""
    if ds.patterns is None or ds.task_kind != "classification":
        raise ValueError("dataset carries no class patterns")
    flat = ds.images.reshape(len(ds), -1).double()
    pats = ds.patterns.reshape(ds.patterns.shape[0], -1).double()
    modes = pats.shape[0] // ds.num_classes
    pred = torch.cdist(flat, pats).argmin(dim=1) // modes
    return float((pred == ds.labels).double().mean())


def _strata(ds: LabeledDataset, bands: int = 10) -> np.ndarray:
    """Discrete stratum per sample: the class, or a label-quantile band for regression."""
    labels = ds.label_array()
    if ds.task_kind == "classification":
        return labels.astype(np.int64)
    edges = np.quantile(labels, np.linspace(0, 1, bands + 1)[1:-1])
    return np.searchsorted(edges, labels, side="right").astype(np.int64)


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    strata = _strata(ds)
    test = []
    for s in np.unique(strata):
        idx = rng.permutation(np.flatnonzero(strata == s))
        test.extend(idx[: int(round(len(idx) * test_fraction))].tolist())
    test_set = set(test)
    train = [i for i in range(len(ds)) if i not in test_set]
    return ds.subset(train), ds.subset(sorted(test))


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class PartitionPlan:
    assignments: Tuple[Tuple[int, ...], ...]
    seed: int = 0
    shared_pool: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(tuple(int(i) for i in a) for a in self.assignments))
        object.__setattr__(self, "shared_pool", tuple(int(i) for i in self.shared_pool))
        if not self.assignments:
            raise ValueError("a plan needs at least one institution")
        for k, a in enumerate(self.assignments):
            if not a:
                raise ValueError(f"institution {k} has no samples")
        if not self.shared_pool:
            seen = list(itertools.chain.from_iterable(self.assignments))
            if len(seen) != len(set(seen)):
                raise ValueError("institution index lists overlap")

    @property
    def K(self) -> int:
        return len(self.assignments)

    @property
    def has_shared_pool(self) -> bool:
        return bool(self.shared_pool)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def validate_for(self, ds: LabeledDataset) -> None:
        n = len(ds)
        for k, a in enumerate(self.assignments):
            if min(a) < 0 or max(a) >= n:
                raise ValueError(f"institution {k} references indices outside [0, {n})")

    def to_text(self) -> str:
        header = f"K={self.K} seed={self.seed}"
        if self.shared_pool:
            header += " shared=" + ",".join(map(str, self.shared_pool))
        lines = [header] + [" ".join(map(str, a)) for a in self.assignments]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PartitionPlan":
        lines = text.rstrip("\n").split("\n")
        fields = dict(tok.split("=", 1) for tok in lines[0].split())
        k = int(fields["K"])
        rows = lines[1:]
        if len(rows) != k:
            raise ValueError(f"header says K={k} but found {len(rows)} institution lines")
        pool = tuple(int(i) for i in fields["shared"].split(",")) if "shared" in fields else ()
        return cls(tuple(tuple(int(i) for i in r.split()) for r in rows), int(fields["seed"]), pool)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class SkewSpec:
    """Per-institution target proportions over label strata, plus sizes.

    For classification the strata are the classes; for regression they are
    equal-count quantile bands of the continuous label (``len(row)`` bands).
    """

    proportions: Tuple[Tuple[float, ...], ...]
    sizes: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "proportions", tuple(tuple(float(p) for p in r) for r in self.proportions))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.proportions) != len(self.sizes):
            raise ValueError("one proportion row per institution is required")
        widths = {len(r) for r in self.proportions}
        if len(widths) != 1:
            raise ValueError("proportion rows must all have the same length")
        for k, row in enumerate(self.proportions):
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise ValueError(f"proportion row {k} must be non-negative and sum to 1")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("sizes must be positive")


def partition_iid(ds: LabeledDataset, K: int, seed: int) -> PartitionPlan:
    """Stratified round-robin deal: per-stratum counts and sizes differ by at most one."""
    n = len(ds)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > n:
        raise ValueError(f"cannot split {n} samples across {K} institutions")
    rng = np.random.default_rng(seed)
    strata = _strata(ds)
    order = np.concatenate([rng.permutation(np.flatnonzero(strata == s)) for s in np.unique(strata)])
    buckets = [sorted(order[k::K].tolist()) for k in range(K)]
    return PartitionPlan(tuple(buckets), seed)


def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    raw = np.asarray(weights, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts.tolist()


def partition_by_proportions(ds: LabeledDataset, spec: SkewSpec, seed: int) -> PartitionPlan:
    width = len(spec.proportions[0])
    if ds.task_kind == "classification":
        if width != ds.num_classes:
            raise ValueError(f"proportion rows have {width} entries for {ds.num_classes} classes")
        strata = _strata(ds)
    else:
        strata = _strata(ds, bands=width)
    counts = [_largest_remainder(size, row) for size, row in zip(spec.sizes, spec.proportions)]
    demand = np.sum(counts, axis=0)
    supply = np.bincount(strata, minlength=width)
    deficit = {s: int(demand[s] - supply[s]) for s in range(width) if demand[s] > supply[s]}
    if deficit:
        raise ValueError(f"not enough samples per label; deficit by label: {deficit}")
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(strata == s)).tolist() for s in range(width)]
    cursor = [0] * width
    buckets = []
    for row in counts:
        picked = []
        for s, c in enumerate(row):
            picked += pools[s][cursor[s]:cursor[s] + c]
            cursor[s] += c
        buckets.append(sorted(picked))
    return PartitionPlan(tuple(buckets), seed)


def ks_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sample KS statistic: sup |F_a(x) - F_b(x)| over empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("KS statistic needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_skewness(ds: LabeledDataset, plan: PartitionPlan) -> float:
    """Mean pairwise KS statistic between institution label distributions."""
    labels = ds.label_array()
    groups = []
    for k, a in enumerate(plan.assignments):
        if not a:
            raise ValueError(f"institution {k} is empty")
        groups.append(labels[list(a)])
    pairs = list(itertools.combinations(range(len(groups)), 2))
    if not pairs:
        return 0.0
    return float(np.mean([ks_statistic(groups[i], groups[j]) for i, j in pairs]))


def apply_global_share(ds: LabeledDataset, plan: PartitionPlan, share_fraction: float, seed: int) -> PartitionPlan:
    """Append one stratified, globally shared pool to every institution.

    Samples are duplicated, not moved: original assignments are kept and the
    pool is recorded on the returned plan.
    """
    if not 0 < share_fraction < 1:
        raise ValueError("share_fraction must lie in (0, 1)")
    n = len(ds)
    pool_size = int(np.floor(share_fraction * n))
    if pool_size < 1:
        raise ValueError(f"share_fraction {share_fraction} of {n} samples gives an empty pool")
    rng = np.random.default_rng(seed)
    strata = _strata(ds)
    values, freq = np.unique(strata, return_counts=True)
    per = _largest_remainder(pool_size, freq / freq.sum())
    pool = []
    for s, c in zip(values, per):
        pool += rng.permutation(np.flatnonzero(strata == s))[:c].tolist()
    pool = sorted(pool)
    return PartitionPlan(tuple(tuple(a) + tuple(pool) for a in plan.assignments), plan.seed, tuple(pool))


def institution_datasets(ds: LabeledDataset, plan: PartitionPlan) -> list[LabeledDataset]:
    plan.validate_for(ds)
    return [ds.subset(a) for a in plan.assignments]


# ---------------------------------------------------------------------------
# presets

# Class-0 share per institution (binary task, equal sizes).  Mean pairwise
# KS is the mean absolute pairwise difference of these shares.
CLASSIFICATION_PRESETS = {
    "split1": (0.5, 0.5, 0.5, 0.5),
    "split2": (0.85, 0.65, 0.35, 0.15),
    "split3": (1.0, 0.85, 0.15, 0.0),
}
CLASSIFICATION_KS_TARGETS = {"split1": 0.0, "split2": 0.40, "split3": 0.61}

# Weights over four label-quantile bands (regression).
REGRESSION_PRESETS = {
    "split1": ((0.25, 0.25, 0.25, 0.25),) * 4,
    "split2": (
        (0.7, 0.2, 0.07, 0.03),
        (0.2, 0.6, 0.13, 0.07),
        (0.07, 0.13, 0.6, 0.2),
        (0.03, 0.07, 0.2, 0.7),
    ),
    "split3": (
        (0.97, 0.03, 0.0, 0.0),
        (0.03, 0.94, 0.03, 0.0),
        (0.0, 0.03, 0.94, 0.03),
        (0.0, 0.0, 0.03, 0.97),
    ),
}
REGRESSION_KS_TARGETS = {"split1": 0.02, "split2": 0.63, "split3": 0.97}


def preset_skew(name: str, ds: LabeledDataset, K: int = 4, size: Optional[int] = None) -> SkewSpec:
    """SkewSpec for a named preset with equal institution sizes.

    ``size`` defaults to the largest equal size the dataset can supply, which
    for a balanced dataset is ``N // K``: every preset then covers the same
    samples and only the assignment differs.
    """
    if ds.task_kind == "classification":
        if name not in CLASSIFICATION_PRESETS:
            raise ValueError(f"unknown preset {name!r}")
        if ds.num_classes != 2 or K != 4:
            raise ValueError("classification presets are defined for 4 institutions, 2 classes")
        shares = CLASSIFICATION_PRESETS[name]
        rows = tuple((p, 1.0 - p) for p in shares)
    else:
        if name not in REGRESSION_PRESETS or K != 4:
            raise ValueError(f"unknown preset {name!r} for K={K}")
        rows = REGRESSION_PRESETS[name]
    width = len(rows[0])
    strata = _strata(ds, bands=width) if ds.task_kind == "regression" else _strata(ds)
    supply = np.bincount(strata, minlength=width)
    if size is None:
        size = len(ds) // K
        # shrink until largest-remainder rounding fits the per-label supply
        while size > 0:
            demand = np.sum([_largest_remainder(size, r) for r in rows], axis=0)
            if np.all(demand <= supply):
                break
            size -= 1
    return SkewSpec(rows, (size,) * K)


def preset_partition(name: str, ds: LabeledDataset, seed: int, K: int = 4, size: Optional[int] = None) -> PartitionPlan:
    if name == "split1" and size is None:
        # stratified deal: balanced and as close to KS 0 as integer counts allow
        return partition_iid(ds, K, seed)
    return partition_by_proportions(ds, preset_skew(name, ds, K, size), seed)
