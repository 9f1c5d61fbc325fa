"""Synthetic cross-silo datasets, CSV ingestion, global normalization, folds.

Shards are immutable after construction. Normalization statistics are global
(computed across all shards through the secure aggregator, never from pooled
raw rows) and are NOT noised -- the leakage of a global mean/variance is
treated as negligible and excluded from the privacy accounting.

CSV format: header row; the label lives in a column named ``label`` (integer
class ids) or in multi-hot columns ``label_0 .. label_{k-1}``; every other
column is a numeric feature.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import FixedPointCodec, Prng
from .secagg import SecAggSession, aggregate, mask

__all__ = [
    "DatasetShard",
    "SyntheticSpec",
    "generate",
    "load_shard_csv",
    "save_shard_csv",
    "global_normalize",
    "normalization_stats",
    "apply_normalization",
    "replicate_minority",
    "kfold",
]

TASKS = ("binary", "multiclass", "multilabel")


@dataclass(frozen=True)
class DatasetShard:
    """One participant's private rows: features (n, d) and aligned labels."""

    features: np.ndarray
    labels: np.ndarray
    participant_id: int
    normalized: bool = False

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if len(self.labels) != len(self.features):
            raise ValueError(
                f"label count {len(self.labels)} != row count {len(self.features)}"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain missing or non-finite values")

    @property
    def n_rows(self) -> int:
        return len(self.features)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def select(self, idx: np.ndarray) -> "DatasetShard":
        return replace(self, features=self.features[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a heterogeneous multi-participant synthetic dataset.

    heterogeneity in [0, 1] scales participant-specific shifts of the
    class-conditional feature means; 0 gives every participant the same
    distribution. class_balance rows hold per-class proportions (binary /
    multiclass, must sum to 1) or per-label marginals (multilabel).
    """

    sizes: tuple[int, ...]
    n_features: int
    task: str = "binary"
    n_classes: int = 2
    class_balance: tuple[tuple[float, ...], ...] | None = None
    heterogeneity: float = 0.0
    separation: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.task == "binary" and self.n_classes != 2:
            raise ValueError("binary task implies n_classes = 2")
        if any(s < 1 for s in self.sizes) or not self.sizes:
            raise ValueError("every shard size must be >= 1")
        if self.n_features < 1 or self.n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ValueError("heterogeneity must be in [0, 1]")
        if self.class_balance is not None:
            if len(self.class_balance) != self.n_participants:
                raise ValueError("class_balance needs one row per participant")
            for row in self.class_balance:
                if len(row) != self.n_classes or any(p < 0 for p in row):
                    raise ValueError("class_balance rows must be non-negative per-class")
                if self.task != "multilabel" and abs(sum(row) - 1.0) > 1e-9:
                    raise ValueError("class proportions must sum to 1 per participant")

    @property
    def n_participants(self) -> int:
        return len(self.sizes)


def generate(spec: SyntheticSpec) -> list[DatasetShard]:
    """Gaussian class-conditional shards, deterministic in the spec seed."""
    root = Prng(spec.seed).derive("synthetic-data")
    gen = root.derive("class-means").generator()
    # unit-normalized class directions scaled by the separation knob
    mu = gen.standard_normal((spec.n_classes, spec.n_features))
    mu *= spec.separation / np.maximum(np.linalg.norm(mu, axis=1, keepdims=True), 1e-12)

    balance = spec.class_balance
    if balance is None:
        if spec.task == "multilabel":
            balance = tuple((0.5,) * spec.n_classes for _ in spec.sizes)
        else:
            balance = tuple(
                (1.0 / spec.n_classes,) * spec.n_classes for _ in spec.sizes
            )

    shards = []
    for h, size in enumerate(spec.sizes):
        sgen = root.derive("shard", h).generator()
        shift = spec.heterogeneity * sgen.standard_normal((spec.n_classes, spec.n_features))
        props = np.asarray(balance[h], dtype=np.float64)
        if spec.task == "multilabel":
            labels = (sgen.random((size, spec.n_classes)) < props).astype(np.int64)
            centers = labels @ (mu + shift)
        else:
            labels = sgen.choice(spec.n_classes, size=size, p=props / props.sum())
            centers = (mu + shift)[labels]
        features = centers + sgen.standard_normal((size, spec.n_features))
        shards.append(DatasetShard(features=features, labels=labels, participant_id=h))
    return shards


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_shard_csv(path: str | Path, participant_id: int) -> DatasetShard:
    """Read one participant's rows; errors name the offending file."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")

    multi_cols = sorted(
        (c for c in header if c.startswith("label_")),
        key=lambda c: int(c.split("_", 1)[1]),
    )
    if "label" in header:
        label_cols = ["label"]
    elif multi_cols:
        label_cols = multi_cols
    else:
        raise ValueError(f"{path}: no 'label' or 'label_0..label_k' column in header")
    feature_cols = [c for c in header if c not in label_cols]
    col_idx = {c: header.index(c) for c in header}

    try:
        features = np.array(
            [[float(r[col_idx[c]]) for c in feature_cols] for r in rows], dtype=np.float64
        )
        label_mat = np.array(
            [[int(float(r[col_idx[c]])) for c in label_cols] for r in rows], dtype=np.int64
        )
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed numeric value ({exc})") from None
    labels = label_mat[:, 0] if len(label_cols) == 1 else label_mat
    return DatasetShard(features=features, labels=labels, participant_id=participant_id)


def save_shard_csv(shard: DatasetShard, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    multilabel = shard.labels.ndim == 2
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        label_cols = (
            [f"label_{j}" for j in range(shard.labels.shape[1])] if multilabel else ["label"]
        )
        writer.writerow([f"f{j}" for j in range(shard.n_features)] + label_cols)
        for i in range(shard.n_rows):
            labels = list(shard.labels[i]) if multilabel else [shard.labels[i]]
            writer.writerow([repr(float(v)) for v in shard.features[i]] + [int(v) for v in labels])


# ---------------------------------------------------------------------------
# Global normalization through secure aggregation
# ---------------------------------------------------------------------------


def normalization_stats(
    shards: list[DatasetShard], *, seed: int = 0, codec: FixedPointCodec | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Global per-feature (mean, std) via one secure-aggregation round.

    Each shard contributes [sum_x, sum_x^2, row_count] as a single masked
    vector; only the aggregate leaves the participants. Zero-variance
    features get std 1 (centering only) with a warning.
    """
    d = shards[0].n_features
    if any(s.n_features != d for s in shards):
        raise ValueError("all shards must share the feature dimension")
    session = SecAggSession(
        session_id=0,
        participant_ids=[s.participant_id for s in shards],
        vector_len=2 * d + 1,
        codec=codec,
        seed=Prng(seed).derive("normalization").stream_id,
    )
    shares = []
    for s in shards:
        payload = np.concatenate(
            [s.features.sum(axis=0), (s.features**2).sum(axis=0), [s.n_rows]]
        )
        shares.append(mask(session, s.participant_id, payload))
    total = aggregate(session, shares)
    n = round(total[2 * d])
    mean = total[:d] / n
    var = np.maximum(total[d : 2 * d] / n - mean**2, 0.0)
    std = np.sqrt(var)
    zero = std <= 1e-9
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} zero-variance feature(s): centered only", stacklevel=2
        )
        std = np.where(zero, 1.0, std)
    return mean, std


def apply_normalization(
    shard: DatasetShard, mean: np.ndarray, std: np.ndarray
) -> DatasetShard:
    return replace(shard, features=(shard.features - mean) / std, normalized=True)


def global_normalize(
    shards: list[DatasetShard], *, seed: int = 0, codec: FixedPointCodec | None = None
) -> list[DatasetShard]:
    """Transform every shard to zero global mean and unit global std."""
    if any(s.normalized for s in shards):
        raise ValueError("shards are already normalized")
    mean, std = normalization_stats(shards, seed=seed, codec=codec)
    return [apply_normalization(s, mean, std) for s in shards]


# ---------------------------------------------------------------------------
# Minority replication and folding
# ---------------------------------------------------------------------------


def replicate_minority(
    shard: DatasetShard, class_id: int, factor: int, *, seed: int = 0
) -> DatasetShard:
    """Duplicate the class's rows to factor copies total, then reshuffle.

    Must run before the sampling rate is derived so the accountant sees the
    inflated dataset size. The group-privacy caveat of training on replicated
    rows is documented, not corrected for.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if shard.labels.ndim != 1:
        raise ValueError("replication applies to single-label shards")
    hit = np.flatnonzero(shard.labels == class_id)
    if hit.size == 0:
        warnings.warn(f"class {class_id} absent; shard unchanged", stacklevel=2)
        return shard
    if factor == 1:
        return shard
    idx = np.concatenate([np.arange(shard.n_rows)] + [hit] * (factor - 1))
    perm = Prng(seed).derive("replicate", shard.participant_id).generator().permutation(len(idx))
    return shard.select(idx[perm])


def _strata(labels: np.ndarray) -> np.ndarray:
    """Map labels (ids or multi-hot rows) to integer stratum codes."""
    if labels.ndim == 1:
        return labels
    _, codes = np.unique(labels, axis=0, return_inverse=True)
    return codes


def _fold_assignment(shard: DatasetShard, k: int, seed: int) -> np.ndarray:
    """Test-fold id per row: stratified, with remainders balanced so that
    fold test sizes differ by at most one row."""
    gen = Prng(seed).derive("kfold", k, shard.participant_id).generator()
    codes = _strata(shard.labels)
    assign = np.empty(shard.n_rows, dtype=np.int64)
    load = np.zeros(k, dtype=np.int64)
    for stratum in np.unique(codes):
        members = np.flatnonzero(codes == stratum)
        members = members[gen.permutation(len(members))]
        base, rem = divmod(len(members), k)
        counts = np.full(k, base, dtype=np.int64)
        if rem:
            lightest = np.lexsort((np.arange(k), load))[:rem]
            counts[lightest] += 1
        load += counts
        stops = np.cumsum(counts)
        for f in range(k):
            assign[members[stops[f] - counts[f] : stops[f]]] = f
    return assign


def kfold(
    shards: list[DatasetShard], k: int, fold: int, seed: int = 0
) -> tuple[list[DatasetShard], list[DatasetShard]]:
    """Per-participant stratified split: (train shards, test shards).

    Across the k folds every row lands in the test set exactly once.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if not 0 <= fold < k:
        raise ValueError(f"fold must be in [0, {k})")
    train, test = [], []
    for shard in shards:
        if shard.n_rows < k:
            raise ValueError(
                f"shard {shard.participant_id} has {shard.n_rows} rows < k={k}"
            )
        assign = _fold_assignment(shard, k, seed)
        train.append(shard.select(np.flatnonzero(assign != fold)))
        test.append(shard.select(np.flatnonzero(assign == fold)))
    return train, test
