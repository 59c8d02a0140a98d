"""Interaction data: loading, binarized train/test split, negative sampling,
client partitioning and synthetic data generation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hetefedrec._rng import stream

log = logging.getLogger(__name__)

FORMATS = {"movielens-dat": "::", "tsv": "\t", "csv": ","}

SMALL, MEDIUM, LARGE = 0, 1, 2


class DatasetFormatError(ValueError):
    """Raised when an interaction file cannot be parsed."""


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.user < 0 or self.item < 0:
            raise ValueError("ids must be non-negative")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RawInteractions:
    """Deduplicated interactions with dense 0-based ids.

    ``user_ids[i]`` / ``item_ids[j]`` hold the original labels from the file.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray | None
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    def decode_user(self, index: int) -> str:
        return self.user_ids[index]

    def decode_item(self, index: int) -> str:
        return self.item_ids[index]

    def encode_user(self, label: str) -> int:
        return self._user_index[label]

    def encode_item(self, label: str) -> int:
        return self._item_index[label]

    @property
    def _user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @property
    def _item_index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.item_ids)}


@dataclass(frozen=True)
class InteractionDataset:
    """Binarized per-user train/test positives over dense id spaces."""

    num_users: int
    num_items: int
    train: tuple[np.ndarray, ...]
    test: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.train) != self.num_users or len(self.test) != self.num_users:
            raise ValueError("train/test must hold one item array per user")
        for u, (tr, te) in enumerate(zip(self.train, self.test)):
            for split in (tr, te):
                if split.size and (split.min() < 0 or split.max() >= self.num_items):
                    raise ValueError(f"user {u}: item id out of range")
                if np.unique(split).size != split.size:
                    raise ValueError(f"user {u}: duplicate items within a split")
            if np.intersect1d(tr, te).size:
                raise ValueError(f"user {u}: train and test overlap")

    @classmethod
    def from_lists(cls, num_users: int, num_items: int, train, test) -> "InteractionDataset":
        return cls(
            num_users,
            num_items,
            tuple(_frozen(np.asarray(t, dtype=np.int64)) for t in train),
            tuple(_frozen(np.asarray(t, dtype=np.int64)) for t in test),
        )

    def train_counts(self) -> np.ndarray:
        return np.array([t.size for t in self.train], dtype=np.int64)

    def users_with_test(self) -> np.ndarray:
        return np.array([u for u, t in enumerate(self.test) if t.size], dtype=np.int64)

    def interactions(self, split: str = "train") -> list[Interaction]:
        rows = self.train if split == "train" else self.test
        return [Interaction(u, int(i), 1) for u, items in enumerate(rows) for i in items]

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(f"{self.num_users}:{self.num_items}".encode())
        for rows in (self.train, self.test):
            for items in rows:
                h.update(np.asarray(items, dtype="<i8").tobytes())
                h.update(b"|")
        return h.hexdigest()


# --------------------------------------------------------------------------
# loading


def _sorted_labels(labels: set[str]) -> list[str]:
    try:
        return sorted(labels, key=int)
    except ValueError:
        return sorted(labels)


def _is_number(field: str) -> bool:
    try:
        float(field)
    except ValueError:
        return False
    return True


def load_interactions(path, format: str | None = None) -> RawInteractions:
    """Parse ``user<sep>item<sep>rating[<sep>timestamp]`` records.

    ``format`` is one of ``movielens-dat``, ``tsv`` or ``csv``; when omitted it
    is inferred from the file suffix.  A header line is skipped when its rating
    field is not numeric.  Repeated (user, item) pairs keep their first
    occurrence.
    """
    path = Path(path)
    if format is None:
        format = {".dat": "movielens-dat", ".tsv": "tsv", ".csv": "csv"}.get(path.suffix.lower())
        if format is None:
            raise DatasetFormatError(f"cannot infer format from suffix of {path}")
    if format not in FORMATS:
        raise DatasetFormatError(f"unknown format {format!r}; expected one of {sorted(FORMATS)}")
    sep = FORMATS[format]

    records: list[tuple[str, str, float, int | None]] = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(sep)]
            if len(fields) not in (3, 4) or not fields[0] or not fields[1]:
                if not records and lineno == 1 and len(fields) in (3, 4):
                    continue
                raise DatasetFormatError(f"{path}:{lineno}: expected 3 or 4 fields separated by {sep!r}")
            if not _is_number(fields[2]):
                if not records and lineno == 1:
                    continue  # header
                raise DatasetFormatError(f"{path}:{lineno}: rating {fields[2]!r} is not numeric")
            ts = None
            if len(fields) == 4:
                try:
                    ts = int(float(fields[3]))
                except ValueError:
                    raise DatasetFormatError(f"{path}:{lineno}: timestamp {fields[3]!r} is not numeric") from None
            records.append((fields[0], fields[1], float(fields[2]), ts))

    if not records:
        raise DatasetFormatError(f"{path}: no interactions found")

    seen: set[tuple[str, str]] = set()
    unique = []
    for rec in records:
        key = (rec[0], rec[1])
        if key not in seen:
            seen.add(key)
            unique.append(rec)
    if len(unique) < len(records):
        log.info("dropped %d duplicate (user, item) records", len(records) - len(unique))

    user_ids = _sorted_labels({r[0] for r in unique})
    item_ids = _sorted_labels({r[1] for r in unique})
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {v: i for i, v in enumerate(item_ids)}
    has_ts = all(r[3] is not None for r in unique)
    return RawInteractions(
        users=_frozen(np.array([uidx[r[0]] for r in unique], dtype=np.int64)),
        items=_frozen(np.array([iidx[r[1]] for r in unique], dtype=np.int64)),
        ratings=_frozen(np.array([r[2] for r in unique], dtype=np.float64)),
        timestamps=_frozen(np.array([r[3] for r in unique], dtype=np.int64)) if has_ts else None,
        user_ids=tuple(user_ids),
        item_ids=tuple(item_ids),
    )


def dump_tsv(raw: RawInteractions, path) -> None:
    """Write interactions in the tab-separated format ``load_interactions`` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(len(raw)):
            rating = raw.ratings[k]
            rating_s = str(int(rating)) if float(rating).is_integer() else repr(float(rating))
            fields = [raw.user_ids[raw.users[k]], raw.item_ids[raw.items[k]], rating_s]
            if raw.timestamps is not None:
                fields.append(str(raw.timestamps[k]))
            fh.write("\t".join(fields) + "\n")


# --------------------------------------------------------------------------
# splitting and sampling


def binarize_and_split(raw: RawInteractions, train_frac: float = 0.8, seed: int = 0) -> InteractionDataset:
    """Every rating becomes a positive; each user's items are split independently.

    Users with a single interaction keep it in train.  Users with at least two
    always keep one item on each side.
    """
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    rng = stream(seed, "data", 0)
    order = np.argsort(raw.users, kind="stable")
    users, items = raw.users[order], raw.items[order]
    bounds = np.searchsorted(users, np.arange(raw.num_users + 1))
    train, test = [], []
    for u in range(raw.num_users):
        mine = np.unique(items[bounds[u] : bounds[u + 1]])
        n = mine.size
        if n < 2:
            train.append(mine)
            test.append(mine[:0])
            continue
        n_train = min(max(int(round(n * train_frac)), 1), n - 1)
        perm = rng.permutation(n)
        train.append(np.sort(mine[perm[:n_train]]))
        test.append(np.sort(mine[perm[n_train:]]))
    return InteractionDataset.from_lists(raw.num_users, raw.num_items, train, test)


def negative_batch(positives: np.ndarray, num_items: int, ratio: int, rng: np.random.Generator):
    """Positives followed by ``ratio`` uniform negatives per positive.

    Negatives are drawn with replacement from the items outside ``positives``.
    Returns ``(items, labels)``.
    """
    positives = np.asarray(positives, dtype=np.int64)
    candidates = np.setdiff1d(np.arange(num_items), positives, assume_unique=False)
    if candidates.size == 0:
        return positives.copy(), np.ones(positives.size)
    negatives = candidates[rng.integers(0, candidates.size, size=positives.size * ratio)]
    items = np.concatenate([positives, negatives])
    labels = np.concatenate([np.ones(positives.size), np.zeros(negatives.size)])
    return items, labels


def sample_negatives(user: int, ds: InteractionDataset, ratio: int, rng: np.random.Generator):
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    positives = ds.train[user]
    if positives.size == 0:
        raise ValueError(f"user {user} has no train positives")
    return negative_batch(positives, ds.num_items, ratio, rng)


# --------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class GroupAssignment:
    tiers: np.ndarray
    cutoffs: tuple[int, ...]

    def members(self, tier: int) -> np.ndarray:
        return np.flatnonzero(self.tiers == tier)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(int(np.sum(self.tiers == t)) for t in range(len(self.cutoffs) + 1))

    @property
    def ratio(self) -> tuple[float, ...]:
        n = max(len(self.tiers), 1)
        return tuple(c / n for c in self.counts)


def partition_clients(ds: InteractionDataset, quantiles: Sequence[float] = (0.5, 0.8)) -> GroupAssignment:
    """Assign tiers by empirical quantiles of per-user train counts.

    A user whose count is below the first cutoff is Small, below the second
    Medium, otherwise Large.  Cutoffs are stored as integers; for integer counts
    ``count < q`` and ``count < ceil(q)`` agree.
    """
    q = np.asarray(quantiles, dtype=float)
    if q.ndim != 1 or q.size == 0 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
        raise ValueError(f"quantiles must be strictly increasing in (0, 1), got {tuple(quantiles)}")
    counts = ds.train_counts()
    cutoffs = tuple(int(np.ceil(c)) for c in np.quantile(counts, q))
    tiers = np.searchsorted(np.asarray(cutoffs), counts, side="right").astype(np.int64)
    if counts.size > 1 and np.all(counts == counts[0]):
        warnings.warn("all users have the same interaction count; every client lands in one tier", stacklevel=2)
    groups = GroupAssignment(_frozen(tiers), cutoffs)
    log.info("client groups %s (ratio %s) with cutoffs %s", groups.counts, groups.ratio, cutoffs)
    return groups


# --------------------------------------------------------------------------
# synthetic data


def synth_interactions(
    num_users: int,
    num_items: int,
    latent_dim: int = 4,
    density_skew: float = 1.0,
    seed: int = 0,
    mean_count: float | None = None,
) -> RawInteractions:
    """Sample implicit feedback from a planted low-rank preference model.

    Per-user counts are ``mean_count`` times a mean-one lognormal with shape
    ``density_skew``; ``density_skew=0`` gives equal counts.  Items are drawn
    without replacement in proportion to ``exp(logit)`` where the logit mixes
    user/item factor affinity with an item popularity term.  Every item gets at
    least one interaction so the id space survives a TSV round trip.
    """
    if min(num_users, num_items, latent_dim) < 1:
        raise ValueError("sizes must be >= 1")
    if density_skew < 0:
        raise ValueError("density_skew must be >= 0")
    rng = stream(seed, "synth", 0)
    if mean_count is None:
        mean_count = max(4.0, 0.15 * num_items)
    hi = max(num_items - 1, 1)

    users_f = rng.standard_normal((num_users, latent_dim))
    items_f = rng.standard_normal((num_items, latent_dim))
    popularity = rng.standard_normal(num_items)
    logits = 2.0 * users_f @ items_f.T / np.sqrt(latent_dim) + popularity

    z = rng.standard_normal(num_users)
    scale = np.exp(density_skew * z - 0.5 * density_skew**2)
    counts = np.clip(np.rint(mean_count * scale), min(2, hi), hi).astype(int)

    gumbel = rng.gumbel(size=logits.shape)
    ranked = np.argsort(-(logits + gumbel), axis=1, kind="stable")
    chosen = [set(ranked[u, : counts[u]].tolist()) for u in range(num_users)]

    covered = set().union(*chosen) if chosen else set()
    for item in range(num_items):
        if item not in covered:
            chosen[int(rng.integers(num_users))].add(item)

    users = np.concatenate([np.full(len(c), u) for u, c in enumerate(chosen)])
    items = np.concatenate([np.array(sorted(c), dtype=np.int64) for c in chosen])
    return RawInteractions(
        users=_frozen(users.astype(np.int64)),
        items=_frozen(items),
        ratings=_frozen(np.ones(users.size)),
        timestamps=None,
        user_ids=tuple(str(u) for u in range(num_users)),
        item_ids=tuple(str(i) for i in range(num_items)),
    )


def synth_dataset(
    num_users: int,
    num_items: int,
    latent_dim: int = 4,
    density_skew: float = 1.0,
    seed: int = 0,
    mean_count: float | None = None,
    train_frac: float = 0.8,
) -> InteractionDataset:
    raw = synth_interactions(num_users, num_items, latent_dim, density_skew, seed, mean_count)
    return binarize_and_split(raw, train_frac, seed)


def holdout(items: np.ndarray, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split a client's positives into (fit, validation); validation may be empty."""
    n_val = int(np.floor(items.size * frac))
    if frac <= 0 or n_val == 0 or items.size - n_val < 1:
        return items, items[:0]
    perm = rng.permutation(items.size)
    return np.sort(items[perm[n_val:]]), np.sort(items[perm[:n_val]])
