"""Interaction-log loading, filtering, splitting, and indexing.

File formats (UTF-8, tab separated, no headers):
  interactions:    user_id \t item_id \t rating \t timestamp
  user features:   user_id \t attr=value [\t attr=value ...]
  item categories: item_id \t cat1|cat2|...
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NegativeSamplingError, ParseError

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
POSITIVE_THRESHOLD = 4


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    rating: int
    timestamp: int


def load_interactions(path) -> list[RawInteraction]:
    """Read an interaction log, preserving file order.

    Raises ParseError naming the offending line for malformed rows,
    FileNotFoundError for a missing file.
    """
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(path, line_no, f"expected 4 fields, got {len(parts)}")
            user_id, item_id, rating_s, ts_s = parts
            try:
                rating = int(rating_s)
                timestamp = int(ts_s)
            except ValueError:
                raise ParseError(path, line_no, f"non-integer rating/timestamp: {line!r}")
            if not 1 <= rating <= 5:
                raise ParseError(path, line_no, f"rating {rating} outside [1, 5]")
            if timestamp < 0:
                raise ParseError(path, line_no, f"negative timestamp {timestamp}")
            records.append(RawInteraction(user_id, item_id, rating, timestamp))
    return records


def load_user_features(path) -> dict[str, dict[str, str]]:
    """Read `user_id \t attr=value ...` rows into user -> {attr: value}."""
    path = Path(path)
    features: dict[str, dict[str, str]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError(path, line_no, "expected user_id and at least one attr=value")
            user_id, attr_parts = parts[0], parts[1:]
            attrs = {}
            for part in attr_parts:
                if "=" not in part:
                    raise ParseError(path, line_no, f"malformed attribute {part!r}")
                name, value = part.split("=", 1)
                if name in attrs:
                    raise ParseError(path, line_no, f"duplicate attribute {name!r}")
                attrs[name] = value
            features[user_id] = attrs
    return features


def load_item_categories(path, single_label: bool = False) -> dict[str, list[str]]:
    """Read `item_id \t cat1|cat2|...` rows into item -> [categories].

    With single_label=True only the first listed category is kept
    (approximation for taxonomies where one dominant label is wanted).
    """
    path = Path(path)
    categories: dict[str, list[str]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected 2 fields, got {len(parts)}")
            item_id, cats_s = parts
            cats = [c for c in cats_s.split("|") if c]
            if not cats:
                raise ParseError(path, line_no, f"item {item_id!r} has no categories")
            if single_label:
                cats = cats[:1]
            categories[item_id] = cats
    return categories


def kcore_filter(interactions: list[RawInteraction], k: int) -> list[RawInteraction]:
    """Keep the maximal subset where every user and item has >= k interactions.

    Iterates removal until a fixpoint; may return an empty list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    kept = list(interactions)
    while True:
        user_deg: dict[str, int] = {}
        item_deg: dict[str, int] = {}
        for r in kept:
            user_deg[r.user_id] = user_deg.get(r.user_id, 0) + 1
            item_deg[r.item_id] = item_deg.get(r.item_id, 0) + 1
        filtered = [r for r in kept if user_deg[r.user_id] >= k and item_deg[r.item_id] >= k]
        if len(filtered) == len(kept):
            return filtered
        kept = filtered


def binarize_and_split(
    interactions: list[RawInteraction],
    positive_threshold: int = POSITIVE_THRESHOLD,
    fractions: tuple[float, float, float] = SPLIT_FRACTIONS,
) -> tuple[list[RawInteraction], list[RawInteraction], list[RawInteraction]]:
    """Keep positives (rating >= threshold), time-sort globally, split by fractions.

    Timestamp ties break by (user_id, item_id) lexical order. Train and
    valid sizes are floored; the remainder goes to test.
    """
    positives = [r for r in interactions if r.rating >= positive_threshold]
    positives.sort(key=lambda r: (r.timestamp, r.user_id, r.item_id))
    n = len(positives)
    n_train = int(n * fractions[0])
    n_valid = int(n * fractions[1])
    train = positives[:n_train]
    valid = positives[n_train : n_train + n_valid]
    test = positives[n_train + n_valid :]
    return train, valid, test


@dataclass
class Dataset:
    """Indexed interaction splits plus user/item profiles.

    Splits are (n, 2) int32 arrays of [user_index, item_index] in global
    time order, with parallel timestamp arrays. All split rows are
    positives; `train_negatives` holds sampled label-0 pairs.
    """

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    train_ts: np.ndarray
    valid_ts: np.ndarray
    test_ts: np.ndarray
    user_features: np.ndarray       # (n_users, N) uint8, one-hot per attribute group
    item_categories: np.ndarray     # (n_items, M) uint8, multi-hot
    user_ids: list[str]
    item_ids: list[str]
    feature_names: list[str]        # "group=value", grouped contiguously
    category_names: list[str]
    attribute_groups: dict[str, tuple[int, int]]  # group -> [start, stop) over feature_names
    train_negatives: np.ndarray | None = None
    _caches: dict = field(default_factory=dict, repr=False)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_user_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    @property
    def user_index(self) -> dict[str, int]:
        if "user_index" not in self._caches:
            self._caches["user_index"] = {u: i for i, u in enumerate(self.user_ids)}
        return self._caches["user_index"]

    @property
    def item_index(self) -> dict[str, int]:
        if "item_index" not in self._caches:
            self._caches["item_index"] = {v: i for i, v in enumerate(self.item_ids)}
        return self._caches["item_index"]

    def positives_by_user(self, split: str) -> list[np.ndarray]:
        """Item indices per user for one of train/valid/test, in time order."""
        key = f"pos_{split}"
        if key not in self._caches:
            pairs = getattr(self, split)
            buckets: list[list[int]] = [[] for _ in range(self.n_users)]
            for u, i in pairs:
                buckets[u].append(i)
            self._caches[key] = [np.asarray(b, dtype=np.int64) for b in buckets]
        return self._caches[key]

    def seen_items(self, user: int, splits=("train", "valid", "test")) -> np.ndarray:
        parts = [self.positives_by_user(s)[user] for s in splits]
        return np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    def candidate_items(self, user: int, exclude_splits=("train", "valid")) -> np.ndarray:
        """All-ranking candidate set: full catalog minus the user's known positives."""
        seen = self.seen_items(user, exclude_splits)
        mask = np.ones(self.n_items, dtype=bool)
        mask[seen] = False
        return np.flatnonzero(mask)

    def category_distribution(self, items) -> np.ndarray:
        return category_distribution(items, self.item_categories)

    def majority_category(self, user: int, split: str = "train") -> int | None:
        items = self.positives_by_user(split)[user]
        if len(items) == 0:
            return None
        return int(np.argmax(self.category_distribution(items)))

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        arrays = {
            "train": self.train, "valid": self.valid, "test": self.test,
            "train_ts": self.train_ts, "valid_ts": self.valid_ts, "test_ts": self.test_ts,
            "user_features": self.user_features, "item_categories": self.item_categories,
        }
        if self.train_negatives is not None:
            arrays["train_negatives"] = self.train_negatives
        np.savez_compressed(out_dir / "arrays.npz", **arrays)
        vocab = {
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "feature_names": self.feature_names,
            "category_names": self.category_names,
            "attribute_groups": {k: list(v) for k, v in self.attribute_groups.items()},
        }
        (out_dir / "vocab.json").write_text(json.dumps(vocab), encoding="utf-8")
        (out_dir / "manifest.json").write_text(
            json.dumps(self.summary(), indent=2), encoding="utf-8"
        )

    @classmethod
    def load(cls, in_dir) -> "Dataset":
        in_dir = Path(in_dir)
        with np.load(in_dir / "arrays.npz") as npz:
            arrays = {k: npz[k] for k in npz.files}
        vocab = json.loads((in_dir / "vocab.json").read_text(encoding="utf-8"))
        return cls(
            train=arrays["train"], valid=arrays["valid"], test=arrays["test"],
            train_ts=arrays["train_ts"], valid_ts=arrays["valid_ts"], test_ts=arrays["test_ts"],
            user_features=arrays["user_features"],
            item_categories=arrays["item_categories"],
            user_ids=list(vocab["user_ids"]),
            item_ids=list(vocab["item_ids"]),
            feature_names=list(vocab["feature_names"]),
            category_names=list(vocab["category_names"]),
            attribute_groups={k: (int(a), int(b)) for k, (a, b) in vocab["attribute_groups"].items()},
            train_negatives=arrays.get("train_negatives"),
        )

    def summary(self) -> dict:
        return {
            "format_version": 1,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_user_features": self.n_user_features,
            "n_categories": self.n_categories,
            "split_sizes": {
                "train": int(len(self.train)),
                "valid": int(len(self.valid)),
                "test": int(len(self.test)),
            },
            "n_train_negatives": int(len(self.train_negatives)) if self.train_negatives is not None else 0,
            "attribute_groups": {k: list(v) for k, v in self.attribute_groups.items()},
        }


def _index_user_features(
    user_ids: list[str], raw_features: dict[str, dict[str, str]] | None
) -> tuple[np.ndarray, list[str], dict[str, tuple[int, int]]]:
    """One-hot user attributes, grouped contiguously; groups and values sorted."""
    if not raw_features:
        return np.zeros((len(user_ids), 0), dtype=np.uint8), [], {}
    missing = [u for u in user_ids if u not in raw_features]
    if missing:
        raise KeyError(f"user feature file missing {len(missing)} users, e.g. {missing[0]!r}")
    groups: dict[str, set[str]] = {}
    for u in user_ids:
        for name, value in raw_features[u].items():
            groups.setdefault(name, set()).add(value)
    feature_names: list[str] = []
    group_spans: dict[str, tuple[int, int]] = {}
    for name in sorted(groups):
        start = len(feature_names)
        for value in sorted(groups[name]):
            feature_names.append(f"{name}={value}")
        group_spans[name] = (start, len(feature_names))
    feat_index = {f: i for i, f in enumerate(feature_names)}
    matrix = np.zeros((len(user_ids), len(feature_names)), dtype=np.uint8)
    for row, u in enumerate(user_ids):
        attrs = raw_features[u]
        for name in group_spans:
            if name not in attrs:
                raise KeyError(f"user {u!r} is missing attribute group {name!r}")
            matrix[row, feat_index[f"{name}={attrs[name]}"]] = 1
    return matrix, feature_names, group_spans


def _index_item_categories(
    item_ids: list[str], raw_categories: dict[str, list[str]]
) -> tuple[np.ndarray, list[str]]:
    missing = [v for v in item_ids if v not in raw_categories]
    if missing:
        raise KeyError(f"item category file missing {len(missing)} items, e.g. {missing[0]!r}")
    names = sorted({c for v in item_ids for c in raw_categories[v]})
    cat_index = {c: i for i, c in enumerate(names)}
    matrix = np.zeros((len(item_ids), len(names)), dtype=np.uint8)
    for row, v in enumerate(item_ids):
        for c in raw_categories[v]:
            matrix[row, cat_index[c]] = 1
    return matrix, names


def build_dataset(
    interactions: list[RawInteraction],
    item_categories: dict[str, list[str]],
    user_features: dict[str, dict[str, str]] | None = None,
    kcore: int = 10,
    positive_threshold: int = POSITIVE_THRESHOLD,
    fractions: tuple[float, float, float] = SPLIT_FRACTIONS,
) -> Dataset:
    """Full preparation pipeline: k-core, binarize, time split, index."""
    filtered = kcore_filter(interactions, kcore) if kcore > 1 else list(interactions)
    train, valid, test = binarize_and_split(filtered, positive_threshold, fractions)
    retained = train + valid + test
    user_ids = sorted({r.user_id for r in retained})
    item_ids = sorted({r.item_id for r in retained})
    uindex = {u: i for i, u in enumerate(user_ids)}
    iindex = {v: i for i, v in enumerate(item_ids)}

    def to_arrays(rows):
        pairs = np.asarray(
            [(uindex[r.user_id], iindex[r.item_id]) for r in rows], dtype=np.int32
        ).reshape(-1, 2)
        ts = np.asarray([r.timestamp for r in rows], dtype=np.int64)
        return pairs, ts

    train_a, train_ts = to_arrays(train)
    valid_a, valid_ts = to_arrays(valid)
    test_a, test_ts = to_arrays(test)
    feat_matrix, feature_names, group_spans = _index_user_features(user_ids, user_features)
    cat_matrix, category_names = _index_item_categories(item_ids, item_categories)
    return Dataset(
        train=train_a, valid=valid_a, test=test_a,
        train_ts=train_ts, valid_ts=valid_ts, test_ts=test_ts,
        user_features=feat_matrix, item_categories=cat_matrix,
        user_ids=user_ids, item_ids=item_ids,
        feature_names=feature_names, category_names=category_names,
        attribute_groups=group_spans,
    )


def sample_negatives(dataset: Dataset, seed: int) -> np.ndarray:
    """One unobserved (user, item) per training positive, deterministic given seed.

    A negative never collides with any of that user's train/valid/test
    positives. Raises NegativeSamplingError if a user's positives cover
    the whole catalog.
    """
    rng = np.random.default_rng(seed)
    n_items = dataset.n_items
    seen = [set(dataset.seen_items(u).tolist()) for u in range(dataset.n_users)]
    negatives = np.empty_like(dataset.train)
    for row, (u, _i) in enumerate(dataset.train):
        if len(seen[u]) >= n_items:
            raise NegativeSamplingError(
                f"user {dataset.user_ids[u]!r} has interacted with every item"
            )
        j = int(rng.integers(n_items))
        while j in seen[u]:
            j = int(rng.integers(n_items))
        negatives[row] = (u, j)
    return negatives


def category_distribution(items, item_categories: np.ndarray) -> np.ndarray:
    """Average of per-item L1-normalized category vectors; zeros for an empty set.

    Per-item normalization keeps multi-label items from dominating: an
    item with two categories contributes 0.5 to each.
    """
    m = item_categories.shape[1]
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0:
        return np.zeros(m, dtype=np.float64)
    rows = item_categories[items].astype(np.float64)
    counts = rows.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("item with no active category in distribution computation")
    rows /= counts[:, None]
    return rows.mean(axis=0)


def select_preference_shift_users(dataset: Dataset) -> np.ndarray:
    """Users whose largest train-split category differs from the test-split one.

    Argmax ties break toward the lowest category index. Users with an
    empty train or test split are excluded.
    """
    selected = []
    train_pos = dataset.positives_by_user("train")
    test_pos = dataset.positives_by_user("test")
    for u in range(dataset.n_users):
        if len(train_pos[u]) == 0 or len(test_pos[u]) == 0:
            continue
        top_train = int(np.argmax(dataset.category_distribution(train_pos[u])))
        top_test = int(np.argmax(dataset.category_distribution(test_pos[u])))
        if top_train != top_test:
            selected.append(u)
    return np.asarray(selected, dtype=np.int64)


def convert_ml1m(raw_dir, out_dir) -> dict[str, Path]:
    """Convert raw MovieLens-1M files (ratings.dat/users.dat/movies.dat)
    into the package's tab-separated input formats."""
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": out_dir / "interactions.tsv",
        "user_features": out_dir / "user_features.tsv",
        "item_categories": out_dir / "item_categories.tsv",
    }
    with (raw_dir / "ratings.dat").open("r", encoding="latin-1") as fh, \
            paths["interactions"].open("w", encoding="utf-8") as out:
        for line in fh:
            user, item, rating, ts = line.rstrip("\n").split("::")
            out.write(f"{user}\t{item}\t{rating}\t{ts}\n")
    with (raw_dir / "users.dat").open("r", encoding="latin-1") as fh, \
            paths["user_features"].open("w", encoding="utf-8") as out:
        for line in fh:
            user, gender, age, occupation, _zip = line.rstrip("\n").split("::")
            out.write(f"{user}\tgender={gender}\tage={age}\toccupation={occupation}\n")
    with (raw_dir / "movies.dat").open("r", encoding="latin-1") as fh, \
            paths["item_categories"].open("w", encoding="utf-8") as out:
        for line in fh:
            item, _title, genres = line.rstrip("\n").split("::")
            out.write(f"{item}\t{genres}\n")
    return paths
