"""Interaction logs, implicit-feedback datasets, leave-one-out splits and k-cores.

Datasets are stored as CSR arrays: ``indptr`` delimits each user's slice of
``indices`` (sorted internal item indices) and the optional aligned
``timestamps``. Everything here is immutable after construction.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from advrec.errors import ConfigurationError, DomainError, EmptyDatasetError, ParseError

logger = logging.getLogger(__name__)

COLUMN_NAMES = ("user", "item", "rating", "timestamp")


@dataclass(frozen=True)
class TsvSpec:
    """How to read a delimiter-separated interaction file.

    ``columns`` names the file's columns in order; use ``"_"`` for columns
    to ignore. MovieLens ``ratings.dat`` is ``TsvSpec(delimiter="::")``.
    """

    delimiter: str = "\t"
    header: bool = False
    columns: tuple[str, ...] = COLUMN_NAMES
    strict: bool = False

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        if "user" not in cols or "item" not in cols:
            raise ConfigurationError("columns must include 'user' and 'item'")
        for name in cols:
            if name != "_" and name not in COLUMN_NAMES:
                raise ConfigurationError(f"unknown column name {name!r}")
            if name != "_" and cols.count(name) > 1:
                raise ConfigurationError(f"duplicate column {name!r}")
        if not self.delimiter:
            raise ConfigurationError("delimiter must be non-empty")


@dataclass(frozen=True)
class InteractionLog:
    """Raw parsed records, stored column-wise.

    ``ratings`` holds NaN where a record has no rating. ``timestamps`` is
    None unless every record carries one.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray | None = None
    malformed: int = 0

    def __len__(self):
        return len(self.users)

    @property
    def records(self):
        ts = self.timestamps
        return [
            (self.users[k], self.items[k], float(self.ratings[k]),
             None if ts is None else int(ts[k]))
            for k in range(len(self))
        ]

    @classmethod
    def from_records(cls, records):
        """Build a log from ``(user, item[, rating[, timestamp]])`` tuples."""
        users, items, ratings, stamps = [], [], [], []
        for rec in records:
            users.append(str(rec[0]))
            items.append(str(rec[1]))
            ratings.append(float(rec[2]) if len(rec) > 2 and rec[2] is not None else np.nan)
            stamps.append(rec[3] if len(rec) > 3 else None)
        has_ts = bool(stamps) and all(t is not None for t in stamps)
        return cls(
            users=np.array(users, dtype=object),
            items=np.array(items, dtype=object),
            ratings=np.array(ratings, dtype=np.float64),
            timestamps=np.array(stamps, dtype=np.int64) if has_ts else None,
        )


def load_interactions(path, spec: TsvSpec | None = None) -> InteractionLog:
    """Parse an interaction file.

    In lenient mode malformed lines are skipped and counted in
    ``InteractionLog.malformed``; with ``spec.strict`` the first one raises
    :class:`ParseError` carrying its 1-based line number.
    """
    spec = spec or TsvSpec()
    pos = {name: k for k, name in enumerate(spec.columns) if name != "_"}
    cu, ci = pos["user"], pos["item"]
    cr, ct = pos.get("rating"), pos.get("timestamp")

    users, items, ratings, stamps = [], [], [], []
    missing_ts = False
    malformed = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if spec.header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(spec.delimiter)
            try:
                if len(fields) < 2 or max(cu, ci) >= len(fields):
                    raise ValueError(f"expected at least 2 fields, got {len(fields)}")
                user, item = fields[cu].strip(), fields[ci].strip()
                if not user or not item:
                    raise ValueError("empty user or item field")
                rating = float(fields[cr]) if cr is not None and cr < len(fields) else np.nan
                ts = int(float(fields[ct])) if ct is not None and ct < len(fields) else None
            except ValueError as exc:
                if spec.strict:
                    raise ParseError(lineno, str(exc)) from None
                malformed += 1
                continue
            users.append(user)
            items.append(item)
            ratings.append(rating)
            if ts is None:
                missing_ts = True
            stamps.append(ts)

    if malformed:
        logger.warning("%s: skipped %d malformed lines", path, malformed)
    has_ts = ct is not None and not missing_ts and bool(stamps)
    return InteractionLog(
        users=np.array(users, dtype=object),
        items=np.array(items, dtype=object),
        ratings=np.array(ratings, dtype=np.float64),
        timestamps=np.array(stamps, dtype=np.int64) if has_ts else None,
        malformed=malformed,
    )


@dataclass(frozen=True, eq=False)
class ImplicitDataset:
    """Binary user-item interactions in CSR layout.

    Users without interactions never appear (they are dropped by
    :meth:`from_pairs`); items may have zero interactions, since the catalog
    is shared between a dataset and its splits.
    """

    indptr: np.ndarray
    indices: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    timestamps: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.indptr) != len(self.user_ids) + 1:
            raise DomainError("indptr length must be num_users + 1")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= len(self.item_ids)):
            raise DomainError("item index out of range")
        if np.any(np.diff(self.indptr) < 1):
            raise DomainError("every user needs at least one interaction")
        for arr in (self.indptr, self.indices, self.timestamps):
            if arr is not None:
                arr.flags.writeable = False

    @classmethod
    def from_pairs(cls, users, items, user_ids, item_ids, timestamps=None, meta=None):
        """Build a dataset from parallel index arrays.

        Duplicate pairs collapse to one, keeping the greatest timestamp.
        Users left without interactions are dropped and re-indexed in order.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        num_items = len(item_ids)
        if timestamps is not None:
            timestamps = np.asarray(timestamps, dtype=np.int64)
            order = np.lexsort((timestamps, items, users))
        else:
            order = np.lexsort((items, users))
        users, items = users[order], items[order]
        if timestamps is not None:
            timestamps = timestamps[order]
        # last entry of each (user, item) run holds the max timestamp
        key = users * num_items + items
        last = np.ones(len(key), dtype=bool)
        last[:-1] = key[1:] != key[:-1]
        users, items = users[last], items[last]
        if timestamps is not None:
            timestamps = timestamps[last]

        present = np.unique(users)
        user_ids = np.asarray(user_ids, dtype=object)
        if len(present) != len(user_ids):
            remap = np.full(len(user_ids), -1, dtype=np.int64)
            remap[present] = np.arange(len(present))
            users = remap[users]
            user_ids = user_ids[present]
        counts = np.bincount(users, minlength=len(user_ids))
        indptr = np.zeros(len(user_ids) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(
            indptr=indptr,
            indices=items,
            user_ids=user_ids,
            item_ids=np.asarray(item_ids, dtype=object),
            timestamps=timestamps,
            meta=dict(meta or {}),
        )

    @property
    def num_users(self):
        return len(self.user_ids)

    @property
    def num_items(self):
        return len(self.item_ids)

    @property
    def num_interactions(self):
        return len(self.indices)

    def user_items(self, u):
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def user_timestamps(self, u):
        if self.timestamps is None:
            return None
        return self.timestamps[self.indptr[u]:self.indptr[u + 1]]

    @cached_property
    def user_degrees(self):
        return np.diff(self.indptr)

    @cached_property
    def item_degrees(self):
        return np.bincount(self.indices, minlength=self.num_items)

    @cached_property
    def row_of(self):
        """User index of every stored interaction."""
        return np.repeat(np.arange(self.num_users, dtype=np.int64), self.user_degrees)

    @cached_property
    def _keys(self):
        return self.row_of * self.num_items + self.indices

    def contains(self, users, items):
        """Vectorised membership test for (user, item) pairs."""
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def pairs(self):
        return self.row_of, self.indices, self.timestamps

    def user_sets(self):
        return [set(self.user_items(u).tolist()) for u in range(self.num_users)]


def binarize(log: InteractionLog, meta=None) -> ImplicitDataset:
    """Collapse a log into one implicit positive per distinct (user, item).

    Ratings are discarded; internal indices follow first appearance.
    """
    if len(log) == 0:
        raise EmptyDatasetError("cannot binarize an empty interaction log")
    user_codes, user_ids = _factorize(log.users)
    item_codes, item_ids = _factorize(log.items)
    return ImplicitDataset.from_pairs(
        user_codes, item_codes, user_ids, item_ids, timestamps=log.timestamps, meta=meta
    )


def _factorize(tokens):
    """Codes in order of first appearance."""
    tokens = np.asarray(tokens).astype(str)
    uniq, first, inverse = np.unique(tokens, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[order] = np.arange(len(uniq))
    return rank[inverse.ravel()], uniq[order].astype(object)


@dataclass(frozen=True, eq=False)
class SplitPair:
    train: ImplicitDataset
    test: dict
    mode: str
    seed: int | None = None
    test_timestamps: dict | None = None

    @property
    def test_users(self):
        return np.array(sorted(self.test), dtype=np.int64)


def leave_one_out_split(ds: ImplicitDataset, mode="last", seed=0) -> SplitPair:
    """Hold out one interaction per user with at least two of them.

    ``mode="last"`` holds out the latest interaction (ties go to the greatest
    item index); ``mode="random"`` draws it uniformly with ``seed``.
    Single-interaction users stay in train only.
    """
    if mode not in ("last", "random"):
        raise ConfigurationError(f"unknown split mode {mode!r}")
    if mode == "last" and ds.timestamps is None:
        raise ConfigurationError("split mode 'last' needs timestamps")

    deg = ds.user_degrees
    eligible = np.flatnonzero(deg >= 2)
    if mode == "last":
        held = np.empty(len(eligible), dtype=np.int64)
        for k, u in enumerate(eligible):
            lo = ds.indptr[u]
            ts = ds.user_timestamps(u)
            # items are sorted, so the last maximal timestamp has the greatest index
            held[k] = lo + len(ts) - 1 - np.argmax(ts[::-1])
    else:
        rng = np.random.default_rng(seed)
        draw = np.floor(rng.random(len(eligible)) * deg[eligible]).astype(np.int64)
        held = ds.indptr[eligible] + draw

    keep = np.ones(ds.num_interactions, dtype=bool)
    keep[held] = False
    users, items, ts = ds.pairs()
    train = ImplicitDataset.from_pairs(
        users[keep], items[keep], ds.user_ids, ds.item_ids,
        timestamps=None if ts is None else ts[keep], meta=ds.meta,
    )
    test = {int(u): int(ds.indices[h]) for u, h in zip(eligible, held)}
    test_ts = None if ts is None else {int(u): int(ts[h]) for u, h in zip(eligible, held)}
    return SplitPair(train=train, test=test, mode=mode,
                     seed=seed if mode == "random" else None, test_timestamps=test_ts)


def k_core(ds: ImplicitDataset, k: int) -> ImplicitDataset:
    """Largest sub-dataset where every user and item has at least ``k`` interactions.

    Removal is iterated to a fixpoint. The result may be empty, in which case
    ``meta["empty"]`` is True and the returned dataset has no users.
    """
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    users, items, ts = ds.pairs()
    alive = np.ones(len(users), dtype=bool)
    while True:
        udeg = np.bincount(users[alive], minlength=ds.num_users)
        ideg = np.bincount(items[alive], minlength=ds.num_items)
        drop = alive & ((udeg[users] < k) | (ideg[items] < k))
        if not drop.any():
            break
        alive &= ~drop

    meta = dict(ds.meta, k_core=k, empty=not alive.any())
    kept_items = np.unique(items[alive])
    item_map = np.full(ds.num_items, -1, dtype=np.int64)
    item_map[kept_items] = np.arange(len(kept_items))
    if not alive.any():
        return ImplicitDataset(
            indptr=np.zeros(1, dtype=np.int64), indices=np.zeros(0, dtype=np.int64),
            user_ids=np.array([], dtype=object), item_ids=np.array([], dtype=object),
            timestamps=None if ts is None else np.zeros(0, dtype=np.int64), meta=meta,
        )
    return ImplicitDataset.from_pairs(
        users[alive], item_map[items[alive]], ds.user_ids, ds.item_ids[kept_items],
        timestamps=None if ts is None else ts[alive], meta=meta,
    )


@dataclass(frozen=True)
class DatasetCharacteristics:
    num_users: int
    num_items: int
    num_interactions: int
    density: float
    size: float
    shape: float
    k_core_level: int | None = None

    def to_dict(self):
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "num_interactions": self.num_interactions,
            "density": self.density,
            "size": self.size,
            "shape": self.shape,
            "k_core_level": self.k_core_level,
        }


def characteristics(ds: ImplicitDataset) -> DatasetCharacteristics:
    return characteristics_from_counts(
        ds.num_users, ds.num_items, ds.num_interactions, ds.meta.get("k_core")
    )


def characteristics_from_counts(num_users, num_items, num_interactions, k_core_level=None):
    if num_users <= 0 or num_items <= 0:
        raise DomainError("characteristics of an empty dataset are undefined")
    size = float(num_users) * float(num_items)
    return DatasetCharacteristics(
        num_users=int(num_users),
        num_items=int(num_items),
        num_interactions=int(num_interactions),
        density=num_interactions / size,
        size=size,
        shape=num_users / num_items,
        k_core_level=k_core_level,
    )


def synthetic_log(num_users=200, num_items=300, num_interactions=6000, factors=8,
                  affinity=5.0, popularity_skew=3.0, activity_skew=1.3, seed=0) -> InteractionLog:
    """Seeded latent-factor interaction log for desk-scale experiments.

    Each user samples distinct items with probability proportional to
    ``exp(affinity + log-popularity)``; user activity and item popularity
    are both long-tailed so k-cores of increasing k are progressively denser.
    """
    rng = np.random.default_rng(seed)
    user_f = rng.normal(size=(num_users, factors))
    item_f = rng.normal(size=(num_items, factors))
    item_bias = popularity_skew * rng.normal(size=num_items)
    activity = rng.lognormal(mean=0.0, sigma=activity_skew, size=num_users)
    degrees = np.maximum(2, np.round(activity / activity.sum() * num_interactions)).astype(np.int64)
    degrees = np.minimum(degrees, num_items - 1)

    logits = affinity * user_f @ item_f.T / np.sqrt(factors) + item_bias
    users, items, stamps = [], [], []
    for u in range(num_users):
        gumbel = rng.gumbel(size=num_items)
        chosen = np.argsort(-(logits[u] + gumbel), kind="stable")[: degrees[u]]
        times = np.sort(rng.integers(0, 10**6, size=len(chosen)))
        users.extend([f"u{u}"] * len(chosen))
        items.extend(f"i{i}" for i in chosen)
        stamps.extend(times.tolist())
    return InteractionLog(
        users=np.array(users, dtype=object),
        items=np.array(items, dtype=object),
        ratings=np.ones(len(users)),
        timestamps=np.array(stamps, dtype=np.int64),
    )


def synthetic_dataset(seed=0, **kwargs) -> ImplicitDataset:
    return binarize(synthetic_log(seed=seed, **kwargs), meta={"name": f"synthetic-{seed}"})


# --- canonical archive -----------------------------------------------------

def write_canonical(ds: ImplicitDataset, path):
    """Write ``user_idx<TAB>item_idx<TAB>timestamp`` sorted by (user, item)."""
    users, items, ts = ds.pairs()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in range(len(users)):
            t = "" if ts is None else str(int(ts[k]))
            fh.write(f"{users[k]}\t{items[k]}\t{t}\n")


def _read_index_triples(path):
    users, items, stamps = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError(lineno, f"{path}: expected 3 fields")
            users.append(int(parts[0]))
            items.append(int(parts[1]))
            stamps.append(int(parts[2]) if parts[2] else None)
    has_ts = bool(stamps) and all(t is not None for t in stamps)
    return (np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
            np.array(stamps, dtype=np.int64) if has_ts else None)


def _write_ids(ids, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, token in enumerate(ids):
            fh.write(f"{k}\t{token}\n")


def _read_ids(path):
    with open(path, encoding="utf-8") as fh:
        return np.array([line.rstrip("\n").split("\t", 1)[1] for line in fh], dtype=object)


def save_split(split: SplitPair, directory, extra=None):
    """Archive a split as canonical TSVs plus id maps and a characteristics JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train = split.train
    write_canonical(train, directory / "train.tsv")
    with open(directory / "test.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u in sorted(split.test):
            t = "" if split.test_timestamps is None else str(split.test_timestamps[u])
            fh.write(f"{u}\t{split.test[u]}\t{t}\n")
    _write_ids(train.user_ids, directory / "users.tsv")
    _write_ids(train.item_ids, directory / "items.tsv")
    info = {
        "split_mode": split.mode,
        "split_seed": split.seed,
        "num_test_users": len(split.test),
        "train": characteristics(train).to_dict(),
    }
    info.update(extra or {})
    with open(directory / "characteristics.json", "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [directory / n for n in ("train.tsv", "test.tsv", "users.tsv", "items.tsv",
                                    "characteristics.json")]


def load_split(directory) -> SplitPair:
    directory = Path(directory)
    user_ids = _read_ids(directory / "users.tsv")
    item_ids = _read_ids(directory / "items.tsv")
    users, items, ts = _read_index_triples(directory / "train.tsv")
    train = ImplicitDataset.from_pairs(users, items, user_ids, item_ids, timestamps=ts)
    if train.num_users != len(user_ids):
        raise DomainError(f"{directory}: train archive drops users")
    tu, ti, tts = _read_index_triples(directory / "test.tsv")
    info = json.loads((directory / "characteristics.json").read_text())
    return SplitPair(
        train=train,
        test={int(u): int(i) for u, i in zip(tu, ti)},
        mode=info.get("split_mode", "last"),
        seed=info.get("split_seed"),
        test_timestamps=None if tts is None else {int(u): int(t) for u, t in zip(tu, tts)},
    )
