"""Interaction ingestion, activity filtering, chronological splitting and persistence."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyAfterFilter, EmptyFile, ParseError, TooFewInteractions


@dataclass(frozen=True)
class InteractionSet:
    """Deduplicated implicit feedback with dense user/item indices.

    ``users``, ``items`` and ``ts`` are parallel int64 arrays. ``user_ids`` and
    ``item_ids`` map dense index -> original identifier.
    """

    users: np.ndarray
    items: np.ndarray
    ts: np.ndarray
    n_users: int
    n_items: int
    user_ids: tuple = field(default=())
    item_ids: tuple = field(default=())

    def __post_init__(self):
        for name in ("users", "items", "ts"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.users) == len(self.items) == len(self.ts)):
            raise ValueError("users, items and ts must have equal length")
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(str(u) for u in range(self.n_users)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(i) for i in range(self.n_items)))

    def __len__(self):
        return len(self.users)

    @classmethod
    def from_pairs(cls, pairs, n_users=None, n_items=None, ts=None):
        """Build from (user, item) index pairs, dropping duplicates (first kept)."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if ts is None:
            ts = np.arange(len(pairs), dtype=np.int64)
        ts = np.asarray(ts, dtype=np.int64)
        _, first = np.unique(pairs, axis=0, return_index=True)
        keep = np.sort(first)
        pairs, ts = pairs[keep], ts[keep]
        nu = int(pairs[:, 0].max()) + 1 if n_users is None else int(n_users)
        ni = int(pairs[:, 1].max()) + 1 if n_items is None else int(n_items)
        return cls(pairs[:, 0], pairs[:, 1], ts, nu, ni)

    def pairs(self):
        return np.stack([self.users, self.items], axis=1)

    def keys(self):
        """Sorted unique ``user * n_items + item`` codes, for membership tests."""
        return np.unique(self.users * self.n_items + self.items)

    def user_items(self):
        """List of item-index arrays, one per user."""
        order = np.lexsort((self.items, self.users))
        counts = np.bincount(self.users, minlength=self.n_users)
        return np.split(self.items[order], np.cumsum(counts)[:-1])

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return InteractionSet(
            self.users[mask], self.items[mask], self.ts[mask],
            self.n_users, self.n_items, self.user_ids, self.item_ids,
        )

    def stats(self):
        n = len(self)
        sparsity = 1.0 - n / float(self.n_users * self.n_items)
        return {"users": self.n_users, "items": self.n_items,
                "interactions": n, "sparsity": sparsity}


@dataclass(frozen=True)
class SplitDataset:
    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet

    @property
    def n_users(self):
        return self.train.n_users

    @property
    def n_items(self):
        return self.train.n_items


def _split_line(raw):
    if "\t" in raw:
        return [p.strip() for p in raw.split("\t")]
    return [p.strip() for p in raw.split(",")]


def ingest(path):
    """Read ``user, item[, timestamp]`` records (tab- or comma-separated).

    Blank lines and lines starting with ``#`` are skipped. Missing timestamps
    fall back to the line number. Duplicate (user, item) pairs keep their
    earliest timestamp. Dense indices follow first appearance in the file.
    """
    users, items, stamps = [], [], []
    saw_record = False
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            parts = _split_line(raw)
            if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
                raise ParseError(lineno, f"expected 2 or 3 fields, got {raw!r}")
            if len(parts) == 3:
                try:
                    ts = int(float(parts[2]))
                except ValueError:
                    raise ParseError(lineno, f"bad timestamp {parts[2]!r}") from None
            else:
                ts = lineno
            users.append(parts[0])
            items.append(parts[1])
            stamps.append(ts)
            saw_record = True
    if not saw_record:
        raise EmptyFile(f"{path}: no interaction records")

    user_index, item_index = {}, {}
    best = {}
    for u, i, ts in zip(users, items, stamps):
        ui = user_index.setdefault(u, len(user_index))
        ii = item_index.setdefault(i, len(item_index))
        key = (ui, ii)
        if key not in best or ts < best[key]:
            best[key] = ts
    keys = np.array(list(best.keys()), dtype=np.int64).reshape(-1, 2)
    ts = np.fromiter(best.values(), dtype=np.int64, count=len(best))
    return InteractionSet(
        keys[:, 0], keys[:, 1], ts, len(user_index), len(item_index),
        tuple(user_index), tuple(item_index),
    )


def _reindex(data, mask):
    users, items, ts = data.users[mask], data.items[mask], data.ts[mask]
    if len(users) == 0:
        raise EmptyAfterFilter("no interactions survive the activity filter")
    kept_u = np.unique(users)
    kept_i = np.unique(items)
    new_u = np.searchsorted(kept_u, users)
    new_i = np.searchsorted(kept_i, items)
    return InteractionSet(
        new_u, new_i, ts, len(kept_u), len(kept_i),
        tuple(data.user_ids[k] for k in kept_u),
        tuple(data.item_ids[k] for k in kept_i),
    )


def filter_min_interactions(data, threshold=10):
    """Drop users and items with fewer than ``threshold`` interactions, to a fixpoint."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    mask = np.ones(len(data), dtype=bool)
    while True:
        uc = np.bincount(data.users[mask], minlength=data.n_users)
        ic = np.bincount(data.items[mask], minlength=data.n_items)
        bad = mask & ((uc[data.users] < threshold) | (ic[data.items] < threshold))
        if not bad.any():
            break
        mask &= ~bad
        if not mask.any():
            raise EmptyAfterFilter("no interactions survive the activity filter")
    return _reindex(data, mask)


def split_sizes(n, ratios=(0.8, 0.1, 0.1)):
    """Per-user (train, val, test) counts; rounding remainder goes to test.

    Validation and test each receive at least one interaction, taken from
    the training share when the floors would leave them empty.
    """
    if n < 3:
        raise ValueError("need at least 3 interactions")
    r_train, r_val, _ = ratios
    n_train = int(np.floor(r_train * n + 1e-9))
    n_val = int(np.floor(r_val * n + 1e-9))
    n_val = max(n_val, 1)
    n_test = n - n_train - n_val
    if n_test < 1:
        n_train -= 1 - n_test
        n_test = 1
    return n_train, n_val, n_test


def chronological_split(data, ratios=(0.8, 0.1, 0.1)):
    """Per-user chronological split; ties in timestamp broken by item index."""
    counts = np.bincount(data.users, minlength=data.n_users)
    short = np.flatnonzero(counts < 3)
    if len(short):
        raise TooFewInteractions(short[0], counts[short[0]])
    order = np.lexsort((data.items, data.ts, data.users))
    part = np.empty(len(data), dtype=np.int8)
    start = 0
    for u in range(data.n_users):
        n = int(counts[u])
        n_train, n_val, _ = split_sizes(n, ratios)
        idx = order[start:start + n]
        part[idx[:n_train]] = 0
        part[idx[n_train:n_train + n_val]] = 1
        part[idx[n_train + n_val:]] = 2
        start += n
    return SplitDataset(data.subset(part == 0), data.subset(part == 1), data.subset(part == 2))


SPLIT_FILES = {"train": "train.tsv", "validation": "val.tsv", "test": "test.tsv"}


def _write_set(path, data):
    order = np.lexsort((data.ts, data.items, data.users))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in order:
            fh.write(f"{data.users[k]}\t{data.items[k]}\t{data.ts[k]}\n")


def save_split(split, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for attr, name in SPLIT_FILES.items():
        _write_set(os.path.join(out_dir, name), getattr(split, attr))
    with open(os.path.join(out_dir, "mapping.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#counts\t{split.n_users}\t{split.n_items}\n")
        for dense, orig in enumerate(split.train.user_ids):
            fh.write(f"user\t{orig}\t{dense}\n")
        for dense, orig in enumerate(split.train.item_ids):
            fh.write(f"item\t{orig}\t{dense}\n")


def load_split(split_dir):
    """Read back a directory written by :func:`save_split`."""
    mapping = os.path.join(split_dir, "mapping.tsv")
    user_ids, item_ids = {}, {}
    n_users = n_items = None
    with open(mapping, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.rstrip("\n").split("\t")
            if parts[0] == "#counts":
                n_users, n_items = int(parts[1]), int(parts[2])
            elif parts[0] == "user":
                user_ids[int(parts[2])] = parts[1]
            elif parts[0] == "item":
                item_ids[int(parts[2])] = parts[1]
            else:
                raise ParseError(lineno, f"bad mapping row in {mapping}")
    n_users = len(user_ids) if n_users is None else n_users
    n_items = len(item_ids) if n_items is None else n_items
    uids = tuple(user_ids[k] for k in range(n_users))
    iids = tuple(item_ids[k] for k in range(n_items))

    sets = {}
    for attr, name in SPLIT_FILES.items():
        path = os.path.join(split_dir, name)
        raw = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
        if raw.size == 0:
            raw = np.zeros((0, 3), dtype=np.int64)
        sets[attr] = InteractionSet(raw[:, 0], raw[:, 1], raw[:, 2], n_users, n_items, uids, iids)
    return SplitDataset(**sets)


def synthetic_interactions(n_users=300, n_items=400, n_clusters=6, per_user=(20, 45),
                           latent_dim=8, temperature=0.35, noise=0.5, popularity=0.5, seed=0):
    """Clustered latent-factor implicit feedback for desk-scale studies.

    Users and items carry a cluster centroid plus noise; each user draws
    distinct items from a softmax over affinities. Timestamps are the draw
    order, so later interactions are still drawn from the same preferences.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, latent_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    uc = rng.integers(n_clusters, size=n_users)
    ic = rng.integers(n_clusters, size=n_items)
    pu = centers[uc] + noise * rng.normal(size=(n_users, latent_dim)) / np.sqrt(latent_dim)
    pi = centers[ic] + noise * rng.normal(size=(n_items, latent_dim)) / np.sqrt(latent_dim)
    bias = rng.normal(scale=popularity, size=n_items)
    logits = (pu @ pi.T + bias) / temperature
    users, items, ts = [], [], []
    clock = 0
    for u in range(n_users):
        m = int(rng.integers(per_user[0], per_user[1] + 1))
        p = np.exp(logits[u] - logits[u].max())
        p /= p.sum()
        chosen = rng.choice(n_items, size=m, replace=False, p=p)
        for i in chosen:
            users.append(u)
            items.append(int(i))
            ts.append(clock)
            clock += 1
    return InteractionSet(np.array(users), np.array(items), np.array(ts), n_users, n_items)


def write_interactions(path, data, sep="\t"):
    """Write ``user<sep>item<sep>ts`` lines using the original identifiers."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, t in zip(data.users, data.items, data.ts):
            fh.write(f"{data.user_ids[u]}{sep}{data.item_ids[i]}{sep}{t}\n")
