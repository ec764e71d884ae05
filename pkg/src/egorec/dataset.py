"""Interaction ingestion, k-core filtering, per-user splitting and feature loading."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io

log = logging.getLogger(__name__)

MODALITIES = ("v", "t")
_HEADER_NAMES = {"user", "user_id", "userid", "user_token", "uid", "reviewerid"}


class DatasetError(ValueError):
    pass


@dataclass
class RawInteractions:
    users: list[str]
    items: list[str]
    timestamps: list[int | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.timestamps:
            self.timestamps = [None] * len(self.users)
        if not (len(self.users) == len(self.items) == len(self.timestamps)):
            raise DatasetError("users/items/timestamps length mismatch")

    def __len__(self):
        return len(self.users)

    def pairs(self):
        return list(zip(self.users, self.items))


@dataclass
class InteractionDataset:
    num_users: int
    num_items: int
    train: list[list[int]]
    val: list[list[int]]
    test: list[list[int]]
    user_tokens: list[str]
    item_tokens: list[str]

    def __post_init__(self):
        self.user_map = {t: i for i, t in enumerate(self.user_tokens)}
        self.item_map = {t: i for i, t in enumerate(self.item_tokens)}
        self._train_sets = None

    @property
    def train_sets(self) -> list[set[int]]:
        if self._train_sets is None:
            self._train_sets = [set(items) for items in self.train]
        return self._train_sets

    def split_lists(self, name: str) -> list[list[int]]:
        if name not in ("train", "val", "test"):
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)

    def pairs(self, name: str = "train") -> np.ndarray:
        """All ``(user, item)`` index pairs of a split as an ``(n, 2)`` int array."""
        lists = self.split_lists(name)
        users = np.repeat(np.arange(self.num_users), [len(x) for x in lists])
        items = np.fromiter((i for x in lists for i in x), dtype=np.int64, count=len(users))
        return np.stack([users, items], axis=1) if len(users) else np.zeros((0, 2), np.int64)

    @property
    def num_interactions(self) -> int:
        return sum(len(a) + len(b) + len(c) for a, b, c in zip(self.train, self.val, self.test))

    def validate(self):
        if len(self.user_tokens) != self.num_users or len(self.item_tokens) != self.num_items:
            raise DatasetError("token maps do not match counts")
        for u in range(self.num_users):
            tr, va, te = set(self.train[u]), set(self.val[u]), set(self.test[u])
            if not tr:
                raise DatasetError(f"user {u} has an empty train set")
            if tr & va or tr & te or va & te:
                raise DatasetError(f"user {u} has overlapping splits")
            for i in tr | va | te:
                if not 0 <= i < self.num_items:
                    raise DatasetError(f"user {u} references item {i} out of range")

    def stats(self) -> dict:
        n = self.num_interactions
        return {
            "users": self.num_users,
            "items": self.num_items,
            "interactions": n,
            "sparsity": sparsity(self.num_users, self.num_items, n),
            "train": sum(map(len, self.train)),
            "val": sum(map(len, self.val)),
            "test": sum(map(len, self.test)),
        }


@dataclass
class ModalityFeatures:
    modality: str
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def sparsity(num_users: int, num_items: int, num_interactions: int) -> float:
    return 1.0 - num_interactions / (num_users * num_items)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _looks_like_header(fields: list[str]) -> bool:
    if len(fields) >= 3:
        return any(not _is_number(f) for f in fields[2:])
    return fields[0].strip().lower() in _HEADER_NAMES


def _parse_timestamp(fields: list[str]) -> int | None:
    # user, item, rating, timestamp  |  user, item, timestamp  |  user, item, rating
    if len(fields) >= 4:
        return int(float(fields[3]))
    if len(fields) == 3 and fields[2].isdigit() and int(fields[2]) >= 1_000_000:
        return int(fields[2])
    return None


def load_interactions(path) -> RawInteractions:
    """Read a ``user \\t item [\\t rating] [\\t timestamp]`` file, collapsing duplicate pairs.

    The earliest timestamp of a duplicated pair is kept.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"interaction file not found: {path}")
    seen: dict[tuple[str, str], int | None] = {}
    total = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 2 or not fields[0] or not fields[1]:
                raise DatasetError(f"{path}:{lineno}: malformed line {line!r}")
            if total == 0 and not seen and _looks_like_header(fields):
                continue
            try:
                ts = _parse_timestamp(fields)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad timestamp in {line!r}") from None
            key = (fields[0], fields[1])
            total += 1
            if key not in seen:
                seen[key] = ts
            elif ts is not None and (seen[key] is None or ts < seen[key]):
                seen[key] = ts
    if not seen:
        raise DatasetError(f"{path}: zero records")
    log.info("read %d records, %d unique pairs", total, len(seen))
    users, items = zip(*seen.keys())
    return RawInteractions(list(users), list(items), list(seen.values()))


def kcore_filter(raw: RawInteractions, k: int = 5) -> RawInteractions:
    """Maximal subset in which every user and item has at least ``k`` interactions."""
    if k < 1:
        raise DatasetError("k must be >= 1")
    u_tok, u_idx = np.unique(np.asarray(raw.users, dtype=object), return_inverse=True)
    i_tok, i_idx = np.unique(np.asarray(raw.items, dtype=object), return_inverse=True)
    keep = np.ones(len(raw), dtype=bool)
    while True:
        du = np.bincount(u_idx[keep], minlength=len(u_tok))
        di = np.bincount(i_idx[keep], minlength=len(i_tok))
        new_keep = keep & (du[u_idx] >= k) & (di[i_idx] >= k)
        if new_keep.sum() == keep.sum():
            break
        keep = new_keep
    if not keep.any():
        raise DatasetError("dataset vanishes under k-core")
    idx = np.flatnonzero(keep)
    return RawInteractions(
        [raw.users[j] for j in idx],
        [raw.items[j] for j in idx],
        [raw.timestamps[j] for j in idx],
    )


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Floor allocation of ``n`` interactions with test taking priority.

    Validation and test get ``floor(ratio * n)``; test is bumped to one when
    that floors to zero and the user has at least two interactions. Train keeps
    the remainder.
    """
    _, r_val, r_test = ratios
    n_val = math.floor(r_val * n + 1e-9)
    n_test = math.floor(r_test * n + 1e-9)
    if n_test == 0 and n >= 2:
        n_test = 1
    return n - n_val - n_test, n_val, n_test


def split(raw: RawInteractions, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionDataset:
    """Random per-user train/validation/test split with dense ID remapping.

    Users and items are indexed in sorted token order, so the maps do not
    depend on file order.
    """
    if not math.isclose(sum(ratios), 1.0) or min(ratios) < 0:
        raise DatasetError(f"bad split ratios {ratios}")
    user_tokens = sorted(set(raw.users))
    item_tokens = sorted(set(raw.items))
    umap = {t: i for i, t in enumerate(user_tokens)}
    imap = {t: i for i, t in enumerate(item_tokens)}
    per_user: list[list[int]] = [[] for _ in user_tokens]
    for u, i in zip(raw.users, raw.items):
        per_user[umap[u]].append(imap[i])

    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    n_short = 0
    for items in per_user:
        items = sorted(set(items))
        n = len(items)
        n_train, n_val, _ = split_counts(n, ratios)
        if n < 3:
            n_short += 1
        perm = rng.permutation(n)
        shuffled = [items[j] for j in perm]
        train.append(sorted(shuffled[:n_train]))
        val.append(sorted(shuffled[n_train:n_train + n_val]))
        test.append(sorted(shuffled[n_train + n_val:]))
    if n_short:
        log.warning("%d users have < 3 interactions; their val/test sets may be empty", n_short)
    ds = InteractionDataset(len(user_tokens), len(item_tokens), train, val, test,
                            user_tokens, item_tokens)
    ds.validate()
    return ds


def load_features(path, modality: str, dataset: InteractionDataset) -> ModalityFeatures:
    """Load an ``MMFT`` feature file and reorder its rows to the dataset's item indexing."""
    matrix = io.read_matrix(path)
    tokens = io.read_tokens(path)
    if len(tokens) != matrix.shape[0]:
        raise DatasetError(f"{path}: {matrix.shape[0]} rows but {len(tokens)} tokens")
    if matrix.shape[0] < dataset.num_items:
        raise DatasetError(f"{path}: {matrix.shape[0]} rows for {dataset.num_items} items")
    row_of = {t: r for r, t in enumerate(tokens)}
    missing = [t for t in dataset.item_tokens if t not in row_of]
    if missing:
        raise DatasetError(f"{path}: no feature row for {len(missing)} items, e.g. {missing[0]!r}")
    order = np.array([row_of[t] for t in dataset.item_tokens], dtype=np.int64)
    return make_features(matrix[order], modality)


def make_features(matrix, modality: str) -> ModalityFeatures:
    """Validate an in-memory feature matrix whose rows already follow item indexing."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise DatasetError("feature matrix must be 2-D")
    bad = np.flatnonzero(~np.isfinite(matrix).all(axis=1))
    if bad.size:
        raise DatasetError(f"non-finite feature values in row {bad[0]}")
    zero = np.flatnonzero(~matrix.any(axis=1))
    if zero.size:
        raise DatasetError(f"all-zero feature row {zero[0]}")
    return ModalityFeatures(modality, matrix)


# -- split manifest ---------------------------------------------------------------


def save_dataset(ds: InteractionDataset, out_dir, extra: dict | None = None):
    """Write train/val/test TSVs of dense index pairs plus a JSON-lines ID map."""
    out_dir = Path(out_dir)
    for name in ("train", "val", "test"):
        with io.atomic_open(out_dir / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for u, items in enumerate(ds.split_lists(name)):
                fh.writelines(f"{u}\t{i}\n" for i in items)
    rows = [{"kind": "user", "index": i, "token": t} for i, t in enumerate(ds.user_tokens)]
    rows += [{"kind": "item", "index": i, "token": t} for i, t in enumerate(ds.item_tokens)]
    io.write_jsonl(out_dir / "id_map.jsonl", rows)
    io.write_json(out_dir / "dataset.json", {"stats": ds.stats(), **(extra or {})})


def load_dataset(out_dir) -> InteractionDataset:
    out_dir = Path(out_dir)
    users: dict[int, str] = {}
    items: dict[int, str] = {}
    for row in io.read_jsonl(out_dir / "id_map.jsonl"):
        (users if row["kind"] == "user" else items)[row["index"]] = row["token"]
    user_tokens = [users[i] for i in range(len(users))]
    item_tokens = [items[i] for i in range(len(items))]
    lists = {}
    for name in ("train", "val", "test"):
        per = [[] for _ in user_tokens]
        with open(out_dir / f"{name}.tsv", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    u, i = line.split("\t")
                    per[int(u)].append(int(i))
        lists[name] = [sorted(x) for x in per]
    ds = InteractionDataset(len(user_tokens), len(item_tokens), lists["train"], lists["val"],
                            lists["test"], user_tokens, item_tokens)
    ds.validate()
    return ds


def from_lists(train, val=None, test=None, num_items=None) -> InteractionDataset:
    """Build a dataset directly from per-user index lists (synthetic data, tests)."""
    n_users = len(train)
    val = val if val is not None else [[] for _ in range(n_users)]
    test = test if test is not None else [[] for _ in range(n_users)]
    if num_items is None:
        num_items = 1 + max(i for lists in (train, val, test) for x in lists for i in x)
    ds = InteractionDataset(
        n_users, num_items,
        [sorted(x) for x in train], [sorted(x) for x in val], [sorted(x) for x in test],
        [f"u{u}" for u in range(n_users)], [f"i{i}" for i in range(num_items)],
    )
    ds.validate()
    return ds
