"""Full-catalog top-K ranking with train masking, Recall@K and NDCG@K."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

USER_BLOCK = 2048


class MetricError(ValueError):
    pass


def _topk_block(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k columns per row by descending score, ties to the smaller index.

    ``-inf`` entries are never returned; short rows are padded with -1.
    """
    rows = scores.shape[0]
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1]
    r, c = np.nonzero((scores >= kth[:, None]) & np.isfinite(scores))
    order = np.lexsort((c, -scores[r, c], r))
    r, c = r[order], c[order]
    rank = np.arange(len(r)) - np.searchsorted(r, np.arange(rows))[r]
    keep = rank < k
    out = np.full((rows, k), -1, dtype=np.int64)
    out[r[keep], rank[keep]] = c[keep]
    return out


def rank_topk(user_emb: np.ndarray, item_emb: np.ndarray, k: int,
              mask: list[list[int]] | None = None, users=None) -> np.ndarray:
    """Exact top-``k`` items for each user; items in ``mask[u]`` are excluded."""
    n_items = item_emb.shape[0]
    if k < 1:
        raise MetricError("K must be >= 1")
    if k > n_items:
        raise MetricError(f"K={k} exceeds the {n_items} items in the catalog")
    users = np.arange(user_emb.shape[0]) if users is None else np.asarray(users)
    out = np.empty((len(users), k), dtype=np.int64)
    for start in range(0, len(users), USER_BLOCK):
        block = users[start:start + USER_BLOCK]
        scores = user_emb[block] @ item_emb.T
        if mask is not None:
            lens = [len(mask[u]) for u in block]
            rr = np.repeat(np.arange(len(block)), lens)
            cc = np.fromiter((i for u in block for i in mask[u]), dtype=np.int64, count=sum(lens))
            scores[rr, cc] = -np.inf
        out[start:start + len(block)] = _topk_block(scores, k)
    return out


def _hits(topk: np.ndarray, test: list[list[int]]) -> np.ndarray:
    n_items = int(max(topk.max(initial=0), max((max(t) for t in test if t), default=0))) + 1
    keys = np.fromiter((u * n_items + i for u, t in enumerate(test) for i in t), dtype=np.int64)
    rows = np.arange(topk.shape[0])[:, None]
    cand = np.where(topk >= 0, rows * n_items + topk, -1)
    return np.isin(cand, keys) & (topk >= 0)


def _evaluated(test) -> np.ndarray:
    users = np.array([u for u, t in enumerate(test) if len(t) > 0], dtype=np.int64)
    if users.size == 0:
        raise MetricError("no user has test items")
    return users


def _mean(values) -> float:
    # exact summation keeps the average independent of user order
    return math.fsum(values) / len(values)


def per_user_recall(topk, test, k: int | None = None) -> np.ndarray:
    k = topk.shape[1] if k is None else k
    users = _evaluated(test)
    hits = _hits(topk[:, :k], test)[users].sum(axis=1)
    return hits / np.array([len(test[u]) for u in users], dtype=np.float64)


def per_user_ndcg(topk, test, k: int | None = None) -> np.ndarray:
    k = topk.shape[1] if k is None else k
    users = _evaluated(test)
    # libm log2 rather than numpy's vectorized kernel, which can differ by an ulp
    discounts = np.array([1.0 / math.log2(r + 2) for r in range(k)])
    hits = _hits(topk[:, :k], test)[users]
    dcg = np.cumsum(np.where(hits, discounts, 0.0), axis=1)[:, -1]
    ideal = np.cumsum(discounts)
    n_rel = np.minimum(k, [len(test[u]) for u in users])
    return dcg / ideal[n_rel - 1]


def recall_at_k(topk, test, k: int | None = None) -> float:
    return _mean(per_user_recall(topk, test, k))


def ndcg_at_k(topk, test, k: int | None = None) -> float:
    return _mean(per_user_ndcg(topk, test, k))


@dataclass
class MetricReport:
    split: str
    metrics: dict[str, float]
    num_users: int
    per_user: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __getitem__(self, key):
        return self.metrics[key]

    def to_json(self) -> dict:
        return {"split": self.split, "num_users": self.num_users, "metrics": self.metrics}

    def table_row(self, label: str = "model") -> str:
        keys = [k for k in ("R@10", "R@20", "N@10", "N@20") if k in self.metrics]
        return format_table(["Model"] + keys, [[label] + [self.metrics[k] for k in keys]])


def format_table(header, rows) -> str:
    cells = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(str(h)), *(len(r[j]) for r in cells)) for j, h in enumerate(header)]
    line = lambda vals: "  ".join(str(v).rjust(w) for v, w in zip(vals, widths))
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in cells])


def evaluate_embeddings(user_emb, item_emb, dataset, split: str = "test", ks=(10, 20),
                        keep_per_user: bool = False) -> MetricReport:
    """Recall/NDCG at each K over users with a non-empty ``split`` list.

    Train items are masked unless ``split == "train"``.
    """
    test = dataset.split_lists(split)
    users = _evaluated(test)
    mask = None if split == "train" else dataset.train
    topk = rank_topk(user_emb, item_emb, max(ks), mask=mask)
    if mask is not None and _hits(topk, mask).any():
        raise MetricError("a train item leaked into a top-K list")
    metrics, per_user = {}, {}
    for k in ks:
        rec = per_user_recall(topk, test, k)
        ndcg = per_user_ndcg(topk, test, k)
        metrics[f"R@{k}"] = _mean(rec)
        metrics[f"N@{k}"] = _mean(ndcg)
        if keep_per_user:
            per_user[f"R@{k}"], per_user[f"N@{k}"] = rec, ndcg
    if keep_per_user:
        per_user["user"] = users
    return MetricReport(split, metrics, len(users), per_user)


def evaluate(model, dataset, split: str = "test", ks=(10, 20),
             keep_per_user: bool = False) -> MetricReport:
    users, items = model.embeddings()
    return evaluate_embeddings(users, items, dataset, split, ks, keep_per_user)


def write_per_user_csv(path, report: MetricReport, user_tokens=None):
    from .io import atomic_open

    keys = [k for k in report.per_user if k != "user"]
    with atomic_open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["user"] + keys) + "\n")
        for j, u in enumerate(report.per_user["user"]):
            label = user_tokens[u] if user_tokens is not None else str(u)
            fh.write(",".join([label] + [repr(float(report.per_user[k][j])) for k in keys]) + "\n")
