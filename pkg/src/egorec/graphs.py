"""CSR graphs: normalized user-item adjacency and frozen item-item k-NN graphs."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dataset import InteractionDataset, ModalityFeatures

SIM_BLOCK_ROWS = 1024


class GraphError(ValueError):
    pass


class SparseGraph:
    """Immutable CSR matrix with sorted column indices in every row."""

    def __init__(self, rows, cols, row_ptr, col_idx, values):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_ptr = np.asarray(row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(col_idx, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.row_ptr.shape != (self.rows + 1,) or self.row_ptr[0] != 0:
            raise GraphError("row_ptr must have rows + 1 entries starting at 0")
        if self.row_ptr[-1] != len(self.col_idx) or len(self.col_idx) != len(self.values):
            raise GraphError("nnz disagrees between row_ptr, col_idx and values")
        if np.any(np.diff(self.row_ptr) < 0):
            raise GraphError("row_ptr must be non-decreasing")
        if self.nnz:
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.cols:
                raise GraphError("column index out of range")
            step = np.diff(self.col_idx)
            row_start = np.zeros(self.nnz, dtype=bool)
            row_start[self.row_ptr[:-1][np.diff(self.row_ptr) > 0]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise GraphError("col_idx must be strictly increasing within each row")
        if not np.all(np.isfinite(self.values)):
            raise GraphError("non-finite edge weight")
        for arr in (self.row_ptr, self.col_idx, self.values):
            arr.flags.writeable = False
        self._csr = None

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @classmethod
    def from_coo(cls, rows, cols, r, c, v):
        """Build from triplets; duplicate coordinates are summed, explicit zeros kept."""
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        v = np.asarray(v, dtype=np.float64)
        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        if len(r):
            first = np.ones(len(r), dtype=bool)
            first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
            starts = np.flatnonzero(first)
            v = np.add.reduceat(v, starts)
            r, c = r[starts], c[starts]
        row_ptr = np.zeros(rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=rows), out=row_ptr[1:])
        return cls(rows, cols, row_ptr, c, v)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def zeros(cls, rows, cols):
        return cls(rows, cols, np.zeros(rows + 1, np.int64), [], [])

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), np.diff(self.row_ptr))

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)
        return self._csr

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_indices(), self.col_idx] = self.values
        return out

    def transpose(self) -> SparseGraph:
        return SparseGraph.from_coo(self.cols, self.rows, self.col_idx, self.row_indices(),
                                    self.values)

    def with_values(self, values) -> SparseGraph:
        return SparseGraph(self.rows, self.cols, self.row_ptr, self.col_idx, values)

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_indices(), weights=self.values, minlength=self.rows)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.rows, self.cols, self.nnz], dtype="<i8").tobytes())
        for arr, dt in ((self.row_ptr, "<i8"), (self.col_idx, "<i8"), (self.values, "<f8")):
            h.update(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return h.hexdigest()

    def edges(self):
        """Iterate ``(row, col, weight)`` triplets, e.g. for TSV dumps."""
        return zip(self.row_indices().tolist(), self.col_idx.tolist(), self.values.tolist())

    def __repr__(self):
        return f"SparseGraph({self.rows}x{self.cols}, nnz={self.nnz})"


def spmv_multi(g: SparseGraph, x: np.ndarray) -> np.ndarray:
    """Exact CSR x dense product ``g @ x``."""
    x = np.asarray(x)
    if x.shape[0] != g.cols:
        raise GraphError(f"cannot multiply {g.rows}x{g.cols} graph by {x.shape[0]}-row matrix")
    if g.nnz == 0:
        return np.zeros((g.rows,) + x.shape[1:], dtype=np.result_type(x, np.float64))
    return np.asarray(g.to_scipy() @ x)


# -- user-item graph ----------------------------------------------------------------


@dataclass(frozen=True)
class BipartiteAdjacency:
    user_to_item: SparseGraph
    item_to_user: SparseGraph

    @property
    def num_users(self) -> int:
        return self.user_to_item.rows

    @property
    def num_items(self) -> int:
        return self.user_to_item.cols


def build_bipartite(dataset: InteractionDataset) -> BipartiteAdjacency:
    """Train-only adjacency with weights ``1 / sqrt(deg(u) * deg(i))``."""
    pairs = dataset.pairs("train")
    if len(pairs) == 0:
        raise GraphError("train set is empty")
    u, i = pairs[:, 0], pairs[:, 1]
    du = np.bincount(u, minlength=dataset.num_users)
    di = np.bincount(i, minlength=dataset.num_items)
    if (du == 0).any():
        raise GraphError(f"user {np.flatnonzero(du == 0)[0]} has no train interactions")
    if (di == 0).any():
        raise GraphError(f"item {np.flatnonzero(di == 0)[0]} has no train interactions")
    w = 1.0 / np.sqrt(du[u].astype(np.float64) * di[i])
    ui = SparseGraph.from_coo(dataset.num_users, dataset.num_items, u, i, w)
    return BipartiteAdjacency(ui, ui.transpose())


# -- item-item graphs ---------------------------------------------------------------


# gemm screening error is ~1e-15 for unit-norm rows; anything this close to the
# k-th value is re-scored exactly before selection
SCREEN_MARGIN = 1e-9
PAIR_CHUNK = 1 << 16


def _canonical_dots(x: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``sum(x[r] * x[c])`` per pair; independent of how pairs are batched."""
    out = np.empty(len(r))
    for s in range(0, len(r), PAIR_CHUNK):
        out[s:s + PAIR_CHUNK] = (x[r[s:s + PAIR_CHUNK]] * x[c[s:s + PAIR_CHUNK]]).sum(axis=1)
    return out


def _select_topk(r: np.ndarray, c: np.ndarray, v: np.ndarray, n_rows: int, k: int):
    """Per row, the k largest ``v`` (ties to the smaller column); returns sorted columns."""
    order = np.lexsort((c, -v, r))
    r, c, v = r[order], c[order], v[order]
    starts = np.searchsorted(r, np.arange(n_rows))
    keep = (np.arange(len(r)) - starts[r]) < k
    c, v = c[keep].reshape(n_rows, k), v[keep].reshape(n_rows, k)
    by_col = np.argsort(c, axis=1)
    return np.take_along_axis(c, by_col, axis=1), np.take_along_axis(v, by_col, axis=1)


def cosine_topk(features: ModalityFeatures | np.ndarray, k: int,
                block_rows: int = SIM_BLOCK_ROWS) -> SparseGraph:
    """Row-wise top-k cosine similarity graph, self excluded, computed in row blocks.

    Edge weights are the raw cosines ``sum(x_i * x_j) / (|x_i| |x_j|)``. A gemm
    pass screens candidates and the survivors are re-scored with that exact
    formula, so results do not depend on the block size or BLAS kernel.
    """
    x = features.matrix if isinstance(features, ModalityFeatures) else np.asarray(features, float)
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise GraphError("k must be >= 1")
    if k >= n:
        raise GraphError(f"k={k} needs more than {n} items (self is excluded)")
    norms = np.sqrt((x * x).sum(axis=1))
    if (norms == 0).any():
        raise GraphError(f"zero feature row {np.flatnonzero(norms == 0)[0]}")
    cols, vals = [], []
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        sims = (x[start:stop] @ x.T) / (norms[start:stop, None] * norms[None, :])
        local = np.arange(stop - start)
        sims[local, local + start] = -np.inf
        kth = -np.partition(-sims, k - 1, axis=1)[:, k - 1]
        r, c = np.nonzero(sims >= (kth - SCREEN_MARGIN)[:, None])
        exact = _canonical_dots(x, r + start, c) / (norms[r + start] * norms[c])
        idx, w = _select_topk(r, c, exact, stop - start, k)
        cols.append(idx)
        vals.append(w)
    col_idx = np.concatenate(cols).ravel()
    values = np.concatenate(vals).ravel()
    row_ptr = np.arange(0, n * k + 1, k, dtype=np.int64)
    return SparseGraph(n, n, row_ptr, col_idx, values)


def normalize_item_graph(g: SparseGraph) -> SparseGraph:
    """Clip negative weights to zero, then scale ``w_ij / sqrt(d_i * d_j)`` by weighted degree."""
    w = np.maximum(g.values, 0.0)
    deg = np.bincount(g.row_indices(), weights=w, minlength=g.rows)
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    return g.with_values(w * inv[g.row_indices()] * inv[g.col_idx])


@dataclass
class ItemItemGraphs:
    per_modality: dict[str, SparseGraph]
    k: int
    hashes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        shapes = {g.shape for g in self.per_modality.values()}
        if len(shapes) > 1:
            raise GraphError(f"modality graphs disagree in shape: {shapes}")
        self.hashes = {m: g.content_hash() for m, g in self.per_modality.items()}

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.per_modality)

    def verify_frozen(self):
        for m, g in self.per_modality.items():
            if g.content_hash() != self.hashes[m]:
                raise GraphError(f"item-item graph for modality {m!r} changed after construction")


def build_item_graphs(features: dict[str, ModalityFeatures], k: int,
                      normalize: bool = True) -> ItemItemGraphs:
    graphs = {}
    for m, f in features.items():
        g = cosine_topk(f, k)
        graphs[m] = normalize_item_graph(g) if normalize else g
    return ItemItemGraphs(graphs, k)


def fuse_item_graphs(graphs: ItemItemGraphs | dict[str, SparseGraph], alpha) -> SparseGraph:
    """Weighted sum of modality graphs on the union sparsity pattern."""
    per = graphs.per_modality if isinstance(graphs, ItemItemGraphs) else graphs
    mods = list(per)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if len(alpha) != len(mods):
        raise GraphError(f"{len(alpha)} weights for {len(mods)} modality graphs")
    if not np.all(np.isfinite(alpha)):
        raise GraphError("non-finite modality weight")
    shapes = {per[m].shape for m in mods}
    if len(shapes) != 1:
        raise GraphError(f"modality graphs disagree in shape: {shapes}")
    rows, cols = shapes.pop()
    r = np.concatenate([per[m].row_indices() for m in mods])
    c = np.concatenate([per[m].col_idx for m in mods])
    v = np.concatenate([a * per[m].values for a, m in zip(alpha, mods)])
    return SparseGraph.from_coo(rows, cols, r, c, v)
