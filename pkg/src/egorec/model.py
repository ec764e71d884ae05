"""Parameters and forward pass: per-modality propagation, readout, fusion, scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ModalityFeatures
from .graphs import BipartiteAdjacency, ItemItemGraphs, SparseGraph, fuse_item_graphs, spmv_multi


class ModelError(ValueError):
    pass


@dataclass
class ModelParameters:
    """Trainable tensors.

    ``item_embed`` is used in the default mode; ``proj`` (feature dim x d) replaces
    it when item layer-0 rows are projected from raw features.
    """

    modalities: tuple[str, ...]
    dim: int
    user_embed: dict[str, np.ndarray]
    item_embed: dict[str, np.ndarray] = field(default_factory=dict)
    proj: dict[str, np.ndarray] = field(default_factory=dict)
    alpha: np.ndarray = None
    beta: np.ndarray = None

    def __post_init__(self):
        m = len(self.modalities)
        if self.alpha is None:
            self.alpha = np.full(m, 1.0 / m)
        if self.beta is None:
            self.beta = np.full(m, 1.0 / m)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)

    @property
    def feature_projection(self) -> bool:
        return bool(self.proj)

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view; arrays are shared, so in-place updates stick."""
        out = {}
        for m in self.modalities:
            out[f"user_embed.{m}"] = self.user_embed[m]
            if m in self.item_embed:
                out[f"item_embed.{m}"] = self.item_embed[m]
            if m in self.proj:
                out[f"proj.{m}"] = self.proj[m]
        out["alpha"] = self.alpha
        out["beta"] = self.beta
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def copy(self) -> ModelParameters:
        return ModelParameters(
            self.modalities, self.dim,
            {m: a.copy() for m, a in self.user_embed.items()},
            {m: a.copy() for m, a in self.item_embed.items()},
            {m: a.copy() for m, a in self.proj.items()},
            self.alpha.copy(), self.beta.copy(),
        )

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], modalities, dim) -> ModelParameters:
        grab = lambda prefix: {m: np.array(tensors[f"{prefix}.{m}"], dtype=np.float64)
                               for m in modalities if f"{prefix}.{m}" in tensors}
        return cls(tuple(modalities), int(dim), grab("user_embed"), grab("item_embed"),
                   grab("proj"), np.array(tensors["alpha"], dtype=np.float64),
                   np.array(tensors["beta"], dtype=np.float64))

    def check_finite(self):
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise ModelError(f"non-finite values in {name}")


@dataclass
class ForwardTrace:
    num_users: int
    num_items: int
    layers: dict[str, list[np.ndarray]]
    modal_final: dict[str, np.ndarray]
    ego: dict[str, np.ndarray] = field(default_factory=dict)
    neighbor: dict[str, np.ndarray] = field(default_factory=dict)
    item_graph: SparseGraph | None = None
    fused_users: np.ndarray | None = None
    fused_items_base: np.ndarray | None = None
    fused_items: np.ndarray | None = None

    @property
    def num_layers(self) -> int:
        return len(next(iter(self.layers.values()))) - 1

    @property
    def fused(self) -> np.ndarray:
        return np.vstack([self.fused_users, self.fused_items])


def propagate_layers(layer0: np.ndarray, adj: BipartiteAdjacency, num_layers: int):
    """LightGCN layers ``E(0..L)`` over the stacked ``[users; items]`` matrix."""
    n_users = adj.num_users
    if layer0.shape[0] != n_users + adj.num_items:
        raise ModelError(f"embedding rows {layer0.shape[0]} != {n_users} users + "
                         f"{adj.num_items} items")
    layers = [layer0]
    for _ in range(num_layers):
        prev = layers[-1]
        layers.append(np.vstack([spmv_multi(adj.user_to_item, prev[n_users:]),
                                 spmv_multi(adj.item_to_user, prev[:n_users])]))
    return layers


def item_layer0(params: ModelParameters, m: str, features=None) -> np.ndarray:
    if m in params.proj:
        if features is None or m not in features:
            raise ModelError(f"feature projection for {m!r} needs its feature matrix")
        f = features[m].matrix if isinstance(features[m], ModalityFeatures) else features[m]
        return f @ params.proj[m]
    return params.item_embed[m]


def propagate(params: ModelParameters, adj: BipartiteAdjacency, num_layers: int,
              features=None) -> ForwardTrace:
    if num_layers < 0:
        raise ModelError("layer count must be >= 0")
    layers, finals = {}, {}
    for m in params.modalities:
        users = params.user_embed[m]
        items = item_layer0(params, m, features)
        if users.shape[0] != adj.num_users or items.shape[0] != adj.num_items:
            raise ModelError(f"modality {m!r}: embeddings {users.shape[0]}x{items.shape[0]} "
                             f"do not match adjacency {adj.num_users}x{adj.num_items}")
        layers[m] = propagate_layers(np.vstack([users, items]), adj, num_layers)
        finals[m] = np.sum(layers[m], axis=0)
    return ForwardTrace(adj.num_users, adj.num_items, layers, finals)


def split_ego_neighbor(trace: ForwardTrace):
    """Layer 0 as the ego view and the mean of layers 1..L as the neighbor view."""
    if trace.num_layers < 1:
        raise ModelError("no neighbor layers")
    ego = {m: ls[0] for m, ls in trace.layers.items()}
    neighbor = {m: np.sum(ls[1:], axis=0) / trace.num_layers for m, ls in trace.layers.items()}
    trace.ego, trace.neighbor = ego, neighbor
    return ego, neighbor


def fuse(trace: ForwardTrace, params: ModelParameters, item_graph: SparseGraph | None):
    """Concatenate beta-scaled modality outputs; items also get ``+ S @ items``."""
    U = trace.num_users
    scaled = [b * trace.modal_final[m] for b, m in zip(params.beta, params.modalities)]
    fused = np.hstack(scaled)
    users, items = fused[:U], fused[U:]
    if item_graph is not None:
        if item_graph.shape != (trace.num_items, trace.num_items):
            raise ModelError(f"item graph {item_graph.shape} does not match "
                             f"{trace.num_items} items")
        items_out = items + spmv_multi(item_graph, items)
    else:
        items_out = items.copy()
    trace.item_graph = item_graph
    trace.fused_users, trace.fused_items_base, trace.fused_items = users, items, items_out
    return users, items_out


def score(fused_users: np.ndarray, fused_items: np.ndarray, u, i):
    u = np.asarray(u)
    i = np.asarray(i)
    if np.any((u < 0) | (u >= fused_users.shape[0])):
        raise IndexError("user index out of range")
    if np.any((i < 0) | (i >= fused_items.shape[0])):
        raise IndexError("item index out of range")
    return np.einsum("...d,...d->...", fused_users[u], fused_items[i])


class Recommender:
    """Parameters bound to the graphs and features they run on."""

    def __init__(self, params: ModelParameters, adjacency: BipartiteAdjacency,
                 item_graphs: ItemItemGraphs | None, num_layers: int, features=None):
        self.params = params
        self.adjacency = adjacency
        self.item_graphs = item_graphs
        self.num_layers = num_layers
        self.features = features

    @property
    def num_users(self) -> int:
        return self.adjacency.num_users

    @property
    def num_items(self) -> int:
        return self.adjacency.num_items

    def fused_item_graph(self) -> SparseGraph | None:
        if self.item_graphs is None:
            return None
        per = {m: self.item_graphs.per_modality[m] for m in self.params.modalities}
        return fuse_item_graphs(per, self.params.alpha)

    def forward(self) -> ForwardTrace:
        trace = propagate(self.params, self.adjacency, self.num_layers, self.features)
        if self.num_layers >= 1:
            split_ego_neighbor(trace)
        fuse(trace, self.params, self.fused_item_graph())
        return trace

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        trace = self.forward()
        return trace.fused_users, trace.fused_items
