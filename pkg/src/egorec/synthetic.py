"""Small deterministic datasets used by the test-suite, ``gradcheck`` and the demos."""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .dataset import from_lists, make_features
from .graphs import build_bipartite, build_item_graphs
from .model import Recommender
from .objective import TripletBatch
from .trainer import init_parameters

GRADCHECK_CONFIG = TrainConfig(
    dim=4, layers=3, knn_k=2, tau=0.2, reg_weight=1e-3, cl_weight=1e-2,
    cl_pool="full", batch_size=16, deterministic=True,
)

# user -> train items; every item has at least one user
_GRADCHECK_TRAIN = [
    [0, 1, 2],
    [1, 3],
    [2, 4, 5],
    [0, 5, 6],
    [3, 6, 7],
    [4, 7],
]


def gradcheck_instance(seed: int = 0, feature_projection: bool = False,
                       config: TrainConfig | None = None):
    """6 users, 8 items, two modalities; returns ``(model, batch, config)``.

    Parameters are drawn with non-equal modality weights so no gradient
    coordinate vanishes by symmetry.
    """
    config = config or GRADCHECK_CONFIG
    if feature_projection:
        config = config.replace(feature_projection=True)
    rng = np.random.default_rng(seed)
    ds = from_lists(_GRADCHECK_TRAIN, num_items=8)
    feats = {"v": make_features(rng.normal(size=(8, 5)), "v"),
             "t": make_features(rng.normal(size=(8, 3)) + 0.5, "t")}
    graphs = build_item_graphs(feats, config.knn_k, config.item_graph_normalize)
    dims = {m: f.dim for m, f in feats.items()} if config.feature_projection else None
    params = init_parameters(ds.num_users, ds.num_items, config.dim, ("v", "t"), dims,
                             seed=seed)
    params.alpha[:] = [0.7, 0.4]
    params.beta[:] = [0.9, 0.6]
    model = Recommender(params, build_bipartite(ds), graphs, config.layers,
                        feats if config.feature_projection else None)
    pairs = ds.pairs("train")
    neg = np.array([next(j for j in rng.permutation(8) if j not in ds.train_sets[u])
                    for u in pairs[:, 0]])
    return model, TripletBatch(pairs[:, 0], pairs[:, 1], neg), config


def planted_preferences(n_users: int = 50, n_items: int = 30, n_groups: int = 5,
                        seed: int = 0, feature_dim: int = 16, noise_items: int = 3):
    """Users and items split into taste groups.

    Each user holds most items of its own group plus ``noise_items`` random
    items from other groups. One held-out in-group item goes to validation and
    one to test. Features are noisy group centroids.
    """
    rng = np.random.default_rng(seed)
    item_group = np.arange(n_items) % n_groups
    user_group = np.arange(n_users) % n_groups
    train, val, test = [], [], []
    for u in range(n_users):
        own = rng.permutation(np.flatnonzero(item_group == user_group[u]))
        other = rng.choice(np.flatnonzero(item_group != user_group[u]), noise_items,
                           replace=False)
        test.append([int(own[0])])
        val.append([int(own[1])])
        train.append(sorted(int(i) for i in np.concatenate([own[2:], other])))
    _cover_items(train, val, test, n_items, rng)
    ds = from_lists(train, val, test, num_items=n_items)
    feats = _group_features(item_group, n_groups, feature_dim, rng)
    return ds, feats


def clustered_fixture(n_users: int = 60, n_items: int = 40, n_clusters: int = 4,
                      seed: int = 0, feature_dim: int = 16, items_per_user: int = 6,
                      cross_rate: float = 0.15):
    """Clustered interactions where users of one cluster share many neighbors."""
    rng = np.random.default_rng(seed)
    item_c = np.arange(n_items) % n_clusters
    user_c = np.arange(n_users) % n_clusters
    train, val, test = [], [], []
    for u in range(n_users):
        own = np.flatnonzero(item_c == user_c[u])
        other = np.flatnonzero(item_c != user_c[u])
        chosen = set()
        while len(chosen) < items_per_user + 2:
            pool = other if rng.random() < cross_rate else own
            chosen.add(int(rng.choice(pool)))
        chosen = list(rng.permutation(sorted(chosen)))
        test.append([int(chosen[0])])
        val.append([int(chosen[1])])
        train.append(sorted(int(i) for i in chosen[2:]))
    _cover_items(train, val, test, n_items, rng)
    ds = from_lists(train, val, test, num_items=n_items)
    feats = _group_features(item_c, n_clusters, feature_dim, rng)
    return ds, feats


def _cover_items(train, val, test, n_items, rng):
    """Give every item at least one train interaction by moving it into some train list."""
    seen = {i for t in train for i in t}
    for i in range(n_items):
        if i in seen:
            continue
        holders = [u for u in range(len(train)) if i in val[u] or i in test[u]]
        u = holders[0] if holders else int(rng.integers(len(train)))
        for lst in (val[u], test[u]):
            if i in lst:
                lst.remove(i)
        train[u] = sorted(set(train[u]) | {i})
        seen.add(i)


def _group_features(groups, n_groups, dim, rng):
    out = {}
    for m, noise in (("v", 0.6), ("t", 0.9)):
        centers = rng.normal(size=(n_groups, dim))
        x = centers[groups] + noise * rng.normal(size=(len(groups), dim))
        out[m] = make_features(x, m)
    return out
