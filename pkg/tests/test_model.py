import numpy as np
import pytest

from egorec.dataset import ModalityFeatures, from_lists
from egorec.graphs import SparseGraph, build_bipartite, build_item_graphs
from egorec.model import (ModelError, ModelParameters, Recommender, fuse, propagate,
                          propagate_layers, score, split_ego_neighbor)
from egorec.trainer import init_parameters

from conftest import random_bipartite


def dense_layers(r, e0, num_layers):
    """Dense oracle: E(l+1) = A E(l) with A = [[0, Rn], [Rn^T, 0]]."""
    rn = r / np.sqrt(np.outer(r.sum(1), r.sum(0)))
    u = r.shape[0]
    a = np.zeros((u + r.shape[1],) * 2)
    a[:u, u:] = rn
    a[u:, :u] = rn.T
    out = [e0]
    for _ in range(num_layers):
        out.append(a @ out[-1])
    return out


def instance(rng, n_users=8, n_items=6, dim=3, layers=3):
    train, r = random_bipartite(rng, n_users, n_items)
    adj = build_bipartite(from_lists(train, num_items=n_items))
    params = init_parameters(n_users, n_items, dim, ("v", "t"), seed=int(rng.integers(1 << 30)))
    return adj, params, r


def test_swap_example():
    # one user, one item: layers alternate the two rows
    adj = build_bipartite(from_lists([[0]], num_items=1))
    e0 = np.array([[1.0, 2.0], [3.0, 4.0]])
    layers = propagate_layers(e0, adj, 3)
    np.testing.assert_array_equal(layers[1], e0[::-1])
    np.testing.assert_array_equal(layers[2], e0)
    np.testing.assert_array_equal(layers[3], e0[::-1])


def test_zero_layers_is_identity(rng):
    adj, params, _ = instance(rng)
    trace = propagate(params, adj, 0)
    np.testing.assert_array_equal(trace.modal_final["v"],
                                  np.vstack([params.user_embed["v"], params.item_embed["v"]]))
    with pytest.raises(ModelError, match="no neighbor layers"):
        split_ego_neighbor(trace)


@pytest.mark.parametrize("seed", range(5))
def test_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    train, r = random_bipartite(rng, 30, 25)
    adj = build_bipartite(from_lists(train, num_items=25))
    e0 = rng.normal(size=(55, 4))
    for got, want in zip(propagate_layers(e0, adj, 4), dense_layers(r, e0, 4)):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_linearity(rng):
    adj, _, _ = instance(rng)
    a, b = rng.normal(size=(14, 3)), rng.normal(size=(14, 3))
    lhs = propagate_layers(2.0 * a - 0.5 * b, adj, 3)
    ra, rb = propagate_layers(a, adj, 3), propagate_layers(b, adj, 3)
    for l, x, y in zip(lhs, ra, rb):
        np.testing.assert_allclose(l, 2.0 * x - 0.5 * y, rtol=0, atol=1e-12)


def test_interchangeable_users_stay_equal():
    # users 0 and 1 share the same items; equal embeddings stay equal
    adj = build_bipartite(from_lists([[0, 1], [0, 1], [1, 2]], num_items=3))
    e0 = np.random.default_rng(1).normal(size=(6, 2))
    e0[1] = e0[0]
    for layer in propagate_layers(e0, adj, 4):
        np.testing.assert_array_equal(layer[0], layer[1])


def test_readout(rng):
    adj, params, _ = instance(rng)
    trace = propagate(params, adj, 3)
    ego, nb = split_ego_neighbor(trace)
    for m in ("v", "t"):
        ls = trace.layers[m]
        np.testing.assert_allclose(trace.modal_final[m], ls[0] + ls[1] + ls[2] + ls[3], atol=1e-15)
        np.testing.assert_array_equal(ego[m], ls[0])
        np.testing.assert_allclose(nb[m], (ls[1] + ls[2] + ls[3]) / 3, atol=1e-15)


class TestFuse:
    def test_no_item_graph_is_scaled_concat(self, rng):
        adj, params, _ = instance(rng)
        trace = propagate(params, adj, 2)
        users, items = fuse(trace, params, None)
        b = params.beta
        f = np.hstack([b[0] * trace.modal_final["v"], b[1] * trace.modal_final["t"]])
        np.testing.assert_array_equal(users, f[:8])
        np.testing.assert_array_equal(items, f[8:])
        assert users.shape == (8, 2 * params.dim)

    def test_item_enhancement_dense(self, rng):
        adj, params, _ = instance(rng)
        trace = propagate(params, adj, 2)
        s = rng.random((6, 6)) * (rng.random((6, 6)) < 0.5)
        _, items = fuse(trace, params, SparseGraph.from_dense(s))
        base = trace.fused_items_base
        np.testing.assert_allclose(items, base + s @ base, rtol=0, atol=1e-13)

    def test_zero_beta_zeroes_block(self, rng):
        adj, params, _ = instance(rng)
        params.beta[:] = [0.0, 1.0]
        trace = propagate(params, adj, 1)
        users, _ = fuse(trace, params, None)
        np.testing.assert_array_equal(users[:, :params.dim], 0.0)

    def test_graph_shape_checked(self, rng):
        adj, params, _ = instance(rng)
        with pytest.raises(ModelError):
            fuse(propagate(params, adj, 1), params, SparseGraph.zeros(5, 5))


def test_score(rng):
    u, i = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(score(u, i, [0, 2], [4, 1]), [u[0] @ i[4], u[2] @ i[1]])
    with pytest.raises(IndexError):
        score(u, i, 3, 0)
    with pytest.raises(IndexError):
        score(u, i, 0, -1)


def test_recommender_forward_and_projection(rng):
    adj, _, _ = instance(rng)
    feats = {m: ModalityFeatures(m, rng.normal(size=(6, 5))) for m in ("v", "t")}
    graphs = build_item_graphs(feats, 2)
    params = init_parameters(8, 6, 3, ("v", "t"), feature_dims={"v": 5, "t": 5}, seed=0)
    model = Recommender(params, adj, graphs, 2, feats)
    trace = model.forward()
    assert trace.fused_items.shape == (6, 6)
    # projected item layer 0 is F @ W
    np.testing.assert_allclose(trace.layers["v"][0][8:], feats["v"].matrix @ params.proj["v"])
    s = 0.5 * graphs.per_modality["v"].to_dense() + 0.5 * graphs.per_modality["t"].to_dense()
    np.testing.assert_allclose(model.fused_item_graph().to_dense(), s, atol=1e-15)


def test_parameters_round_trip(rng):
    _, params, _ = instance(rng)
    tensors = params.tensors()
    assert set(tensors) == {"user_embed.v", "user_embed.t", "item_embed.v", "item_embed.t",
                            "alpha", "beta"}
    back = ModelParameters.from_tensors({k: v.copy() for k, v in tensors.items()},
                                        params.modalities, params.dim)
    for k, v in back.tensors().items():
        np.testing.assert_array_equal(v, tensors[k])
    assert params.num_parameters() == 2 * 8 * 3 + 2 * 6 * 3 + 4
    params.user_embed["v"][0, 0] = np.nan
    with pytest.raises(ModelError, match="user_embed.v"):
        params.check_finite()
