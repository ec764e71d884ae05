"""Composite loss (BPR + L2 + weighted InfoNCE) and its exact reverse-mode gradient.

Only this model's fixed computation is differentiated. The backward pass replays
the stored :class:`~egorec.model.ForwardTrace` in reverse: scores -> item-item
enhancement (alpha) -> modality scaling (beta) -> layer sum / neighbor mean ->
the L sparse propagation steps -> layer-0 tables (and feature projections).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .graphs import spmv_multi
from .model import ForwardTrace, Recommender


class ObjectiveError(ValueError):
    pass


@dataclass
class TripletBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.pos = np.asarray(self.pos, dtype=np.int64)
        self.neg = np.asarray(self.neg, dtype=np.int64)
        if not (len(self.users) == len(self.pos) == len(self.neg)):
            raise ObjectiveError("triplet arrays differ in length")
        if len(self.users) == 0:
            raise ObjectiveError("empty batch")

    def __len__(self):
        return len(self.users)


@dataclass
class LossReport:
    rec_loss: float
    cl_loss: dict[str, float]
    reg_loss: float
    total: float

    def as_row(self, **extra) -> dict:
        row = dict(extra)
        row.update(rec_loss=self.rec_loss, reg=self.reg_loss, total=self.total)
        row.update({f"cl_loss_{m}": v for m, v in self.cl_loss.items()})
        return row


def bpr_loss(scores_p, scores_n, reg_terms=(), reg_weight: float = 0.0,
             reduction: str = "mean") -> float:
    """``sum -log sigmoid(y_p - y_n) + reg_weight * ||theta||^2``, divided by B for ``mean``."""
    scores_p = np.asarray(scores_p, dtype=np.float64)
    scores_n = np.asarray(scores_n, dtype=np.float64)
    if scores_p.shape != scores_n.shape:
        raise ObjectiveError("positive and negative score vectors differ in shape")
    if not (np.all(np.isfinite(scores_p)) and np.all(np.isfinite(scores_n))):
        raise ObjectiveError("non-finite scores")
    # -log sigmoid(x) = log(1 + exp(-x))
    loss = np.logaddexp(0.0, -(scores_p - scores_n)).sum()
    loss += reg_weight * sum(float(np.sum(np.square(t))) for t in reg_terms)
    if reduction == "mean":
        loss /= len(scores_p)
    return float(loss)


def _check_pool(node_set, tau):
    if tau <= 0:
        raise ObjectiveError(f"temperature must be > 0 (got {tau})")
    node_set = np.asarray(node_set, dtype=np.int64)
    if node_set.size == 0:
        raise ObjectiveError("empty InfoNCE pool")
    return node_set


def infonce_loss(ego, neighbor, node_set, tau: float) -> float:
    """``-sum_n log softmax_n'(ego_n . neighbor_n' / tau)[n]`` over one pool of nodes."""
    node_set = _check_pool(node_set, tau)
    logits = ego[node_set] @ neighbor[node_set].T / tau
    return float(np.sum(logsumexp(logits, axis=1) - np.diag(logits)))


def infonce_with_grad(ego, neighbor, node_set, tau: float):
    """Loss plus gradients w.r.t. the pooled ego and neighbor rows."""
    node_set = _check_pool(node_set, tau)
    e, nb = ego[node_set], neighbor[node_set]
    logits = e @ nb.T / tau
    loss = float(np.sum(logsumexp(logits, axis=1) - np.diag(logits)))
    d_logits = softmax(logits, axis=1)
    d_logits[np.diag_indices_from(d_logits)] -= 1.0
    return loss, d_logits @ nb / tau, d_logits.T @ e / tau


def cl_pools(batch: TripletBatch, trace: ForwardTrace, mode: str) -> list[np.ndarray]:
    """User and item node pools (item rows offset by the user count)."""
    U, I = trace.num_users, trace.num_items
    if mode == "full":
        return [np.arange(U), U + np.arange(I)]
    users = np.unique(batch.users)
    items = np.unique(np.concatenate([batch.pos, batch.neg]))
    return [users, U + items]


def _layer0_reg_rows(batch: TripletBatch, U: int) -> np.ndarray:
    return np.concatenate([batch.users, U + batch.pos, U + batch.neg])


def total_loss(batch: TripletBatch, trace: ForwardTrace, params, config) -> LossReport:
    U = trace.num_users
    Fu, Fi = trace.fused_users, trace.fused_items
    yp = np.einsum("bd,bd->b", Fu[batch.users], Fi[batch.pos])
    yn = np.einsum("bd,bd->b", Fu[batch.users], Fi[batch.neg])
    scale = 1.0 / len(batch) if config.reduction == "mean" else 1.0

    if config.reg_all_params:
        reg = config.reg_weight * sum(float(np.sum(np.square(t)))
                                      for t in params.tensors().values())
        rec = bpr_loss(yp, yn, reduction=config.reduction) + reg
    else:
        rows = _layer0_reg_rows(batch, U)
        terms = [trace.layers[m][0][rows] for m in params.modalities]
        rec = bpr_loss(yp, yn, terms, config.reg_weight, config.reduction)
        reg = scale * config.reg_weight * sum(float(np.sum(np.square(t))) for t in terms)

    cl = {}
    if config.cl_weight > 0:
        pools = cl_pools(batch, trace, config.cl_pool)
        for m in params.modalities:
            cl[m] = scale * sum(infonce_loss(trace.ego[m], trace.neighbor[m], pool, config.tau)
                                for pool in pools)
    else:
        cl = {m: 0.0 for m in params.modalities}
    total = rec + config.cl_weight * sum(cl.values())
    return LossReport(rec, cl, reg, total)


def _backprop_layers(model: Recommender, layer_grads: list[np.ndarray]) -> np.ndarray:
    """Gradient on layer 0 given direct gradients on every layer ``E(l) = P^l E(0)``.

    ``P`` is the symmetric bipartite operator, so its adjoint is itself.
    """
    adj = model.adjacency
    U = adj.num_users
    acc = layer_grads[-1]
    for g in reversed(layer_grads[:-1]):
        acc = g + np.vstack([spmv_multi(adj.user_to_item, acc[U:]),
                             spmv_multi(adj.item_to_user, acc[:U])])
    return acc


def backward(batch: TripletBatch, trace: ForwardTrace, model: Recommender, config) -> dict:
    """Gradients of :func:`total_loss` for every tensor in ``model.params.tensors()``."""
    params = model.params
    if trace.fused_users is None or trace.fused_items is None:
        raise ObjectiveError("trace has no fused embeddings; run the forward pass first")
    if config.cl_weight > 0 and not trace.neighbor:
        raise ObjectiveError("trace has no ego/neighbor split")
    U, L, d = trace.num_users, trace.num_layers, params.dim
    B = len(batch)
    scale = 1.0 / B if config.reduction == "mean" else 1.0
    u, p, n = batch.users, batch.pos, batch.neg
    Fu, Fi, Fi0 = trace.fused_users, trace.fused_items, trace.fused_items_base

    # BPR: d/dx softplus(-x) = -sigmoid(-x)
    x = np.einsum("bd,bd->b", Fu[u], Fi[p] - Fi[n])
    g = (-expit(-x) * scale)[:, None]
    G_Fu = np.zeros_like(Fu)
    G_Fi = np.zeros_like(Fi)
    np.add.at(G_Fu, u, g * (Fi[p] - Fi[n]))
    np.add.at(G_Fi, p, g * Fu[u])
    np.add.at(G_Fi, n, -g * Fu[u])

    # item-item enhancement: Fi = Fi0 + (sum_m alpha_m S_m) Fi0
    grad_alpha = np.zeros_like(params.alpha)
    G_Fi0 = G_Fi.copy()
    if trace.item_graph is not None:
        for k, m in enumerate(params.modalities):
            S_m = model.item_graphs.per_modality[m]
            grad_alpha[k] = np.sum(G_Fi * spmv_multi(S_m, Fi0))
        G_Fi0 += spmv_multi(trace.item_graph.transpose(), G_Fi)
    G_F = np.vstack([G_Fu, G_Fi0])

    cl_pool_list = cl_pools(batch, trace, config.cl_pool) if config.cl_weight > 0 else []
    reg_rows = None if config.reg_all_params else _layer0_reg_rows(batch, U)
    grad_beta = np.zeros_like(params.beta)
    grads = {}
    for k, m in enumerate(params.modalities):
        block = G_F[:, k * d:(k + 1) * d]
        grad_beta[k] = np.sum(block * trace.modal_final[m])
        G_final = params.beta[k] * block

        G_ego = np.zeros_like(G_final)
        G_nb = np.zeros_like(G_final)
        for pool in cl_pool_list:
            _, ge, gn = infonce_with_grad(trace.ego[m], trace.neighbor[m], pool, config.tau)
            G_ego[pool] += config.cl_weight * scale * ge
            G_nb[pool] += config.cl_weight * scale * gn
        if reg_rows is not None and config.reg_weight > 0:
            E0 = trace.layers[m][0]
            np.add.at(G_ego, reg_rows, 2.0 * config.reg_weight * scale * E0[reg_rows])

        layer_grads = [G_final + G_ego]
        layer_grads += [G_final + G_nb / L for _ in range(L)]
        G_E0 = _backprop_layers(model, layer_grads)

        grads[f"user_embed.{m}"] = G_E0[:U]
        if m in params.proj:
            f = model.features[m]
            f = getattr(f, "matrix", f)
            grads[f"proj.{m}"] = f.T @ G_E0[U:]
        else:
            grads[f"item_embed.{m}"] = G_E0[U:]
    grads["alpha"] = grad_alpha
    grads["beta"] = grad_beta

    if config.reg_all_params and config.reg_weight > 0:
        for name, t in params.tensors().items():
            grads[name] = grads[name] + 2.0 * config.reg_weight * t
    return {name: grads[name] for name in params.tensors()}


def loss_and_grad(model: Recommender, batch: TripletBatch, config):
    trace = model.forward()
    report = total_loss(batch, trace, model.params, config)
    return report, backward(batch, trace, model, config)


def loss_value(model: Recommender, batch: TripletBatch, config) -> float:
    return total_loss(batch, model.forward(), model.params, config).total

