"""Xavier initialization, negative sampling, Adam and the early-stopped training loop."""

from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import TrainConfig
from .dataset import InteractionDataset, ModalityFeatures
from .graphs import ItemItemGraphs, build_bipartite, build_item_graphs
from .metrics import evaluate_embeddings
from .model import ModelParameters, Recommender
from .objective import TripletBatch, backward, total_loss

log = logging.getLogger(__name__)

EARLY_STOP_METRIC = "R@20"


class TrainingError(RuntimeError):
    pass


# -- initialization -------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_parameters(num_users: int, num_items: int, dim: int, modalities=("v", "t"),
                    feature_dims: dict[str, int] | None = None, seed=0) -> ModelParameters:
    """Fresh parameters; pass ``feature_dims`` to learn item projections instead of tables."""
    rng = np.random.default_rng(seed)
    user, item, proj = {}, {}, {}
    for m in modalities:
        user[m] = xavier_uniform(rng, num_users, dim)
        if feature_dims:
            proj[m] = xavier_uniform(rng, feature_dims[m], dim)
        else:
            item[m] = xavier_uniform(rng, num_items, dim)
    n = len(modalities)
    return ModelParameters(tuple(modalities), dim, user, item, proj,
                           np.full(n, 0.5 if n == 2 else 1.0 / n),
                           np.full(n, 0.5 if n == 2 else 1.0 / n))


def xavier_init(params: ModelParameters, seed=0) -> ModelParameters:
    """Re-draw every table of ``params``; modality weights are reset to equal values."""
    feature_dims = {m: w.shape[0] for m, w in params.proj.items()} or None
    m0 = params.modalities[0]
    n_items = params.item_embed[m0].shape[0] if params.item_embed else 0
    return init_parameters(params.user_embed[m0].shape[0], n_items, params.dim,
                           params.modalities, feature_dims, seed)


# -- sampling ---------------------------------------------------------------------------


class NegativeSampler:
    """Uniform train interactions, each paired with a uniformly drawn non-interacted item."""

    def __init__(self, dataset: InteractionDataset):
        self.num_items = dataset.num_items
        pairs = dataset.pairs("train")
        full = np.array([len(t) >= dataset.num_items for t in dataset.train])
        if full.any():
            log.warning("skipping %d users who interacted with every item", int(full.sum()))
            pairs = pairs[~full[pairs[:, 0]]]
        if len(pairs) == 0:
            raise TrainingError("no user has a candidate negative item")
        self.pairs = pairs
        self.keys = np.sort(pairs[:, 0] * self.num_items + pairs[:, 1])

    def _is_train(self, users, items) -> np.ndarray:
        keys = users * self.num_items + items
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        return self.keys[pos] == keys

    def sample(self, batch_size: int, rng: np.random.Generator) -> TripletBatch:
        idx = rng.integers(0, len(self.pairs), size=batch_size)
        users, pos = self.pairs[idx, 0], self.pairs[idx, 1]
        neg = rng.integers(0, self.num_items, size=batch_size)
        bad = self._is_train(users, neg)
        while bad.any():
            neg[bad] = rng.integers(0, self.num_items, size=int(bad.sum()))
            bad[bad] = self._is_train(users[bad], neg[bad])
        return TripletBatch(users, pos, neg)


def sample_triplets(dataset: InteractionDataset, batch_size: int, rng) -> TripletBatch:
    return NegativeSampler(dataset).sample(batch_size, rng)


# -- optimizer ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to the arrays in ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise TrainingError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape "
                                f"{params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- training ----------------------------------------------------------------------------


@contextlib.contextmanager
def deterministic_threads(enabled: bool):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def build_model(dataset: InteractionDataset, features: dict[str, ModalityFeatures] | None,
                config: TrainConfig, seed=None, item_graphs: ItemItemGraphs | None = None):
    features = features or {}
    modalities = tuple(features) or ("v", "t")
    adjacency = build_bipartite(dataset)
    if config.item_graph and features and item_graphs is None:
        item_graphs = build_item_graphs(features, config.knn_k, config.item_graph_normalize)
    if not config.item_graph:
        item_graphs = None
    feature_dims = None
    if config.feature_projection:
        if not features:
            raise TrainingError("feature_projection needs modality features")
        feature_dims = {m: f.dim for m, f in features.items()}
    params = init_parameters(dataset.num_users, dataset.num_items, config.dim, modalities,
                             feature_dims, config.seed if seed is None else seed)
    return Recommender(params, adjacency, item_graphs, config.layers, features or None)


@dataclass
class FitResult:
    model: Recommender
    history: list[dict]
    best_epoch: int
    best_metric: float
    stop_reason: str
    adam_step: int = 0

    @property
    def loss_curve(self) -> list[dict]:
        keep = ("epoch", "rec_loss", "reg", "total")
        return [{k: v for k, v in row.items() if k in keep or k.startswith("cl_loss_")}
                for row in self.history]


def _seeds(root: int):
    init_ss, sample_ss = np.random.SeedSequence(root).spawn(2)
    return int(init_ss.generate_state(1)[0]), np.random.default_rng(sample_ss)


def fit(dataset: InteractionDataset, features: dict[str, ModalityFeatures] | None,
        config: TrainConfig, model: Recommender | None = None, on_epoch=None,
        eval_split: str = "val", restore_best: bool = True) -> FitResult:
    """Train until ``patience`` epochs pass without a better validation Recall@20.

    Returns the model holding the best-validation parameters, or the last
    epoch's parameters when ``restore_best`` is false (divergence always
    restores the best).
    """
    init_seed, rng = _seeds(config.seed)
    with deterministic_threads(config.deterministic):
        if model is None:
            model = build_model(dataset, features, config, seed=init_seed)
        sampler = NegativeSampler(dataset)
        n_batches = max(1, math.ceil(len(sampler.pairs) / config.batch_size))
        state = AdamState()
        tensors = model.params.tensors()
        best = model.params.copy()
        best_metric, best_epoch, best_step = -math.inf, 0, 0
        since_best = 0
        history: list[dict] = []
        stop_reason = "max_epochs"
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            sums = {}
            try:
                for _ in range(n_batches):
                    batch = sampler.sample(config.batch_size, rng)
                    trace = model.forward()
                    report = total_loss(batch, trace, model.params, config)
                    if not math.isfinite(report.total):
                        raise FloatingPointError("non-finite loss")
                    grads = backward(batch, trace, model, config)
                    adam_step(tensors, grads, state, config.lr)
                    for key, value in report.as_row().items():
                        sums[key] = sums.get(key, 0.0) + value
                model.params.check_finite()
            except (FloatingPointError, ValueError) as exc:
                log.error("epoch %d diverged (%s); restoring best checkpoint", epoch, exc)
                stop_reason = f"diverged: {exc}"
                break
            users, items = model.embeddings()
            val = evaluate_embeddings(users, items, dataset, eval_split)
            row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()},
                   **{f"val_{k}": v for k, v in val.metrics.items()},
                   "seconds": time.perf_counter() - t0}
            history.append(row)
            metric = val.metrics[EARLY_STOP_METRIC]
            if metric > best_metric:
                best_metric, best_epoch, best_step = metric, epoch, state.step
                best = model.params.copy()
                since_best = 0
            else:
                since_best += 1
            log.info("epoch %d loss %.5f val R@20 %.4f (best %.4f @ %d)", epoch,
                     row["total"], metric, best_metric, best_epoch)
            if on_epoch is not None:
                on_epoch(row)
            if since_best >= config.patience:
                stop_reason = "early_stop"
                break
        if model.item_graphs is not None:
            model.item_graphs.verify_frozen()
    if restore_best or stop_reason.startswith("diverged"):
        model.params = best
    return FitResult(model, history, best_epoch, best_metric, stop_reason, best_step)


# -- checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParameters, config: TrainConfig | None = None,
                    extra: dict | None = None):
    """Directory of float64 ``MMFT`` tensors plus ``manifest.json`` with the scalars."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = params.tensors()
    for name, t in tensors.items():
        if t.ndim == 2:
            io.write_matrix(path / f"{name}.mmft", t, dtype="float64")
    manifest = {
        "modalities": list(params.modalities),
        "dim": params.dim,
        "alpha": params.alpha.tolist(),
        "beta": params.beta.tolist(),
        "tensors": sorted(n for n, t in tensors.items() if t.ndim == 2),
        **(extra or {}),
    }
    if config is not None:
        manifest["config"] = config.to_dict()
    io.write_json(path / "manifest.json", manifest)


def load_checkpoint(path) -> tuple[ModelParameters, dict]:
    path = Path(path)
    manifest = io.read_json(path / "manifest.json")
    tensors = {name: io.read_matrix(path / f"{name}.mmft") for name in manifest["tensors"]}
    tensors["alpha"] = np.array(manifest["alpha"], dtype=np.float64)
    tensors["beta"] = np.array(manifest["beta"], dtype=np.float64)
    params = ModelParameters.from_tensors(tensors, manifest["modalities"], manifest["dim"])
    return params, manifest
