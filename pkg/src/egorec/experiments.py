"""Hyper-parameter grid search and the layer-count / no-CL ablation."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor

from .config import TrainConfig, build_config
from .metrics import evaluate, format_table
from .trainer import fit

log = logging.getLogger(__name__)

# regularization, CL weight and item-graph k values searched by default
DEFAULT_GRID = {
    "reg_weight": [1e-2, 1e-3, 1e-4],
    "cl_weight": [1e-2, 1e-3, 1e-4],
    "knn_k": [5, 10, 15, 20],
}
ABLATION_LAYERS = (1, 2, 3, 4)


def enumerate_grid(grids: dict[str, list]) -> list[dict]:
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ValueError("every grid axis needs at least one value")
    keys = list(grids)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grids[k] for k in keys))]


def _run_point(args):
    dataset, features, config, point = args
    result = fit(dataset, features, config)
    val = evaluate(result.model, dataset, "val")
    return {**point, "val_R@20": result.best_metric, "best_epoch": result.best_epoch,
            "epochs": len(result.history), **{f"val_{k}": v for k, v in val.metrics.items()
                                              if k != "R@20"}}


def grid_search(dataset, features, grids: dict[str, list], base: TrainConfig | None = None,
                workers: int = 1) -> list[dict]:
    """Fit every grid point and rank by validation Recall@20 (best first).

    All points share ``base.seed`` so that rankings compare hyper-parameters,
    not initializations.
    """
    base = base or TrainConfig()
    points = enumerate_grid(grids)
    # validate the whole grid before spending time on any fit
    configs = [build_config(overrides=point, base=base) for point in points]
    jobs = [(dataset, features, cfg, point) for cfg, point in zip(configs, points)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = []
        for job in jobs:
            log.info("grid point %s", job[3])
            rows.append(_run_point(job))
    order = sorted(range(len(rows)), key=lambda j: (-rows[j]["val_R@20"], j))
    ranked = []
    for rank, j in enumerate(order, start=1):
        ranked.append({"rank": rank, "best": rank == 1, **rows[j]})
    return ranked


def grid_table(rows: list[dict]) -> str:
    keys = [k for k in rows[0] if k not in ("rank", "best")]
    body = [[r["rank"]] + [r[k] for k in keys] + ["*" if r["best"] else ""] for r in rows]
    return format_table(["rank"] + keys + ["best"], body)


def ablate(dataset, features, base: TrainConfig | None = None,
           layer_values=ABLATION_LAYERS, include_no_cl: bool = True) -> list[dict]:
    """Test-split metrics for each neighbor-layer count, plus the ``cl_weight = 0`` variant."""
    base = base or TrainConfig()
    variants = [(f"L={n}", base.replace(layers=n)) for n in layer_values]
    if include_no_cl:
        variants.append((f"L={base.layers} w/o CL", base.replace(cl_weight=0.0)))
    rows = []
    for label, cfg in variants:
        log.info("ablation variant %s", label)
        result = fit(dataset, features, cfg)
        report = evaluate(result.model, dataset, "test")
        rows.append({"variant": label, "layers": cfg.layers, "cl_weight": cfg.cl_weight,
                     "best_epoch": result.best_epoch, **report.metrics})
    return rows


def ablation_table(rows: list[dict]) -> str:
    cols = ["R@20", "N@20", "R@10", "N@10"]
    return format_table(["Variant"] + cols, [[r["variant"]] + [r[c] for c in cols] for r in rows])
