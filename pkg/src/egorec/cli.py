"""Command-line entry point: ``egorec <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, io
from .config import ConfigError, TrainConfig, build_config, format_config, parse_config_text
from .dataset import (DatasetError, kcore_filter, load_dataset, load_features, load_interactions,
                      save_dataset, split)

log = logging.getLogger("egorec")

VERBS = ("prepare", "build-graphs", "train", "evaluate", "gridsearch", "ablate", "gradcheck",
         "export", "diagnose")


class CommandError(RuntimeError):
    pass


# -- shared helpers ---------------------------------------------------------------------------


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not KEY=VALUE"])
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    file_values = {}
    if getattr(args, "config", None):
        file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
    overrides = _parse_overrides(getattr(args, "set", None))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.deterministic is not None:
        overrides["deterministic"] = str(args.deterministic)
    return build_config(file_values, overrides, base=base)


def _input_hashes(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = io.file_sha256(p)
        elif p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file():
                    out[str(f)] = io.file_sha256(f)
    return out


def write_manifest(out_dir: Path, args, config: TrainConfig | None, inputs, outputs, **extra):
    manifest = {
        "verb": args.verb,
        "argv": args.argv,
        "version": __version__,
        "seed": config.seed if config is not None else args.seed,
        "config": config.to_dict() if config is not None else None,
        "inputs": _input_hashes(inputs),
        "outputs": sorted(str(p) for p in outputs),
        **extra,
    }
    io.write_json(out_dir / "manifest.json", manifest)


def _load_data(data_dir):
    data_dir = Path(data_dir)
    ds = load_dataset(data_dir)
    feats = {}
    for m in ("v", "t"):
        path = data_dir / f"features_{m}.mmft"
        if path.exists():
            feats[m] = load_features(path, m, ds)
    return ds, feats


def _restore_model(data_dir, checkpoint):
    from .trainer import build_model, load_checkpoint

    ds, feats = _load_data(data_dir)
    params, manifest = load_checkpoint(checkpoint)
    config = build_config(manifest.get("config", {}))
    model = build_model(ds, feats, config)
    model.params = params
    return ds, feats, model, config


# -- verbs ---------------------------------------------------------------------------------------


def cmd_prepare(args, out: Path):
    raw = load_interactions(args.interactions)
    n_raw = len(raw)
    filtered = kcore_filter(raw, args.k_core)
    seed = args.seed if args.seed is not None else TrainConfig().seed
    ds = split(filtered, seed=seed)
    data_dir = out / "dataset"
    save_dataset(ds, data_dir, {"seed": seed, "k_core": args.k_core, "raw_pairs": n_raw})
    outputs = [data_dir]
    inputs = [args.interactions]
    for spec in args.features or []:
        m, _, path = spec.partition("=")
        if m not in ("v", "t") or not path:
            raise CommandError(f"--features expects v=PATH or t=PATH, got {spec!r}")
        f = load_features(path, m, ds)
        io.write_matrix(data_dir / f"features_{m}.mmft", f.matrix, ds.item_tokens)
        inputs.append(path)
    stats = ds.stats()
    print(json.dumps(stats, indent=2))
    write_manifest(out, args, None, inputs, outputs, seed_used=seed, stats=stats)


def cmd_build_graphs(args, out: Path):
    from .graphs import build_bipartite, build_item_graphs

    config = resolve_config(args)
    ds, feats = _load_data(args.data)
    adj = build_bipartite(ds)
    graphs = {"adjacency": adj.user_to_item}
    if feats:
        items = build_item_graphs(feats, config.knn_k, config.item_graph_normalize)
        graphs.update({f"item_{m}": g for m, g in items.per_modality.items()})
    hashes, outputs = {}, []
    for name, g in graphs.items():
        path = out / f"{name}.csrg"
        hashes[name] = {"file_sha256": io.write_graph(path, g), "content": g.content_hash(),
                        "nnz": g.nnz, "shape": list(g.shape)}
        outputs.append(path)
        if args.dump_tsv:
            with io.atomic_open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
                fh.writelines(f"{r}\t{c}\t{w!r}\n" for r, c, w in g.edges())
    io.write_json(out / "graphs.json", hashes)
    print(json.dumps(hashes, indent=2))
    write_manifest(out, args, config, [args.data], outputs)


def cmd_train(args, out: Path):
    from .trainer import fit, save_checkpoint

    config = resolve_config(args)
    ds, feats = _load_data(args.data)
    log.info("training on %s", ds.stats())
    result = fit(ds, feats or None, config)
    save_checkpoint(out / "checkpoint", result.model.params, config,
                    {"best_epoch": result.best_epoch, "best_val_R@20": result.best_metric,
                     "step": result.adam_step, "stop_reason": result.stop_reason})
    history = [{k: v for k, v in row.items() if k != "seconds"} for row in result.history]
    io.write_jsonl(out / "history.jsonl", history)
    io.write_jsonl(out / "loss_curve.jsonl", result.loss_curve)
    with io.atomic_open(out / "config.txt", "w", encoding="utf-8") as fh:
        fh.write(format_config(config))
    summary = {"best_epoch": result.best_epoch, "best_val_R@20": result.best_metric,
               "epochs": len(result.history), "stop_reason": result.stop_reason}
    print(json.dumps(summary, indent=2))
    write_manifest(out, args, config, [args.data], [out / "checkpoint", out / "history.jsonl"],
                   **summary)


def cmd_evaluate(args, out: Path):
    from .metrics import evaluate, write_per_user_csv
    from .trainer import deterministic_threads

    ds, _, model, config = _restore_model(args.data, args.checkpoint)
    with deterministic_threads(config.deterministic):
        report = evaluate(model, ds, args.split, keep_per_user=args.per_user)
    io.write_json(out / f"metrics_{args.split}.json", report.to_json())
    table = report.table_row(args.label)
    with io.atomic_open(out / f"metrics_{args.split}.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    if args.per_user:
        write_per_user_csv(out / f"per_user_{args.split}.csv", report, ds.user_tokens)
    print(table)
    write_manifest(out, args, config, [args.data, args.checkpoint],
                   [out / f"metrics_{args.split}.json"], metrics=report.metrics)


def _parse_grid(items: list[str]) -> dict[str, list]:
    from .experiments import DEFAULT_GRID

    if not items:
        return dict(DEFAULT_GRID)
    grids = {}
    for item in items:
        key, _, values = item.partition("=")
        if not values:
            raise ConfigError([f"grid axis {item!r} is not KEY=V1,V2,..."])
        grids[key.strip().replace("-", "_")] = [v.strip() for v in values.split(",") if v.strip()]
    return grids


def cmd_gridsearch(args, out: Path):
    from .experiments import grid_search, grid_table

    config = resolve_config(args)
    ds, feats = _load_data(args.data)
    rows = grid_search(ds, feats or None, _parse_grid(args.grid), config, workers=args.workers)
    io.write_json(out / "grid.json", rows)
    table = grid_table(rows)
    with io.atomic_open(out / "grid.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    write_manifest(out, args, config, [args.data], [out / "grid.json"])


def cmd_ablate(args, out: Path):
    from .experiments import ablate, ablation_table

    config = resolve_config(args)
    ds, feats = _load_data(args.data)
    layers = [int(x) for x in args.layers.split(",")]
    rows = ablate(ds, feats or None, config, layers, include_no_cl=not args.no_cl_variant)
    io.write_json(out / "ablation.json", rows)
    table = ablation_table(rows)
    with io.atomic_open(out / "ablation.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    write_manifest(out, args, config, [args.data], [out / "ablation.json"])


def cmd_gradcheck(args, out: Path):
    from .gradcheck import finite_diff_check
    from .synthetic import gradcheck_instance

    instance = gradcheck_instance(seed=args.seed or 0, feature_projection=args.feature_projection)
    report = finite_diff_check(instance, h=args.h, tolerance=args.tolerance)
    io.write_json(out / "gradcheck.json", report.to_json())
    print(report.summary())
    write_manifest(out, args, instance[2], [], [out / "gradcheck.json"], passed=report.passed)
    if not report.passed:
        raise CommandError("gradient check failed: " + ", ".join(report.failing))


def cmd_export(args, out: Path):
    from .diagnostics import export_embeddings

    ds, _, model, config = _restore_model(args.data, args.checkpoint)
    paths = export_embeddings(model, ds, args.which, out)
    for p in paths:
        print(p)
    write_manifest(out, args, config, [args.data, args.checkpoint], paths)


def cmd_diagnose(args, out: Path):
    from .diagnostics import compare_variants, model_dispersion

    ds, _, model, config = _restore_model(args.data, args.checkpoint)
    if args.compare:
        _, _, other, _ = _restore_model(args.data, args.compare)
        result = compare_variants(model, other, args.sample_pairs, config.seed).to_json()
    else:
        result = model_dispersion(model, args.sample_pairs, config.seed).to_json()
    io.write_json(out / "dispersion.json", result)
    print(json.dumps(result, indent=2))
    write_manifest(out, args, config, [args.data, args.checkpoint], [out / "dispersion.json"])


COMMANDS = {
    "prepare": cmd_prepare, "build-graphs": cmd_build_graphs, "train": cmd_train,
    "evaluate": cmd_evaluate, "gridsearch": cmd_gridsearch, "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck, "export": cmd_export, "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default="runs/latest", help="directory for all outputs")
    common.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--deterministic", dest="deterministic", action="store_true",
                        default=None)
    common.add_argument("--no-deterministic", dest="deterministic", action="store_false",
                        default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="egorec",
        description="Multimodal graph recommender: prepare data, train, evaluate, diagnose.")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("prepare", parents=[common], help="filter, split and remap a dataset")
    p.add_argument("--interactions", required=True)
    p.add_argument("--features", action="append", metavar="MOD=PATH",
                   help="MMFT feature file per modality (v or t)")
    p.add_argument("--k-core", type=int, default=5)

    p = sub.add_parser("build-graphs", parents=[common], help="serialize all graphs")
    p.add_argument("--data", required=True)
    p.add_argument("--dump-tsv", action="store_true")

    p = sub.add_parser("train", parents=[common], help="fit with early stopping")
    p.add_argument("--data", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="Recall/NDCG of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test", "train"), default="test")
    p.add_argument("--per-user", action="store_true")
    p.add_argument("--label", default="model")

    p = sub.add_parser("gridsearch", parents=[common], help="hyper-parameter grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help="grid axis, repeatable (default: reg/cl weight and knn_k grid)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("ablate", parents=[common], help="layer-count and no-CL ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--layers", default="1,2,3,4")
    p.add_argument("--no-cl-variant", action="store_true", help="skip the cl_weight=0 row")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--feature-projection", action="store_true")

    p = sub.add_parser("export", parents=[common], help="export embeddings as MMFT")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", default="fused",
                   help="fused | all | ego | neighbor | modal_final, optionally KIND:MOD")

    p = sub.add_parser("diagnose", parents=[common], help="embedding dispersion")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--compare", help="second checkpoint for a paired comparison")
    p.add_argument("--sample-pairs", type=int, default=100_000)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.verb](args, out)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (CommandError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
