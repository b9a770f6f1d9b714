"""Command-line entry points: data generation, training, evaluation, sweeps.

Subcommands::

    noodle gen-data   --out DIR [--seed N --classes K --noise-rate F ...]
    noodle train      --data train.csv --out DIR [--config cfg.json ...]
    noodle eval       --checkpoint ckpt --store BASE --id-test f --ood f [...]
    noodle experiment --spec exp.json [--out DIR --threads N]

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
during training.  All outputs are deterministic functions of their inputs and
seeds; no timestamps are written, so reruns are byte-identical.  The
environment variables ``NOODLE_OUT`` and ``NOODLE_THREADS`` provide defaults
for ``--out`` and ``--threads``.

The experiment runner drives the same helper functions as the individual
commands (including the CSV round trips), so a single-method single-seed
sweep reproduces a manual gen-data/train/eval chain exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .datagen import (
    OOD_MODES,
    LabeledSet,
    NoiseSpec,
    inject_symmetric_noise,
    load_features_csv,
    load_ood_csv,
    make_gaussian_mixture,
    make_ood_set,
    save_features_csv,
    save_ood_csv,
)
from .metrics import REPORT_CSV_HEADER, emit_report, id_accuracy, make_report
from .model import DivergenceError, forward, load_checkpoint, save_checkpoint
from .scoring import SCORE_KINDS, batch_scores, load_store, save_store
from .trainer import TrainConfig, train

EXPERIMENT_FORMAT = "noodle-experiment"

COMPARISON_CSV_HEADER = (
    "method,seeds,fpr95_mean,fpr95_std,auroc_mean,auroc_std,id_acc_mean,id_acc_std,failures"
)


# ---------------------------------------------------------------------------
# gen-data

GEN_DEFAULTS = dict(
    classes=4,
    per_class=500,
    dim=32,
    separation=6.0,
    spread=1.0,
    noise_rate=0.0,
    val_per_class=50,
    test_per_class=250,
    ood_size=1000,
    ood_modes=("far_cluster",),
)


def generate_dataset_files(out_dir: Path, seed: int, **overrides) -> list[tuple[Path, int]]:
    """Write train/val/test_id plus one OOD file per mode; returns the manifest.

    One sequential random stream drives everything, so the whole file set is
    a function of ``seed`` alone.  Train, val, and test are slices of a single
    mixture draw (shared class means); label noise touches the train split
    only.
    """
    p = dict(GEN_DEFAULTS)
    unknown = sorted(set(overrides) - set(p))
    if unknown:
        raise ValueError(f"unknown generator parameters: {', '.join(unknown)}")
    p.update(overrides)
    modes = tuple(p["ood_modes"])
    for mode in modes:
        if mode not in OOD_MODES:
            raise ValueError(f"unknown OOD mode {mode!r}; expected one of {OOD_MODES}")
    if not modes:
        raise ValueError("need at least one OOD mode")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    total_pc = p["per_class"] + p["val_per_class"] + p["test_per_class"]
    full = make_gaussian_mixture(
        p["classes"], total_pc, p["dim"], p["separation"], p["spread"], rng
    )

    def take(offset: int, count: int) -> np.ndarray:
        # Rows are laid out in class blocks of total_pc; slice each block.
        picks = []
        for c in range(p["classes"]):
            base = c * total_pc + offset
            picks.append(np.arange(base, base + count))
        return np.concatenate(picks)

    splits = {
        "train": take(0, p["per_class"]),
        "val": take(p["per_class"], p["val_per_class"]),
        "test_id": take(p["per_class"] + p["val_per_class"], p["test_per_class"]),
    }
    sets = {}
    for name, idx in splits.items():
        labels = full.clean_labels[idx]
        sets[name] = LabeledSet(full.features[idx], labels, labels.copy(), p["classes"])
    noisy = inject_symmetric_noise(
        sets["train"].clean_labels, NoiseSpec("symmetric", p["noise_rate"]), p["classes"], rng
    )
    sets["train"] = LabeledSet(
        sets["train"].features, sets["train"].clean_labels, noisy, p["classes"]
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: list[tuple[Path, int]] = []
    for name in ("train", "val", "test_id"):
        path = out_dir / f"{name}.csv"
        save_features_csv(sets[name], path)
        manifest.append((path, len(sets[name])))
    for mode in modes:
        features = make_ood_set(sets["train"], p["ood_size"], mode, rng)
        path = out_dir / f"ood_{mode}.csv"
        save_ood_csv(features, path)
        manifest.append((path, features.shape[0]))
    return manifest


def cmd_gen_data(args: argparse.Namespace) -> int:
    out_dir = _resolve_out(args.out)
    manifest = generate_dataset_files(
        out_dir,
        args.seed,
        classes=args.classes,
        per_class=args.per_class,
        dim=args.dim,
        separation=args.separation,
        spread=args.spread,
        noise_rate=args.noise_rate,
        val_per_class=args.val_per_class,
        test_per_class=args.test_per_class,
        ood_size=args.ood_size,
        ood_modes=tuple(args.ood_modes.split(",")),
    )
    for path, rows in manifest:
        print(f"wrote {path} ({rows} rows)")
    return 0


# ---------------------------------------------------------------------------
# train


def build_train_config(config_path: str | None, flag_overrides: dict) -> TrainConfig:
    """Defaults <- JSON config file <- explicit flags, rejecting unknown keys."""
    doc = {}
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
    doc.update({k: v for k, v in flag_overrides.items() if v is not None})
    config = TrainConfig.from_dict(doc)
    config.validate()
    return config


def run_training(data_path: Path, config: TrainConfig, out_dir: Path) -> list[Path]:
    """Train on a CSV and persist checkpoint, store, and loss trace."""
    data = load_features_csv(data_path)
    result = train(data, config)
    out_dir.mkdir(parents=True, exist_ok=True)

    checkpoint = out_dir / "checkpoint.json"
    save_checkpoint(
        result.params,
        checkpoint,
        transition_theta=result.transition.theta,
        meta={
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "data_file": data_path.name,
        },
    )
    store_base = out_dir / "store"
    save_store(result.store, store_base)
    trace_path = out_dir / "trace.json"
    with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(
            {
                "format": "noodle-trace",
                "version": 1,
                "config_hash": config.config_hash(),
                "epoch_mean_loss": result.loss_trace,
            },
            fh,
            sort_keys=True,
            indent=1,
        )
        fh.write("\n")
    return [checkpoint, Path(str(store_base) + ".csv"), Path(str(store_base) + ".json"), trace_path]


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = _resolve_out(args.out)
    flag_overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "lambda": args.lam,
        "loss_kind": args.loss,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "k_rank": args.k_rank,
        "pi_iters": args.pi_iters,
    }
    config = build_train_config(args.config, flag_overrides)
    for path in run_training(Path(args.data), config, out_dir):
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def run_eval(
    checkpoint_path: Path,
    store_base: Path,
    id_test_path: Path,
    ood_paths: list[Path],
    score: str,
    k: int,
    tpr: float,
    seed: int,
    out_dir: Path,
) -> dict:
    """Score the ID test set against every OOD file; write one report per OOD
    set plus a combined table with an average row.  Returns the summary dict."""
    if score not in SCORE_KINDS:
        raise ValueError(f"unknown score kind {score!r}; expected one of {SCORE_KINDS}")
    for path in [checkpoint_path, Path(str(store_base) + ".csv"), id_test_path, *ood_paths]:
        if not Path(path).exists():
            raise FileNotFoundError(f"missing input file: {path}")

    params, _, meta = load_checkpoint(checkpoint_path)
    store = load_store(store_base)
    config_hash = meta.get("config_hash", "")
    id_set = load_features_csv(id_test_path)
    id_cache = forward(params, id_set.features)
    predictions = np.argmax(id_cache.logits, axis=0)
    id_acc = id_accuracy(predictions, id_set.clean_labels)
    id_scores = batch_scores(score, store, id_cache.latent, id_cache.probs, id_cache.logits, k)

    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ood_path in ood_paths:
        features = load_ood_csv(ood_path)
        cache = forward(params, features)
        ood_scores = batch_scores(score, store, cache.latent, cache.probs, cache.logits, k)
        name = Path(ood_path).stem
        report = make_report(name, id_scores, ood_scores, id_acc, seed, config_hash, tpr)
        emit_report(report, out_dir / f"report_{name}.json", "json")
        emit_report(report, out_dir / f"report_{name}.csv", "csv")
        rows.append(
            {
                "dataset": name,
                "n_id": int(id_scores.size),
                "n_ood": int(ood_scores.size),
                "fpr95": report.fpr95,
                "auroc": report.auroc,
                "id_accuracy": report.id_accuracy,
            }
        )

    average = {
        "dataset": "average",
        "n_id": int(id_scores.size),
        "n_ood": int(sum(r["n_ood"] for r in rows)),
        "fpr95": float(np.mean([r["fpr95"] for r in rows])),
        "auroc": float(np.mean([r["auroc"] for r in rows])),
        "id_accuracy": id_acc,
    }
    summary = {
        "format": "noodle-eval-summary",
        "version": 1,
        "score": score,
        "k": k,
        "tpr": tpr,
        "seed": seed,
        "config_hash": config_hash,
        "rows": rows,
        "average": average,
    }
    with open(out_dir / "eval_summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(out_dir / "eval_summary.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(REPORT_CSV_HEADER + "\n")
        for row in [*rows, average]:
            fh.write(
                f"{row['dataset']},{row['n_id']},{row['n_ood']},{row['fpr95']!r},"
                f"{row['auroc']!r},{row['id_accuracy']!r},{seed},{config_hash}\n"
            )
    return summary


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = _resolve_out(args.out)
    summary = run_eval(
        Path(args.checkpoint),
        Path(args.store),
        Path(args.id_test),
        [Path(p) for p in args.ood],
        args.score,
        args.k,
        args.tpr,
        args.seed,
        out_dir,
    )
    for row in [*summary["rows"], summary["average"]]:
        print(
            f"{row['dataset']}: fpr95={row['fpr95']:.4f} auroc={row['auroc']:.4f} "
            f"id_acc={row['id_accuracy']:.4f}"
        )
    print(f"wrote {out_dir / 'eval_summary.csv'}")
    return 0


# ---------------------------------------------------------------------------
# experiment


def load_experiment_spec(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    if not isinstance(spec, dict):
        raise ValueError(f"{path}: experiment spec must be a JSON object")
    allowed = {"format", "version", "dataset", "noise", "train", "methods", "seeds", "out", "eval"}
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ValueError(f"{path}: unknown spec keys: {', '.join(unknown)}")
    methods = spec.get("methods", [])
    seeds = spec.get("seeds", [])
    if not methods or not seeds:
        raise ValueError(f"{path}: need at least one method and one seed")
    names = [m.get("name") for m in methods]
    if len(set(names)) != len(names) or None in names:
        raise ValueError(f"{path}: every method needs a unique name")
    for m in methods:
        extra = sorted(set(m) - {"name", "loss_kind", "lambda", "score", "k"})
        if extra:
            raise ValueError(f"{path}: method {m['name']!r} has unknown keys: {', '.join(extra)}")
        if m.get("score", "knn") not in SCORE_KINDS:
            raise ValueError(f"{path}: method {m['name']!r} has unknown score kind")
    dataset = spec.get("dataset", {})
    for key in ("train_csv", "id_test_csv"):
        if key in dataset and not Path(dataset[key]).exists():
            raise FileNotFoundError(f"{path}: dataset file missing: {dataset[key]}")
    for ood in dataset.get("ood_csvs", []):
        if not Path(ood).exists():
            raise FileNotFoundError(f"{path}: dataset file missing: {ood}")
    return spec


def _cell_config(spec: dict, method: dict, seed: int) -> TrainConfig:
    doc = dict(spec.get("train", {}))
    if "loss_kind" in method:
        doc["loss_kind"] = method["loss_kind"]
    if "lambda" in method:
        doc["lambda"] = method["lambda"]
    doc["seed"] = seed
    config = TrainConfig.from_dict(doc)
    config.validate()
    return config


def _run_cell(cell: dict) -> dict:
    """One (method, seed) unit: train then eval. Runs in a worker process when
    --threads > 1, so it takes and returns plain picklable dicts."""
    try:
        config = _cell_config(cell["spec"], cell["method"], cell["seed"])
        run_dir = Path(cell["run_dir"])
        run_training(Path(cell["train_csv"]), config, run_dir)
        summary = run_eval(
            run_dir / "checkpoint.json",
            run_dir / "store",
            Path(cell["id_test_csv"]),
            [Path(p) for p in cell["ood_csvs"]],
            cell["method"].get("score", "knn"),
            int(cell["method"].get("k", 50)),
            float(cell["spec"].get("eval", {}).get("tpr", 0.95)),
            cell["seed"],
            run_dir,
        )
        return {"ok": True, "summary": summary}
    except Exception as exc:  # cell failures must not kill the sweep
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def cmd_experiment(args: argparse.Namespace) -> int:
    spec_path = Path(args.spec)
    spec = load_experiment_spec(spec_path)
    out_dir = Path(args.out) if args.out else Path(spec.get("out") or _require_out())
    threads = args.threads if args.threads else int(os.environ.get("NOODLE_THREADS", "1"))
    seeds = [int(s) for s in spec["seeds"]]
    methods = spec["methods"]
    dataset = spec.get("dataset", {})
    noise = spec.get("noise", {})

    # Data is a function of the seed alone and is shared by all methods.
    data_files: dict[int, dict] = {}
    for seed in seeds:
        if "train_csv" in dataset:
            data_files[seed] = {
                "train_csv": dataset["train_csv"],
                "id_test_csv": dataset["id_test_csv"],
                "ood_csvs": list(dataset["ood_csvs"]),
            }
            continue
        gen_dir = out_dir / "data" / f"seed{seed}"
        gen_params = {k: v for k, v in dataset.items() if k != "ood_modes"}
        if "ood_modes" in dataset:
            gen_params["ood_modes"] = tuple(dataset["ood_modes"])
        gen_params["noise_rate"] = float(noise.get("rate", 0.0))
        manifest = generate_dataset_files(gen_dir, seed, **gen_params)
        paths = {p.stem: p for p, _ in manifest}
        data_files[seed] = {
            "train_csv": str(paths["train"]),
            "id_test_csv": str(paths["test_id"]),
            "ood_csvs": [str(p) for name, p in sorted(paths.items()) if name.startswith("ood_")],
        }

    cells = []
    for method in methods:
        for seed in seeds:
            cells.append(
                {
                    "spec": spec,
                    "method": method,
                    "seed": seed,
                    "run_dir": str(out_dir / "runs" / method["name"] / f"seed{seed}"),
                    **data_files[seed],
                }
            )

    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(cell) for cell in cells]

    by_method: dict[str, dict] = {
        m["name"]: {"seeds": {}, "failures": {}} for m in methods
    }
    for cell, result in zip(cells, results):
        bucket = by_method[cell["method"]["name"]]
        if result["ok"]:
            bucket["seeds"][cell["seed"]] = result["summary"]
        else:
            bucket["failures"][cell["seed"]] = result["error"]

    comparison_rows = []
    for method in methods:
        name = method["name"]
        bucket = by_method[name]
        summaries = [bucket["seeds"][s] for s in seeds if s in bucket["seeds"]]
        row = {"method": name, "seeds": len(summaries), "failures": len(bucket["failures"])}
        if summaries:
            for key, out_key in (("fpr95", "fpr95"), ("auroc", "auroc"), ("id_accuracy", "id_acc")):
                values = np.array([s["average"][key] for s in summaries])
                row[f"{out_key}_mean"] = float(values.mean())
                row[f"{out_key}_std"] = float(values.std())
        else:
            for out_key in ("fpr95", "auroc", "id_acc"):
                row[f"{out_key}_mean"] = float("nan")
                row[f"{out_key}_std"] = float("nan")
        comparison_rows.append(row)

    out_dir.mkdir(parents=True, exist_ok=True)
    comparison = {
        "format": EXPERIMENT_FORMAT,
        "version": 1,
        "spec_file": spec_path.name,
        "rows": comparison_rows,
        "methods": {
            name: {
                "per_seed": {str(s): summary for s, summary in bucket["seeds"].items()},
                "failures": {str(s): err for s, err in bucket["failures"].items()},
            }
            for name, bucket in by_method.items()
        },
    }
    with open(out_dir / "comparison.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(comparison, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(out_dir / "comparison.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(COMPARISON_CSV_HEADER + "\n")
        for row in comparison_rows:
            fh.write(
                f"{row['method']},{row['seeds']},{row['fpr95_mean']!r},{row['fpr95_std']!r},"
                f"{row['auroc_mean']!r},{row['auroc_std']!r},{row['id_acc_mean']!r},"
                f"{row['id_acc_std']!r},{row['failures']}\n"
            )

    failures = sum(row["failures"] for row in comparison_rows)
    for row in comparison_rows:
        print(
            f"{row['method']}: fpr95={row['fpr95_mean']:.4f}±{row['fpr95_std']:.4f} "
            f"auroc={row['auroc_mean']:.4f}±{row['auroc_std']:.4f} "
            f"id_acc={row['id_acc_mean']:.4f} ({row['seeds']} seeds, {row['failures']} failures)"
        )
    if failures:
        print(f"WARNING: {failures} cell(s) failed; see comparison.json", file=sys.stderr)
    print(f"wrote {out_dir / 'comparison.csv'}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def _require_out() -> str:
    out = os.environ.get("NOODLE_OUT")
    if not out:
        raise ValueError("no output directory: pass --out or set NOODLE_OUT")
    return out


def _resolve_out(flag_value: str | None) -> Path:
    return Path(flag_value if flag_value else _require_out())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noodle",
        description="Noise-robust out-of-distribution detection experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic ID/OOD CSV files")
    g.add_argument("--out", help="output directory (or NOODLE_OUT)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=GEN_DEFAULTS["classes"])
    g.add_argument("--per-class", type=int, default=GEN_DEFAULTS["per_class"])
    g.add_argument("--dim", type=int, default=GEN_DEFAULTS["dim"])
    g.add_argument("--separation", type=float, default=GEN_DEFAULTS["separation"])
    g.add_argument("--spread", type=float, default=GEN_DEFAULTS["spread"])
    g.add_argument("--noise-rate", type=float, default=GEN_DEFAULTS["noise_rate"])
    g.add_argument("--val-per-class", type=int, default=GEN_DEFAULTS["val_per_class"])
    g.add_argument("--test-per-class", type=int, default=GEN_DEFAULTS["test_per_class"])
    g.add_argument("--ood-size", type=int, default=GEN_DEFAULTS["ood_size"])
    g.add_argument(
        "--ood-modes",
        default=",".join(GEN_DEFAULTS["ood_modes"]),
        help=f"comma-separated subset of {OOD_MODES}",
    )
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and build the reference store")
    t.add_argument("--data", required=True, help="training CSV")
    t.add_argument("--out", help="output directory (or NOODLE_OUT)")
    t.add_argument("--config", help="JSON file of train-config keys")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda", dest="lam", type=float, help="sparsity weight")
    t.add_argument("--loss", choices=("ce", "cm", "sce", "gce"))
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--k-rank", type=int)
    t.add_argument("--pi-iters", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score ID/OOD files and emit reports")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--store", required=True, help="store base path (without .csv/.json)")
    e.add_argument("--id-test", required=True)
    e.add_argument("--ood", action="append", required=True, help="repeatable OOD CSV path")
    e.add_argument("--score", choices=SCORE_KINDS, default="knn")
    e.add_argument("--k", type=int, default=50)
    e.add_argument("--tpr", type=float, default=0.95)
    e.add_argument("--seed", type=int, default=0, help="seed recorded in reports")
    e.add_argument("--out", help="output directory (or NOODLE_OUT)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run a (method x seed) sweep from a JSON spec")
    x.add_argument("--spec", required=True)
    x.add_argument("--out", help="overrides the spec's output directory")
    x.add_argument("--threads", type=int, help="parallel cells (or NOODLE_THREADS)")
    x.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
