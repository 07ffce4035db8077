"""Command-line entry point: ``antehoc {train,evaluate,explain,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 training failure,
4 evaluation incompatibility.
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import yaml

from . import explanations as ex
from .config import ExperimentConfig, experiment_from_dict, load_experiment, load_splits
from .data import ConceptDataset
from .errors import CheckpointError, ConfigError, DataError, EvaluationError, TrainingError
from .metrics import MetricReport, append_summary, evaluate
from .model import checkpoint_metadata, load_checkpoint, parameter_counts, save_checkpoint
from .training import fit, write_history

log = logging.getLogger("antehoc")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4
SWEEP_AXES = ("num_concepts", "backbone", "use_decoder")
LAYOUT = ("checkpoints", "reports", "explanations", "logs")


def _layout(out: Path) -> Path:
    for sub in LAYOUT:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(path: Path, payload: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(payload, sort_keys=True))


def _split(splits: dict[str, ConceptDataset], name: str, fallbacks: tuple[str, ...] = ()) -> ConceptDataset:
    for candidate in (name, *fallbacks):
        if candidate in splits:
            return splits[candidate]
    raise ConfigError(f"split {name!r} not found; available: {sorted(splits)}")


# -- train ----------------------------------------------------------------------


def run_training(exp: ExperimentConfig, out: Optional[Path] = None) -> tuple[Path, list[dict[str, Any]]]:
    out = _layout(out or exp.out)
    run_id = exp.run_id
    splits = load_splits(exp.data, exp.base_dir, exp.model.num_concepts)
    train = _split(splits, exp.data.get("train_split", "train"))
    val = _split(splits, exp.data.get("val_split", "val"), ("test", "train"))
    _write_snapshot(out / "logs" / f"{run_id}.config.yaml", exp.to_dict())
    model, history = fit(exp.model, train, val, exp.train)
    write_history(history, out / "logs" / f"{run_id}.history.jsonl")
    ckpt = save_checkpoint(
        model,
        out / "checkpoints" / f"{run_id}.pt",
        metadata={"run_id": run_id, "experiment": exp.to_dict(), "base_dir": str(exp.base_dir.resolve())},
    )
    log.info("run %s: checkpoint %s", run_id, ckpt)
    return ckpt, history


def cmd_train(args: argparse.Namespace) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"model.seed={args.seed}")
    exp = load_experiment(args.config, overrides)
    out = Path(args.out) if args.out else None
    ckpt, history = run_training(exp, out)
    print(f"run_id={exp.run_id} checkpoint={ckpt} epochs={len(history)} "
          f"best_val_accuracy={max(h['val_accuracy'] for h in history):.2f}")
    return EXIT_OK


# -- evaluate / explain ---------------------------------------------------------


def _dataset_for(ckpt: Path, meta: dict[str, Any], dataset: Optional[str], split: str, num_concepts: int) -> ConceptDataset:
    if dataset in (None, "synthetic"):
        exp_raw = meta.get("experiment")
        if exp_raw is None:
            raise ConfigError("checkpoint carries no experiment config; pass --dataset")
        data = exp_raw["data"]
        if dataset == "synthetic" and "synthetic" not in data:
            raise ConfigError("checkpoint was not trained on synthetic data")
        base = Path(meta.get("base_dir", "."))
    else:
        data = {"manifest": str(Path(dataset).resolve())}
        base = Path(".")
    return _split(load_splits(data, base, num_concepts), split)


def _default_out(ckpt: Path, args_out: Optional[str]) -> Path:
    if args_out:
        return Path(args_out)
    # checkpoints live in <out>/checkpoints/
    return ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt.parent


def run_evaluation(
    ckpt: Path,
    out: Path,
    metrics: tuple[str, ...],
    omegas: tuple[float, ...],
    dataset: Optional[str] = None,
    split: str = "test",
) -> list[MetricReport]:
    meta = checkpoint_metadata(ckpt)
    model = load_checkpoint(ckpt)
    run_id = meta.get("run_id", ckpt.stem)
    ds = _dataset_for(ckpt, meta, dataset, split, model.config.num_concepts)
    reports = evaluate(model, ds, metrics, omegas, checkpoint=run_id)
    _layout(out)
    for r in reports:
        suffix = "" if r.omega is None else f"_omega{r.omega:g}"
        r.write(out / "reports" / f"{run_id}_{r.metric}{suffix}.json")
    append_summary(out / "summary.csv", reports, run_id)
    _write_snapshot(
        out / "reports" / f"{run_id}_evaluate.config.yaml",
        {"checkpoint": str(ckpt), "dataset": dataset or "from-checkpoint", "split": split,
         "metrics": list(metrics), "omegas": list(omegas)},
    )
    return reports


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    meta = checkpoint_metadata(ckpt)
    ev = (meta.get("experiment") or {}).get("evaluate", {})
    metrics = tuple(args.metrics.split(",")) if args.metrics else tuple(ev.get("metrics", ("accuracy", "faithfulness", "fidelity")))
    omegas = tuple(args.omega) if args.omega else tuple(ev.get("omegas", (0.5,)))
    reports = run_evaluation(ckpt, _default_out(ckpt, args.out), metrics, omegas, args.dataset, args.split)
    for r in reports:
        w = "" if r.omega is None else f" omega={r.omega:g}"
        print(f"{r.metric}{w}: {r.value:.4f} {r.unit} (n={r.n})")
    return EXIT_OK


def run_explain(
    ckpt: Path, out: Path, k: int, omega: Optional[float], max_flips: int,
    dataset: Optional[str] = None, split: str = "test", exhaustive: bool = False,
) -> Path:
    meta = checkpoint_metadata(ckpt)
    model = load_checkpoint(ckpt)
    run_id = meta.get("run_id", ckpt.stem)
    ds = _dataset_for(ckpt, meta, dataset, split, model.config.num_concepts)
    from .metrics import collect

    concepts = collect(model, ds).concepts
    grids = [ex.top_activating_images(model, ds, c, k, concepts=concepts) for c in range(model.config.num_concepts)]
    flips = ex.find_flip_examples(model, ds, max_flips, exhaustive=exhaustive)
    relevance = ex.class_concept_relevance(model, ds, omega)
    target = _layout(out) / "explanations" / run_id
    index = ex.export_report(grids, flips, relevance, target, ds)
    _write_snapshot(
        target / "explain.config.yaml",
        {"checkpoint": str(ckpt), "dataset": dataset or "from-checkpoint", "split": split,
         "k": k, "omega": relevance.omega, "max_flips": max_flips, "exhaustive": exhaustive},
    )
    return index


def cmd_explain(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    meta = checkpoint_metadata(ckpt)
    exp_cfg = (meta.get("experiment") or {}).get("explain", {})
    k = args.k if args.k is not None else exp_cfg.get("k", 5)
    max_flips = args.max_flips if args.max_flips is not None else exp_cfg.get("max_flips", 5)
    omega = args.omega[0] if args.omega else exp_cfg.get("omega")
    index = run_explain(ckpt, _default_out(ckpt, args.out), k, omega, max_flips, args.dataset, args.split, args.exhaustive)
    print(f"explanations written to {index}")
    return EXIT_OK


# -- ablate ---------------------------------------------------------------------


def parse_sweep(text: str) -> tuple[str, list[Any]]:
    if text.count("=") != 1 or ";" in text:
        raise ConfigError("sweep must name exactly one axis, e.g. num_concepts=5,10,15")
    axis, values = text.split("=")
    axis = axis.strip().removeprefix("model.")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    parsed = [yaml.safe_load(v) for v in values.split(",") if v.strip()]
    if not parsed:
        raise ConfigError("sweep lists no values")
    return axis, parsed


ABLATION_COLUMNS = (
    "axis", "value", "run_id", "accuracy", "faithfulness", "fidelity",
    "intervention_accuracy", "omega", "explanation_error", "reconstruction_loss", "total_parameters",
)


def run_ablation(base: dict[str, Any], base_dir: Path, axis: str, values: list[Any], out: Path) -> Path:
    rows = []
    for value in values:
        raw = copy.deepcopy(base)
        raw.setdefault("model", {})[axis] = value
        exp = experiment_from_dict(raw, base_dir)
        ckpt, history = run_training(exp, out)
        model = load_checkpoint(ckpt)
        splits = load_splits(exp.data, exp.base_dir, exp.model.num_concepts)
        test = _split(splits, exp.evaluate.split)
        metrics = ("accuracy", "faithfulness", "fidelity", "intervention")
        if test.attributes is not None and test.attributes.shape[1] == exp.model.num_concepts:
            metrics += ("explanation_error",)
        omega = exp.model.omega
        by_name = {r.metric: r.value for r in evaluate(model, test, metrics, (omega,), checkpoint=exp.run_id)}
        rows.append({
            "axis": axis,
            "value": value,
            "run_id": exp.run_id,
            "accuracy": f"{by_name['accuracy']:.4f}",
            "faithfulness": f"{by_name['faithfulness']:.4f}",
            "fidelity": f"{by_name['fidelity']:.4f}",
            "intervention_accuracy": f"{by_name['intervention_accuracy']:.4f}",
            "omega": omega,
            "explanation_error": f"{by_name['explanation_error']:.6f}" if "explanation_error" in by_name else "",
            "reconstruction_loss": f"{history[-1]['reconstruction']:.6f}",
            "total_parameters": parameter_counts(model).total,
        })
    table = _layout(out) / "reports" / f"ablation_{axis}.csv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_snapshot(out / "reports" / f"ablation_{axis}.config.yaml", {"base": base, "axis": axis, "values": values})
    return table


def cmd_ablate(args: argparse.Namespace) -> int:
    if len(args.sweep) != 1:
        raise ConfigError("ablate accepts exactly one --sweep axis per invocation")
    axis, values = parse_sweep(args.sweep[0])
    path = Path(args.config)
    try:
        base = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    from .config import apply_overrides

    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"model.seed={args.seed}")
    base = apply_overrides(base, overrides)
    exp = experiment_from_dict(base, path.parent)
    out = Path(args.out) if args.out else exp.out
    table = run_ablation(base, path.parent, axis, values, out)
    print(table.read_text(), end="")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antehoc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE")
    t.set_defaults(func=cmd_train)

    for name, func in (("evaluate", cmd_evaluate), ("explain", cmd_explain)):
        e = sub.add_parser(name, help=f"{name} a trained checkpoint")
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--dataset", help="manifest path, or 'synthetic' (default: the checkpoint's training data)")
        e.add_argument("--split", default="test")
        e.add_argument("--out")
        e.add_argument("--omega", type=float, action="append")
        e.set_defaults(func=func)
        if name == "evaluate":
            e.add_argument("--metrics", help="comma-separated subset of accuracy,faithfulness,fidelity,explanation_error,intervention")
        else:
            e.add_argument("--k", type=int)
            e.add_argument("--max-flips", type=int)
            e.add_argument("--exhaustive", action="store_true")

    a = sub.add_parser("ablate", help="single-axis sweep: num_concepts, backbone or use_decoder")
    a.add_argument("--config", required=True)
    a.add_argument("--sweep", required=True, action="append", metavar="AXIS=V1,V2,...")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (EvaluationError, CheckpointError) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
