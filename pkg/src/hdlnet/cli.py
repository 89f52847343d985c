"""Command-line entry point.

Subcommands: generate, train, eval, gradcheck, plotdata, compare.
Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from . import gradsuite, reporting, serialize
from .backbone import DESK_CONFIG, BackboneConfig, ConfigError
from .data import PRESETS, ArrayDataset, DatasetError, generate_shapes, load_dataset, preset
from .serialize import ContainerError
from .taxonomy import Taxonomy, TaxonomyError, load_taxonomy
from .tensor import ShapeError
from .training import LR_GRID, TrainConfig, build_model, evaluate, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("hdlnet")


class UsageError(Exception):
    pass


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _name_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# ----------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    overrides = {"seed": args.seed, "stratified": args.stratified}
    for key in ("n_train", "n_test", "image_size"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.level_order:
        overrides["level_order"] = tuple(args.level_order)
    cfg = preset(args.preset, **overrides)
    gen = generate_shapes(cfg, args.out)
    print(f"generated {gen.n_train} train / {gen.n_test} test images ({cfg.image_size}x{cfg.image_size}) in {gen.root}")
    print(f"  manifests: {gen.train_manifest.name}, {gen.test_manifest.name}")
    print(f"  taxonomy:  {gen.taxonomy_path.name} levels {gen.taxonomy.level_names} "
          f"classes {gen.taxonomy.class_counts} valid paths {len(gen.taxonomy.valid_paths())}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# train / eval


def _data_paths(data: Path, taxonomy: Optional[str]):
    paths = {
        "taxonomy": Path(taxonomy) if taxonomy else data / "taxonomy.tax",
        "train": data / "train.csv",
        "test": data / "test.csv",
    }
    for role, p in paths.items():
        if not p.is_file():
            raise UsageError(f"{role} file not found: {p}")
    return paths


def _load_split(manifest: Path, tax: Taxonomy, image_size: Optional[int]) -> ArrayDataset:
    return ArrayDataset.from_samples(load_dataset(manifest, tax, image_size=image_size))


def cmd_train(args) -> int:
    if not args.lr > 0:
        raise UsageError(f"--lr must be > 0, got {args.lr}")
    paths = _data_paths(Path(args.data), args.taxonomy)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    tax = load_taxonomy(paths["taxonomy"])
    if args.baseline_level is not None and not 1 <= args.baseline_level <= tax.n_levels:
        raise UsageError(f"--baseline-level must be in [1, {tax.n_levels}]")
    if args.center_level is not None and not 1 <= args.center_level <= tax.n_levels:
        raise UsageError(f"--center-level must be in [1, {tax.n_levels}]")
    config = TrainConfig(
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        lambdas=args.lambdas,
        center_level=None if args.center_level is None else args.center_level - 1,
        center_mode=args.center_mode,
        center_normalize=args.center_normalize,
        propagate=args.propagate,
        dtype=args.dtype,
        record_time=args.record_time,
    )
    if args.lambdas is not None and len(args.lambdas) != tax.n_levels + 1:
        raise UsageError(f"--lambdas needs {tax.n_levels + 1} values (center, then one per level)")

    train_data = _load_split(paths["train"], tax, args.image_size)
    test_data = _load_split(paths["test"], tax, args.image_size)
    backbone = BackboneConfig(
        input_shape=train_data.images.shape[1:],
        widths=tuple(args.widths),
        blocks_per_stage=args.blocks,
        residual=args.residual,
    )
    baseline = None if args.baseline_level is None else args.baseline_level - 1
    model = build_model(tax, backbone, config, baseline_level=baseline)
    extra = {
        "data": str(Path(args.data).resolve()),
        "taxonomy": tax.to_text(),
        "image_size": int(train_data.images.shape[-1]),
    }
    if baseline is not None:
        extra["target_level"] = tax.level_names[baseline]
    log.info("training %s model: %d train / %d test, levels %s", model.method, len(train_data),
             len(test_data), tax.level_names)
    result = train(model, train_data, test_data, tax, config, out_dir=out, extra_config=extra)
    last = result.history[-1]
    accs = ", ".join(
        f"{name} {acc:.4f}" for name, acc in zip(tax.level_names, last.acc_levels) if acc is not None
    )
    print(f"epoch {last.epoch}: test accuracy {accs}")
    print(f"wrote {out / 'metrics.csv'}, {out / 'params.bin'}, {out / 'run_config.json'}")
    return EXIT_OK


def _model_from_run(run: Path, tax: Taxonomy):
    cfg = reporting.read_run_config(run)
    stored = cfg.get("taxonomy")
    if stored is not None and stored != tax.to_text():
        raise UsageError(f"taxonomy of {run} does not match the evaluation data")
    if cfg["levels"] != tax.level_names or cfg["class_counts"] != tax.class_counts:
        raise UsageError(
            f"run was trained on levels {cfg['levels']} {cfg['class_counts']}, "
            f"data has {tax.level_names} {tax.class_counts}"
        )
    config = TrainConfig(**cfg["train"])
    backbone = BackboneConfig.from_dict(cfg["backbone"])
    baseline = None
    if cfg["method"] == "flat":
        baseline = cfg["levels"].index(cfg["head_levels"][0])
    model = build_model(tax, backbone, config, baseline_level=baseline)
    model.load_state_dict(serialize.load(run / "params.bin"))
    return model, cfg


def cmd_eval(args) -> int:
    run = Path(args.run)
    data = Path(args.data)
    tax_path = Path(args.taxonomy) if args.taxonomy else data / "taxonomy.tax"
    manifest = data / f"{args.split}.csv"
    for p in (run / "run_config.json", run / "params.bin", tax_path, manifest):
        if not p.is_file():
            raise UsageError(f"file not found: {p}")
    tax = load_taxonomy(tax_path)
    model, cfg = _model_from_run(run, tax)
    split = _load_split(manifest, tax, cfg.get("image_size"))
    result = evaluate(model, split, tax)
    report = {"run": str(run), "split": args.split, "n": len(split), "method": cfg["method"],
              **result.to_dict(tax)}
    if args.json is not None:
        text = json.dumps(report, indent=2) + "\n"
        if args.json == "-":
            sys.stdout.write(text)
        else:
            Path(args.json).write_text(text, encoding="utf-8")
    if args.json != "-":
        print(f"{args.split} split, {len(split)} samples, method {cfg['method']}")
        for name, acc in report["accuracy"].items():
            print(f"  accuracy {name:<12} {acc:.4f}")
        if result.violation_rate is not None:
            print(f"  violation rate     {result.violation_rate:.4f}")
            print(f"  path accuracy      {result.path_accuracy:.4f}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# checks and reports


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = gradsuite.run_op_suite(seeds=args.seeds)
    if args.full_model:
        results.append(gradsuite.run_full_model(seeds=args.seeds))
    for r in results:
        print(gradsuite.format_result(r))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - start:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def cmd_plotdata(args) -> int:
    path = Path(args.metrics)
    if path.is_dir():
        path = path / "metrics.csv"
    metrics = reporting.read_metrics(path)
    names = counts = None
    cfg_path = path.parent / "run_config.json"
    if cfg_path.is_file():
        cfg = reporting.read_run_config(path.parent)
        if len(cfg.get("levels", [])) == metrics.n_levels:
            names, counts = cfg["levels"], cfg["class_counts"]
    table = reporting.loss_curves(metrics, names)
    text = reporting.write_table(table, args.out)
    if args.out is None:
        sys.stdout.write(text)
    if counts is not None:
        scores = reporting.descent_scores(metrics, counts)
        if scores:
            parts = ", ".join(f"{names[l - 1]} {s:.3f}" for l, s in scores.items())
            fastest = min(scores, key=scores.get)
            print(f"mean loss / ln(classes): {parts}; fastest descent: {names[fastest - 1]}", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    table = reporting.comparison_rows(args.runs)
    text = reporting.write_table(table, args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        print(f"wrote {len(table) - 1} rows to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdlnet", description="Hierarchical deep loss classifier on numpy.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render the synthetic shapes dataset")
    g.add_argument("--preset", choices=sorted(PRESETS), default="shapes-desk")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--level-order", type=_name_list, help="comma-separated order of shape,fill,border")
    g.add_argument("--stratified", action="store_true", help="cycle through the 72 configurations")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--image-size", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the hierarchical model or a flat baseline")
    t.add_argument("--data", required=True, help="directory with train.csv, test.csv, taxonomy.tax")
    t.add_argument("--taxonomy", help="taxonomy file (default: <data>/taxonomy.tax)")
    t.add_argument("--out", required=True, help="run directory for metrics.csv, params.bin, run_config.json")
    t.add_argument("--lr", type=float, default=LR_GRID[0], help=f"learning rate (grid: {', '.join(map(str, LR_GRID))})")
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lambdas", type=_float_list, help="center weight then one weight per level")
    t.add_argument("--center-level", type=int, help="1-based level for the center loss (default: most classes)")
    t.add_argument("--center-mode", choices=["epoch", "alpha"], default="epoch")
    t.add_argument("--center-normalize", action="store_true", help="divide the center loss by the batch size")
    t.add_argument("--propagate", choices=["logits", "softmax"], default="logits")
    t.add_argument("--baseline-level", type=int, help="train a flat classifier for this 1-based level instead")
    t.add_argument("--widths", type=_int_list, default=list(DESK_CONFIG["widths"]), help="stage widths")
    t.add_argument("--blocks", type=int, default=1, help="blocks per stage")
    t.add_argument("--residual", action="store_true", help="residual blocks instead of plain conv blocks")
    t.add_argument("--image-size", type=int, help="downsample images to this size on load")
    t.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    t.add_argument("--record-time", action="store_true", help="log wall-clock seconds (breaks byte-identical CSVs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--data", required=True)
    e.add_argument("--taxonomy")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--json", nargs="?", const="-", help="write a JSON report (to stdout when no path is given)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--full-model", action="store_true", help="also check the composite backbone + head model")
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("plotdata", help="per-level loss curves from a metrics CSV")
    d.add_argument("metrics", help="metrics.csv or a run directory")
    d.add_argument("--out", help="output CSV (default: stdout)")
    d.set_defaults(func=cmd_plotdata)

    r = sub.add_parser("compare", help="tabulate accuracies of several runs, one row per (method, level, lr)")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--out", help="output CSV (default: stdout)")
    r.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, TaxonomyError, ContainerError,
            reporting.ReportError, ShapeError, ValueError, OSError) as exc:
        print(f"hdlnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
