"""Read metrics CSVs back and reshape them into plot and comparison tables."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .training import metrics_header

PathLike = Union[str, Path]


class ReportError(ValueError):
    pass


@dataclass
class Metrics:
    n_levels: int
    columns: List[str]
    rows: List[Dict[str, Optional[float]]]

    def column(self, name: str) -> List[Optional[float]]:
        return [r[name] for r in self.rows]


def read_metrics(path: PathLike) -> Metrics:
    """Parse and validate a metrics CSV; blank cells become ``None``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            table = list(csv.reader(fh))
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
    if not table:
        raise ReportError(f"{path}: empty file")
    header = table[0]
    levels = [c for c in header if re.fullmatch(r"loss_l\d+", c)]
    if not levels or header != metrics_header(len(levels)):
        raise ReportError(f"{path}: unexpected header {header}")
    rows = []
    for lineno, raw in enumerate(table[1:], start=2):
        if len(raw) != len(header):
            raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(raw)}")
        row: Dict[str, Optional[float]] = {}
        for name, cell in zip(header, raw):
            if cell == "":
                row[name] = None
                continue
            try:
                row[name] = float(cell)
            except ValueError:
                raise ReportError(f"{path}:{lineno}: {name} is not a number: {cell!r}") from None
            if not math.isfinite(row[name]):
                raise ReportError(f"{path}:{lineno}: {name} is not finite")
        if row["epoch"] is None or row["epoch"] != int(row["epoch"]):
            raise ReportError(f"{path}:{lineno}: bad epoch")
        rows.append(row)
    if not rows:
        raise ReportError(f"{path}: no epochs recorded")
    epochs = [r["epoch"] for r in rows]
    if epochs != list(range(1, len(rows) + 1)):
        raise ReportError(f"{path}: epochs must run 1..{len(rows)}, got {epochs}")
    return Metrics(len(levels), header, rows)


def read_run_config(run_dir: PathLike) -> dict:
    path = Path(run_dir) / "run_config.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# per-level loss curves


def loss_curves(metrics: Metrics, level_names: Optional[Sequence[str]] = None) -> List[List[str]]:
    """Table with ``epoch`` and one loss column per level that was trained."""
    names = list(level_names) if level_names else [f"l{l}" for l in range(1, metrics.n_levels + 1)]
    if len(names) != metrics.n_levels:
        raise ReportError(f"{len(names)} level names for {metrics.n_levels} levels")
    keep = [l for l in range(1, metrics.n_levels + 1) if any(r[f"loss_l{l}"] is not None for r in metrics.rows)]
    table = [["epoch"] + [names[l - 1] for l in keep]]
    for r in metrics.rows:
        table.append([str(int(r["epoch"]))] + [repr(r[f"loss_l{l}"]) for l in keep])
    return table


def descent_scores(metrics: Metrics, class_counts: Sequence[int]) -> Dict[int, float]:
    """Mean over epochs of each level's loss divided by its chance loss ln(n).

    Lower means the level's loss fell further and sooner. Keys are 1-based
    levels.
    """
    out = {}
    for l, n in enumerate(class_counts, start=1):
        col = metrics.column(f"loss_l{l}")
        if any(v is None for v in col):
            continue
        out[l] = sum(col) / len(col) / math.log(n)
    return out


def write_table(table: Sequence[Sequence[str]], path: Optional[PathLike] = None) -> str:
    buf = "".join(",".join(row) + "\n" for row in table)
    if path is not None:
        Path(path).write_text(buf, encoding="utf-8")
    return buf


# ----------------------------------------------------------------------------
# method comparison


REPORT_HEADER = ["method", "level", "lr", "final_acc", "best_acc", "best_epoch", "run"]


def comparison_rows(run_dirs: Sequence[PathLike]) -> List[List[str]]:
    """One row per (method, level, lr) across the given run directories."""
    rows = []
    for run in run_dirs:
        cfg = read_run_config(run)
        metrics = read_metrics(Path(run) / "metrics.csv")
        levels = cfg["levels"]
        for l, name in enumerate(levels, start=1):
            acc = metrics.column(f"acc_l{l}")
            if all(a is None for a in acc):
                continue
            best = max(range(len(acc)), key=lambda i: (acc[i], -i))
            rows.append(
                (l, [
                    cfg["method"],
                    name,
                    repr(float(cfg["train"]["lr"])),
                    f"{acc[-1]:.4f}",
                    f"{acc[best]:.4f}",
                    str(best + 1),
                    str(run),
                ])
            )
    rows.sort(key=lambda r: (r[0], r[1][0], float(r[1][2]), r[1][6]))
    return [REPORT_HEADER] + [r for _, r in rows]
