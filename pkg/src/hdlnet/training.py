"""Adam training loop for the backbone + hierarchical head.

One epoch: shuffle, and for every batch run the backbone, compute the
weighted sum of center loss and per-level cross-entropies, backpropagate
and take an Adam step. After the last step of the epoch the class centers
are moved to their epoch means, the test split is evaluated and one
metrics row is appended (and flushed) to ``metrics.csv``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import serialize
from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .data import ArrayDataset, batch_iterator
from .head import (
    CenterBank,
    HdlHead,
    center_loss,
    default_center_level,
    forward_cascade,
    init_centers,
    per_level_losses,
    predict_from_logits,
    total_loss,
    update_centers,
)
from .taxonomy import Taxonomy, path_accuracy, per_level_accuracy, violation_rate
from .tensor import Tensor

log = logging.getLogger(__name__)

LR_GRID = (0.005, 0.001, 0.01)


class TrainingError(RuntimeError):
    pass


class NonFiniteError(TrainingError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    lambdas: Optional[List[float]] = None
    center_level: Optional[int] = None  # 0-based; default is the level with most classes
    center_mode: str = "epoch"
    center_alpha: float = 0.5
    center_normalize: bool = False
    propagate: str = "logits"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"
    eval_batch_size: int = 200
    record_time: bool = False

    def __post_init__(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2 for batch norm, got {self.batch_size}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``.

    A missing gradient counts as zero.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient for {name} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return state


# ----------------------------------------------------------------------------
# model


class Model:
    """Backbone plus a linear cascade over some of the taxonomy's levels.

    ``levels`` lists the taxonomy levels (0-based) the head predicts: every
    level for the hierarchical model, a single one for the flat baseline.
    """

    def __init__(
        self,
        backbone: Backbone,
        head: HdlHead,
        levels: Sequence[int],
        bank: Optional[CenterBank] = None,
        method: str = "hdl",
    ):
        if len(levels) != head.n_levels:
            raise ValueError("one head level per predicted taxonomy level")
        self.backbone = backbone
        self.head = head
        self.levels = list(levels)
        self.bank = bank
        self.method = method

    def parameters(self) -> Dict[str, Tensor]:
        return {**self.backbone.parameters(), **self.head.parameters()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.parameters().items()}
        out.update(self.backbone.buffers())
        if self.bank is not None:
            out["centers"] = self.bank.centers
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.backbone.buffers()
        expected = set(params) | set(buffers) | ({"centers"} if self.bank is not None else set())
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[k]
        if self.bank is not None:
            self.bank.centers[...] = state["centers"]

    def forward(self, images: np.ndarray, training: bool):
        x = Tensor(np.asarray(images, dtype=self.backbone.dtype))
        features = self.backbone(x, training=training)
        return features, forward_cascade(self.head, features)


def build_model(
    taxonomy: Taxonomy,
    backbone_config: BackboneConfig,
    config: TrainConfig,
    baseline_level: Optional[int] = None,
) -> Model:
    dtype = np.dtype(config.dtype)
    backbone = Backbone(backbone_config, seed=config.seed, dtype=dtype)
    d = backbone.feature_dim
    counts = taxonomy.class_counts
    if baseline_level is not None:
        if not 0 <= baseline_level < taxonomy.n_levels:
            raise ValueError(f"baseline level must be in [1, {taxonomy.n_levels}]")
        head = HdlHead(d, [counts[baseline_level]], lambdas=[0.0, 1.0], seed=config.seed + 1, dtype=dtype)
        return Model(backbone, head, [baseline_level], None, method="flat")

    head = HdlHead(d, counts, lambdas=config.lambdas, propagate=config.propagate, seed=config.seed + 1, dtype=dtype)
    level = default_center_level(counts) if config.center_level is None else config.center_level
    if not 0 <= level < taxonomy.n_levels:
        raise ValueError(f"center level must be in [1, {taxonomy.n_levels}]")
    bank = CenterBank(
        counts[level], d, level=level, mode=config.center_mode, alpha=config.center_alpha,
        normalize=config.center_normalize,
    )
    init_centers(bank, seed=config.seed + 2)
    return Model(backbone, head, list(range(taxonomy.n_levels)), bank, method="hdl")


# ----------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    epoch: int
    loss_total: float
    loss_center: Optional[float]
    loss_levels: List[Optional[float]]
    acc_levels: List[Optional[float]]
    violation_rate: Optional[float]
    path_acc: Optional[float]
    seconds: float

    def row(self) -> List[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.epoch),
            fmt(self.loss_total),
            fmt(self.loss_center),
            *map(fmt, self.loss_levels),
            *map(fmt, self.acc_levels),
            fmt(self.violation_rate),
            fmt(self.path_acc),
            fmt(self.seconds),
        ]


def metrics_header(n_levels: int) -> List[str]:
    return (
        ["epoch", "loss_total", "loss_center"]
        + [f"loss_l{l}" for l in range(1, n_levels + 1)]
        + [f"acc_l{l}" for l in range(1, n_levels + 1)]
        + ["violation_rate", "path_acc", "seconds"]
    )


@dataclass
class EvalResult:
    accuracy: Dict[int, float]  # taxonomy level (0-based) -> accuracy
    violation_rate: Optional[float]
    path_accuracy: Optional[float]
    predictions: np.ndarray

    def to_dict(self, taxonomy: Taxonomy) -> dict:
        return {
            "accuracy": {taxonomy.level_names[l]: a for l, a in sorted(self.accuracy.items())},
            "violation_rate": self.violation_rate,
            "path_accuracy": self.path_accuracy,
        }


def evaluate(model: Model, data: ArrayDataset, taxonomy: Taxonomy, batch_size: int = 200) -> EvalResult:
    """Eval-mode predictions and hierarchy metrics over a whole split."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    preds = []
    for batch in batch_iterator(data, batch_size):
        _, logits = model.forward(batch.images, training=False)
        preds.append(predict_from_logits(logits))
    pred = np.concatenate(preds)
    truth = data.labels[:, model.levels]
    acc = dict(zip(model.levels, per_level_accuracy(pred, truth)))
    vr = pa = None
    if model.levels == list(range(taxonomy.n_levels)):
        vr = violation_rate(taxonomy, pred)
        pa = path_accuracy(pred, truth)
    return EvalResult(acc, vr, pa, pred)


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: List[MetricsRecord]
    model: Model


def _batch_loss(model: Model, batch, training: bool = True):
    features, logits = model.forward(batch.images, training=training)
    labels = [batch.labels[:, l] for l in model.levels]
    if model.bank is not None:
        lc = center_loss(features, batch.labels[:, model.bank.level], model.bank)
    else:
        lc = Tensor(np.zeros((), dtype=features.dtype))
    return total_loss(lc, per_level_losses(logits, labels), model.head.lambdas)


def run_config(model: Model, taxonomy: Taxonomy, config: TrainConfig, extra: Optional[dict] = None) -> dict:
    cfg = {
        "method": model.method,
        "train": config.to_dict(),
        "backbone": model.backbone.config.to_dict(),
        "levels": taxonomy.level_names,
        "class_counts": taxonomy.class_counts,
        "head_levels": [taxonomy.level_names[l] for l in model.levels],
        "lambdas": list(model.head.lambdas),
        "center_level": None if model.bank is None else taxonomy.level_names[model.bank.level],
        "center_init_std": 0.1,
        "batch_norm": {"eps": T.BN_EPS, "momentum": T.BN_MOMENTUM},
    }
    if extra:
        cfg.update(extra)
    return cfg


def train(
    model: Model,
    train_data: ArrayDataset,
    test_data: ArrayDataset,
    taxonomy: Taxonomy,
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    extra_config: Optional[dict] = None,
) -> TrainResult:
    """Train ``model`` in place; writes metrics.csv, run_config.json and params.bin into ``out_dir``."""
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    if train_data.labels.shape[1] != taxonomy.n_levels:
        raise ValueError(
            f"dataset has {train_data.labels.shape[1]} label levels, taxonomy has {taxonomy.n_levels}"
        )
    head_counts = [taxonomy.class_counts[l] for l in model.levels]
    if head_counts != model.head.class_counts:
        raise ValueError(f"head class counts {model.head.class_counts} do not match taxonomy {head_counts}")

    params = model.parameters()
    arrays = {k: t.data for k, t in params.items()}
    state = AdamState()
    n_levels = taxonomy.n_levels

    fh = None
    writer = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg = run_config(model, taxonomy, config, extra_config)
        (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        fh = (out / "metrics.csv").open("w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(n_levels))
        fh.flush()

    history: List[MetricsRecord] = []
    start = time.perf_counter()
    try:
        for epoch in range(1, config.epochs + 1):
            sums = np.zeros(2 + model.head.n_levels)
            n_batches = 0
            for batch in batch_iterator(train_data, config.batch_size, shuffle_seed=config.seed, epoch=epoch):
                if len(batch.indices) < 2:
                    continue  # batch norm cannot train on a single sample
                for t in params.values():
                    t.zero_grad()
                bd = _batch_loss(model, batch)
                if not math.isfinite(bd.total):
                    raise NonFiniteError(
                        f"non-finite loss at epoch {epoch}; batch sample ids: "
                        + ", ".join(train_data.ids[i] if train_data.ids else str(i) for i in batch.indices)
                    )
                T.backward(bd.root)
                adam_step(arrays, {k: t.grad for k, t in params.items()}, state, config.lr,
                          config.beta1, config.beta2, config.eps)
                sums += [bd.total, bd.center, *bd.levels]
                n_batches += 1
            if model.bank is not None:
                update_centers(model.bank)
            ev = evaluate(model, test_data, taxonomy, config.eval_batch_size)

            means = sums / max(n_batches, 1)
            loss_levels: List[Optional[float]] = [None] * n_levels
            acc_levels: List[Optional[float]] = [None] * n_levels
            for j, l in enumerate(model.levels):
                loss_levels[l] = float(means[2 + j])
                acc_levels[l] = ev.accuracy[l]
            rec = MetricsRecord(
                epoch=epoch,
                loss_total=float(means[0]),
                loss_center=float(means[1]) if model.bank is not None else None,
                loss_levels=loss_levels,
                acc_levels=acc_levels,
                violation_rate=ev.violation_rate,
                path_acc=ev.path_accuracy,
                seconds=time.perf_counter() - start if config.record_time else 0.0,
            )
            history.append(rec)
            log.info(
                "epoch %d loss %.4f acc %s",
                epoch,
                rec.loss_total,
                " ".join("-" if a is None else f"{a:.3f}" for a in acc_levels),
            )
            if writer is not None:
                writer.writerow(rec.row())
                fh.flush()
    finally:
        if fh is not None:
            fh.close()

    if out_dir is not None:
        serialize.save(Path(out_dir) / "params.bin", model.state_dict())
    return TrainResult(history, model)


def train_flat_baseline(
    taxonomy: Taxonomy,
    backbone_config: BackboneConfig,
    train_data: ArrayDataset,
    test_data: ArrayDataset,
    config: TrainConfig,
    target_level: int,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Same backbone, one linear classifier for ``target_level`` (0-based), cross-entropy only."""
    model = build_model(taxonomy, backbone_config, config, baseline_level=target_level)
    return train(model, train_data, test_data, taxonomy, config, out_dir,
                 extra_config={"target_level": taxonomy.level_names[target_level]})
