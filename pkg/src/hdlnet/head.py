"""Cascade of per-level linear classifiers with cross-entropy and center loss.

Level 1 maps the pooled backbone features to ``n_1`` logits; every later
level maps the previous level's output to its own ``n_l`` logits. The total
training objective is ``lambda_0 * center + sum_l lambda_l * ce_l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PROPAGATE_MODES = ("logits", "softmax")
CENTER_MODES = ("epoch", "alpha")


def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class HdlHead:
    """Chained linear layers, one per hierarchy level.

    ``propagate`` selects what flows from level l-1 into level l: the raw
    logits (default) or their softmax.
    """

    def __init__(
        self,
        feature_dim: int,
        class_counts: Sequence[int],
        lambdas: Optional[Sequence[float]] = None,
        propagate: str = "logits",
        seed: int = 0,
        dtype=np.float32,
    ):
        if feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
        if not class_counts:
            raise ValueError("need at least one level")
        if any(n < 2 for n in class_counts):
            raise ValueError(f"every level needs >= 2 classes, got {list(class_counts)}")
        if propagate not in PROPAGATE_MODES:
            raise ValueError(f"propagate must be one of {PROPAGATE_MODES}")
        self.feature_dim = feature_dim
        self.class_counts = list(class_counts)
        self.propagate = propagate
        self.lambdas = check_lambdas(lambdas, len(class_counts))

        rng = np.random.default_rng(seed)
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        fan_in = feature_dim
        for n in self.class_counts:
            self.weights.append(Tensor(he_uniform(rng, (n, fan_in), fan_in, dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(n, dtype=dtype), requires_grad=True))
            fan_in = n

    @property
    def n_levels(self) -> int:
        return len(self.class_counts)

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases), 1):
            out[f"head.l{l}.weight"] = w
            out[f"head.l{l}.bias"] = b
        return out

    def forward(self, features: Tensor) -> List[Tensor]:
        return forward_cascade(self, features)

    __call__ = forward


def check_lambdas(lambdas: Optional[Sequence[float]], n_levels: int) -> Tuple[float, ...]:
    if lambdas is None:
        return (1.0,) * (n_levels + 1)
    lam = tuple(float(x) for x in lambdas)
    if len(lam) != n_levels + 1:
        raise ValueError(f"need {n_levels + 1} loss weights (center + one per level), got {len(lam)}")
    if any(not math.isfinite(x) or x < 0 for x in lam):
        raise ValueError(f"loss weights must be finite and nonnegative, got {lam}")
    return lam


def forward_cascade(head: HdlHead, features: Tensor) -> List[Tensor]:
    """Per-level logits; each level consumes the previous level's output."""
    if features.ndim != 2 or features.shape[1] != head.feature_dim:
        raise ShapeError(f"features {features.shape} do not match head input dim {head.feature_dim}")
    logits = []
    x = features
    for w, b in zip(head.weights, head.biases):
        z = T.linear(x, w, b)
        logits.append(z)
        x = T.softmax(z) if head.propagate == "softmax" else z
    return logits


def predict(head: HdlHead, features: Tensor) -> np.ndarray:
    """Argmax class per level, shape (m, N); ties go to the lowest index."""
    return predict_from_logits(forward_cascade(head, features))


def predict_from_logits(logits: Sequence[Tensor]) -> np.ndarray:
    return np.stack([z.data.argmax(axis=1) for z in logits], axis=1)


# ----------------------------------------------------------------------------
# center bank


class CenterBank:
    """Per-class feature centers for one hierarchy level.

    ``mode="epoch"`` accumulates the features seen during an epoch and
    replaces each center by its class mean at the epoch boundary.
    ``mode="alpha"`` instead applies the damped per-batch rule
    ``c_j -= alpha * sum_{y_i=j}(c_j - x_i) / (1 + n_j)`` on every batch.
    """

    def __init__(
        self,
        n_classes: int,
        feature_dim: int,
        level: int = 0,
        mode: str = "epoch",
        alpha: float = 0.5,
        normalize: bool = False,
    ):
        if feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
        if n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {n_classes}")
        if mode not in CENTER_MODES:
            raise ValueError(f"mode must be one of {CENTER_MODES}")
        self.level = level
        self.mode = mode
        self.alpha = alpha
        self.normalize = normalize
        self.centers = np.zeros((n_classes, feature_dim))
        self.sums = np.zeros((n_classes, feature_dim))
        self.counts = np.zeros(n_classes, dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centers.shape[1]

    def observe(self, features: np.ndarray, labels: np.ndarray) -> None:
        x = np.asarray(features, dtype=np.float64)
        if self.mode == "epoch":
            np.add.at(self.sums, labels, x)
            np.add.at(self.counts, labels, 1)
            return
        diff = np.zeros_like(self.centers)
        np.add.at(diff, labels, self.centers[labels] - x)
        n = np.bincount(labels, minlength=self.n_classes)
        self.centers -= self.alpha * diff / (1 + n)[:, None]

    def reset_accumulators(self) -> None:
        self.sums[:] = 0
        self.counts[:] = 0


def init_centers(bank: CenterBank, seed: int, std: float = 0.1) -> CenterBank:
    """Draw centers from N(0, std^2) (variance 0.01 by default)."""
    rng = np.random.default_rng(seed)
    bank.centers = rng.normal(0.0, std, size=bank.centers.shape)
    return bank


def update_centers(bank: CenterBank) -> CenterBank:
    """Epoch-boundary update: seen classes move to their mean, unseen keep theirs."""
    if bank.mode == "epoch":
        seen = bank.counts > 0
        bank.centers[seen] = bank.sums[seen] / bank.counts[seen][:, None]
    bank.reset_accumulators()
    return bank


def center_loss(features: Tensor, labels, bank: CenterBank, accumulate: bool = True) -> Tensor:
    """Sum over the batch of squared distances to the label's center.

    Centers are constants in the graph. With ``bank.normalize`` the sum is
    divided by the batch size.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] != bank.feature_dim:
        raise ShapeError(f"features {features.shape} do not match center dim {bank.feature_dim}")
    if labels.shape != (features.shape[0],):
        raise ShapeError(f"{labels.size} labels for {features.shape[0]} features")
    if labels.size and (labels.min() < 0 or labels.max() >= bank.n_classes):
        raise ValueError(f"center_loss: label outside [0, {bank.n_classes})")
    target = Tensor(bank.centers[labels].astype(features.dtype))
    loss = T.sum_all(T.square(T.sub(features, target)))
    if bank.normalize and labels.size:
        loss = T.scale(loss, 1.0 / labels.size)
    if accumulate:
        bank.observe(features.data, labels)
    return loss


# ----------------------------------------------------------------------------
# losses


def per_level_losses(logits: Sequence[Tensor], labels: Sequence) -> List[Tensor]:
    if len(logits) != len(labels):
        raise ValueError(f"{len(logits)} levels of logits but {len(labels)} label sets")
    return [T.softmax_cross_entropy(z, y) for z, y in zip(logits, labels)]


@dataclass
class LossBreakdown:
    center: float
    levels: List[float]
    total: float
    lambdas: Tuple[float, ...]
    root: Optional[Tensor] = field(default=None, repr=False)


Scalar = Union[Tensor, float]


def _value(x: Scalar) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(center: Scalar, levels: Sequence[Scalar], lambdas: Sequence[float]) -> LossBreakdown:
    """Weighted sum, accumulated center first then levels in ascending order.

    ``total`` is recomputed in float64 from the component values; ``root`` is
    the graph node to call ``backward`` on when the components are tensors.
    """
    lam = check_lambdas(lambdas, len(levels))
    total = lam[0] * _value(center)
    for w, x in zip(lam[1:], levels):
        total += w * _value(x)

    root = None
    if isinstance(center, Tensor) and all(isinstance(x, Tensor) for x in levels):
        root = T.scale(center, lam[0])
        for w, x in zip(lam[1:], levels):
            root = T.add(root, T.scale(x, w))
    return LossBreakdown(_value(center), [_value(x) for x in levels], total, lam, root)


def default_center_level(class_counts: Sequence[int]) -> int:
    """0-based index of the level with the most classes (first one on ties)."""
    return int(np.argmax(class_counts))
