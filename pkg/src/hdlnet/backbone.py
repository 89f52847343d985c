"""Configurable ResNet-style feature extractor.

stem conv (k x k, stride s) -> batch norm -> relu -> 3x3/2 max pool
-> stages of plain or residual 3x3 blocks -> global average pool.
Stage ``i > 0`` halves the spatial size in its first block.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import tensor as T
from .head import he_uniform
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    input_shape: Tuple[int, int, int] = (3, 64, 64)
    stem_kernel: int = 7
    stem_stride: int = 2
    widths: Tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 1
    residual: bool = False
    pool_window: int = 3
    pool_stride: int = 2

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.widths = tuple(int(v) for v in self.widths)
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (c, h, w), got {self.input_shape}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"stage widths must be >= 1, got {self.widths}")
        if self.blocks_per_stage < 1 or self.stem_kernel < 1 or self.stem_stride < 1:
            raise ConfigError("kernel, stride and blocks_per_stage must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def spatial_sizes(self) -> List[Tuple[int, int]]:
        """Spatial size after the stem, the pool and every stage."""
        _, h, w = self.input_shape
        pad = self.stem_kernel // 2
        sizes = []
        h = T.conv_output_size(h, self.stem_kernel, self.stem_stride, pad)
        w = T.conv_output_size(w, self.stem_kernel, self.stem_stride, pad)
        sizes.append((h, w))
        h = (h - self.pool_window) // self.pool_stride + 1 if h >= self.pool_window else 0
        w = (w - self.pool_window) // self.pool_stride + 1 if w >= self.pool_window else 0
        sizes.append((h, w))
        for i in range(1, len(self.widths)):
            h = T.conv_output_size(h, 3, 2, 1)
            w = T.conv_output_size(w, 3, 2, 1)
            sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


DESK_CONFIG = dict(input_shape=(3, 32, 32), widths=(16, 32), blocks_per_stage=1)


class Conv2d:
    def __init__(self, rng, c_in, c_out, k, stride=1, padding=0, dtype=np.float32):
        fan_in = c_in * k * k
        self.weight = Tensor(he_uniform(rng, (c_out, c_in, k, k), fan_in, dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight}

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, c, dtype=np.float32):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def buffers(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class PlainBlock:
    def __init__(self, rng, c_in, c_out, stride, dtype):
        self.conv = Conv2d(rng, c_in, c_out, 3, stride, 1, dtype)
        self.bn = BatchNorm2d(c_out, dtype)

    def named(self, prefix):
        return [(f"{prefix}.conv", self.conv), (f"{prefix}.bn", self.bn)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.relu(self.bn(self.conv(x), training))


class ResidualBlock:
    """Two 3x3 convs plus a shortcut (1x1 projection when the shape changes)."""

    def __init__(self, rng, c_in, c_out, stride, dtype):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride, 1, dtype)
        self.bn1 = BatchNorm2d(c_out, dtype)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, 1, dtype)
        self.bn2 = BatchNorm2d(c_out, dtype)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(rng, c_in, c_out, 1, stride, 0, dtype)
            self.proj_bn = BatchNorm2d(c_out, dtype)

    def named(self, prefix):
        out = [
            (f"{prefix}.conv1", self.conv1),
            (f"{prefix}.bn1", self.bn1),
            (f"{prefix}.conv2", self.conv2),
            (f"{prefix}.bn2", self.bn2),
        ]
        if self.proj is not None:
            out += [(f"{prefix}.proj", self.proj), (f"{prefix}.proj_bn", self.proj_bn)]
        return out

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return T.relu(T.add(h, skip))


class Backbone:
    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32):
        sizes = config.spatial_sizes()
        for stage, (h, w) in enumerate(sizes):
            if h < 1 or w < 1:
                raise ShapeError(
                    f"spatial collapse: feature map is {h}x{w} at step {stage} for input {config.input_shape}"
                )
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c_in = config.input_shape[0]
        self.stem = Conv2d(rng, c_in, config.widths[0], config.stem_kernel, config.stem_stride,
                           config.stem_kernel // 2, dtype)
        self.stem_bn = BatchNorm2d(config.widths[0], dtype)
        block = ResidualBlock if config.residual else PlainBlock
        self.blocks = []
        c = config.widths[0]
        for s, width in enumerate(config.widths):
            for b in range(config.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                self.blocks.append(block(rng, c, width, stride, dtype))
                c = width

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _modules(self):
        mods = [("backbone.stem", self.stem), ("backbone.stem_bn", self.stem_bn)]
        for i, blk in enumerate(self.blocks):
            mods += blk.named(f"backbone.block{i}")
        return mods

    def parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, mod in self._modules():
            out.update(mod.parameters(name))
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, mod in self._modules():
            if isinstance(mod, BatchNorm2d):
                out.update(mod.buffers(name))
        return out

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.input_shape:
            raise ShapeError(f"batch {x.shape} does not match backbone input {self.config.input_shape}")
        h = T.relu(self.stem_bn(self.stem(x), training))
        h = T.max_pool2d(h, self.config.pool_window, self.config.pool_stride)
        for blk in self.blocks:
            h = blk(h, training)
        return T.global_avg_pool(h)

    __call__ = forward
