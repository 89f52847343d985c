"""Synthetic shapes dataset, PPM/manifest I/O and mini-batching.

Each shapes sample is a triangle or square with a solid fill colour and a
border ring of another (possibly equal) colour on a white background. The
sample's random stream is derived from ``(seed, split, index)`` so every
image is a pure function of the config and its position.

On disk::

    <out>/taxonomy.tax
    <out>/shapes_config.json
    <out>/train.csv, <out>/test.csv      path,label_<level>,...
    <out>/train/000000.ppm ...           binary P6, maxval 255
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .taxonomy import LabelPath, Taxonomy, full_bipartite, load_taxonomy

SHAPES = ("triangle", "square")
PALETTE: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 30, 30),
    "green": (30, 160, 40),
    "blue": (30, 60, 220),
    "yellow": (240, 220, 30),
    "gray": (128, 128, 128),
    "orange": (255, 140, 0),
}
BACKGROUND = (255, 255, 255)
SHAPE_LEVELS = ("shape", "fill", "border")
_SPLIT_CODES = {"train": 0, "test": 1}


class DatasetError(ValueError):
    pass


@dataclass
class ShapesConfig:
    image_size: int = 32
    n_train: int = 2000
    n_test: int = 600
    seed: int = 0
    min_scale: float = 0.4
    max_scale: float = 0.8
    border_px: Optional[int] = None
    stratified: bool = False
    level_order: Tuple[str, ...] = SHAPE_LEVELS
    shapes: Tuple[str, ...] = SHAPES
    fill_colors: Tuple[str, ...] = tuple(PALETTE)
    border_colors: Tuple[str, ...] = tuple(PALETTE)

    def __post_init__(self):
        self.level_order = tuple(self.level_order)
        self.shapes = tuple(self.shapes)
        self.fill_colors = tuple(self.fill_colors)
        self.border_colors = tuple(self.border_colors)
        if sorted(self.level_order) != sorted(SHAPE_LEVELS):
            raise DatasetError(f"level_order must be a permutation of {SHAPE_LEVELS}")
        if not 0 < self.min_scale <= self.max_scale <= 1:
            raise DatasetError(f"degenerate scale bounds [{self.min_scale}, {self.max_scale}]")
        if self.n_train < 1 or self.n_test < 1:
            raise DatasetError("train and test counts must be >= 1")
        if self.image_size < 8:
            raise DatasetError(f"image_size must be >= 8, got {self.image_size}")
        for palette in (self.fill_colors, self.border_colors):
            if len(palette) != 6 or len(set(palette)) != 6 or any(c not in PALETTE for c in palette):
                raise DatasetError(f"palettes need 6 distinct colours from {sorted(PALETTE)}")
        if set(self.shapes) - set(SHAPES) or len(set(self.shapes)) != len(self.shapes):
            raise DatasetError(f"shapes must be distinct members of {SHAPES}")

    @property
    def border_thickness(self) -> int:
        return self.border_px if self.border_px is not None else max(2, self.image_size // 16)

    def taxonomy(self) -> Taxonomy:
        classes = {"shape": self.shapes, "fill": self.fill_colors, "border": self.border_colors}
        return full_bipartite([(name, classes[name]) for name in self.level_order])


PRESETS = {
    "shapes-desk": dict(image_size=32, n_train=2000, n_test=600),
    "shapes-paper": dict(image_size=128, n_train=20000, n_test=6000),
}


def preset(name: str, **overrides) -> ShapesConfig:
    if name not in PRESETS:
        raise DatasetError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ShapesConfig(**{**PRESETS[name], **overrides})


# ----------------------------------------------------------------------------
# rasterization


def _edge_distances(kind: str, x0: float, y0: float, side: float, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Smallest signed distance from each pixel centre to the shape's edges (positive inside)."""
    if kind == "square":
        return np.minimum.reduce([px - x0, x0 + side - px, py - y0, y0 + side - py])
    # upright isosceles triangle with base on the bottom of its bounding box
    verts = [(x0, y0 + side), (x0 + side, y0 + side), (x0 + side / 2, y0)]
    cx = sum(v[0] for v in verts) / 3
    cy = sum(v[1] for v in verts) / 3
    dists = []
    for (ax, ay), (bx, by) in zip(verts, verts[1:] + verts[:1]):
        nx, ny = by - ay, ax - bx
        norm = np.hypot(nx, ny)
        sign = 1.0 if (nx * (cx - ax) + ny * (cy - ay)) > 0 else -1.0
        dists.append(sign * (nx * (px - ax) + ny * (py - ay)) / norm)
    return np.minimum.reduce(dists)


def render_shape(
    size: int,
    kind: str,
    fill: Tuple[int, int, int],
    border: Tuple[int, int, int],
    x0: float,
    y0: float,
    side: float,
    thickness: int,
) -> np.ndarray:
    """HxWx3 uint8 image of one bordered shape on white."""
    py, px = np.mgrid[0:size, 0:size] + 0.5
    d = _edge_distances(kind, x0, y0, side, px, py)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    img[d >= 0] = border
    img[d >= thickness] = fill
    return img


def configurations(config: ShapesConfig) -> List[Tuple[int, int, int]]:
    """Every (shape, fill, border) index triple, shape-major."""
    return list(itertools.product(range(len(config.shapes)), range(6), range(6)))


def draw_sample(config: ShapesConfig, split: str, index: int, render: bool = True):
    """Return ((shape, fill, border) indices, image or None) for one sample."""
    rng = np.random.default_rng([config.seed, _SPLIT_CODES[split], index])
    if config.stratified:
        combos = configurations(config)
        s, f, b = combos[index % len(combos)]
    else:
        s = int(rng.integers(len(config.shapes)))
        f = int(rng.integers(6))
        b = int(rng.integers(6))
    size = config.image_size
    side = rng.uniform(config.min_scale, config.max_scale) * size
    x0 = rng.uniform(0, size - side)
    y0 = rng.uniform(0, size - side)
    if not render:
        return (s, f, b), None
    img = render_shape(
        size,
        config.shapes[s],
        PALETTE[config.fill_colors[f]],
        PALETTE[config.border_colors[b]],
        x0,
        y0,
        side,
        config.border_thickness,
    )
    return (s, f, b), img


def _ordered_names(config: ShapesConfig, triple: Tuple[int, int, int]) -> List[str]:
    s, f, b = triple
    names = {"shape": config.shapes[s], "fill": config.fill_colors[f], "border": config.border_colors[b]}
    return [names[level] for level in config.level_order]


def sample_labels(config: ShapesConfig, split: str) -> List[Tuple[str, ...]]:
    """Label names for every sample of a split without rasterizing."""
    n = config.n_train if split == "train" else config.n_test
    return [tuple(_ordered_names(config, draw_sample(config, split, i, render=False)[0])) for i in range(n)]


# ----------------------------------------------------------------------------
# PPM and manifests


def write_ppm(path: Union[str, Path], img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, np.uint8).tobytes())


def _ppm_tokens(buf: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    """Decode a binary P6 file (maxval < 256) to an HxWx3 uint8 array."""
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _ppm_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: malformed PPM header") from exc
    if magic != b"P6" or not 0 < maxval < 256:
        raise DatasetError(f"{path}: only binary P6 with maxval < 256 is supported")
    need = w * h * 3
    if len(buf) - pos < need:
        raise DatasetError(f"{path}: truncated PPM payload")
    img = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return img


def read_image(path: Union[str, Path]) -> np.ndarray:
    """HxWx3 uint8 image. PPM is decoded natively; other formats need Pillow."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:
        raise DatasetError(f"{path}: non-PPM images need Pillow installed") from exc
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"{path}: cannot decode image ({exc})") from exc


def manifest_header(tax: Taxonomy) -> List[str]:
    return ["path"] + [f"label_{name}" for name in tax.level_names]


def write_manifest(path: Union[str, Path], tax: Taxonomy, rows: Sequence[Tuple[str, Sequence[str]]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(manifest_header(tax))
    for rel, labels in rows:
        writer.writerow([rel, *labels])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(path: Union[str, Path], tax: Taxonomy) -> List[Tuple[Path, Tuple[str, ...]]]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing manifest: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty manifest")
    expected = manifest_header(tax)
    if rows[0] != expected:
        raise DatasetError(f"{path}: header {rows[0]} does not match taxonomy levels {expected}")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(expected):
            raise DatasetError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
        out.append((path.parent / row[0], tuple(row[1:])))
    return out


# ----------------------------------------------------------------------------
# generation


@dataclass
class GeneratedDataset:
    root: Path
    train_manifest: Path
    test_manifest: Path
    taxonomy_path: Path
    taxonomy: Taxonomy
    n_train: int
    n_test: int


def generate_shapes(config: ShapesConfig, out_dir: Union[str, Path]) -> GeneratedDataset:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"output directory {out} is not writable: {exc}") from exc

    tax = config.taxonomy()
    tax_path = out / "taxonomy.tax"
    tax_path.write_text(tax.to_text(), encoding="utf-8")
    cfg = asdict(config)
    cfg["border_thickness"] = config.border_thickness
    (out / "shapes_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    manifests = {}
    for split, n in (("train", config.n_train), ("test", config.n_test)):
        (out / split).mkdir(exist_ok=True)
        rows = []
        width = max(6, len(str(n - 1)))
        for i in range(n):
            triple, img = draw_sample(config, split, i)
            rel = f"{split}/{i:0{width}d}.ppm"
            write_ppm(out / rel, img)
            rows.append((rel, _ordered_names(config, triple)))
        manifests[split] = out / f"{split}.csv"
        write_manifest(manifests[split], tax, rows)
    return GeneratedDataset(out, manifests["train"], manifests["test"], tax_path, tax, config.n_train, config.n_test)


# ----------------------------------------------------------------------------
# loading and batching


@dataclass
class Sample:
    image: np.ndarray  # c x h x w, float32 in [0, 1]
    path: LabelPath
    source: str


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-average an HxWxC image by an integer factor."""
    if factor == 1:
        return img
    h, w, c = img.shape
    if h % factor or w % factor:
        raise DatasetError(f"image {h}x{w} is not divisible by resize factor {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def load_dataset(manifest: Union[str, Path], taxonomy: Taxonomy, image_size: Optional[int] = None) -> List[Sample]:
    """Decode every manifest entry in order; pixels are only scaled to [0, 1].

    ``image_size`` optionally block-averages square images down to that size.
    """
    samples = []
    for img_path, names in read_manifest(manifest, taxonomy):
        try:
            path = taxonomy.encode(names)
        except ValueError as exc:
            raise DatasetError(f"{img_path}: unresolvable label ({exc})") from None
        if not taxonomy.is_valid_path(path):
            raise DatasetError(f"{img_path}: label path {names} violates the taxonomy")
        img = read_image(img_path).astype(np.float32)
        if image_size is not None and img.shape[0] != image_size:
            img = downsample(img, img.shape[0] // image_size)
        samples.append(Sample((img / 255.0).transpose(2, 0, 1).astype(np.float32), path, str(img_path)))
    return samples


@dataclass
class ArrayDataset:
    images: np.ndarray  # n x c x h x w
    labels: np.ndarray  # n x N
    ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "ArrayDataset":
        if not samples:
            raise DatasetError("no samples")
        shapes = {s.image.shape for s in samples}
        if len(shapes) != 1:
            raise DatasetError(f"samples have differing image shapes {sorted(shapes)}")
        return cls(
            np.stack([s.image for s in samples]),
            np.array([s.path for s in samples], dtype=np.int64),
            [s.source for s in samples],
        )


class Batch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray  # b x N; column l holds level l's class indices
    indices: np.ndarray


def batch_iterator(
    data: Union[ArrayDataset, Sequence[Sample]],
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Yield batches in a per-epoch seeded permutation; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not isinstance(data, ArrayDataset):
        data = ArrayDataset.from_samples(data)
    n = len(data)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(data.images[idx], data.labels[idx], idx)
