import collections
import filecmp
import os

import numpy as np
import pytest

from hdlnet.data import (
    ArrayDataset,
    DatasetError,
    ShapesConfig,
    batch_iterator,
    generate_shapes,
    load_dataset,
    preset,
    read_ppm,
    sample_labels,
    write_ppm,
)
from hdlnet.taxonomy import load_taxonomy, violation_rate


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    cfg = ShapesConfig(image_size=16, n_train=72, n_test=20, seed=3, stratified=True)
    return cfg, generate_shapes(cfg, tmp_path_factory.mktemp("shapes"))


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    files = [f for f in os.listdir(a) if os.path.isfile(os.path.join(a, f))]
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def test_full_scale_preset_counts_and_coverage():
    cfg = preset("shapes-paper")
    assert (cfg.n_train, cfg.n_test, cfg.image_size) == (20000, 6000, 128)
    train = sample_labels(cfg, "train")
    assert len(train) == 20000 and len(sample_labels(cfg, "test")) == 6000
    assert len(set(train)) == 72


def test_desk_preset():
    cfg = preset("shapes-desk")
    assert (cfg.n_train, cfg.n_test, cfg.image_size) == (2000, 600, 32)
    assert cfg.border_thickness == 2
    assert preset("shapes-paper").border_thickness == 8


def test_stratified_one_per_configuration(small):
    cfg, gen = small
    samples = load_dataset(gen.train_manifest, gen.taxonomy)
    paths = [s.path for s in samples]
    assert len(set(paths)) == 72 == len(paths)


def test_stratified_marginals_uniform(tmp_path):
    cfg = ShapesConfig(image_size=8, n_train=144, n_test=1, stratified=True)
    labels = sample_labels(cfg, "train")
    for level in range(3):
        counts = collections.Counter(lab[level] for lab in labels)
        assert len(set(counts.values())) == 1


def test_generation_deterministic(tmp_path):
    cfg = ShapesConfig(image_size=16, n_train=30, n_test=10, seed=9)
    generate_shapes(cfg, tmp_path / "a")
    generate_shapes(cfg, tmp_path / "b")
    assert _tree_equal(tmp_path / "a", tmp_path / "b")
    generate_shapes(ShapesConfig(image_size=16, n_train=30, n_test=10, seed=10), tmp_path / "c")
    assert not filecmp.cmp(tmp_path / "a" / "train.csv", tmp_path / "c" / "train.csv", shallow=False)


def test_ground_truth_never_violates(small):
    cfg, gen = small
    tax = load_taxonomy(gen.taxonomy_path)
    for manifest in (gen.train_manifest, gen.test_manifest):
        assert violation_rate(tax, [s.path for s in load_dataset(manifest, tax)]) == 0.0


def test_round_trip_labels(small):
    cfg, gen = small
    expected = sample_labels(cfg, "train")
    loaded = load_dataset(gen.train_manifest, gen.taxonomy)
    assert [gen.taxonomy.decode(s.path) for s in loaded] == expected


def test_loaded_images_scaled(small):
    cfg, gen = small
    s = load_dataset(gen.test_manifest, gen.taxonomy)[0]
    assert s.image.shape == (3, 16, 16) and s.image.dtype == np.float32
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert tuple(s.image[:, 0, 0]) == (1.0, 1.0, 1.0)  # corner is background


def test_missing_file_named(small, tmp_path):
    cfg, gen = small
    text = gen.train_manifest.read_text().splitlines()
    text[1] = "train/nope.ppm," + text[1].split(",", 1)[1]
    bad = gen.root / "bad.csv"
    bad.write_text("\n".join(text) + "\n")
    with pytest.raises(DatasetError, match="nope.ppm"):
        load_dataset(bad, gen.taxonomy)


def test_unresolvable_label(small):
    cfg, gen = small
    text = gen.train_manifest.read_text().splitlines()
    parts = text[1].split(",")
    parts[2] = "purple"
    text[1] = ",".join(parts)
    bad = gen.root / "bad_label.csv"
    bad.write_text("\n".join(text) + "\n")
    with pytest.raises(DatasetError, match="unresolvable"):
        load_dataset(bad, gen.taxonomy)


def test_malformed_image(tmp_path, small):
    cfg, gen = small
    (tmp_path / "x.ppm").write_bytes(b"P3\n2 2\n255\n0 0 0")
    with pytest.raises(DatasetError):
        read_ppm(tmp_path / "x.ppm")
    (tmp_path / "y.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x00")
    with pytest.raises(DatasetError, match="truncated"):
        read_ppm(tmp_path / "y.ppm")


def test_header_mismatch(small, tmp_path):
    cfg, gen = small
    other = ShapesConfig(level_order=("fill", "border", "shape")).taxonomy()
    with pytest.raises(DatasetError, match="header"):
        load_dataset(gen.train_manifest, other)


def test_ppm_round_trip_with_comment(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    raw = (tmp_path / "a.ppm").read_bytes().replace(b"P6\n", b"P6\n# hi\n", 1)
    (tmp_path / "b.ppm").write_bytes(raw)
    assert np.array_equal(read_ppm(tmp_path / "b.ppm"), img)


def test_level_order_option(tmp_path):
    cfg = ShapesConfig(image_size=16, n_train=10, n_test=2, level_order=("fill", "border", "shape"))
    gen = generate_shapes(cfg, tmp_path)
    assert gen.taxonomy.level_names == ["fill", "border", "shape"]
    assert gen.train_manifest.read_text().splitlines()[0] == "path,label_fill,label_border,label_shape"
    assert len(gen.taxonomy.valid_paths()) == 72


def test_downsample_on_load(tmp_path):
    cfg = ShapesConfig(image_size=32, n_train=2, n_test=1)
    gen = generate_shapes(cfg, tmp_path)
    assert load_dataset(gen.train_manifest, gen.taxonomy, image_size=16)[0].image.shape == (3, 16, 16)


@pytest.mark.parametrize(
    "kwargs",
    [dict(min_scale=0.9, max_scale=0.5), dict(min_scale=0.0), dict(n_train=0), dict(fill_colors=("red",) * 6)],
)
def test_bad_configs(kwargs):
    with pytest.raises(DatasetError):
        ShapesConfig(**kwargs)


def test_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError, match="not writable"):
        generate_shapes(ShapesConfig(n_train=1, n_test=1), blocker / "sub")


# -- batching --


def _toy(n):
    return ArrayDataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n).reshape(n, 1))


def test_batch_sizes():
    assert [len(b.indices) for b in batch_iterator(_toy(10), 4, shuffle_seed=1)] == [4, 4, 2]


def test_batch_same_seed_same_batches():
    a = [b.indices.tolist() for b in batch_iterator(_toy(23), 5, shuffle_seed=7, epoch=2)]
    b = [b.indices.tolist() for b in batch_iterator(_toy(23), 5, shuffle_seed=7, epoch=2)]
    c = [b.indices.tolist() for b in batch_iterator(_toy(23), 5, shuffle_seed=7, epoch=3)]
    assert a == b and a != c


@pytest.mark.parametrize("seed", range(5))
def test_batches_cover_each_sample_once(seed):
    data = _toy(37)
    seen = collections.Counter()
    for b in batch_iterator(data, 6, shuffle_seed=seed):
        assert (b.labels[:, 0] == b.images[:, 0, 0, 0]).all()
        seen.update(b.labels[:, 0].tolist())
    assert seen == collections.Counter(range(37))


def test_batch_size_invalid():
    with pytest.raises(ValueError):
        list(batch_iterator(_toy(3), 0))
