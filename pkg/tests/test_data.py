import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aet.data import (
    CIFAR_RECORD,
    Dataset,
    SyntheticConfig,
    denormalize,
    gen_synthetic,
    iter_batches,
    load_cifar10,
    load_dataset,
    make_aet_batch,
    normalize,
    read_cifar_batch,
    render_shape,
    save_dataset,
    split,
    write_cifar_batch,
)
from aet.errors import BadLabel, CorruptRecord, EmptyDataset, IndexOutOfRange, MissingFile
from aet.xform import XformConfig, to_target_vector


@pytest.fixture(scope="module")
def small():
    return gen_synthetic(SyntheticConfig(n_per_class=25, seed=3))


# --- CIFAR-10 binary --------------------------------------------------------

def test_cifar_record_arithmetic(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(7, 3, 32, 32)) / 255.0
    labels = rng.integers(0, 10, size=7)
    path = tmp_path / "b.bin"
    write_cifar_batch(path, imgs, labels)
    assert path.stat().st_size == 7 * CIFAR_RECORD
    x, y = read_cifar_batch(path)
    assert x.shape == (7, 3, 32, 32)
    assert np.array_equal(y, labels)
    assert np.allclose(x, imgs, atol=1e-15)


def test_cifar_pixel_scaling_and_layout(tmp_path):
    rec = np.zeros(CIFAR_RECORD, dtype=np.uint8)
    rec[0] = 4
    rec[1] = 255  # channel 0, row 0, column 0
    rec[1 + 1024 + 33] = 255  # channel 1, row 1, column 1
    path = tmp_path / "one.bin"
    rec.tofile(path)
    x, y = read_cifar_batch(path)
    assert y[0] == 4
    assert x[0, 0, 0, 0] == 1.0 and x[0, 1, 1, 1] == 1.0
    assert x[0, 2].max() == 0.0


def test_cifar_truncated_file(tmp_path):
    path = tmp_path / "t.bin"
    np.zeros(2 * CIFAR_RECORD + 100, dtype=np.uint8).tofile(path)
    with pytest.raises(CorruptRecord, match=f"offset {2 * CIFAR_RECORD}") as err:
        read_cifar_batch(path)
    assert "t.bin" in str(err.value)


def test_cifar_bad_label(tmp_path):
    rec = np.zeros((2, CIFAR_RECORD), dtype=np.uint8)
    rec[1, 0] = 10
    path = tmp_path / "l.bin"
    rec.tofile(path)
    with pytest.raises(BadLabel):
        read_cifar_batch(path)


def test_cifar_missing_files(tmp_path):
    with pytest.raises(MissingFile):
        read_cifar_batch(tmp_path / "nope.bin")
    with pytest.raises(MissingFile):
        load_cifar10(tmp_path)


def test_load_cifar10_directory(tmp_path):
    rng = np.random.default_rng(1)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar_batch(tmp_path / name, rng.integers(0, 256, size=(4, 3, 32, 32)) / 255.0,
                          rng.integers(0, 10, size=4))
    train, test = load_cifar10(tmp_path)
    assert len(train) == 20 and len(test) == 4
    assert np.array_equal(test.mean, train.mean)


# --- datasets and normalization ----------------------------------------------

def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1, 4, 4)), [0, 1], 2)
    with pytest.raises(BadLabel):
        Dataset(np.zeros((2, 1, 4, 4)), [0, 2], 2)
    with pytest.raises(EmptyDataset):
        Dataset(np.zeros((0, 1, 4, 4)), [], 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalization_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 3, 5, 5))
    mean, std = rng.uniform(0.2, 0.8, 3), rng.uniform(0.1, 0.5, 3)
    assert np.max(np.abs(denormalize(normalize(x, mean, std), mean, std) - x)) < 1e-12


def test_split_uses_train_statistics_only(small):
    train, test = split(small, 0.2, seed=0)
    assert len(train) + len(test) == len(small)
    assert np.allclose(train.mean, train.images.mean(axis=(0, 2, 3)))
    assert np.array_equal(test.mean, train.mean) and np.array_equal(test.std, train.std)


def test_dataset_container_round_trip(tmp_path, small):
    path = save_dataset(tmp_path / "ds.ckpt", small)
    back = load_dataset(path)
    assert np.array_equal(back.images, small.images)
    assert np.array_equal(back.labels, small.labels)
    assert back.class_count == small.class_count


# --- synthetic shapes -------------------------------------------------------

def test_synthetic_counts_and_labels():
    ds = gen_synthetic(SyntheticConfig(n_per_class=100, seed=0))
    assert len(ds) == 400 and ds.class_count == 4
    assert np.array_equal(np.bincount(ds.labels), [100] * 4)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_synthetic_is_deterministic_per_seed():
    a = gen_synthetic(SyntheticConfig(n_per_class=5, seed=9))
    b = gen_synthetic(SyntheticConfig(n_per_class=5, seed=9))
    c = gen_synthetic(SyntheticConfig(n_per_class=5, seed=10))
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


@pytest.mark.parametrize("kind", ["square", "disk", "triangle", "cross", "tee", "ell", "halfdisk"])
def test_every_kind_renders_a_visible_shape(kind):
    cfg = SyntheticConfig(kinds=(kind,), noise=0.0, center_range=(0.0, 0.0), orientation_jitter=0.0)
    img = render_shape(kind, 32, np.random.default_rng(0), cfg)
    luma = img.mean(axis=0)
    # bright polarity: the shape is the lighter region and covers a sizeable area
    frac = np.mean(luma > (luma.min() + luma.max()) / 2)
    assert 0.02 < frac < 0.7


def test_oriented_shapes_have_a_bottom_heavy_or_top_heavy_mass():
    cfg = SyntheticConfig(noise=0.0, center_range=(0.0, 0.0), orientation_jitter=0.0,
                          radius_range=(0.5, 0.5))
    for kind in cfg.kinds:
        img = render_shape(kind, 32, np.random.default_rng(1), cfg).mean(axis=0)
        mask = img > (img.min() + img.max()) / 2
        assert not np.array_equal(mask, mask[::-1]), kind


def test_horizon_background_darkens_the_lower_part():
    cfg = SyntheticConfig(kinds=("disk",), noise=0.0, background="horizon", radius_range=(0.2, 0.2),
                          center_range=(0.0, 0.0), horizon_range=(0.75, 0.75), ground_shade=(0.5, 0.5))
    img = render_shape("disk", 32, np.random.default_rng(2), cfg)
    assert np.allclose(img[:, -1, :], 0.5 * img[:, 0, :])


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(kinds=("hexagon",))
    with pytest.raises(ValueError):
        SyntheticConfig(image_size=8)
    with pytest.raises(ValueError):
        SyntheticConfig(background="sky")


# --- AET batches ------------------------------------------------------------

def test_identity_sampler_gives_identical_views(small):
    b = make_aet_batch(small, [0, 5, 7], XformConfig.identity_only(), np.random.default_rng(0))
    assert np.array_equal(b.originals, b.transformed)
    assert np.array_equal(b.targets, np.tile([1, 0, 0, 0, 1, 0, 0, 0], (3, 1)))


def test_batch_shapes_and_targets(small):
    b = make_aet_batch(small, np.arange(6), XformConfig(), np.random.default_rng(1))
    assert len(b) == 6 and b.targets.shape == (6, 8)
    assert b.originals.shape == b.transformed.shape == (6, 3, 32, 32)
    for s, t in zip(b.samples, b.targets):
        assert np.array_equal(to_target_vector(s.homography), t)


def test_batch_is_deterministic_and_leaves_dataset(small):
    before = small.images.copy()
    a = make_aet_batch(small, [1, 2, 3], XformConfig(), np.random.default_rng(4))
    b = make_aet_batch(small, [1, 2, 3], XformConfig(), np.random.default_rng(4))
    assert np.array_equal(a.transformed, b.transformed) and np.array_equal(a.targets, b.targets)
    assert np.array_equal(small.images, before)


def test_batch_index_out_of_range(small):
    with pytest.raises(IndexOutOfRange):
        make_aet_batch(small, [0, len(small)], XformConfig(), np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(2, 64), st.integers(0, 2**31 - 1))
def test_epoch_shuffle_is_a_permutation(n, bs, seed):
    order = np.random.default_rng(seed).permutation(n)
    batches = list(iter_batches(order, bs, min_size=1))
    assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(n))
    kept = list(iter_batches(order, bs))
    assert all(len(b) >= 2 for b in kept)
