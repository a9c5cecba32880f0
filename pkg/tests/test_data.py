import numpy as np
import pytest

from sparseswin.data import (
    AugmentConfig,
    Dataset,
    ImageRecord,
    augment,
    batch_indices,
    batches,
    bilinear_resize,
    eval_transform,
    hflip,
    read_cifar,
    synthetic_dataset,
    write_cifar,
)
from sparseswin.errors import DataError
from sparseswin.rng import Rng


def crafted_bytes(n_records, labels):
    """CIFAR-10 layout: a ramp of byte values with the given label bytes."""
    raw = (np.arange(n_records * 3073) % 251).astype(np.uint8)
    raw[np.arange(n_records) * 3073] = labels
    return raw


# --- CIFAR binary format ---------------------------------------------------------

def test_cifar10_record_count(tmp_path):
    p = tmp_path / "b.bin"
    crafted_bytes(10, [i % 10 for i in range(10)]).tofile(p)
    assert p.stat().st_size == 30_730
    assert len(read_cifar(p, "cifar10")) == 10


def test_cifar10_first_label_and_byte_offsets(tmp_path):
    p = tmp_path / "b.bin"
    raw = crafted_bytes(3, [7, 2, 9])
    raw.tofile(p)
    ds = read_cifar(p, "cifar10")
    assert ds.labels.tolist() == [7, 2, 9]
    img = ds.images
    assert img[0, 0, 0, 0] == raw[1]  # R plane, pixel (0, 0)
    assert img[0, 0, 0, 1] == raw[2]
    assert img[0, 0, 1, 0] == raw[1 + 32]
    assert img[0, 1, 0, 0] == raw[1 + 1024]  # G plane
    assert img[0, 2, 31, 31] == raw[3072]  # last pixel of record 0
    assert img[1, 0, 0, 0] == raw[3073 + 1]


def test_cifar100_uses_fine_label(tmp_path):
    p = tmp_path / "c.bin"
    raw = (np.arange(2 * 3074) % 251).astype(np.uint8)
    raw[0], raw[1] = 3, 77  # coarse, fine
    raw[3074], raw[3075] = 19, 99
    raw.tofile(p)
    ds = read_cifar(p, "cifar100")
    assert ds.labels.tolist() == [77, 99] and ds.num_classes == 100
    assert ds.images[0, 0, 0, 0] == raw[2]


def test_truncated_file(tmp_path):
    p = tmp_path / "t.bin"
    crafted_bytes(2, [0, 1])[:-5].tofile(p)
    with pytest.raises(DataError, match="multiple"):
        read_cifar(p)


def test_label_out_of_range(tmp_path):
    p = tmp_path / "l.bin"
    crafted_bytes(2, [3, 12]).tofile(p)
    with pytest.raises(DataError, match="record 1"):
        read_cifar(p)


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_cifar(tmp_path / "nope.bin")


def test_write_read_round_trip_and_reread_bit_exact(tmp_path):
    ds = synthetic_dataset(10, 20, 32, seed=3)
    p = tmp_path / "rt.bin"
    write_cifar(p, ds)
    a, b = read_cifar(p), read_cifar([p])
    assert np.array_equal(a.images, ds.images) and np.array_equal(a.labels, ds.labels)
    assert np.array_equal(a.images, b.images)
    p100 = tmp_path / "rt100.bin"
    write_cifar(p100, ds, "cifar100")
    assert np.array_equal(read_cifar(p100, "cifar100").images, ds.images)


# --- synthetic data ---------------------------------------------------------------

def test_synthetic_deterministic_and_balanced():
    a, b = synthetic_dataset(4, 40, 16, seed=5), synthetic_dataset(4, 40, 16, seed=5)
    assert np.array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [10] * 4
    assert not np.array_equal(a.images, synthetic_dataset(4, 40, 16, seed=6).images)


def test_synthetic_nearest_centroid_separable():
    train = synthetic_dataset(4, 80, 32, seed=0)
    test = synthetic_dataset(4, 80, 32, seed=1)
    x = train.images.reshape(len(train), -1).astype(np.float64)
    cents = np.stack([x[train.labels == k].mean(0) for k in range(4)])
    y = test.images.reshape(len(test), -1).astype(np.float64)
    pred = np.argmin(((y[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert (pred == test.labels).mean() == 1.0


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4, 4), dtype=np.uint8), np.array([0, 5]), 4)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4, 4), dtype=np.float32), np.array([0, 1]), 4)


# --- augmentation -------------------------------------------------------------------

def test_bilinear_hand_grid():
    out = bilinear_resize(np.array([[[0.0, 2.0], [2.0, 4.0]]]), 4, 4)[0]
    expected = [[0, 0.5, 1.5, 2], [0.5, 1, 2, 2.5], [1.5, 2, 3, 3.5], [2, 2.5, 3.5, 4]]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_hflip_involution():
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 7))
    assert np.array_equal(hflip(hflip(img)), img)


@pytest.mark.parametrize("crop", ["random_resized", "pad_crop", "none"])
def test_constant_image_stays_constant(crop):
    rec = ImageRecord(0, np.full((3, 32, 32), 200, dtype=np.uint8))
    cfg = AugmentConfig(target_size=48, crop=crop, pad=0)
    out = augment(rec, cfg, Rng(1))
    assert out.shape == (3, 48, 48)
    np.testing.assert_allclose(out, (200 / 255 - 0.5) / 0.5, rtol=1e-6)


def test_pad_crop_padding_enters_image():
    rec = ImageRecord(0, np.full((3, 8, 8), 255, dtype=np.uint8))
    outs = [augment(rec, AugmentConfig(target_size=8, crop="pad_crop", pad=4), Rng(s)) for s in range(10)]
    assert any(o.min() < 0 for o in outs)


def test_augment_deterministic_and_bounded():
    ds = synthetic_dataset(4, 4, 32, seed=0)
    cfg = AugmentConfig(target_size=64)
    a = augment(ds[2], cfg, Rng(9).child("augment", 0).child(2))
    b = augment(ds[2], cfg, Rng(9).child("augment", 0).child(2))
    c = augment(ds[2], cfg, Rng(9).child("augment", 1).child(2))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.dtype == np.float32 and a.min() >= -1 and a.max() <= 1


def test_eval_transform_is_deterministic_resize():
    ds = synthetic_dataset(4, 2, 32, seed=0)
    out = eval_transform(ds[0], AugmentConfig(target_size=64))
    assert out.shape == (3, 64, 64)
    assert np.array_equal(out, eval_transform(ds[0], AugmentConfig(target_size=64)))


# --- batching -------------------------------------------------------------------------

def test_batch_sizes_and_permutation():
    groups = batch_indices(10, 4, seed=0, epoch=0)
    assert [len(g) for g in groups] == [4, 4, 2]
    flat = np.concatenate(groups)
    assert sorted(flat.tolist()) == list(range(10))


def test_batch_order_pure_function_of_seed_and_epoch():
    a = np.concatenate(batch_indices(50, 8, 3, 2))
    b = np.concatenate(batch_indices(50, 8, 3, 2))
    c = np.concatenate(batch_indices(50, 8, 3, 3))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_empty_dataset_rejected():
    empty = Dataset(np.zeros((0, 3, 4, 4), dtype=np.uint8), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(DataError):
        batch_indices(0, 4, 0, 0)
    with pytest.raises(DataError):
        list(batches(empty, 4, 0, 0, train=False))


def test_batches_yield_tensors():
    ds = synthetic_dataset(4, 10, 32, seed=0)
    out = list(batches(ds, 4, 0, 0, AugmentConfig(target_size=32)))
    assert [x.shape for x, _ in out] == [(4, 3, 32, 32), (4, 3, 32, 32), (2, 3, 32, 32)]
    ev = list(batches(ds, 4, 0, 0, AugmentConfig(target_size=32), train=False))
    assert np.concatenate([y for _, y in ev]).tolist() == ds.labels.tolist()
