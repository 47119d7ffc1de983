import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpnet.data import (
    BLOB_SPREAD,
    Dataset,
    Normalizer,
    augment,
    batch_indices,
    batches,
    from_spec,
    hflip,
    load_cifar10_binary,
    load_idx,
    load_idx_dir,
    normalize,
    read_cifar10_batch,
    read_idx,
    save_idx_dir,
    synth_blobs,
    synth_copy_sequences,
    train_val_split,
    write_cifar10_batch,
    write_idx,
)
from bpnet.errors import DataError, FormatError, MagicError, ParameterError, TruncatedError
from bpnet.tensor import make_rng


# --------------------------------------------------------------------------
# synthetic generators


def test_blobs_zero_spread_sits_on_centers():
    ds = synth_blobs(make_rng(3), 2, 2, 1, 0.0)
    centers = make_rng(3).normal(size=(2, 2))
    assert np.array_equal(ds.x, centers)
    assert ds.y.tolist() == [0, 1]


def test_blobs_deterministic():
    a = synth_blobs(make_rng(0), 4, 64, 250, BLOB_SPREAD)
    b = synth_blobs(make_rng(0), 4, 64, 250, BLOB_SPREAD)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert a.x.shape == (1000, 64)


def nearest_center_accuracy(spread):
    ds = synth_blobs(make_rng(0), 4, 64, 250, spread)
    centers = make_rng(0).normal(size=(4, 64))
    d = ((ds.x[:, None, :] - centers[None]) ** 2).sum(-1)
    return (d.argmin(1) == ds.y).mean()


def test_blob_spread_calibration():
    # the benchmark noise level keeps the nearest-center rule at >= 99%
    # while still leaving some overlap between classes
    acc = nearest_center_accuracy(BLOB_SPREAD)
    assert 0.99 <= acc < 1.0
    assert nearest_center_accuracy(2.0) == 0.995


def test_blob_errors():
    with pytest.raises(ParameterError):
        synth_blobs(make_rng(0), 0, 2, 1, 1.0)
    with pytest.raises(ParameterError):
        synth_blobs(make_rng(0), 2, 2, 1, -1.0)


def test_seq_length_one():
    ds = synth_copy_sequences(make_rng(0), 5, 1, 20)
    assert np.array_equal(ds.x[:, 0], ds.y)


def test_seq_reproducible_and_balanced():
    a = synth_copy_sequences(make_rng(0), 8, 5, 2000)
    b = synth_copy_sequences(make_rng(0), 8, 5, 2000)
    assert np.array_equal(a.x, b.x)
    majority = max(Counter(a.y.tolist()).values()) / 2000
    assert abs(majority - 1 / 8) < 0.03


def test_seq_errors():
    with pytest.raises(ParameterError):
        synth_copy_sequences(make_rng(0), 1, 5, 10)
    with pytest.raises(ParameterError):
        synth_copy_sequences(make_rng(0), 4, 0, 10)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), num_classes=3)


def test_train_val_split_partitions():
    ds = Dataset(np.arange(20.0)[:, None], np.arange(20) % 2, 2)
    tr, va = train_val_split(ds, 0.25, make_rng(0))
    assert len(va) == 5 and len(tr) == 15
    assert sorted(tr.x.ravel().tolist() + va.x.ravel().tolist()) == list(range(20))
    assert train_val_split(ds, 0.0, make_rng(0))[1] is None


# --------------------------------------------------------------------------
# IDX


def idx_bytes(code, dims, payload):
    return bytes([0, 0, code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_idx_handcrafted(tmp_path):
    p = tmp_path / "a.idx"
    p.write_bytes(idx_bytes(0x08, (2, 2, 2), bytes(range(8))))
    raw = read_idx(p)
    assert raw.shape == (2, 2, 2) and raw.ravel().tolist() == list(range(8))
    scaled = load_idx(p, images=False)
    assert scaled.shape == (2, 2, 2)
    assert scaled.ravel().tolist() == [v / 255 for v in range(8)]


def test_idx_image_set_gets_channel(tmp_path):
    p = tmp_path / "imgs.idx"
    p.write_bytes(idx_bytes(0x08, (3, 2, 2), bytes(12)))
    assert load_idx(p).shape == (3, 2, 2, 1)


def test_idx_truncated(tmp_path):
    p = tmp_path / "t.idx"
    p.write_bytes(idx_bytes(0x08, (2, 3), bytes(5)))
    with pytest.raises(TruncatedError) as e:
        read_idx(p)
    assert e.value.offset == 4 + 8 + 5
    p.write_bytes(b"\0\0\x08\x02\0\0")
    with pytest.raises(TruncatedError):
        read_idx(p)


def test_idx_bad_magic_and_dtype(tmp_path):
    p = tmp_path / "b.idx"
    p.write_bytes(b"\x01\0\x08\x01" + struct.pack(">I", 1) + b"\0")
    with pytest.raises(MagicError):
        read_idx(p)
    p.write_bytes(idx_bytes(0x0F, (1,), b"\0"))
    with pytest.raises(FormatError, match="0x0f"):
        read_idx(p)
    p.write_bytes(idx_bytes(0x08, (1,), b"\0\0"))
    with pytest.raises(FormatError, match="trailing"):
        read_idx(p)


@pytest.mark.parametrize("dtype", ["u1", "i1", "i2", "i4", "f4", "f8"])
def test_idx_roundtrip_bit_exact(tmp_path, dtype):
    r = make_rng(0)
    arr = (r.normal(size=(3, 4, 5)) * 100).astype(dtype)
    p = tmp_path / "r.idx"
    write_idx(p, arr)
    back = read_idx(p)
    assert back.dtype == np.dtype(dtype) and back.tobytes() == arr.tobytes()
    # big-endian on disk
    assert p.read_bytes()[16:] == arr.astype(np.dtype(dtype).newbyteorder(">")).tobytes()


def test_idx_dir_roundtrip(tmp_path):
    ds = synth_copy_sequences(make_rng(0), 8, 5, 50)
    ds.x = ds.x.astype(np.int32)
    save_idx_dir(tmp_path, ds)
    back = load_idx_dir(tmp_path)
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)
    with pytest.raises(DataError):
        load_idx_dir(tmp_path / "nope")


# --------------------------------------------------------------------------
# CIFAR-10


def test_cifar_single_black_record(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(bytes([3]) + bytes(3072))
    ds = load_cifar10_binary(tmp_path)["train"]
    assert ds.x.shape == (1, 32, 32, 3) and not np.any(ds.x)
    assert ds.y.tolist() == [3]


def test_cifar_channel_planar_layout(tmp_path):
    planes = bytes([10] * 1024 + [20] * 1024 + [30] * 1024)
    p = tmp_path / "b.bin"
    p.write_bytes(bytes([1]) + planes)
    images, labels = read_cifar10_batch(p)
    assert images[0, 5, 7].tolist() == [10, 20, 30]


def test_cifar_bad_record_length(tmp_path):
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(bytes(3072))
    with pytest.raises(FormatError, match="3073"):
        read_cifar10_batch(p)


def test_cifar_wrong_record_count(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(3073 * 2))
    with pytest.raises(FormatError, match="expected 3"):
        read_cifar10_batch(p, expected_records=3)


def test_cifar_five_batches_and_roundtrip(tmp_path):
    r = make_rng(0)
    per = 10
    written = []
    for i in range(1, 6):
        imgs = r.integers(0, 256, size=(per, 32, 32, 3)).astype(np.uint8)
        labels = r.integers(0, 10, size=per)
        write_cifar10_batch(tmp_path / f"data_batch_{i}.bin", imgs, labels)
        written.append((imgs, labels))
    write_cifar10_batch(tmp_path / "test_batch.bin", *written[0])
    for i, (imgs, labels) in enumerate(written, start=1):
        back_i, back_l = read_cifar10_batch(tmp_path / f"data_batch_{i}.bin", per)
        assert back_i.tobytes() == imgs.tobytes() and np.array_equal(back_l, labels)
    out = load_cifar10_binary(tmp_path, expected_records=per)
    assert len(out["train"]) == 5 * per and len(out["test"]) == per
    assert np.array_equal(out["train"].x[:per], written[0][0] / 255.0)


# --------------------------------------------------------------------------
# preprocessing


def test_normalize_stats_and_constant_channel():
    r = make_rng(0)
    x = r.normal(3.0, 2.0, size=(50, 4, 4, 3))
    x[..., 2] = 7.0
    train = Dataset(x, np.zeros(50, dtype=int))
    with pytest.warns(UserWarning, match="zero variance"):
        norm, tn = normalize(train)
    axes = (0, 1, 2)
    assert np.abs(tn.x[..., :2].mean(axis=axes)).max() <= 1e-10
    assert np.abs(tn.x[..., :2].std(axis=axes) - 1).max() <= 1e-10
    assert not np.any(tn.x[..., 2])


def test_normalize_reuses_training_stats():
    r = make_rng(1)
    train = Dataset(r.normal(size=(30, 2, 2, 3)), np.zeros(30, dtype=int))
    test = Dataset(r.normal(size=(10, 2, 2, 3)), np.zeros(10, dtype=int))
    norm, tn, te = normalize(train, test)
    assert np.array_equal(te.x, (test.x - norm.mean) / norm.std)
    assert np.array_equal(norm(test.x), te.x)
    again = Normalizer.fit(train.x)
    assert np.array_equal(again.mean, norm.mean)


def test_flip_twice_is_identity():
    x = make_rng(0).normal(size=(2, 3, 4, 1))
    assert np.array_equal(hflip(hflip(x)), x)
    assert np.array_equal(hflip(x)[:, :, 0], x[:, :, -1])


def test_augment_deterministic_and_shapes():
    x = make_rng(0).random((6, 8, 8, 3))
    a = augment(x, make_rng(5), flip=True, crop=2, rotate=True, channel_swap=True)
    b = augment(x, make_rng(5), flip=True, crop=2, rotate=True, channel_swap=True)
    assert np.array_equal(a, b) and a.shape == x.shape
    assert np.array_equal(augment(x, make_rng(5), flip=False, crop=0), x)


def test_augment_crop_pads_with_zeros():
    x = np.ones((50, 4, 4, 1))
    out = augment(x, make_rng(0), flip=False, crop=2)
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert (out == 0).any()


def test_augment_channel_swap_permutes():
    x = np.broadcast_to(np.array([1.0, 2.0, 3.0]), (4, 2, 2, 3)).copy()
    out = augment(x, make_rng(0), flip=False, crop=0, channel_swap=True)
    for k in range(4):
        assert sorted(out[k, 0, 0].tolist()) == [1, 2, 3]
        assert np.all(out[k] == out[k, 0, 0])


# --------------------------------------------------------------------------
# batching


def test_batch_sizes():
    assert [len(b) for b in batch_indices(10, 4)] == [4, 4, 2]
    assert [len(b) for b in batch_indices(10, 50)] == [10]
    with pytest.raises(ParameterError):
        list(batch_indices(10, 0))


def test_seeded_shuffle_repeats():
    ds = Dataset(np.arange(12.0)[:, None], np.zeros(12, dtype=int))
    a = [xb.ravel().tolist() for xb, _ in batches(ds, 5, seed=3)]
    b = [xb.ravel().tolist() for xb, _ in batches(ds, 5, seed=3)]
    assert a == b and a != [list(range(5)), list(range(5, 10)), [10, 11]]


@settings(max_examples=50)
@given(st.integers(0, 200), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_epoch_is_a_permutation(n, size, seed):
    idx = np.concatenate(list(batch_indices(n, size, make_rng(seed))) or [np.array([], int)])
    assert sorted(idx.tolist()) == list(range(n))


# --------------------------------------------------------------------------
# data specs


def test_from_spec_forms(tmp_path):
    ds = from_spec("synth:blobs:classes=3,dim=6,n=5,seed=2")
    assert ds.x.shape == (15, 6)
    seq = from_spec("synth:seq:vocab=4,length=3,n=7")
    assert seq.x.shape == (7, 3)
    save_idx_dir(tmp_path, ds)
    assert np.array_equal(from_spec(f"idx:{tmp_path}").x, ds.x)
    write_cifar10_batch(tmp_path / "data_batch_1.bin", np.zeros((2, 32, 32, 3)), [1, 2])
    assert len(from_spec(f"cifar10:{tmp_path}")) == 2


@pytest.mark.parametrize(
    "spec", ["synth:blobs:color=red", "synth:cubes:", "synth:blobs:n", "mnist:/x", "synth:seq:vocab=1", "idx:/no/such/dir"]
)
def test_from_spec_errors(spec):
    with pytest.raises(DataError):
        from_spec(spec)
