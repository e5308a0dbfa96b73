import struct

import numpy as np
import pytest

from conftest import HAVE_MNIST, MNIST_DIR
from cope.streams import (
    BadMagicError,
    CountMismatchError,
    DatasetMissingError,
    Dataset,
    StreamSpec,
    TruncatedFileError,
    build_stream,
    holdout_split,
    imbalanced_split_spec,
    load_mnist,
    parse_idx,
    sequence_labels,
    split_spec,
    synth_gaussians,
)


def write_idx(tmp_path, images, labels, img_magic=0x803, lab_magic=0x801, n_img=None, n_lab=None):
    n, r, c = images.shape
    img = tmp_path / "img"
    lab = tmp_path / "lab"
    img.write_bytes(struct.pack(">IIII", img_magic, n if n_img is None else n_img, r, c) + images.astype(np.uint8).tobytes())
    lab.write_bytes(struct.pack(">II", lab_magic, len(labels) if n_lab is None else n_lab) + bytes(labels))
    return img, lab


def test_idx_fixture_byte_by_byte(tmp_path):
    images = np.arange(2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 3) * 10
    img, lab = write_idx(tmp_path, images, [7, 2])
    ds = parse_idx(img, lab)
    assert ds.inputs.shape == (2, 6)
    np.testing.assert_array_equal(ds.inputs, images.reshape(2, 6) / 255.0)
    np.testing.assert_array_equal(ds.labels, [7, 2])
    assert ds.classes == [2, 7]


def test_idx_errors(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    img, lab = write_idx(tmp_path, images, [0, 1], img_magic=0x802)
    with pytest.raises(BadMagicError, match="bad-magic"):
        parse_idx(img, lab)
    img, lab = write_idx(tmp_path, images, [0, 1], n_img=3)
    with pytest.raises(TruncatedFileError):
        parse_idx(img, lab)
    img, lab = write_idx(tmp_path, images, [0, 1, 1])
    with pytest.raises(CountMismatchError):
        parse_idx(img, lab)
    (tmp_path / "short").write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        parse_idx(tmp_path / "short", lab)


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetMissingError):
        load_mnist(tmp_path)


def test_synth_separable():
    ds = synth_gaussians(3, 10, 12.0, 200, seed=0)
    means = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in range(3)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    np.testing.assert_allclose(d[~np.eye(3, dtype=bool)], 12.0, rtol=0.05)
    nearest = np.argmin(np.linalg.norm(ds.inputs[:, None] - means[None], axis=-1), axis=1)
    assert (nearest == ds.labels).mean() > 0.99
    np.testing.assert_array_equal(synth_gaussians(3, 10, 12.0, 200, seed=0).inputs, ds.inputs)
    with pytest.raises(ValueError):
        synth_gaussians(5, 3, 1.0, 10, 0)


def toy():
    return Dataset(np.arange(50.0)[:, None], np.repeat(np.arange(5), 10))


def test_batch_sizes_and_task_order():
    stream = build_stream(toy(), StreamSpec(tasks=((0, 1), (2,)), batch_size=10, task_sizes=(20, 5)))
    sizes = [len(b.y) for b in stream]
    assert sizes == [10, 10, 5] and len(stream) == 3
    labels = sequence_labels(stream)
    assert set(labels[:20].tolist()) == {0, 1} and set(labels[20:].tolist()) == {2}
    assert stream.task_lengths == [20, 5]


def test_stream_determinism_and_seed_effect():
    spec = StreamSpec(tasks=((0, 1, 2),), batch_size=4, seed=3)
    a = build_stream(toy(), spec).order
    np.testing.assert_array_equal(a, build_stream(toy(), spec).order)
    b = build_stream(toy(), StreamSpec(tasks=((0, 1, 2),), batch_size=4, seed=4)).order
    assert not np.array_equal(a, b)


def test_iid_mixes_tasks_and_repeats_epochs():
    stream = build_stream(toy(), StreamSpec(tasks=((0,), (1,)), iid=True, epochs=3, seed=1))
    labels = sequence_labels(stream)
    assert len(labels) == 60
    assert set(labels[:10].tolist()) == {0, 1}


def test_spec_validation():
    with pytest.raises(ValueError):
        StreamSpec(tasks=((0, 1), (1, 2)))
    with pytest.raises(ValueError):
        StreamSpec(tasks=((0,),), task_sizes=(1, 2))
    with pytest.raises(ValueError):
        build_stream(toy(), StreamSpec(tasks=((0,),), task_sizes=(11,)))
    with pytest.raises(ValueError):
        build_stream(toy(), StreamSpec(tasks=((9,),)))


def test_eval_set_restricted_and_disjoint():
    ds = synth_gaussians(3, 5, 5.0, 100, seed=0)
    train, test = holdout_split(ds, 20, seed=0)
    assert len(test) == 60 and len(train) == 240
    assert not set(map(tuple, train.inputs.tolist())) & set(map(tuple, test.inputs.tolist()))
    stream = build_stream(train, StreamSpec(tasks=((0,), (2,))), test)
    assert set(stream.eval_set.labels.tolist()) == {0, 2}


@pytest.mark.mnist
@pytest.mark.skipif(not HAVE_MNIST, reason="MNIST not available")
def test_mnist_imbalanced_counts():
    train, test = load_mnist(MNIST_DIR)
    assert train.inputs.shape == (60000, 784) and len(test) == 10000
    assert 0.0 <= train.inputs.min() and train.inputs.max() <= 1.0
    stream = build_stream(train, imbalanced_split_spec(3), test)
    assert stream.task_lengths == [200, 200, 2000, 200, 200]
    assert len(stream.eval_set) == 10000
    balanced = build_stream(train, split_spec(10), test)
    assert balanced.n_samples == 60000 and len(balanced) == 6000
