import numpy as np
import pytest
from scipy import stats

from cope.numerics import l2_normalize
from cope.proto_memory import (
    ClassBalancedReservoir,
    DuplicateClassError,
    OperationalMemory,
    PrototypeStore,
    ReservoirBuffer,
    UnknownClassError,
)


def fill(mem, label, n, start=0, rng=None):
    rng = rng or np.random.default_rng(0)
    for i in range(start, start + n):
        mem.count([label])
        mem.update(np.array([[float(i)]]), [label], rng)


def test_init_class_shrinks_existing_classes():
    mem = ClassBalancedReservoir(300)
    mem.add_class(0)
    fill(mem, 0, 400)
    assert len(mem.exemplars[0]) == 300
    first = [x.copy() for x in mem.exemplars[0][:150]]
    mem.add_class(1)
    assert mem.per_class == 150 and len(mem.exemplars[0]) == 150
    assert all(np.array_equal(a, b) for a, b in zip(first, mem.exemplars[0]))
    mem.add_class(2)
    assert mem.per_class == 100 and len(mem) == 100
    with pytest.raises(DuplicateClassError):
        mem.add_class(2)


def test_unknown_class_rejected():
    mem = ClassBalancedReservoir(10)
    with pytest.raises(UnknownClassError):
        mem.count([4])
    with pytest.raises(UnknownClassError):
        mem.update(np.zeros((1, 1)), [4], np.random.default_rng(0))


def test_momentum_update_examples():
    store = PrototypeStore(2, momentum=0.9)
    store.prototypes[0] = np.array([1.0, 0.0])
    store.update(np.array([[0.0, 1.0]]), np.array([0]))
    np.testing.assert_allclose(store.prototypes[0], [0.993884, 0.110432], atol=1e-6)
    raw = PrototypeStore(2, momentum=0.5, normalize=False)
    raw.prototypes[0] = np.array([1.0, 0.0])
    raw.update(np.array([[0.0, 1.0], [0.0, 3.0]]), np.array([0, 0]))
    np.testing.assert_allclose(raw.prototypes[0], [0.5, 1.0])


def test_momentum_extremes():
    store = PrototypeStore(3, momentum=1.0)
    store.add(0, np.random.default_rng(0))
    p0 = store.prototypes[0].copy()
    store.update(l2_normalize(np.ones((2, 3))), np.array([0, 0]))
    np.testing.assert_allclose(store.prototypes[0], p0)
    store.momentum = 0.0
    store.update(np.array([[0.0, 0.0, 2.0]]), np.array([0]))
    np.testing.assert_allclose(store.prototypes[0], [0, 0, 1])
    with pytest.raises(ValueError):
        PrototypeStore(3, momentum=1.5)


def test_prototype_init_unit_positive():
    store = PrototypeStore(50)
    store.add(3, np.random.default_rng(1))
    p = store.prototypes[3]
    assert np.all(p > 0) and abs(np.linalg.norm(p) - 1) < 1e-12
    with pytest.raises(DuplicateClassError):
        store.add(3, np.random.default_rng(1))
    with pytest.raises(UnknownClassError):
        store.update(np.ones((1, 50)), np.array([7]))


def test_classify_ties_to_lowest_id():
    store = PrototypeStore(2)
    store.prototypes = {5: np.array([1.0, 0.0]), 2: np.array([1.0, 0.0]), 9: np.array([0.0, 1.0])}
    np.testing.assert_array_equal(store.classify(np.array([[1.0, 0.0], [0.1, 0.9]])), [2, 9])


def test_classify_scale_invariant():
    rng = np.random.default_rng(2)
    store = PrototypeStore(4)
    for c in range(3):
        store.add(c, rng)
    f = rng.standard_normal((20, 4))
    np.testing.assert_array_equal(store.classify(f), store.classify(7.5 * f))


def test_reservoir_monte_carlo_small():
    m, n, trials = 3, 30, 6000
    rng = np.random.default_rng(5)
    kept = np.zeros(n)
    for _ in range(trials):
        mem = ClassBalancedReservoir(m)
        mem.add_class(0)
        fill(mem, 0, n, rng=rng)
        for x in mem.exemplars[0]:
            kept[int(x[0])] += 1
    assert np.abs(kept / trials - m / n).max() < 0.02
    assert stats.chisquare(kept).pvalue > 0.001


def test_class_balance_after_long_stream():
    mem = ClassBalancedReservoir(100)
    rng = np.random.default_rng(0)
    for c in range(4):
        mem.add_class(c)
        fill(mem, c, 500 if c == 0 else 60, rng=rng)
    assert [len(mem.exemplars[c]) for c in range(4)] == [25, 25, 25, 25]


def test_sample_uniform_without_replacement():
    mem = ClassBalancedReservoir(20)
    rng = np.random.default_rng(3)
    for c in range(2):
        mem.add_class(c)
        fill(mem, c, 10, start=10 * c, rng=rng)
    hits = np.zeros(20)
    for _ in range(5000):
        xs, ys = mem.sample(5, rng)
        assert len(set(xs[:, 0].tolist())) == 5
        assert np.all(ys == (xs[:, 0] >= 10))
        hits[xs[:, 0].astype(int)] += 1
    assert stats.chisquare(hits).pvalue > 0.001
    xs, _ = mem.sample(100, rng)
    assert len(xs) == 20
    assert len(ClassBalancedReservoir(5).sample(3, rng)[1]) == 0


def test_global_reservoir():
    buf = ReservoirBuffer(10)
    rng = np.random.default_rng(0)
    buf.update(np.arange(100.0)[:, None], np.zeros(100, dtype=int), rng)
    assert len(buf) == 10 and buf.seen == 100
    xs, _ = buf.sample(4, rng)
    assert xs.shape == (4, 1)


def test_operational_memory_counts():
    mem = OperationalMemory(10, 3, rng=np.random.default_rng(0))
    mem.init_class(0)
    mem.init_class(1)
    f = l2_normalize(np.ones((4, 3)))
    mem.prototype_update(f, [0, 0, 1, 1], n_stream=2)
    assert mem.counts == {0: 2, 1: 2}
    only = OperationalMemory(10, 3, stream_only_counts=True, rng=np.random.default_rng(0))
    only.init_class(0)
    only.init_class(1)
    only.prototype_update(f, [0, 0, 1, 1], n_stream=2)
    assert only.counts == {0: 2, 1: 0}


def test_serialization_roundtrip():
    mem = OperationalMemory(8, 3, rng=np.random.default_rng(0))
    for c in range(2):
        mem.init_class(c)
    x = np.arange(12.0).reshape(4, 3)
    mem.prototype_update(l2_normalize(x + 1), [0, 1, 0, 1])
    mem.memory_update(x, [0, 1, 0, 1])
    back = OperationalMemory.from_dict(mem.to_dict())
    assert back.counts == mem.counts
    for c in range(2):
        np.testing.assert_array_equal(back.prototypes.prototypes[c], mem.prototypes.prototypes[c])
        np.testing.assert_array_equal(np.stack(back.replay.exemplars[c]), np.stack(mem.replay.exemplars[c]))
