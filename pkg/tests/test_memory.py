import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttalab.memory import AdvMemError, MemoryBank, MemoryEntry, advmem_init, trainmem_init
from ttalab.nn import CrossEntropy, build_model, forward, loss_and_grads, ParamSet

K = 5


def _x(v=0.0, dim=4):
    return np.full(dim, float(v))


def _full_bank(labels, synthetic=False, unc=0.5):
    bank = MemoryBank(len(labels), K)
    for i, y in enumerate(labels):
        bank.add(MemoryEntry(_x(i), int(y), unc, 0, synthetic))
    return bank


# ---------------------------------------------------------------- insert / evict


def test_insert_below_capacity_evicts_nothing():
    bank = MemoryBank(3, K)
    assert bank.insert(_x(), 1, 0.2) is None
    assert len(bank) == 1 and bank.entries[0].y == 1


def test_single_class_bank_gives_way_to_a_new_class():
    bank = _full_bank([0] * 4)
    evicted = bank.insert(_x(9), 3, 0.1)
    assert evicted.y == 0
    assert bank.class_counts().tolist() == [3, 0, 0, 1, 0]


def test_synthetic_entries_are_evicted_first():
    bank = _full_bank([0, 0, 1, 1], synthetic=True)
    bank.entries[0].synthetic = False
    evicted = bank.insert(_x(), 2, 0.0)
    assert evicted.synthetic  # classes 0 and 1 tie at 2; entry 0 is real, so a synthetic one goes


def test_incoming_majority_class_replaces_its_own():
    bank = _full_bank([0, 0, 1, 1])
    evicted = bank.insert(_x(), 1, 0.0)
    assert evicted.y == 1 and bank.class_counts().tolist() == [2, 2, 0, 0, 0]


def test_real_stream_of_one_class_evicts_synthetic_entries_first():
    labels = [c for c in range(K) for _ in range(4)]
    bank = _full_bank(labels, synthetic=True)
    for i in range(30):
        syn_left = sum(e.synthetic for e in bank._by_class[2])
        evicted = bank.insert(_x(100 + i), 2, 0.3)
        if evicted.y == 2 and syn_left:
            assert evicted.synthetic
        if evicted.y != 2:
            assert evicted.synthetic  # other classes only ever lose synthetic entries here
    # once class 2 owns the maximum it only recycles its own entries
    assert bank.class_counts()[2] == 4 and not any(e.synthetic for e in bank._by_class[2])


def test_eviction_under_equal_uncertainty_follows_age():
    bank = MemoryBank(4, K)
    for i in range(4):
        bank.insert(_x(i), 0, 0.5)
        bank.tick()
    ages_before = [e.age for e in bank.entries]
    assert ages_before == [4, 3, 2, 1]
    order = []
    for i in range(4):
        order.append(bank.insert(_x(10 + i), 0, 0.5).age)
    assert order[:4] == sorted(order[:4], reverse=True)
    assert order[0] == 4


def test_score_prefers_uncertain_entries_at_equal_age():
    bank = MemoryBank(3, K)
    for u in (0.1, 1.5, 0.7):
        bank.insert(_x(u), 0, u)
    assert bank.insert(_x(), 0, 0.0).uncertainty == 1.5


def test_exact_ties_fall_to_the_earliest_insertion():
    bank = _full_bank([1, 1, 1])
    first = bank.entries[0]
    assert bank.insert(_x(), 1, 0.5) is first


def test_label_validation_and_zero_capacity():
    bank = MemoryBank(2, K)
    with pytest.raises(ValueError):
        bank.insert(_x(), K, 0.1)
    with pytest.raises(ValueError):
        bank.add(MemoryEntry(_x(), -1, 0.1))
    assert MemoryBank(0, K).insert(_x(), 0, 0.1) is None
    with pytest.raises(ValueError):
        MemoryBank(1, K, [MemoryEntry(_x(), 0, 0.1), MemoryEntry(_x(), 1, 0.1)])


# ---------------------------------------------------------------- tick / snapshot


def test_ticks_age_untouched_entries():
    bank = MemoryBank(3, K)
    bank.insert(_x(), 0, 0.1)
    for _ in range(7):
        bank.tick()
    bank.insert(_x(1), 1, 0.1)
    assert [e.age for e in bank.entries] == [7, 0]


def test_snapshot_is_seeded_complete_and_read_only():
    bank = _full_bank([0, 1, 2, 3, 4, 0])
    before = [(e.x.copy(), e.y, e.uncertainty, e.age, e.synthetic) for e in bank.entries]
    a = bank.snapshot(np.random.default_rng(3))
    b = bank.snapshot(np.random.default_rng(3))
    assert np.array_equal(a, b) and len(a) == len(bank)
    assert sorted(a[:, 0].tolist()) == list(range(6))
    after = [(e.x, e.y, e.uncertainty, e.age, e.synthetic) for e in bank.entries]
    for u, v in zip(before, after):
        assert np.array_equal(u[0], v[0]) and u[1:] == v[1:]


def test_empty_snapshot_signals_no_material():
    assert MemoryBank(4, K).snapshot(np.random.default_rng(0)) is None


def test_bank_round_trip(tmp_path):
    bank = _full_bank([0, 1, 1, 3], synthetic=True)
    bank.tick()
    bank.save(tmp_path / "bank.npz")
    back = MemoryBank.load(tmp_path / "bank.npz")
    assert (back.capacity, back.num_classes, back.age_weight) == (bank.capacity, bank.num_classes, bank.age_weight)
    for u, v in zip(bank.entries, back.entries):
        assert np.array_equal(u.x, v.x) and (u.y, u.uncertainty, u.age, u.synthetic) == (v.y, v.uncertainty,
                                                                                         v.age, v.synthetic)


# ---------------------------------------------------------------- properties

ops = st.lists(st.one_of(st.tuples(st.just("insert"), st.integers(0, K - 1), st.floats(0, math.log(K))),
                         st.tuples(st.just("tick"), st.just(0), st.just(0.0))), max_size=80)


@given(st.integers(0, 12), ops)
@settings(max_examples=300, deadline=None)
def test_capacity_never_exceeded(capacity, sequence):
    bank = MemoryBank(capacity, K)
    for op, y, u in sequence:
        if op == "insert":
            bank.insert(_x(), y, u)
        else:
            bank.tick()
        assert len(bank) <= capacity
        assert bank.class_counts().sum() == len(bank)


@given(st.lists(st.integers(0, K - 1), min_size=10, max_size=10), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_balanced_stream_balances_any_full_bank(start_labels, seed):
    bank = _full_bank(start_labels, synthetic=True)
    rng = np.random.default_rng(seed)
    for _ in range(6):
        for y in rng.permutation(K):
            bank.insert(_x(), int(y), float(rng.uniform(0, 1)))
            bank.tick()
    counts = bank.class_counts()
    assert counts.max() - counts.min() <= 1
    # a class-balanced stream of length >= 2N flushes every synthetic entry
    assert not any(e.synthetic for e in bank.entries)


# ---------------------------------------------------------------- initialisers


def test_advmem_entries_are_classified_as_their_label(model):
    bank = advmem_init(model, 21, 64, rng=np.random.default_rng(0))
    x = np.stack([e.x for e in bank.entries])
    y = np.array([e.y for e in bank.entries])
    assert len(bank) == 64
    assert np.array_equal(forward(model, x).argmax(axis=1), y)
    assert all(e.synthetic and e.age == 0 and 0 <= e.uncertainty <= math.log(21) for e in bank.entries)


def test_advmem_lowers_the_loss_of_its_labels(model):
    bank = advmem_init(model, 21, 32, rng=np.random.default_rng(1))
    x = np.stack([e.x for e in bank.entries])
    y = np.array([e.y for e in bank.entries])
    raw = np.clip(0.5 + 0.15 * np.random.default_rng(2).standard_normal(x.shape), 0, 1)
    adv_loss, _ = loss_and_grads(model, x, CrossEntropy(y), ParamSet.INPUT)
    raw_loss, _ = loss_and_grads(model, raw, CrossEntropy(y), ParamSet.INPUT)
    assert adv_loss < raw_loss


def test_advmem_balanced_labels(model):
    bank = advmem_init(model, 21, 63, rng=np.random.default_rng(0), balanced=True)
    assert bank.class_counts().tolist() == [3] * 21


def test_advmem_empty_and_failure(model):
    assert len(advmem_init(model, 21, 0)) == 0
    with pytest.raises(AdvMemError):
        advmem_init(model, 21, 8, max_iters=0, retries=1, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        advmem_init(model, 21, 8, alpha=0.0)


def test_advmem_fails_loudly_on_a_dead_model():
    dead = build_model(256, 21, rng=np.random.default_rng(0))
    dead.layers[-1].weight[:] = 0.0  # constant logits: no input gradient
    with pytest.raises(AdvMemError):
        advmem_init(dead, 21, 4, max_iters=5, retries=1, rng=np.random.default_rng(0))


def test_trainmem_draws_without_replacement(dataset):
    x, y = dataset.arrays("train")
    bank = trainmem_init(x, y, 21, 64, np.random.default_rng(0))
    rows = {e.x.tobytes() for e in bank.entries}
    assert len(rows) == 64 and not any(e.synthetic for e in bank.entries)
    lookup = {row.tobytes(): label for row, label in zip(x, y)}
    assert all(lookup[e.x.tobytes()] == e.y for e in bank.entries)


def test_trainmem_balanced_has_one_entry_per_class(dataset):
    x, y = dataset.arrays("train")
    bank = trainmem_init(x, y, 21, 21, np.random.default_rng(0), balanced=True)
    assert bank.class_counts().tolist() == [1] * 21


def test_trainmem_class_counts_follow_the_multinomial():
    k, n, runs = 4, 12, 1000
    y = np.repeat(np.arange(k), 50)
    x = np.arange(len(y), dtype=float)[:, None]
    counts = np.array([trainmem_init(x, y, k, n, np.random.default_rng(s)).class_counts() for s in range(runs)])
    sigma = math.sqrt(n * (1 / k) * (1 - 1 / k) / runs)
    assert np.all(np.abs(counts.mean(axis=0) - n / k) < 3 * sigma)


def test_trainmem_redraws_exhausted_classes():
    y = np.array([0, 1, 1, 1, 1, 1])
    x = np.arange(6, dtype=float)[:, None]
    bank = trainmem_init(x, y, 2, 6, np.random.default_rng(0))
    assert bank.class_counts().tolist() == [1, 5]
    with pytest.raises(ValueError):
        trainmem_init(x, y, 2, 7, np.random.default_rng(0))
