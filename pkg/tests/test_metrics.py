import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from xlforget.metrics import (
    RMatrix,
    cbt,
    cft,
    donor_mft,
    f1,
    group_by_vitality,
    mbt,
    mft,
    performance_shift,
    read_matrix_csv,
    receiver_mbt,
    transfer_report,
)


def test_f1_hand_cases():
    gold = [["O", "B-time", "I-time"]]
    assert f1(gold, gold) == 1.0
    assert f1([["O", "B-time", "O"]], gold) == 0.0
    assert f1([["O", "O"]], [["O", "O"]]) == 1.0
    # two of three gold spans found, no false positives: P=1, R=2/3
    g = [["B-a", "O", "B-b", "O", "B-c"]]
    p = [["B-a", "O", "B-b", "O", "O"]]
    assert math.isclose(f1(p, g), 0.8)
    # wrong type, right boundaries
    assert f1([["B-b"]], [["B-a"]]) == 0.0
    # integer ids with label names
    assert f1([[0, 1, 2]], [[0, 1, 2]], ["O", "B-x", "I-x"]) == 1.0


def test_f1_errors():
    with pytest.raises(ValueError):
        f1([["O"]], [])
    with pytest.raises(ValueError):
        f1([["O"]], [["O", "O"]])


def rand_orders(rng, T, N):
    langs = [f"L{k}" for k in range(T)]
    out = []
    for n in range(N):
        perm = [langs[k] for k in rng.permutation(T)]
        R = rng.random((T, T))
        out.append((perm, R.tolist(), RMatrix(perm, R, str(n))))
    return out


def test_oracles_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        T = int(rng.integers(2, 9))
        N = int(rng.integers(1, 6))
        H = int(rng.integers(0, 6))
        data = rand_orders(rng, T, N)
        plain = [(l, R) for l, R, _ in data]
        mats = [m for _, _, m in data]
        for (_, R, m) in data:
            assert abs(cft(m) - oracles.cft(R)) < 1e-12
            assert abs(cbt(m) - oracles.cbt(R)) < 1e-12
        per, agg = oracles.shift(plain)
        got = performance_shift(mats)
        assert abs(got.value - agg) < 1e-12
        assert all(abs(got.per_language[l] - v) < 1e-12 for l, v in per.items())
        for h in range(0, H + 1):
            per, agg = oracles.mbt(plain, h)
            if agg is None:
                with pytest.raises(ValueError):
                    mbt(mats, h)
            else:
                got = mbt(mats, h)
                assert abs(got.value - agg) < 1e-12
                assert set(got.per_language) == set(per)
                assert all(abs(got.per_language[l] - v) < 1e-12 for l, v in per.items())
            if h >= 1:
                per, agg = oracles.mft(plain, h)
                if agg is None:
                    with pytest.raises(ValueError):
                        mft(mats, h)
                else:
                    got = mft(mats, h)
                    assert abs(got.value - agg) < 1e-12
                    assert all(abs(got.per_language[l] - v) < 1e-12 for l, v in per.items())


@given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 10_000))
def test_mbt0_is_negated_shift_per_sample(T, N, seed):
    mats = [m for _, _, m in rand_orders(np.random.default_rng(seed), T, N)]
    s, b = performance_shift(mats), mbt(mats, 0)
    assert s.samples.keys() == b.samples.keys()
    for l in s.samples:
        assert b.samples[l] == [-x for x in s.samples[l]]


def test_shift_hand_example():
    # P_t = 0.8 then P_{t+1} = 0.7 for language B in all five orders
    R = np.array([[0.8, 0.0], [0.6, 0.8]])
    mats = [RMatrix(["A", "B"], R, str(n)) for n in range(5)]
    assert math.isclose(performance_shift(mats).per_language["B"], 0.1)
    assert performance_shift(mats).excluded == ["A"]


@given(st.integers(2, 8), st.floats(0, 1))
def test_constant_matrix(T, c):
    m = RMatrix([f"L{k}" for k in range(T)], np.full((T, T), c))
    assert math.isclose(cft(m), c, abs_tol=1e-12)
    assert cbt(m) == 0.0
    for h in range(1, T - 1):
        assert abs(mft([m], h).value) < 1e-12
    for h in range(0, T - 1):
        assert abs(mbt([m], h).value) < 1e-12


@given(st.integers(3, 8), st.integers(0, 10_000), st.floats(-1, 1))
def test_constant_shift_invariance(T, seed, c):
    rng = np.random.default_rng(seed)
    langs = [f"L{k}" for k in range(T)]
    R = rng.random((T, T))
    a, b = RMatrix(langs, R), RMatrix(langs, R + c)
    assert abs(cft(b) - cft(a) - c) < 1e-12
    assert abs(cbt(b) - cbt(a)) < 1e-12
    assert abs(performance_shift([b]).value - performance_shift([a]).value) < 1e-12
    assert abs(mft([b], 1).value - mft([a], 1).value) < 1e-12
    assert abs(mbt([b], 0).value - mbt([a], 0).value) < 1e-12


def test_retention_perfect_cbt_zero():
    R = np.tril(np.full((4, 4), 0.7)) + np.triu(np.full((4, 4), 0.1), 1)
    assert cbt(RMatrix(list("abcd"), R)) == 0.0


def test_receiver_and_donor_variants():
    R = np.array([[0.5, 0.1, 0.1], [0.4, 0.6, 0.2], [0.3, 0.5, 0.9]])
    m = RMatrix(["a", "b", "c"], R)
    rec = receiver_mbt([m], 1)
    assert math.isclose(rec.per_language["a"], 0.4 - 0.5)
    assert math.isclose(rec.per_language["b"], 0.5 - 0.6)
    assert rec.excluded == ["c"]
    P = m.running_average()
    don = donor_mft([m], 1)
    assert math.isclose(don.per_language["a"], P[1] - P[0])
    # receiver at h=0 is the language's own gain from its training step
    assert math.isclose(receiver_mbt([m], 0).per_language["b"], 0.6 - 0.1)


def test_errors():
    m = RMatrix(["a"], np.ones((1, 1)))
    with pytest.raises(ValueError):
        cft(m)
    with pytest.raises(ValueError):
        mft([RMatrix(list("ab"), np.ones((2, 2)))], 0)
    with pytest.raises(ValueError):
        mft([RMatrix(list("ab"), np.ones((2, 2)))], 2)
    with pytest.raises(ValueError, match="absent"):
        mbt([RMatrix(list("ab"), np.ones((2, 2))), RMatrix(list("ac"), np.ones((2, 2)))], 0)
    with pytest.raises(ValueError):
        RMatrix(list("ab"), np.ones((2, 3)))
    with pytest.raises(ValueError):
        RMatrix(list("ab"), np.array([[1.0, np.nan], [1.0, 1.0]]))


def test_group_by_vitality():
    g = group_by_vitality({"a": 0.2, "b": 0.4, "c": 0.9, "d": 0.5}, {"a": "LOW", "b": "LOW", "c": "HIGH"})
    assert math.isclose(g["LOW"], 0.3) and g["HIGH"] == 0.9 and g["MID"] is None and g["UNASSIGNED"] == 0.5


def test_csv_round_trip_and_ragged():
    m = RMatrix(["a", "b"], np.array([[0.1, 0.2], [0.3, 1 / 3]]), "1")
    back = RMatrix.from_csv(m.to_csv())
    assert np.array_equal(back.values, m.values) and back.langs == m.langs
    with pytest.raises(ValueError, match="ragged"):
        read_matrix_csv("x,a,b\na,1,2\nb,3\n")


def test_report_recomputes_from_csv():
    rng = np.random.default_rng(0)
    mats = [m for _, _, m in rand_orders(rng, 5, 3)]
    live = transfer_report(mats, H=3)
    reloaded = transfer_report([RMatrix.from_csv(m.to_csv(), m.order_id) for m in mats], H=3)
    assert live.to_json() == reloaded.to_json()
    assert live.mft[4 - 1]["value"] is not None
    assert set(live.mbt) == {0, 1, 2, 3}
