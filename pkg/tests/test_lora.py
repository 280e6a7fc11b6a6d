import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xlforget.lora import (
    NON_SHARED,
    SHARED,
    AdapterRegistry,
    AdapterSet,
    LoraAdapter,
    init_adapter,
    lora_delta,
    lora_forward,
    merge,
    unmerge,
)
from xlforget.numeric import Rng, Tape, Tensor, backward, max_relative_error, numerical_grad


def random_adapter(r, d=4, k=5, rank=2, alpha=2.0, dropout=0.0):
    A = Tensor(r.normal(size=(rank, k)), name="A", trainable=True)
    B = Tensor(r.normal(size=(d, rank)), name="B", trainable=True)
    return LoraAdapter("W", A, B, rank, alpha, dropout)


def test_delta_zero_when_b_zero(rng):
    ad = random_adapter(rng)
    ad.B.data[...] = 0
    assert np.array_equal(lora_delta(ad).data, np.zeros((4, 5)))


def test_delta_with_identity_a_is_padded_b(rng):
    d, k = 3, 4
    A = Tensor(np.eye(3, 4), name="A", trainable=True)
    B = Tensor(rng.normal(size=(d, 3)), name="B", trainable=True)
    delta = lora_delta(LoraAdapter("W", A, B, 3, 3.0)).data
    assert np.array_equal(delta[:, :3], B.data)
    assert np.array_equal(delta[:, 3], np.zeros(d))


def test_delta_matches_dense_oracle(rng):
    ad = random_adapter(rng)
    ref = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            ref[i, j] = sum(ad.B.data[i, q] * ad.A.data[q, j] for q in range(2))
    assert np.max(np.abs(lora_delta(ad).data - ref)) < 1e-12


def test_forward_hand_example():
    A = Tensor(np.array([[1.0, 0.0]]), name="A", trainable=True)
    B = Tensor(np.array([[1.0], [0.0]]), name="B", trainable=True)
    ad = LoraAdapter("W", A, B, 1, 1.0)
    h = lora_forward(Tensor(np.zeros((2, 2))), ad, Tensor(np.array([1.0, 0.0])))
    assert np.array_equal(h.data, [1.0, 0.0])


def test_alpha_equal_rank_scale_is_one(rng):
    assert random_adapter(rng, rank=2, alpha=2.0).scale == 1.0


def test_b_zero_forward_is_base(rng):
    ad = random_adapter(rng)
    ad.B.data[...] = 0
    W0 = Tensor(rng.normal(size=(4, 5)))
    x = rng.normal(size=5)
    assert np.array_equal(lora_forward(W0, ad, Tensor(x)).data, W0.data @ x)


def test_merge_equivalence_over_random_inputs(rng):
    ad = random_adapter(rng, alpha=3.0)
    W0 = Tensor(rng.normal(size=(4, 5)))
    merged = merge(W0, ad)
    worst = max(
        np.max(np.abs(merged.data @ x - lora_forward(W0, ad, Tensor(x)).data))
        for x in rng.normal(size=(100, 5))
    )
    assert worst < 1e-9


def test_merge_unmerge_recovers_base(rng):
    ad = random_adapter(rng)
    W0 = Tensor(rng.normal(size=(4, 5)))
    assert np.max(np.abs(unmerge(merge(W0, ad), ad).data - W0.data)) < 1e-12
    ad.B.data[...] = 0
    assert np.array_equal(merge(W0, ad).data, W0.data)


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_alpha_linearity(rank, seed):
    r = np.random.default_rng(seed)
    ad = random_adapter(r, d=5, k=6, rank=rank, alpha=1.5)
    W0 = Tensor(r.normal(size=(5, 6)))
    x = Tensor(r.normal(size=6))
    base = W0.data @ x.data
    once = lora_forward(W0, ad, x).data - base
    ad.alpha *= 2
    twice = lora_forward(W0, ad, x).data - base
    assert np.max(np.abs(twice - 2 * once)) < 1e-12


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_delta_rank_bounded(rank, seed):
    ad = random_adapter(np.random.default_rng(seed), d=6, k=7, rank=rank)
    s = np.linalg.svd(lora_delta(ad).data, compute_uv=False)
    assert np.all(s[rank:] < 1e-9)


def test_shape_errors(rng):
    ad = random_adapter(rng)
    with pytest.raises(ValueError):
        lora_forward(Tensor(np.zeros((5, 4))), ad, Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        lora_forward(Tensor(np.zeros((4, 5))), ad, Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        merge(Tensor(np.zeros((3, 5))), ad)
    with pytest.raises(ValueError):
        LoraAdapter("W", ad.A, ad.B, 3, 1.0)


def test_init_adapter_is_noop_and_deterministic():
    a = init_adapter(Rng(3).fork("x"), "W_Q", 2, 2.0, (4, 5))
    b = init_adapter(Rng(3).fork("x"), "W_Q", 2, 2.0, (4, 5))
    assert np.array_equal(lora_delta(a).data, np.zeros((4, 5)))
    assert np.array_equal(a.A.data, b.A.data)
    assert a.A.name == "lora.W_Q.A"


def test_init_adapter_std():
    n = 10_000
    A = init_adapter(Rng(0), "W", 1, 1.0, (1, n)).A.data
    # standard error of a sample std is about std / sqrt(2n)
    assert abs(A.std() - 0.02) < 3 * 0.02 / np.sqrt(2 * n)


def test_init_adapter_rank_errors():
    with pytest.raises(ValueError):
        init_adapter(Rng(0), "W", 0, 1.0, (4, 4))
    with pytest.raises(ValueError):
        init_adapter(Rng(0), "W", 5, 1.0, (4, 4))


def test_gradients_reach_only_adapter_factors(rng):
    W0 = Tensor(rng.normal(size=(3, 4)), name="W0")
    ad = random_adapter(rng, d=3, k=4, rank=2)
    x = Tensor(rng.normal(size=4))

    def build():
        t = Tape()
        return t.sum(t.mul(lora_forward(W0, ad, x, tape=t), np.arange(1.0, 4.0)))

    grads = backward(build())
    assert set(grads) == {ad.A, ad.B}
    for p in (ad.A, ad.B):
        assert max_relative_error(grads[p], numerical_grad(lambda: build().item(), p)) < 1e-6


def test_train_mode_dropout_only_on_adapter_input(rng):
    W0 = Tensor(rng.normal(size=(3, 4)))
    ad = random_adapter(rng, d=3, k=4, rank=2, dropout=0.5)
    x = Tensor(rng.normal(size=4))
    ad.B.data[...] = 0
    h = lora_forward(W0, ad, x, train_mode=True, rng=Rng(0))
    assert np.allclose(h.data, W0.data @ x.data)


def _set(r, prefix="lora"):
    ad = init_adapter(Rng(r).fork("q"), "W_Q", 2, 2.0, (4, 4), prefix=prefix)
    head = {"W_C": Tensor(np.ones((4, 3)), name="head.W_C", trainable=True)}
    return AdapterSet({"W_Q": ad}, head)


def test_adapter_set_save_load(tmp_path):
    s = _set(1)
    s.adapters["W_Q"].B.data[...] = 0.5
    s.save(tmp_path, task_id="L0")
    back = AdapterSet.load(tmp_path)
    assert np.array_equal(back.adapters["W_Q"].B.data, s.adapters["W_Q"].B.data)
    assert back.adapters["W_Q"].rank == 2 and back.adapters["W_Q"].alpha == 2.0
    import json

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["task_id"] == "L0"
    assert manifest["adapters"][0]["target"] == "W_Q"
    assert back.num_trainable() == s.num_trainable() == 2 * 4 * 2 + 12


def test_registry_modes():
    shared = AdapterRegistry(SHARED, shared=_set(1))
    assert shared.get("anything") is shared.get("other")
    assert len(shared) == 1
    with pytest.raises(ValueError):
        AdapterRegistry(SHARED)
    a, b = _set(1), _set(2)
    reg = AdapterRegistry(NON_SHARED, {"x": a, "y": b})
    assert reg.get("x") is a and len(reg) == 2
    assert reg.num_trainable() == a.num_trainable() + b.num_trainable()
    with pytest.raises(ValueError, match="share"):
        AdapterRegistry(NON_SHARED, {"x": a, "y": a})
