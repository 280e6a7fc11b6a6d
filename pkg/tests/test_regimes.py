import numpy as np
import pytest

from xlforget.model import MONO, MULTI, NON_SHARED_LORA, SHARED_LORA, VANILLA
from xlforget.regimes import (
    LanguageOrder,
    RegimeConfig,
    RunLog,
    StepRecord,
    early_stop,
    frozen_base,
    run_mono,
    run_regime,
    train_multi,
    train_nonshared_lora,
    train_shared_lora,
    train_vanilla,
    with_seed,
)


def quick(regime, rank=None, **kw):
    kw = {"max_epochs": 3, "patience": 2, "seed": 3, **kw}
    return RegimeConfig.preset(regime, rank=rank, **kw)


@pytest.mark.parametrize(
    "traj, patience, expected",
    [
        ([0.5, 0.7, 0.6, 0.6, 0.6], 3, (True, 2)),
        ([0.5, 0.7, 0.6, 0.6], 3, (False, 2)),
        ([0.1, 0.2, 0.3], 1, (False, 3)),
        ([0.3, 0.3], 1, (True, 1)),
        ([], 2, (False, 0)),
    ],
)
def test_early_stop_examples(traj, patience, expected):
    assert early_stop(traj, patience) == expected


def test_early_stop_rejects_zero_patience():
    with pytest.raises(ValueError):
        early_stop([0.1], 0)


@pytest.mark.parametrize(
    "kw",
    [
        dict(regime="BOGUS"),
        dict(regime=VANILLA, patience=0),
        dict(regime=VANILLA, patience=30, max_epochs=20),
        dict(regime=VANILLA, batch_size=0),
        dict(regime=SHARED_LORA),
        dict(regime=MONO, rank=4),
    ],
)
def test_regime_config_validation(kw):
    base = dict(learning_rate=1e-3, max_epochs=20, patience=3)
    with pytest.raises(ValueError):
        RegimeConfig(**{**base, **kw})


def test_presets():
    c = RegimeConfig.preset(SHARED_LORA)
    assert c.rank == 4 and c.lora_alpha == 4.0 and c.learning_rate == 1e-2
    p = RegimeConfig.preset(VANILLA, scale="full")
    assert (p.learning_rate, p.max_epochs, p.patience) == (5e-5, 50, 5)
    assert RegimeConfig.preset(NON_SHARED_LORA, rank=8, scale="full").patience == 15
    assert RegimeConfig.preset(MULTI, rank=2).uses_lora


def test_order_check():
    LanguageOrder("1", ("a", "b")).check(["b", "a"])
    with pytest.raises(ValueError):
        LanguageOrder("1", ("a", "a")).check(["a", "b"])
    with pytest.raises(ValueError):
        LanguageOrder("1", ("a", "c")).check(["a", "b"])


def _rec(step, trained, langs, v=0.5):
    return StepRecord(step, trained, {l: v for l in langs}, [0.1], 1, 1, False, [1.0])


def test_runlog_round_trip_and_contracts(tmp_path):
    langs = ["L2", "L0", "L1"]
    log = RunLog(VANILLA, "1", 4, langs)
    for i, l in enumerate(langs):
        log.append(_rec(i, l, langs, 0.1 * i))
    log.write(tmp_path / "r.jsonl")
    back = RunLog.read(tmp_path / "r.jsonl")
    assert back.to_jsonl() == log.to_jsonl()
    assert list(back.records[0].f1) == langs
    assert back.r_matrix().values.shape == (3, 3)
    with pytest.raises(ValueError):
        log.append(StepRecord(3, "L0", {"L0": 0.1}, [], 1, 1, False, []))
    with pytest.raises(ValueError):
        log.append(_rec(3, "L0", langs, 1.5))
    bad = RunLog(VANILLA, "1", 4, langs, records=[_rec(i, l, langs) for i, l in enumerate(["L0", "L2", "L1"])])
    with pytest.raises(ValueError, match="declares order"):
        bad.r_matrix()
    with pytest.raises(ValueError):
        RunLog(VANILLA, "1", 4, langs, records=log.records[:2]).r_matrix()


def test_final_f1_semantics():
    langs = ["a", "b"]
    mono = RunLog(MONO, None, 0, langs, records=[
        StepRecord(0, "a", {"a": 0.9, "b": 0.1}, [], 1, 1, False, []),
        StepRecord(1, "b", {"a": 0.2, "b": 0.7}, [], 1, 1, False, []),
    ])
    assert mono.final_f1() == {"a": 0.9, "b": 0.7}
    seq = RunLog(VANILLA, "1", 0, langs, records=mono.records)
    assert seq.final_f1() == {"a": 0.2, "b": 0.7}


def _strip(log: RunLog) -> list:
    return [(r.f1, r.val_f1, r.losses, r.epochs, r.best_epoch) for r in log.records]


def test_mono_equals_vanilla_with_one_task(tiny_datasets, tiny_model_cfg):
    one = {"L1": tiny_datasets["L1"]}
    mono = run_mono(one, quick(MONO), tiny_model_cfg)
    van = train_vanilla(one, LanguageOrder("1", ("L1",)), quick(VANILLA), tiny_model_cfg)
    assert _strip(mono.log) == _strip(van.log)
    assert mono.models["L1"].digest() == van.params.digest()


def test_shared_equals_nonshared_with_one_task(tiny_datasets, tiny_model_cfg):
    one = {"L0": tiny_datasets["L0"]}
    cfg = quick(SHARED_LORA, 2)
    sh = train_shared_lora(one, LanguageOrder("1", ("L0",)), cfg, tiny_model_cfg)
    ns = train_nonshared_lora(one, quick(NON_SHARED_LORA, 2), tiny_model_cfg)
    assert _strip(sh.log) == _strip(ns.log)
    a, b = sh.adapters, ns.adapters.get("L0")
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.trainable_tensors(), b.trainable_tensors()))


def test_nonshared_invariant_to_schedule_and_workers(tiny_datasets, tiny_model_cfg):
    cfg = quick(NON_SHARED_LORA, 2)
    ref = train_nonshared_lora(tiny_datasets, cfg, tiny_model_cfg)
    rev = train_nonshared_lora(tiny_datasets, cfg, tiny_model_cfg, training_order=["L2", "L1", "L0"])
    par = train_nonshared_lora(tiny_datasets, cfg, tiny_model_cfg, workers=3)
    assert ref.log.to_jsonl() == rev.log.to_jsonl() == par.log.to_jsonl()
    with pytest.raises(ValueError):
        train_nonshared_lora(tiny_datasets, cfg, tiny_model_cfg, training_order=["L0"])


@pytest.mark.parametrize("regime", [SHARED_LORA, NON_SHARED_LORA])
def test_frozen_base_unchanged(tmp_path, tiny_datasets, tiny_model_cfg, regime):
    base = frozen_base(tiny_model_cfg, 3)
    base.save(tmp_path / "before")
    order = LanguageOrder("1", tuple(tiny_datasets))
    cfg = quick(regime, 2)
    if regime == SHARED_LORA:
        train_shared_lora(tiny_datasets, order, cfg, tiny_model_cfg, base=base)
    else:
        train_nonshared_lora(tiny_datasets, cfg, tiny_model_cfg, base=base)
    base.save(tmp_path / "after")
    for f in sorted((tmp_path / "before").iterdir()):
        assert f.read_bytes() == (tmp_path / "after" / f.name).read_bytes()


def test_lora_regimes_reject_trainable_base(tiny_datasets, tiny_model_cfg):
    from xlforget.regimes import base_model

    base = base_model(tiny_model_cfg, 0)
    with pytest.raises(ValueError, match="frozen"):
        train_shared_lora(tiny_datasets, LanguageOrder("1", tuple(tiny_datasets)), quick(SHARED_LORA, 2), tiny_model_cfg, base)


def test_sequential_logs_follow_order(tiny_datasets, tiny_model_cfg):
    order = LanguageOrder("2", ("L2", "L0", "L1"))
    res = train_vanilla(tiny_datasets, order, quick(VANILLA), tiny_model_cfg)
    assert [r.trained for r in res.log.records] == list(order.langs)
    assert res.log.r_matrix().langs == list(order.langs)
    with pytest.raises(ValueError):
        train_vanilla(tiny_datasets, LanguageOrder("x", ("L0", "L1")), quick(VANILLA), tiny_model_cfg)


def test_runs_are_deterministic(tiny_datasets, tiny_model_cfg):
    order = LanguageOrder("1", tuple(tiny_datasets))
    a = run_regime(tiny_datasets, quick(SHARED_LORA, 2), order, tiny_model_cfg)
    b = run_regime(tiny_datasets, quick(SHARED_LORA, 2), order, tiny_model_cfg)
    assert a.log.to_jsonl() == b.log.to_jsonl()
    c = run_regime(tiny_datasets, with_seed(quick(SHARED_LORA, 2), 4), order, tiny_model_cfg)
    assert c.log.to_jsonl() != a.log.to_jsonl()


def test_multi_single_row(tiny_datasets, tiny_model_cfg):
    res = train_multi(tiny_datasets, quick(MULTI), tiny_model_cfg)
    assert len(res.log.records) == 1 and res.log.records[0].trained == "L0+L1+L2"
    with pytest.raises(ValueError):
        run_regime(tiny_datasets, quick(VANILLA), None, tiny_model_cfg)


def test_training_improves_on_easy_data(tiny_datasets, tiny_model_cfg):
    res = run_mono({"L0": tiny_datasets["L0"]}, quick(MONO, max_epochs=12, patience=12))
    losses = res.log.records[0].losses
    assert losses[-1] < losses[0]
