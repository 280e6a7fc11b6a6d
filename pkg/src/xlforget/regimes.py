"""The five training regimes and the sequential driver that fills evaluation rows.

Random streams are keyed by purpose and task, never by position, so a task
trained inside a longer run sees the same shuffles and dropout masks as the
same task trained alone:

* base init      ``Rng(seed).fork("init")``
* adapter init   ``Rng(seed).fork("adapter")``
* task training  ``Rng(seed).fork("train", key)`` with key = lang id
  (MULTI uses the ``+``-joined lang ids of its pool)
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .lora import NON_SHARED, AdapterRegistry, AdapterSet
from .metrics import RMatrix, f1
from .model import (
    MONO,
    MULTI,
    NON_SHARED_LORA,
    REGIMES,
    SHARED_LORA,
    VANILLA,
    LabeledSequence,
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    loss,
    new_adapter_set,
    predict,
)
from .numeric import OptimizerState, Rng, adam_step, backward
from .tasks import TaskDataset

log = logging.getLogger(__name__)

LORA_REGIMES = (SHARED_LORA, NON_SHARED_LORA)

# Full-scale values for fine-tuning a large pretrained encoder.
FULL_SCALE_HPARAMS = {
    "lora": {"learning_rate": 5e-6, "max_epochs": 100, "patience": 15, "lora_dropout": 0.1},
    "full": {"learning_rate": 5e-5, "max_epochs": 50, "patience": 5},
}

# Desk-scale values for a randomly initialised d=32 encoder on a few hundred
# sequences; the full-scale learning rates barely move such a model.
DESK_HPARAMS = {
    "lora": {"learning_rate": 1e-2, "max_epochs": 40, "patience": 6, "lora_dropout": 0.1},
    "full": {"learning_rate": 3e-3, "max_epochs": 20, "patience": 3},
}


@dataclass(frozen=True)
class RegimeConfig:
    regime: str
    learning_rate: float
    max_epochs: int
    patience: int
    batch_size: int = 16
    rank: int | None = None
    alpha: float | None = None
    lora_dropout: float = 0.1
    seed: int = 0
    classifier_trainable: bool = True
    reset_optimizer: bool = True
    eval_every_epoch: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.patience < 1 or self.patience > self.max_epochs:
            raise ValueError("patience must be in [1, max_epochs]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.regime in LORA_REGIMES and self.rank is None:
            raise ValueError(f"{self.regime} needs a rank")
        if self.regime in (MONO, VANILLA) and self.rank is not None:
            raise ValueError(f"{self.regime} does not take LoRA settings")

    @property
    def uses_lora(self) -> bool:
        return self.rank is not None

    @property
    def lora_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)

    @classmethod
    def preset(cls, regime: str, rank: int | None = None, scale: str = "desk", **overrides) -> "RegimeConfig":
        """Defaults split by LoRA vs full fine-tuning; alpha defaults to the rank."""
        if scale not in ("desk", "full"):
            raise ValueError(f"unknown hyperparameter scale {scale!r}; choose desk or full")
        table = FULL_SCALE_HPARAMS if scale == "full" else DESK_HPARAMS
        if regime in LORA_REGIMES and rank is None:
            rank = 4
        kind = "lora" if rank is not None else "full"
        kw = dict(table[kind])
        kw.update(overrides)
        return cls(regime=regime, rank=rank, **kw)


@dataclass(frozen=True)
class LanguageOrder:
    order_id: str
    langs: tuple[str, ...]

    def check(self, langs: Sequence[str]) -> None:
        if sorted(self.langs) != sorted(langs) or len(set(self.langs)) != len(self.langs):
            raise ValueError(f"order {self.order_id} is not a permutation of {sorted(langs)}")


@dataclass
class StepRecord:
    step: int
    trained: str
    f1: dict[str, float]
    val_f1: list[float]
    epochs: int
    best_epoch: int
    early_stopped: bool
    losses: list[float]
    epoch_f1: list[dict[str, float]] | None = None


@dataclass
class RunLog:
    regime: str
    order_id: str | None
    seed: int
    langs: list[str]
    rank: int | None = None
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if list(rec.f1) != self.langs:
            raise ValueError(f"F1 row must cover {self.langs} in order, got {list(rec.f1)}")
        if not all(0.0 <= v <= 1.0 for v in rec.f1.values()):
            raise ValueError("F1 outside [0, 1]")
        self.records.append(rec)

    def r_matrix(self) -> RMatrix:
        if len(self.records) != len(self.langs):
            raise ValueError(f"{len(self.records)} rows for {len(self.langs)} tasks")
        if self.regime in (VANILLA, SHARED_LORA):
            trained = [r.trained for r in self.records]
            if trained != self.langs:
                raise ValueError(f"log trained {trained} but declares order {self.langs}")
        values = [[r.f1[l] for l in self.langs] for r in self.records]
        return RMatrix(list(self.langs), np.array(values), self.order_id)

    def final_f1(self) -> dict[str, float]:
        """Per-language test F1 of the model a regime ends with.

        Sequential and MULTI runs use their last row; MONO and NON_SHARED use
        each task's own model on its own task.
        """
        if not self.records:
            raise ValueError("empty log")
        if self.regime in (MONO, NON_SHARED_LORA):
            own = {r.trained: r.f1[r.trained] for r in self.records}
            return {l: own[l] for l in self.langs}
        return dict(self.records[-1].f1)

    def mean_final_f1(self) -> float:
        return float(np.mean(list(self.final_f1().values())))

    def header(self) -> dict:
        return {"regime": self.regime, "order_id": self.order_id, "seed": self.seed, "langs": self.langs, "rank": self.rank}

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.records:
            body = self.header()
            body.update(asdict(rec))
            lines.append(json.dumps(body, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "RunLog":
        rows = [json.loads(l) for l in text.splitlines() if l.strip()]
        if not rows:
            raise ValueError("empty run log")
        h = rows[0]
        out = cls(h["regime"], h["order_id"], h["seed"], list(h["langs"]), h.get("rank"))
        keys = StepRecord.__dataclass_fields__.keys()
        for r in rows:
            body = {k: r.get(k) for k in keys}
            # JSON objects are written with sorted keys; restore the log's language order.
            body["f1"] = {l: r["f1"][l] for l in out.langs if l in r["f1"]}
            out.append(StepRecord(**body))
        return out

    @classmethod
    def read(cls, path: str | Path) -> "RunLog":
        return cls.from_jsonl(Path(path).read_text())


@dataclass
class RunResult:
    log: RunLog
    params: ModelParams | None = None
    adapters: AdapterSet | AdapterRegistry | None = None
    models: dict[str, ModelParams] | None = None


# -- early stopping and the fit loop ----------------------------------------


def early_stop(trajectory: Sequence[float], patience: int) -> tuple[bool, int]:
    """(stop, best_epoch) for a validation trajectory; epochs are 1-based.

    Only a strict improvement resets the counter.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best = -np.inf
    best_epoch = 0
    since = 0
    for epoch, v in enumerate(trajectory, start=1):
        if v > best:
            best, best_epoch, since = v, epoch, 0
        else:
            since += 1
        if since >= patience:
            return True, best_epoch
    return False, best_epoch


@dataclass
class FitResult:
    val_f1: list[float]
    losses: list[float]
    best_epoch: int
    epochs: int
    early_stopped: bool
    epoch_f1: list[dict[str, float]] | None = None


def evaluate(params: ModelParams, adapters: AdapterSet | None, data: Sequence[LabeledSequence], label_names) -> float:
    preds = predict(params, adapters, data)
    return f1(preds, [list(s.labels) for s in data], label_names)


def fit(
    params: ModelParams,
    adapters: AdapterSet | None,
    train: Sequence[LabeledSequence],
    valid: Sequence[LabeledSequence],
    cfg: RegimeConfig,
    rng: Rng,
    label_names: Sequence[str],
    opt: OptimizerState | None = None,
    monitor: Mapping[str, TaskDataset] | None = None,
) -> tuple[FitResult, OptimizerState]:
    """Adam on the trainable tensors with early stopping on validation span F1.

    Trainables are the adapter set's tensors when one is given, otherwise the
    base tensors flagged trainable. The best epoch's values are restored.
    """
    if not train:
        raise ValueError("empty training split")
    trainables = adapters.trainable_tensors() if adapters is not None else params.trainable_tensors()
    if opt is None:
        opt = OptimizerState.create(trainables, cfg.learning_rate)
    n = len(train)
    val_traj: list[float] = []
    losses: list[float] = []
    epoch_f1: list[dict[str, float]] | None = [] if (cfg.eval_every_epoch and monitor) else None
    best_snapshot = [t.data.copy() for t in trainables]
    stopped = False
    best_epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.fork("shuffle", epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            logits = forward(params, adapters, batch, train_mode=True, rng=rng.fork("dropout", epoch, b))
            lval = loss(logits, batch)
            total += lval.item() * len(batch)
            adam_step(opt, backward(lval))
        losses.append(total / n)
        val_traj.append(evaluate(params, adapters, valid, label_names))
        if epoch_f1 is not None:
            epoch_f1.append({l: evaluate(params, adapters, ds.test, label_names) for l, ds in monitor.items()})
        stopped, best_epoch = early_stop(val_traj, cfg.patience)
        if best_epoch == epoch:
            best_snapshot = [t.data.copy() for t in trainables]
        if stopped:
            break
    for t, snap in zip(trainables, best_snapshot):
        t.data[...] = snap
    return FitResult(val_traj, losses, best_epoch, len(val_traj), stopped, epoch_f1), opt


# -- helpers --------------------------------------------------------------------


def model_config_for(
    datasets: Mapping[str, TaskDataset],
    hidden_dim: int = 32,
    max_seq_len: int = 24,
    dropout_rate: float = 0.1,
    residual_scale: float = 0.3,
) -> ModelConfig:
    sets = list(datasets.values())
    if not sets:
        raise ValueError("no datasets")
    names = sets[0].label_names
    if any(ds.label_names != names for ds in sets):
        raise ValueError("datasets disagree on the label schema")
    longest = max(len(s.tokens) for ds in sets for split in ds.splits().values() for s in split)
    return ModelConfig(
        vocab_size=max(ds.vocab_size for ds in sets),
        num_labels=len(names),
        hidden_dim=hidden_dim,
        max_seq_len=max(max_seq_len, longest),
        dropout_rate=dropout_rate,
        residual_scale=residual_scale,
    )


def _datasets_dict(datasets) -> dict[str, TaskDataset]:
    if isinstance(datasets, Mapping):
        out = dict(datasets)
    else:
        out = {ds.lang_id: ds for ds in datasets}
    if not out:
        raise ValueError("no datasets given")
    for lang, ds in out.items():
        if not ds.train:
            raise ValueError(f"{lang}: empty training split")
    return out


def _label_names(datasets: Mapping[str, TaskDataset]) -> list[str]:
    return next(iter(datasets.values())).label_names


def _eval_row(params, adapters, datasets: Mapping[str, TaskDataset], langs: Sequence[str]) -> dict[str, float]:
    names = _label_names(datasets)
    return {l: evaluate(params, adapters, datasets[l].test, names) for l in langs}


def _record(step, trained, row, res: FitResult) -> StepRecord:
    return StepRecord(
        step=step,
        trained=trained,
        f1=row,
        val_f1=res.val_f1,
        epochs=res.epochs,
        best_epoch=res.best_epoch,
        early_stopped=res.early_stopped,
        losses=res.losses,
        epoch_f1=res.epoch_f1,
    )


def base_model(model_cfg: ModelConfig, seed: int) -> ModelParams:
    return init_params(model_cfg, Rng(seed).fork("init"))


def frozen_base(model_cfg: ModelConfig, seed: int) -> ModelParams:
    return base_model(model_cfg, seed).freeze()


def _new_adapters(base: ModelParams, cfg: RegimeConfig) -> AdapterSet:
    return new_adapter_set(
        base,
        Rng(cfg.seed).fork("adapter"),
        cfg.rank,
        cfg.lora_alpha,
        cfg.lora_dropout,
        cfg.classifier_trainable,
    )


# -- regimes --------------------------------------------------------------------


def train_multi(datasets, cfg: RegimeConfig, model_cfg: ModelConfig | None = None) -> RunResult:
    """One model (optionally one adapter set on a frozen base) on the pooled languages."""
    ds = _datasets_dict(datasets)
    model_cfg = model_cfg or model_config_for(ds)
    langs = list(ds)
    params = base_model(model_cfg, cfg.seed)
    adapters = None
    if cfg.uses_lora:
        params.freeze()
        adapters = _new_adapters(params, cfg)
    train = [s for l in langs for s in ds[l].train]
    valid = [s for l in langs for s in ds[l].valid]
    key = "+".join(langs)
    res, _ = fit(params, adapters, train, valid, cfg, Rng(cfg.seed).fork("train", key), _label_names(ds), monitor=ds)
    log_ = RunLog(MULTI, None, cfg.seed, langs, cfg.rank)
    log_.append(_record(0, key, _eval_row(params, adapters, ds, langs), res))
    return RunResult(log_, params, adapters)


def train_mono(dataset: TaskDataset, cfg: RegimeConfig, model_cfg: ModelConfig | None = None) -> tuple[ModelParams, FitResult]:
    """A fresh model trained on one language only."""
    model_cfg = model_cfg or model_config_for({dataset.lang_id: dataset})
    params = base_model(model_cfg, cfg.seed)
    res, _ = fit(
        params, None, dataset.train, dataset.valid, cfg,
        Rng(cfg.seed).fork("train", dataset.lang_id), dataset.label_names,
        monitor={dataset.lang_id: dataset},
    )
    return params, res


def run_mono(datasets, cfg: RegimeConfig, model_cfg: ModelConfig | None = None) -> RunResult:
    """Independent models per language, each cross-evaluated on every language."""
    ds = _datasets_dict(datasets)
    model_cfg = model_cfg or model_config_for(ds)
    langs = list(ds)
    log_ = RunLog(MONO, None, cfg.seed, langs)
    models = {}
    for step, lang in enumerate(langs):
        params, res = train_mono(ds[lang], cfg, model_cfg)
        models[lang] = params
        log_.append(_record(step, lang, _eval_row(params, None, ds, langs), res))
    return RunResult(log_, models=models)


def _sequential(ds, order: LanguageOrder, cfg: RegimeConfig, params: ModelParams, adapters: AdapterSet | None, regime: str) -> RunLog:
    order.check(list(ds))
    langs = list(order.langs)
    names = _label_names(ds)
    log_ = RunLog(regime, order.order_id, cfg.seed, langs, cfg.rank)
    opt = None
    for step, lang in enumerate(langs):
        if cfg.reset_optimizer:
            opt = None
        res, opt = fit(
            params, adapters, ds[lang].train, ds[lang].valid, cfg,
            Rng(cfg.seed).fork("train", lang), names, opt=opt, monitor={l: ds[l] for l in langs},
        )
        log_.append(_record(step, lang, _eval_row(params, adapters, ds, langs), res))
        log.debug("%s order=%s step=%d lang=%s f1=%.3f", regime, order.order_id, step, lang, log_.records[-1].f1[lang])
    return log_


def train_vanilla(datasets, order: LanguageOrder, cfg: RegimeConfig, model_cfg: ModelConfig | None = None) -> RunResult:
    """One fully trainable model updated language by language."""
    ds = _datasets_dict(datasets)
    model_cfg = model_cfg or model_config_for(ds)
    params = base_model(model_cfg, cfg.seed)
    log_ = _sequential(ds, order, cfg, params, None, VANILLA)
    return RunResult(log_, params)


def train_shared_lora(
    datasets, order: LanguageOrder, cfg: RegimeConfig, model_cfg: ModelConfig | None = None, base: ModelParams | None = None
) -> RunResult:
    """One adapter set updated language by language over a frozen base."""
    ds = _datasets_dict(datasets)
    model_cfg = model_cfg or model_config_for(ds)
    base = base if base is not None else frozen_base(model_cfg, cfg.seed)
    if base.trainable_tensors():
        raise ValueError("SHARED LoRA needs a frozen base")
    before = base.digest()
    adapters = _new_adapters(base, cfg)
    log_ = _sequential(ds, order, cfg, base, adapters, SHARED_LORA)
    if base.digest() != before:
        raise RuntimeError("frozen base changed during training")
    return RunResult(log_, base, adapters)


def train_nonshared_lora(
    datasets,
    cfg: RegimeConfig,
    model_cfg: ModelConfig | None = None,
    base: ModelParams | None = None,
    training_order: Sequence[str] | None = None,
    workers: int = 1,
) -> RunResult:
    """A separate adapter set per language over one frozen base.

    Tasks share nothing mutable, so ``training_order`` and ``workers`` only
    change scheduling. Log rows follow the datasets' order; each row is the
    task's adapter evaluated on every language.
    """
    ds = _datasets_dict(datasets)
    model_cfg = model_cfg or model_config_for(ds)
    base = base if base is not None else frozen_base(model_cfg, cfg.seed)
    if base.trainable_tensors():
        raise ValueError("NON-SHARED LoRA needs a frozen base")
    before = base.digest()
    langs = list(ds)
    schedule = list(training_order) if training_order is not None else langs
    if sorted(schedule) != sorted(langs):
        raise ValueError("training_order must be a permutation of the datasets")
    names = _label_names(ds)

    def one(lang):
        adapters = _new_adapters(base, cfg)
        res, _ = fit(base, adapters, ds[lang].train, ds[lang].valid, cfg, Rng(cfg.seed).fork("train", lang), names, monitor=ds)
        return lang, adapters, res

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(one, schedule))
    else:
        done = [one(l) for l in schedule]
    by_lang = {lang: (a, r) for lang, a, r in done}

    log_ = RunLog(NON_SHARED_LORA, None, cfg.seed, langs, cfg.rank)
    for step, lang in enumerate(langs):
        adapters, res = by_lang[lang]
        log_.append(_record(step, lang, _eval_row(base, adapters, ds, langs), res))
    if base.digest() != before:
        raise RuntimeError("frozen base changed during training")
    registry = AdapterRegistry(NON_SHARED, {l: by_lang[l][0] for l in langs})
    return RunResult(log_, base, registry)


def run_regime(datasets, cfg: RegimeConfig, order: LanguageOrder | None = None, model_cfg: ModelConfig | None = None, workers: int = 1) -> RunResult:
    """Dispatch on ``cfg.regime``; sequential regimes need an order."""
    if cfg.regime == MULTI:
        return train_multi(datasets, cfg, model_cfg)
    if cfg.regime == MONO:
        return run_mono(datasets, cfg, model_cfg)
    if cfg.regime == NON_SHARED_LORA:
        return train_nonshared_lora(datasets, cfg, model_cfg, workers=workers)
    if order is None:
        raise ValueError(f"{cfg.regime} needs a language order")
    if cfg.regime == VANILLA:
        return train_vanilla(datasets, order, cfg, model_cfg)
    return train_shared_lora(datasets, order, cfg, model_cfg)


def with_seed(cfg: RegimeConfig, seed: int) -> RegimeConfig:
    return replace(cfg, seed=seed)
