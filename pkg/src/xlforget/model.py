"""Miniature token-tagging encoder.

embedding + positions -> one single-head self-attention block -> feed-forward
-> per-token classifier. Weights use the ``x @ W`` convention (rows are inputs).
LoRA adapters attach to ``W_Q`` and ``W_V``; an adapter's ``B A`` is the update
to ``W.T`` so its shapes follow the (out, in) layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .lora import AdapterRegistry, AdapterSet, init_adapter
from .numeric import Rng, Tape, Tensor, digest_arrays, glorot_uniform, load_tensor, save_tensor

PAD_ID = 0
MASK_VALUE = -1e9
LORA_TARGETS = ("W_Q", "W_V")
HEAD_NAMES = ("W_C", "b_C")
RESIDUAL_OUTPUTS = ("W_O", "W_2")

MULTI = "MULTI"
MONO = "MONO"
VANILLA = "VANILLA"
SHARED_LORA = "SHARED_LORA"
NON_SHARED_LORA = "NON_SHARED_LORA"
REGIMES = (MULTI, MONO, VANILLA, SHARED_LORA, NON_SHARED_LORA)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_labels: int
    hidden_dim: int = 32
    max_seq_len: int = 24
    dropout_rate: float = 0.1
    residual_scale: float = 0.3

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must leave room for the pad id")
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2 (O plus one slot label)")
        if self.hidden_dim < 4:
            raise ValueError("hidden_dim must be >= 4")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.residual_scale <= 0:
            raise ValueError("residual_scale must be positive")


@dataclass(frozen=True)
class LabeledSequence:
    tokens: tuple[int, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.labels)} labels")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    return {
        "E": (cfg.vocab_size, d),
        "P": (cfg.max_seq_len, d),
        "W_Q": (d, d),
        "W_K": (d, d),
        "W_V": (d, d),
        "W_O": (d, d),
        "W_1": (d, 4 * d),
        "W_2": (4 * d, d),
        "W_C": (d, cfg.num_labels),
        "b_C": (cfg.num_labels,),
    }


class ModelParams:
    """Named base tensors with per-tensor frozen flags."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        shapes = param_shapes(config)
        if set(tensors) != set(shapes):
            raise ValueError(f"expected tensors {sorted(shapes)}, got {sorted(tensors)}")
        for name, t in tensors.items():
            if tuple(t.shape) != shapes[name]:
                raise ValueError(f"{name}: shape {t.shape} != {shapes[name]}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def freeze(self) -> "ModelParams":
        for t in self.tensors.values():
            t.trainable = t.requires_grad = False
        return self

    def unfreeze(self) -> "ModelParams":
        for t in self.tensors.values():
            t.trainable = t.requires_grad = True
        return self

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.trainable]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: t.copy() for k, t in self.tensors.items()})

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def digest(self) -> str:
        return digest_arrays((k, self.tensors[k].data) for k in sorted(self.tensors))

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in sorted(self.tensors):
            save_tensor(self.tensors[name], directory, name)
        manifest = {
            "config": asdict(self.config),
            "frozen": {k: self.tensors[k].frozen for k in sorted(self.tensors)},
            "digest": self.digest(),
        }
        if extra:
            manifest.update(extra)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "ModelParams":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        cfg = ModelConfig(**manifest["config"])
        tensors = {
            name: load_tensor(directory, name, trainable=not frozen)
            for name, frozen in manifest["frozen"].items()
        }
        return cls(cfg, tensors)


def init_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    """Glorot-uniform weights, zero classifier bias; everything trainable.

    The two projections that write into the residual stream (W_O, W_2) are
    multiplied by ``cfg.residual_scale`` so token identity survives the block.
    """
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name == "b_C":
            data = np.zeros(shape)
        elif name in ("E", "P"):
            # A lookup row has fan-in 1.
            data = glorot_uniform(rng.fork(name), (1, shape[1]), shape)
        else:
            data = glorot_uniform(rng.fork(name), shape)
            if name in RESIDUAL_OUTPUTS:
                data = data * cfg.residual_scale
        tensors[name] = Tensor(data, name=name, trainable=True)
    return ModelParams(cfg, tensors)


def new_adapter_set(
    params: ModelParams,
    rng: Rng,
    rank: int,
    alpha: float | None = None,
    dropout_rate: float = 0.1,
    classifier_trainable: bool = True,
) -> AdapterSet:
    """Fresh adapters on W_Q/W_V plus a head copied from the base classifier."""
    alpha = float(rank if alpha is None else alpha)
    d = params.config.hidden_dim
    adapters = {
        t: init_adapter(rng.fork(t), t, rank, alpha, (d, d), dropout_rate) for t in LORA_TARGETS
    }
    head = {}
    if classifier_trainable:
        head = {n: params[n].copy(name=f"head.{n}", trainable=True) for n in HEAD_NAMES}
    return AdapterSet(adapters, head)


# -- batching ---------------------------------------------------------------


def encode_batch(batch: Sequence[LabeledSequence], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad to the batch max length; returns (ids, labels, mask)."""
    if not batch:
        raise ValueError("empty batch")
    lengths = [len(s.tokens) for s in batch]
    if min(lengths) == 0:
        raise ValueError("empty sequence in batch")
    L = max(lengths)
    if L > cfg.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    ids = np.full((len(batch), L), PAD_ID, dtype=np.int64)
    labels = np.zeros((len(batch), L), dtype=np.int64)
    mask = np.zeros((len(batch), L), dtype=bool)
    for i, s in enumerate(batch):
        n = len(s.tokens)
        ids[i, :n] = s.tokens
        labels[i, :n] = s.labels
        mask[i, :n] = True
    bad = ids[mask]
    if bad.size and (bad.max() >= cfg.vocab_size or bad.min() < 0):
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    return ids, labels, mask


def _linear(tape: Tape, x: Tensor, W: Tensor, adapters: AdapterSet | None, name: str, train_mode: bool, rng: Rng | None) -> Tensor:
    out = tape.matmul(x, W)
    if adapters is None or name not in adapters.adapters:
        return out
    ad = adapters.adapters[name]
    xin = tape.dropout(x, ad.dropout_rate, rng.fork("lora", name) if rng else None) if train_mode else x
    low = tape.matmul(tape.matmul(xin, tape.transpose(ad.A)), tape.transpose(ad.B))
    return tape.add(out, tape.scale(low, ad.scale))


def encode(
    params: ModelParams,
    adapters: AdapterSet | None,
    ids: np.ndarray,
    mask: np.ndarray,
    train_mode: bool = False,
    rng: Rng | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Final hidden states [batch, seq_len, d] for padded ids."""
    cfg = params.config
    tape = Tape() if tape is None else tape
    L = ids.shape[1]
    d = cfg.hidden_dim
    rate = cfg.dropout_rate if train_mode else 0.0
    if train_mode and rate > 0 and rng is None:
        raise ValueError("train_mode with dropout needs an rng")

    def drop(x, tag):
        return tape.dropout(x, rate, rng.fork(tag) if rng else None) if rate > 0 else x

    x = tape.add(tape.embedding(params["E"], ids), tape.embedding(params["P"], np.arange(L)))
    x = drop(x, "emb")

    a = tape.layer_norm(x)
    q = _linear(tape, a, params["W_Q"], adapters, "W_Q", train_mode, rng)
    k = tape.matmul(a, params["W_K"])
    v = _linear(tape, a, params["W_V"], adapters, "W_V", train_mode, rng)
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(d))
    key_mask = np.where(mask, 0.0, MASK_VALUE)[:, None, :]
    att = tape.softmax(scores, key_mask)
    o = tape.matmul(tape.matmul(att, v), params["W_O"])
    x = tape.add(x, drop(o, "attn"))

    f = tape.matmul(tape.gelu(tape.matmul(tape.layer_norm(x), params["W_1"])), params["W_2"])
    x = tape.add(x, drop(f, "ffn"))
    return tape.layer_norm(x)


def forward(
    params: ModelParams,
    adapters: AdapterSet | None,
    batch: Sequence[LabeledSequence],
    train_mode: bool = False,
    rng: Rng | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Per-token logits of shape [batch, seq_len, num_labels].

    ``rng`` drives dropout and must be fresh for every training step.
    """
    ids, _, mask = encode_batch(batch, params.config)
    tape = Tape() if tape is None else tape
    h = encode(params, adapters, ids, mask, train_mode, rng, tape)
    head = adapters.head if adapters is not None and adapters.head else {}
    W_C = head.get("W_C", params["W_C"])
    b_C = head.get("b_C", params["b_C"])
    return tape.add(tape.matmul(h, W_C), b_C)


def loss(logits: Tensor, batch: Sequence[LabeledSequence]) -> Tensor:
    """Mean token cross-entropy over non-pad positions."""
    B = len(batch)
    if logits.data.ndim != 3 or logits.shape[0] != B:
        raise ValueError(f"logits shape {logits.shape} does not match batch of {B}")
    L = logits.shape[1]
    labels = np.zeros((B, L), dtype=np.int64)
    weights = np.zeros((B, L))
    for i, s in enumerate(batch):
        n = len(s.labels)
        if n > L:
            raise ValueError("sequence longer than logits")
        labels[i, :n] = s.labels
        weights[i, :n] = 1.0
    if weights.sum() == 0:
        raise ValueError("all positions are padding")
    tape = Tape() if logits.tape is None else logits.tape
    return tape.softmax_cross_entropy(logits, labels, weights)


def argmax_labels(logits: np.ndarray, lengths: Sequence[int]) -> list[list[int]]:
    """Per-position argmax; np.argmax returns the lowest index on ties."""
    best = np.argmax(logits, axis=-1)
    return [best[i, :n].tolist() for i, n in enumerate(lengths)]


def predict(
    params: ModelParams,
    adapters: AdapterSet | None,
    batch: Sequence[LabeledSequence],
    batch_size: int = 64,
) -> list[list[int]]:
    out: list[list[int]] = []
    for start in range(0, len(batch), batch_size):
        chunk = batch[start : start + batch_size]
        logits = forward(params, adapters, chunk, train_mode=False)
        out.extend(argmax_labels(logits.data, [len(s.tokens) for s in chunk]))
    return out


def count_trainable(
    params: ModelParams,
    adapters: AdapterSet | AdapterRegistry | None,
    regime: str,
    num_tasks: int = 1,
) -> int:
    """Scalars that receive gradients under ``regime``.

    MONO trains ``num_tasks`` independent full models. LoRA regimes count
    adapter factors plus any trainable head; a NON_SHARED registry sums its sets.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if regime == MONO:
        return num_tasks * params.num_params
    if adapters is None:
        if regime in (SHARED_LORA, NON_SHARED_LORA):
            raise ValueError(f"{regime} needs adapters")
        return params.num_params
    if isinstance(adapters, AdapterRegistry):
        return adapters.num_trainable()
    return adapters.num_trainable()
