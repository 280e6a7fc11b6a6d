"""Low-rank adapters: ``h = W0 x + (alpha / r) * B A x`` with ``B`` initialised to zero."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import Rng, Tape, Tensor, load_tensor, save_tensor

SHARED = "SHARED"
NON_SHARED = "NON_SHARED"

INIT_STD = 0.02


@dataclass
class LoraAdapter:
    """Factors for one base matrix ``W0`` of shape (d, k): ``A`` is (r, k), ``B`` is (d, r)."""

    target: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    dropout_rate: float = 0.0

    def __post_init__(self):
        r, k = self.A.shape
        d, r2 = self.B.shape
        if r != self.rank or r2 != self.rank:
            raise ValueError(f"adapter {self.target}: A {self.A.shape} / B {self.B.shape} disagree with rank {self.rank}")
        if self.rank < 1 or self.rank > min(d, k):
            raise ValueError(f"adapter {self.target}: rank {self.rank} outside [1, min({d}, {k})]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def tensors(self) -> list[Tensor]:
        return [self.A, self.B]


def _check_base(W0: Tensor, adapter: LoraAdapter) -> None:
    if tuple(W0.shape) != adapter.shape:
        raise ValueError(f"base {W0.shape} does not match adapter {adapter.target} of shape {adapter.shape}")


def lora_delta(adapter: LoraAdapter) -> Tensor:
    """Unscaled ``B @ A``."""
    if adapter.B.shape[1] != adapter.A.shape[0]:
        raise ValueError(f"B {adapter.B.shape} and A {adapter.A.shape} do not compose")
    return Tensor(adapter.B.data @ adapter.A.data, name=f"{adapter.target}.delta")


def lora_forward(
    W0: Tensor,
    adapter: LoraAdapter,
    x: Tensor,
    train_mode: bool = False,
    rng: Rng | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Adapted output for a single input vector ``x`` of length k."""
    _check_base(W0, adapter)
    x = x if isinstance(x, Tensor) else Tensor(x)
    k = W0.shape[1]
    if x.shape != (k,):
        raise ValueError(f"input shape {x.shape} does not match base columns {k}")
    tape = Tape() if tape is None else tape
    col = tape.reshape(x, (k, 1))
    base = tape.matmul(W0, col)
    xin = tape.dropout(col, adapter.dropout_rate, rng) if train_mode else col
    low = tape.matmul(adapter.B, tape.matmul(adapter.A, xin))
    h = tape.add(base, tape.scale(low, adapter.scale))
    return tape.reshape(h, (W0.shape[0],))


def merge(W0: Tensor, adapter: LoraAdapter) -> Tensor:
    """Fold the scaled delta into the base weight: ``W0 + (alpha / r) B A``."""
    _check_base(W0, adapter)
    return Tensor(W0.data + adapter.scale * (adapter.B.data @ adapter.A.data), name=W0.name)


def unmerge(W: Tensor, adapter: LoraAdapter) -> Tensor:
    _check_base(W, adapter)
    return Tensor(W.data - adapter.scale * (adapter.B.data @ adapter.A.data), name=W.name)


def init_adapter(
    rng: Rng,
    target: str,
    r: int,
    alpha: float,
    shape: tuple[int, int],
    dropout_rate: float = 0.0,
    prefix: str = "lora",
) -> LoraAdapter:
    """Gaussian ``A`` (std 0.02) and zero ``B``, so a fresh adapter is a no-op."""
    d, k = shape
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    if r > min(d, k):
        raise ValueError(f"rank {r} exceeds min({d}, {k})")
    A = Tensor(rng.normal(INIT_STD, (r, k)), name=f"{prefix}.{target}.A", trainable=True)
    B = Tensor(np.zeros((d, r)), name=f"{prefix}.{target}.B", trainable=True)
    return LoraAdapter(target, A, B, r, float(alpha), dropout_rate)


@dataclass
class AdapterSet:
    """Adapters keyed by target matrix, plus an optional task head.

    The head holds trainable copies of the classifier so the frozen base stays
    untouched while labels are still learnable.
    """

    adapters: dict[str, LoraAdapter]
    head: dict[str, Tensor] = field(default_factory=dict)

    def tensors(self) -> list[Tensor]:
        out = [t for a in self.adapters.values() for t in a.tensors()]
        out.extend(self.head.values())
        return out

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in self.tensors() if t.trainable]

    @property
    def adapter_params(self) -> int:
        return sum(a.num_params for a in self.adapters.values())

    @property
    def head_params(self) -> int:
        return sum(t.size for t in self.head.values())

    def num_trainable(self) -> int:
        return sum(t.size for t in self.trainable_tensors())

    def copy(self) -> "AdapterSet":
        return AdapterSet(
            {
                k: LoraAdapter(a.target, a.A.copy(), a.B.copy(), a.rank, a.alpha, a.dropout_rate)
                for k, a in self.adapters.items()
            },
            {k: t.copy() for k, t in self.head.items()},
        )

    def save(self, directory: str | Path, task_id: str | None = None, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"task_id": task_id, "adapters": [], "head": sorted(self.head)}
        for target in sorted(self.adapters):
            a = self.adapters[target]
            save_tensor(a.A, directory, f"{target}.A")
            save_tensor(a.B, directory, f"{target}.B")
            manifest["adapters"].append(
                {"target": target, "rank": a.rank, "alpha": a.alpha, "dropout_rate": a.dropout_rate}
            )
        for name in sorted(self.head):
            save_tensor(self.head[name], directory, f"head.{name}")
        manifest["trainable"] = {t.name: t.trainable for t in self.tensors()}
        if extra:
            manifest.update(extra)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, prefix: str = "lora") -> "AdapterSet":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        adapters = {}
        for entry in manifest["adapters"]:
            t = entry["target"]
            A = load_tensor(directory, f"{t}.A", trainable=True)
            B = load_tensor(directory, f"{t}.B", trainable=True)
            A.name, B.name = f"{prefix}.{t}.A", f"{prefix}.{t}.B"
            adapters[t] = LoraAdapter(t, A, B, entry["rank"], entry["alpha"], entry["dropout_rate"])
        head = {}
        for name in manifest["head"]:
            h = load_tensor(directory, f"head.{name}", trainable=True)
            h.name = f"head.{name}"
            head[name] = h
        return cls(adapters, head)


class AdapterRegistry:
    """Maps task ids to adapter sets: one set for every task (SHARED) or one per task."""

    def __init__(self, mode: str, sets: dict[str, AdapterSet] | None = None, shared: AdapterSet | None = None):
        if mode not in (SHARED, NON_SHARED):
            raise ValueError(f"unknown registry mode {mode!r}")
        self.mode = mode
        self._shared = shared
        self._sets: dict[str, AdapterSet] = dict(sets or {})
        if mode == SHARED and (shared is None or self._sets):
            raise ValueError("SHARED registry holds exactly one adapter set")
        if mode == NON_SHARED:
            if shared is not None:
                raise ValueError("NON_SHARED registry has no shared set")
            seen: set[int] = set()
            for s in self._sets.values():
                ids = {id(t) for t in s.tensors()}
                if ids & seen:
                    raise ValueError("NON_SHARED adapter sets must not share tensors")
                seen |= ids

    def get(self, task_id: str) -> AdapterSet:
        if self.mode == SHARED:
            return self._shared  # type: ignore[return-value]
        return self._sets[task_id]

    def sets(self) -> list[AdapterSet]:
        return [self._shared] if self.mode == SHARED else list(self._sets.values())  # type: ignore[list-item]

    def tasks(self) -> list[str]:
        return list(self._sets)

    def __len__(self) -> int:
        return 1 if self.mode == SHARED else len(self._sets)

    def num_trainable(self) -> int:
        return sum(s.num_trainable() for s in self.sets())

    def adapter_params(self) -> int:
        return sum(s.adapter_params for s in self.sets())
