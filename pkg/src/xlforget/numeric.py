"""Dense float64 tensors, a reverse-mode gradient tape, Adam and seeded RNG streams.

Every differentiable primitive lives on :class:`Tape`. An op is recorded only
when one of its operands requires a gradient, so evaluation passes over frozen
weights leave the tape empty.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    """A named float64 array with a trainable flag.

    Leaf tensors are parameters or constants. Tensors produced by a tape op keep
    a reference to that tape in ``tape``.
    """

    __slots__ = ("data", "name", "trainable", "requires_grad", "tape")

    def __init__(self, data, name: str | None = None, trainable: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"tensor {name!r} has non-finite entries")
        self.data = arr
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def frozen(self) -> bool:
        return not self.trainable

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def copy(self, name: str | None = None, trainable: bool | None = None) -> "Tensor":
        return Tensor(
            self.data.copy(),
            name=self.name if name is None else name,
            trainable=self.trainable if trainable is None else trainable,
        )

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"Tensor(name={self.name!r}, shape={self.shape}, {flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __len__(self) -> int:
        return len(self.records)

    def __bool__(self) -> bool:
        # An empty tape is still a tape; never let ``tape or Tape()`` replace it.
        return True

    # -- recording -------------------------------------------------------

    def _emit(self, op, value, inputs, backward) -> Tensor:
        out = Tensor.__new__(Tensor)
        if not np.isfinite(value).all():
            raise FloatingPointError(f"{op} produced non-finite values")
        out.data = value
        out.name = None
        out.trainable = False
        out.tape = self
        out.requires_grad = any(t.requires_grad for t in inputs)
        if out.requires_grad:
            self.records.append(_Record(op, out, inputs, backward))
            self._outputs.add(id(out))
        return out

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    # -- primitives ------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        av, bv = a.data, b.data

        def back(g):
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
            return ga, gb

        return self._emit("matmul", av @ bv, (a, b), back)

    def transpose(self, a) -> Tensor:
        a = _as_tensor(a)
        return self._emit(
            "transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
        )

    def reshape(self, a, shape: Sequence[int]) -> Tensor:
        a = _as_tensor(a)
        old = a.shape
        return self._emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def add(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._emit(
            "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
        )

    def sub(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._emit(
            "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
        )

    def mul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        av, bv = a.data, b.data
        return self._emit(
            "mul",
            av * bv,
            (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def scale(self, a, c: float) -> Tensor:
        a = _as_tensor(a)
        return self._emit("scale", a.data * c, (a,), lambda g: (g * c,))

    def sum(self, a) -> Tensor:
        a = _as_tensor(a)
        shape = a.shape
        return self._emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def gelu(self, a) -> Tensor:
        """tanh-approximated GELU."""
        a = _as_tensor(a)
        x = a.data
        c = math.sqrt(2.0 / math.pi)
        x2 = x * x
        inner = c * (x + 0.044715 * x2 * x)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return self._emit("gelu", out, (a,), back)

    def tanh(self, a) -> Tensor:
        a = _as_tensor(a)
        t = np.tanh(a.data)
        return self._emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))

    def layer_norm(self, a, eps: float = 1e-5) -> Tensor:
        """Parameter-free normalization over the last axis."""
        a = _as_tensor(a)
        x = a.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        y = xc * inv

        def back(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - y * gy),)

        return self._emit("layer_norm", y, (a,), back)

    def softmax(self, a, additive_mask: np.ndarray | None = None) -> Tensor:
        """Softmax over the last axis; ``additive_mask`` is a constant added first."""
        a = _as_tensor(a)
        z = a.data if additive_mask is None else a.data + additive_mask
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._emit("softmax", p, (a,), back)

    def embedding(self, table, ids: np.ndarray) -> Tensor:
        """Row gather ``table[ids]``; gradients scatter-add back into the table."""
        table = _as_tensor(table)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
        rows = table.shape[0]

        def back(g):
            gt = np.zeros((rows,) + g.shape[ids.ndim:], dtype=DTYPE)
            np.add.at(gt, ids, g)
            return (gt,)

        return self._emit("embedding", table.data[ids], (table,), back)

    def dropout(self, a, rate: float, rng: "Rng | None") -> Tensor:
        """Inverted dropout; the keep-mask is a constant of the recorded op."""
        a = _as_tensor(a)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if rate == 0.0:
            return a
        if rng is None:
            raise ValueError("dropout with rate > 0 needs an rng")
        mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
        return self._emit("dropout", a.data * mask, (a,), lambda g: (g * mask,))

    def softmax_cross_entropy(self, logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
        """Weighted mean of per-row ``-log softmax(logits)[target]`` over the last axis."""
        logits = _as_tensor(logits)
        x = logits.data
        n_cls = x.shape[-1]
        flat = x.reshape(-1, n_cls)
        t = np.asarray(targets, dtype=np.int64).reshape(-1)
        if t.shape[0] != flat.shape[0]:
            raise ValueError(f"targets length {t.shape[0]} != rows {flat.shape[0]}")
        w = np.ones(t.shape[0]) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(-1)
        total = w.sum()
        if total <= 0:
            raise ValueError("cross-entropy needs at least one weighted position")
        if (t[w > 0] < 0).any() or (t[w > 0] >= n_cls).any():
            raise IndexError("target label out of range")
        tc = np.clip(t, 0, n_cls - 1)
        z = flat - flat.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        nll = lse - z[np.arange(len(tc)), tc]
        loss = float((w * nll).sum() / total)
        shape = x.shape

        def back(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(len(tc)), tc] -= 1.0
            return ((g * p * (w / total)[:, None]).reshape(shape),)

        return self._emit("softmax_cross_entropy", np.array(loss), (logits,), back)


def backward(loss: Tensor, tape: Tape | None = None, wrt: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable leaf reached through the tape.

    Tensors in ``wrt`` that are trainable but unreached get a zero gradient.
    Frozen tensors never appear in the result.
    """
    tape = loss.tape if tape is None else tape
    if tape is None or not tape.owns(loss):
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.trainable:
                leaves[id(inp)] = inp
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {leaves[k]: grads[k] for k in leaves}
    for p in wrt:
        if p.trainable and p not in out:
            out[p] = np.zeros_like(p.data)
    return out


def numerical_grad(f: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` with respect to ``param.data`` (in place)."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# -- randomness -------------------------------------------------------------


class Rng:
    """Counter-based (Philox) stream keyed by a seed and a purpose path.

    ``Rng(7).fork("init")`` and ``Rng(7).fork("dropout")`` are independent, so
    consuming one never shifts the other.
    """

    ALGORITHM = "philox4x64-10"

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.sha256(json.dumps([self.seed, list(self.path)]).encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._bitgen = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._bitgen)

    def fork(self, *purpose) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(p) for p in purpose))

    @property
    def position(self) -> int:
        st = self._bitgen.state["state"]
        counter = st["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(counter)))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, std: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, std, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))


def glorot_uniform(rng: Rng, fans: tuple[int, int], shape: tuple[int, ...] | None = None) -> np.ndarray:
    """U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fans[0] + fans[1]))
    return rng.uniform(-limit, limit, fans if shape is None else shape)


# -- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments for a fixed set of named trainable tensors."""

    params: dict[str, Tensor]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Iterable[Tensor], learning_rate: float, **kw) -> "OptimizerState":
        reg: dict[str, Tensor] = {}
        for p in params:
            if not p.trainable:
                raise ValueError(f"cannot register frozen tensor {p.name!r}")
            if p.name is None or p.name in reg:
                raise ValueError(f"optimizer needs unique tensor names, got {p.name!r}")
            reg[p.name] = p
        st = cls(params=reg, learning_rate=learning_rate, **kw)
        st.m = {k: np.zeros_like(t.data) for k, t in reg.items()}
        st.v = {k: np.zeros_like(t.data) for k, t in reg.items()}
        return st

    def state_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step": self.step,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, sd: dict) -> None:
        for key in ("learning_rate", "beta1", "beta2", "epsilon", "step"):
            setattr(self, key, sd[key])
        self.m = {k: np.array(v, dtype=DTYPE).reshape(self.params[k].shape) for k, v in sd["m"].items()}
        self.v = {k: np.array(v, dtype=DTYPE).reshape(self.params[k].shape) for k, v in sd["v"].items()}


def adam_step(state: OptimizerState, grads: dict) -> OptimizerState:
    """One bias-corrected Adam update applied in place to the registered tensors."""
    resolved = []
    for key, g in grads.items():
        name = key.name if isinstance(key, Tensor) else key
        p = state.params.get(name)
        if p is None or (isinstance(key, Tensor) and key is not p):
            raise KeyError(f"gradient for unregistered tensor {name!r}")
        if p.frozen:
            raise ValueError(f"tensor {name!r} is frozen")
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape} for {name!r}")
        resolved.append((name, p, np.asarray(g, dtype=DTYPE)))

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p, g in resolved:
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


# -- serialization ----------------------------------------------------------


def save_tensor(t: Tensor, directory: str | Path, name: str | None = None) -> Path:
    """Write ``<name>.f64`` (little-endian float64) plus a ``<name>.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or t.name
    if not name:
        raise ValueError("tensor needs a name to be saved")
    path = directory / f"{name}.f64"
    path.write_bytes(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    sidecar = {"name": name, "shape": list(t.shape), "dtype": "float64-le"}
    (directory / f"{name}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    return path


def load_tensor(directory: str | Path, name: str, trainable: bool = False) -> Tensor:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}.json").read_text())
    raw = np.frombuffer((directory / f"{name}.f64").read_bytes(), dtype="<f8")
    shape = tuple(meta["shape"])
    if raw.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"tensor {name!r}: data length {raw.size} does not match shape {shape}")
    return Tensor(raw.reshape(shape).astype(DTYPE), name=meta["name"], trainable=trainable)


def digest_arrays(arrays: Iterable[tuple[str, np.ndarray]]) -> str:
    h = hashlib.sha256()
    for name, arr in arrays:
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
