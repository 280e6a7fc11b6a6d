"""Finite-difference gradient cases shared by the unit and acceptance suites."""

import zlib

import numpy as np

from xlforget.model import LabeledSequence, ModelConfig, forward, init_params, loss
from xlforget.numeric import Rng, Tape, Tensor, backward, max_relative_error, numerical_grad

OPS = (
    "matmul", "transpose", "reshape", "add", "sub", "mul", "scale", "sum",
    "gelu", "tanh", "layer_norm", "softmax", "embedding", "dropout", "xent",
)


def _param(r, *shape, name):
    return Tensor(r.normal(size=shape), name=name, trainable=True)


def weighted_sum(tape, x, w):
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    return tape.sum(tape.mul(x, w))


def op_case(op: str):
    """(build(tape) -> scalar, tensors to check) for one primitive."""
    r = np.random.default_rng(zlib.crc32(op.encode()))
    a = _param(r, 2, 3, 4, name="a")
    b = _param(r, 2, 4, 3, name="b")
    c = _param(r, 2, 3, 4, name="c")
    bias = _param(r, 4, name="bias")
    w = r.normal(size=(2, 3, 4))
    mask = np.where(r.random((2, 3, 4)) < 0.2, -1e9, 0.0)
    mask[..., 0] = 0.0
    ids = r.integers(0, 5, (2, 3))
    table = _param(r, 5, 4, name="table")
    targets = r.integers(0, 4, 6)
    weights = r.random(6)
    builds = {
        "matmul": (lambda t: weighted_sum(t, t.matmul(t.matmul(a, b), a), w), [a, b]),
        "transpose": (lambda t: weighted_sum(t, t.transpose(b), w), [b]),
        "reshape": (lambda t: weighted_sum(t, t.reshape(b, (2, 3, 4)), w), [b]),
        "add": (lambda t: weighted_sum(t, t.add(a, bias), w), [a, bias]),
        "sub": (lambda t: weighted_sum(t, t.sub(a, c), w), [a, c]),
        "mul": (lambda t: weighted_sum(t, t.mul(a, c), w), [a, c]),
        "scale": (lambda t: weighted_sum(t, t.scale(a, -2.5), w), [a]),
        "sum": (lambda t: t.sum(t.mul(a, a)), [a]),
        "gelu": (lambda t: weighted_sum(t, t.gelu(a), w), [a]),
        "tanh": (lambda t: weighted_sum(t, t.tanh(a), w), [a]),
        "layer_norm": (lambda t: weighted_sum(t, t.layer_norm(a), w), [a]),
        "softmax": (lambda t: weighted_sum(t, t.softmax(a, mask), w), [a]),
        "embedding": (lambda t: weighted_sum(t, t.embedding(table, ids), w[:, :3, :4]), [table]),
        "dropout": (lambda t: weighted_sum(t, t.dropout(a, 0.4, Rng(3).fork("fixed")), w), [a]),
        "xent": (lambda t: t.softmax_cross_entropy(t.reshape(a, (6, 4)), targets, weights), [a]),
    }
    return builds[op]


def max_error(build, tensors) -> float:
    """Largest relative error between tape gradients and central differences."""
    grads = backward(build(Tape()))
    return max(
        max_relative_error(grads[p], numerical_grad(lambda: build(Tape()).item(), p)) for p in tensors
    )


def op_error(op: str) -> float:
    return max_error(*op_case(op))


def model_error(hidden_dim: int = 8) -> float:
    """Full model loss (dropout on, fixed mask stream) against finite differences."""
    cfg = ModelConfig(vocab_size=12, num_labels=5, hidden_dim=hidden_dim, max_seq_len=6, dropout_rate=0.2)
    params = init_params(cfg, Rng(1))
    batch = [LabeledSequence((2, 3, 4, 5), (0, 1, 2, 0)), LabeledSequence((6, 7), (3, 4))]

    def build(tape):
        return loss(forward(params, None, batch, train_mode=True, rng=Rng(9).fork("drop"), tape=tape), batch)

    return max_error(build, list(params.tensors.values()))
