"""Span F1 and cross-lingual transfer metrics over evaluation matrices.

Conventions used throughout:

* ``R[i][j]`` is the test score on task j (column, in training order) after
  training step i (row). Indices are 0-based.
* ``P_s`` is the mean of ``R[s][0..s]``: the average score over tasks seen
  through step s, measured with the model at step s.
* A language trained at position i of an order has performance-shift sample
  ``P_{i-1} - P_i`` (positive = degradation), MFT_h sample ``P_{i+h} - P_{i-1}``
  and MBT_h sample ``P_i - P_{i-h-1}``. Positions without the needed indices
  are excluded and reported.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tasks import LOW, MID, HIGH, UNASSIGNED, bio_spans

EQ_VARIANT = "aggregate: per-language mean over orders of P-difference samples, then mean over languages"
RECEIVER_VARIANT = "receiver: mean over orders of R[i+h][l] - R[i+h-1][l]"
DONOR_VARIANT = "donor: mean over orders of P[i+h] - P[i+h-1]"


def _as_label_strings(seqs, label_names):
    out = []
    for seq in seqs:
        if label_names is not None and seq and not isinstance(seq[0], str):
            out.append([label_names[int(x)] for x in seq])
        else:
            out.append(list(seq))
    return out


def f1(predictions, gold, label_names: Sequence[str] | None = None) -> float:
    """Micro span F1: a predicted span counts only with exact type and boundaries.

    Returns 1.0 when neither side has any span.
    """
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predicted sequences vs {len(gold)} gold")
    preds = _as_label_strings(predictions, label_names)
    golds = _as_label_strings(gold, label_names)
    tp = n_pred = n_gold = 0
    for i, (p, g) in enumerate(zip(preds, golds)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: {len(p)} predicted labels vs {len(g)} gold")
        ps, gs = set(bio_spans(p)), set(bio_spans(g))
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gold
    return 2 * precision * recall / (precision + recall)


# -- R matrix -----------------------------------------------------------------


@dataclass
class RMatrix:
    langs: list[str]
    values: np.ndarray
    order_id: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        T = len(self.langs)
        if self.values.shape != (T, T):
            raise ValueError(f"R must be {T}x{T}, got {self.values.shape}")
        if np.isnan(self.values).any():
            raise ValueError("R has unpopulated entries")

    @property
    def T(self) -> int:
        return len(self.langs)

    def running_average(self) -> np.ndarray:
        """P_s for s = 0..T-1."""
        return np.array([self.values[s, : s + 1].mean() for s in range(self.T)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step/lang"] + self.langs)
        for lang, row in zip(self.langs, self.values):
            w.writerow([lang] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, order_id: str | None = None) -> "RMatrix":
        labels, rows, cols = read_matrix_csv(text)
        if labels != cols:
            raise ValueError("R CSV row labels must match column labels")
        return cls(cols, rows, order_id)


def read_matrix_csv(text: str) -> tuple[list[str], np.ndarray, list[str]]:
    """Labelled matrix CSV: header row of column labels, first column row labels."""
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise ValueError("matrix CSV needs a header and at least one row")
    cols = rows[0][1:]
    labels, values = [], []
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != len(cols) + 1:
            raise ValueError(f"ragged CSV: line {n} has {len(r) - 1} values, expected {len(cols)}")
        labels.append(r[0])
        values.append([float(x) for x in r[1:]])
    return labels, np.array(values, dtype=np.float64), cols


def _require_T2(R: RMatrix) -> None:
    if R.T < 2:
        raise ValueError("transfer metrics need T >= 2")


def cft(R: RMatrix) -> float:
    """Mean over rows 0..T-2 of the average score on not-yet-trained tasks."""
    _require_T2(R)
    T = R.T
    return float(np.mean([R.values[i, i + 1 :].mean() for i in range(T - 1)]))


def cbt(R: RMatrix) -> float:
    """Mean over tasks 0..T-2 of (final-row score - score right after training it)."""
    _require_T2(R)
    T = R.T
    return float(np.mean([R.values[T - 1, i] - R.values[i, i] for i in range(T - 1)]))


# -- P-based metrics over several orders -------------------------------------


@dataclass
class HopResult:
    hop: int
    value: float | None
    per_language: dict[str, float]
    samples: dict[str, list[float]]
    excluded: list[str]


def _positions(R: RMatrix) -> dict[str, int]:
    return {lang: i for i, lang in enumerate(R.langs)}


def _collect(matrices: Sequence[RMatrix], sample_fn) -> tuple[dict[str, list[float]], list[str]]:
    """Apply ``sample_fn(P, R, i, lang) -> float | None`` to every language of every order."""
    langs = sorted({l for R in matrices for l in R.langs})
    samples: dict[str, list[float]] = {l: [] for l in langs}
    for R in matrices:
        P = R.running_average()
        for lang, i in _positions(R).items():
            s = sample_fn(P, R, i, lang)
            if s is not None:
                samples[lang].append(s)
    excluded = [l for l in langs if not samples[l]]
    return {l: v for l, v in samples.items() if v}, excluded


def _check_language_sets(matrices: Sequence[RMatrix]) -> None:
    if not matrices:
        raise ValueError("need at least one evaluation matrix")
    ref = set(matrices[0].langs)
    for R in matrices[1:]:
        if set(R.langs) != ref:
            missing = sorted(ref.symmetric_difference(R.langs))
            raise ValueError(f"languages absent from some order: {missing}")


def _hop(h: int, samples: dict[str, list[float]], excluded: list[str], what: str) -> HopResult:
    if not samples:
        raise ValueError(f"{what}: no language has valid indices at hop {h}")
    per_lang = {l: float(np.mean(v)) for l, v in samples.items()}
    value = float(np.mean(list(per_lang.values())))
    return HopResult(h, value, per_lang, samples, excluded)


def performance_shift(matrices: Sequence[RMatrix]) -> HopResult:
    """Per-language average of ``P_{i-1} - P_i`` (positive = the language degraded the average)."""
    _check_language_sets(matrices)
    samples, excluded = _collect(matrices, lambda P, R, i, l: P[i - 1] - P[i] if i >= 1 else None)
    return _hop(0, samples, excluded, "performance_shift")


def mft(matrices: Sequence[RMatrix], h: int) -> HopResult:
    if h < 1:
        raise ValueError("MFT hop must be >= 1")
    _check_language_sets(matrices)

    def sample(P, R, i, l):
        return P[i + h] - P[i - 1] if i >= 1 and i + h < R.T else None

    samples, excluded = _collect(matrices, sample)
    return _hop(h, samples, excluded, "MFT")


def mbt(matrices: Sequence[RMatrix], h: int) -> HopResult:
    if h < 0:
        raise ValueError("MBT hop must be >= 0")
    _check_language_sets(matrices)
    samples, excluded = _collect(matrices, lambda P, R, i, l: P[i] - P[i - h - 1] if i - h - 1 >= 0 else None)
    return _hop(h, samples, excluded, "MBT")


def receiver_mbt(matrices: Sequence[RMatrix], h: int) -> HopResult:
    """Per-language change in the language's own score caused by the step h after it."""
    _check_language_sets(matrices)
    col = {id(R): _positions(R) for R in matrices}

    def sample(P, R, i, l):
        s = i + h
        return R.values[s, col[id(R)][l]] - R.values[s - 1, col[id(R)][l]] if s - 1 >= 0 and s < R.T else None

    samples, excluded = _collect(matrices, sample)
    return _hop(h, samples, excluded, "receiver MBT")


def donor_mft(matrices: Sequence[RMatrix], h: int) -> HopResult:
    """Per-language change in the running average at offset h after the language was trained."""
    _check_language_sets(matrices)

    def sample(P, R, i, l):
        s = i + h
        return P[s] - P[s - 1] if s - 1 >= 0 and s < R.T else None

    samples, excluded = _collect(matrices, sample)
    return _hop(h, samples, excluded, "donor MFT")


def group_by_vitality(scores: Mapping[str, float], vitality: Mapping[str, str]) -> dict[str, float | None]:
    """Arithmetic mean per LOW/MID/HIGH group; unmapped languages go to UNASSIGNED."""
    groups: dict[str, list[float]] = {LOW: [], MID: [], HIGH: [], UNASSIGNED: []}
    for lang, v in scores.items():
        groups[vitality.get(lang, UNASSIGNED)].append(v)
    return {g: (float(np.mean(v)) if v else None) for g, v in groups.items()}


# -- report -------------------------------------------------------------------


@dataclass
class TransferReport:
    regime: str
    N: int
    H: int
    cft: float | None
    cbt: float | None
    cft_per_order: list[float]
    cbt_per_order: list[float]
    p_avg: dict[str, float]
    mft: dict[int, dict] = field(default_factory=dict)
    mbt: dict[int, dict] = field(default_factory=dict)
    receiver_mbt: dict[int, dict] = field(default_factory=dict)
    donor_mft: dict[int, dict] = field(default_factory=dict)
    variants: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _hop_dict(fn, matrices, h) -> dict:
    try:
        r = fn(matrices, h)
    except ValueError as exc:
        return {"value": None, "per_language": {}, "excluded": sorted({l for R in matrices for l in R.langs}), "note": str(exc)}
    return {"value": r.value, "per_language": r.per_language, "excluded": r.excluded}


def transfer_report(matrices: Sequence[RMatrix], H: int = 9, regime: str = "") -> TransferReport:
    _check_language_sets(matrices)
    T = matrices[0].T
    cfts = [cft(R) for R in matrices] if T >= 2 else []
    cbts = [cbt(R) for R in matrices] if T >= 2 else []
    shift = performance_shift(matrices) if T >= 2 else None
    rep = TransferReport(
        regime=regime,
        N=len(matrices),
        H=H,
        cft=float(np.mean(cfts)) if cfts else None,
        cbt=float(np.mean(cbts)) if cbts else None,
        cft_per_order=cfts,
        cbt_per_order=cbts,
        p_avg=shift.per_language if shift else {},
        variants={
            "mft": EQ_VARIANT,
            "mbt": EQ_VARIANT,
            "receiver_mbt": RECEIVER_VARIANT,
            "donor_mft": DONOR_VARIANT,
            "p_avg": "mean over orders of P[i-1] - P[i]; positive means degradation",
            "index_base": "0-based; CBT uses the final row T-1",
        },
    )
    for h in range(0, H + 1):
        rep.mbt[h] = _hop_dict(mbt, matrices, h)
        rep.receiver_mbt[h] = _hop_dict(receiver_mbt, matrices, h)
        rep.donor_mft[h] = _hop_dict(donor_mft, matrices, h)
        if h >= 1:
            rep.mft[h] = _hop_dict(mft, matrices, h)
    return rep
