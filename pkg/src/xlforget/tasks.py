"""Task datasets: a seeded synthetic "language" generator and MASSIVE-style ingestion.

Token id layout for synthetic data::

    0            PAD
    1            UNK
    [2, 2+R)     shared pool
    [2+R*s, ...) private range of script s (s >= 1)

Every range has the same internal layout: ``filler_size`` O-tokens followed by
``slot_vocab`` tokens per slot type. A language draws each content token from
the shared pool with probability ``overlap``, else from its script's range.
Families own the template grammar (which spans appear, in what order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .model import LabeledSequence
from .numeric import Rng

UNK_ID = 1
FIRST_CONTENT_ID = 2

LOW, MID, HIGH, UNASSIGNED = "LOW", "MID", "HIGH", "UNASSIGNED"
VITALITIES = (LOW, MID, HIGH, UNASSIGNED)

DEFAULT_SLOTS = ("time", "date", "place", "person", "event", "device")
DEFAULT_SIZES = (200, 50, 50)

# Fixed root for family grammars so they do not depend on any language seed.
_FAMILY_ROOT = 0x5EED


def bio_label_names(slots: Sequence[str]) -> list[str]:
    names = ["O"]
    for s in slots:
        names += [f"B-{s}", f"I-{s}"]
    return names


@dataclass(frozen=True)
class LanguageSpec:
    lang_id: str
    script_id: int = 1
    family_id: int = 0
    vitality: str = UNASSIGNED
    overlap: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"{self.lang_id}: overlap {self.overlap} outside [0, 1]")
        if self.vitality not in VITALITIES:
            raise ValueError(f"{self.lang_id}: unknown vitality {self.vitality!r}")


@dataclass
class TaskDataset:
    spec: LanguageSpec
    train: list[LabeledSequence]
    valid: list[LabeledSequence]
    test: list[LabeledSequence]
    label_names: list[str]
    vocab_size: int
    vocab: list[str] | None = None

    @property
    def lang_id(self) -> str:
        return self.spec.lang_id

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def splits(self) -> dict[str, list[LabeledSequence]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def token_string(self, tok: int) -> str:
        if self.vocab is not None:
            return self.vocab[tok]
        return "<unk>" if tok == UNK_ID else f"w{tok}"


@dataclass(frozen=True)
class VocabLayout:
    num_scripts: int = 8
    filler_size: int = 4
    slot_vocab: int = 2
    slots: tuple[str, ...] = DEFAULT_SLOTS

    @property
    def range_size(self) -> int:
        return self.filler_size + self.slot_vocab * len(self.slots)

    @property
    def vocab_size(self) -> int:
        return FIRST_CONTENT_ID + self.range_size * (1 + self.num_scripts)

    def role_ids(self, range_index: int, role: int) -> range:
        """Token ids for ``role`` (0 = filler, 1 + slot index) inside a range."""
        base = FIRST_CONTENT_ID + range_index * self.range_size
        if role == 0:
            return range(base, base + self.filler_size)
        start = base + self.filler_size + (role - 1) * self.slot_vocab
        return range(start, start + self.slot_vocab)


@dataclass(frozen=True)
class Template:
    """Alternating spans; role 0 is filler, role s+1 is slot type s."""

    spans: tuple[tuple[int, int], ...]  # (role, length)

    @property
    def length(self) -> int:
        return sum(n for _, n in self.spans)


def family_templates(family_id: int, layout: VocabLayout, count: int = 12, max_len: int = 20) -> list[Template]:
    """Template grammar for a family; every slot type appears in some template."""
    rng = Rng(_FAMILY_ROOT).fork("family", family_id)
    n_slots = len(layout.slots)
    out = []
    for i in range(count):
        n_spans = 2 + int(rng.integers(0, 2))
        roles = [1 + i % n_slots if j == 0 else 1 + int(rng.integers(0, n_slots)) for j in range(n_spans)]
        order = rng.permutation(n_spans)
        spans: list[tuple[int, int]] = []
        if rng.random() < 0.7:
            spans.append((0, 1 + int(rng.integers(0, 3))))
        for j in order:
            spans.append((roles[j], 1 + int(rng.integers(0, 3))))
            spans.append((0, 1 + int(rng.integers(0, 3))))
        if rng.random() < 0.5:
            spans.pop()
        t = Template(tuple(spans))
        while t.length > max_len:
            t = Template(t.spans[:-1])
        out.append(t)
    return out


def generate_language(
    spec: LanguageSpec,
    sizes: tuple[int, int, int] = DEFAULT_SIZES,
    layout: VocabLayout = VocabLayout(),
    size_multiplier: float = 1.0,
    max_seq_len: int = 24,
) -> TaskDataset:
    """Deterministic dataset for one synthetic language; depends on ``spec.seed`` not ``lang_id``."""
    if any(n < 1 for n in sizes):
        raise ValueError(f"split sizes must be >= 1, got {sizes}")
    if not 1 <= spec.script_id <= layout.num_scripts:
        raise ValueError(
            f"{spec.lang_id}: script {spec.script_id} exhausts the vocabulary "
            f"({layout.num_scripts} scripts available)"
        )
    n_train = max(1, int(round(sizes[0] * size_multiplier)))
    wanted = (n_train, sizes[1], sizes[2])
    templates = family_templates(spec.family_id, layout, max_len=max_seq_len)
    rng = Rng(spec.seed).fork("data")
    seen: set[tuple[int, ...]] = set()
    splits: list[list[LabeledSequence]] = []
    for n in wanted:
        split = []
        attempts = 0
        while len(split) < n:
            attempts += 1
            if attempts > 50 * n + 1000:
                raise ValueError(f"{spec.lang_id}: vocabulary exhausted while drawing distinct sequences")
            seq = _draw_sequence(rng, templates[int(rng.integers(0, len(templates)))], spec, layout)
            if seq.tokens in seen:
                continue
            seen.add(seq.tokens)
            split.append(seq)
        splits.append(split)
    return TaskDataset(
        spec=spec,
        train=splits[0],
        valid=splits[1],
        test=splits[2],
        label_names=bio_label_names(layout.slots),
        vocab_size=layout.vocab_size,
    )


def _draw_sequence(rng: Rng, template: Template, spec: LanguageSpec, layout: VocabLayout) -> LabeledSequence:
    tokens: list[int] = []
    labels: list[int] = []
    for role, n in template.spans:
        for pos in range(n):
            rng_index = 0 if rng.random() < spec.overlap else spec.script_id
            ids = layout.role_ids(rng_index, role)
            tokens.append(ids[int(rng.integers(0, len(ids)))])
            if role == 0:
                labels.append(0)
            else:
                labels.append(2 * role - 1 if pos == 0 else 2 * role)
    return LabeledSequence(tuple(tokens), tuple(labels))


def content_tokens(ds: TaskDataset) -> set[int]:
    return {t for split in ds.splits().values() for s in split for t in s.tokens}


# -- annotated utterances -----------------------------------------------------


class AnnotationError(ValueError):
    """Malformed annot_utt string; ``position`` is the 0-based character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


@dataclass(frozen=True)
class AnnotatedUtterance:
    raw: str
    tokens: tuple[str, ...]
    labels: tuple[str, ...]

    def render(self) -> str:
        return render_annot_utt(self.tokens, self.labels)


_SEP = " : "


def parse_annot_utt(raw: str) -> AnnotatedUtterance:
    """Parse ``wake me at [time : nine am]`` into whitespace tokens and BIO labels."""
    if not raw or not raw.strip():
        raise AnnotationError("empty utterance", 0)
    tokens: list[str] = []
    labels: list[str] = []
    i, n = 0, len(raw)
    while i < n:
        c = raw[i]
        if c.isspace():
            i += 1
        elif c == "]":
            raise AnnotationError("unbalanced ']'", i)
        elif c == "[":
            open_pos = i
            sep = raw.find(_SEP, i + 1)
            close = raw.find("]", i + 1)
            nested = raw.find("[", i + 1)
            if close < 0:
                raise AnnotationError("unbalanced '['", open_pos)
            if 0 <= nested < close:
                raise AnnotationError("nested span", nested)
            if sep < 0 or sep > close:
                raise AnnotationError("missing ' : ' separator", open_pos)
            slot = raw[i + 1 : sep]
            if not slot.strip() or slot != slot.strip() or any(ch.isspace() for ch in slot):
                raise AnnotationError("empty or malformed slot name", i + 1)
            body = raw[sep + len(_SEP) : close].split()
            if not body:
                raise AnnotationError("empty span", sep + len(_SEP))
            for j, tok in enumerate(body):
                tokens.append(tok)
                labels.append(("B-" if j == 0 else "I-") + slot)
            i = close + 1
        else:
            j = i
            while j < n and not raw[j].isspace() and raw[j] not in "[]":
                j += 1
            tokens.append(raw[i:j])
            labels.append("O")
            i = j
    return AnnotatedUtterance(raw, tuple(tokens), tuple(labels))


def bio_spans(labels: Sequence[str]) -> list[tuple[str, int, int]]:
    """(type, start, end_inclusive) spans; an I- that does not continue a span opens one."""
    spans = []
    cur: list | None = None
    for i, lab in enumerate(labels):
        if lab.startswith("B-") or (lab.startswith("I-") and (cur is None or cur[0] != lab[2:])):
            if cur:
                spans.append(tuple(cur))
            cur = [lab[2:], i, i]
        elif lab.startswith("I-"):
            cur[2] = i  # type: ignore[index]
        else:
            if cur:
                spans.append(tuple(cur))
            cur = None
    if cur:
        spans.append(tuple(cur))
    return spans  # type: ignore[return-value]


def render_annot_utt(tokens: Sequence[str], labels: Sequence[str]) -> str:
    if len(tokens) != len(labels):
        raise ValueError("tokens and labels differ in length")
    starts = {s: (t, e) for t, s, e in bio_spans(labels)}
    parts = []
    i = 0
    while i < len(tokens):
        if i in starts:
            slot, end = starts[i]
            parts.append(f"[{slot}{_SEP}{' '.join(tokens[i:end + 1])}]")
            i = end + 1
        else:
            parts.append(tokens[i])
            i += 1
    return " ".join(parts)


def normalize_annot_utt(raw: str) -> str:
    return parse_annot_utt(raw).render()


# -- MASSIVE-style JSON-lines -------------------------------------------------

PARTITIONS = {"train": "train", "dev": "valid", "test": "test"}
_REQUIRED = ("locale", "partition", "utt", "annot_utt")


class IngestError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_records(path: str | Path) -> list[tuple[int, dict]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise IngestError("record is not an object", lineno)
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise IngestError(f"missing fields {missing}", lineno)
            if rec["partition"] not in PARTITIONS:
                raise IngestError(f"unknown partition {rec['partition']!r}", lineno)
            out.append((lineno, rec))
    return out


def ingest_massive(
    path: str | Path,
    vitality_map: dict[str, str] | None = None,
    slots: Sequence[str] | None = None,
) -> dict[str, TaskDataset]:
    """Per-locale datasets from a MASSIVE-style JSON-lines file.

    One vocabulary is built from the train partitions of all locales (ids 0/1
    are PAD/UNK); the BIO label schema is shared across locales.
    """
    parsed: list[tuple[str, str, AnnotatedUtterance]] = []
    for lineno, rec in read_records(path):
        try:
            utt = parse_annot_utt(rec["annot_utt"])
        except AnnotationError as exc:
            raise IngestError(f"bad annot_utt: {exc}", lineno) from None
        parsed.append((rec["locale"], PARTITIONS[rec["partition"]], utt))

    slot_names = list(slots) if slots is not None else sorted(
        {lab[2:] for _, _, u in parsed for lab in u.labels if lab != "O"}
    )
    label_names = bio_label_names(slot_names)
    label_id = {name: i for i, name in enumerate(label_names)}

    vocab = ["<pad>", "<unk>"]
    token_id: dict[str, int] = {}
    for _, part, u in parsed:
        if part == "train":
            for tok in u.tokens:
                if tok not in token_id:
                    token_id[tok] = len(vocab)
                    vocab.append(tok)

    vitality_map = vitality_map or {}
    by_locale: dict[str, dict[str, list[LabeledSequence]]] = {}
    for locale, part, u in parsed:
        seq = LabeledSequence(
            tuple(token_id.get(t, UNK_ID) for t in u.tokens),
            tuple(label_id[lab] if lab in label_id else 0 for lab in u.labels),
        )
        by_locale.setdefault(locale, {"train": [], "valid": [], "test": []})[part].append(seq)

    out = {}
    for locale in sorted(by_locale):
        splits = by_locale[locale]
        spec = LanguageSpec(locale, script_id=0, family_id=-1, vitality=vitality_map.get(locale, UNASSIGNED))
        out[locale] = TaskDataset(
            spec, splits["train"], splits["valid"], splits["test"], label_names, len(vocab), vocab
        )
    return out


def export_jsonl(datasets: Iterable[TaskDataset], path: str | Path) -> None:
    """Write datasets as MASSIVE-style JSON-lines (partition order train, dev, test)."""
    inv = {v: k for k, v in PARTITIONS.items()}
    with open(path, "w", encoding="utf-8") as fh:
        for ds in datasets:
            for part, split in ds.splits().items():
                for seq in split:
                    toks = [ds.token_string(t) for t in seq.tokens]
                    labs = [ds.label_names[lab] for lab in seq.labels]
                    rec = {
                        "locale": ds.lang_id,
                        "partition": inv[part],
                        "utt": " ".join(toks),
                        "annot_utt": render_annot_utt(toks, labs),
                    }
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_vitality_map(path: str | Path) -> dict[str, str]:
    """JSON object ``{locale: LOW|MID|HIGH}``."""
    data = json.loads(Path(path).read_text())
    bad = {k: v for k, v in data.items() if v not in VITALITIES}
    if bad:
        raise ValueError(f"unknown vitality values: {bad}")
    return dict(data)


def synthetic_specs(
    num_languages: int = 6,
    overlap: float = 0.2,
    num_families: int = 2,
    seed: int = 0,
    vitalities: Sequence[str] = (HIGH, MID, LOW),
) -> list[LanguageSpec]:
    """Languages L0..L{n-1}, each with its own script; families and vitality cycle."""
    return [
        LanguageSpec(
            lang_id=f"L{i}",
            script_id=1 + i,
            family_id=i % num_families,
            vitality=vitalities[i % len(vitalities)],
            overlap=overlap,
            seed=seed * 1000 + i + 1,
        )
        for i in range(num_languages)
    ]


def with_overlap(specs: Sequence[LanguageSpec], overlap: float) -> list[LanguageSpec]:
    return [replace(s, overlap=overlap) for s in specs]
