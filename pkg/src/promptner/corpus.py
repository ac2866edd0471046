"""Pre-tokenized BIO corpora: loading, span decoding, statistics, lexicons.

Datasets arrive as two-column TSV (``token<TAB>label``) with blank-line
sentence separators. Tokenization is never second-guessed: the file's tokens
are authoritative and flow through the whole pipeline untouched.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import CorpusFormatError, EmptyDatasetError, LabelSchemeError

OUTSIDE = "O"


@dataclass(frozen=True)
class Token:
    """Single pre-tokenized surface form at a fixed sentence position."""

    text: str
    index: int

    def __post_init__(self):
        if not self.text or any(c.isspace() for c in self.text):
            raise ValueError(f"token text must be non-empty without whitespace: {self.text!r}")


@dataclass(frozen=True)
class LabeledSentence:
    """Sentence with one BIO label per token."""

    id: str
    tokens: tuple[Token, ...]
    labels: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise ValueError(f"{self.id}: {len(self.tokens)} tokens vs {len(self.labels)} labels")
        for i, token in enumerate(self.tokens):
            if token.index != i:
                raise ValueError(f"{self.id}: token {token.text!r} carries index "
                                 f"{token.index}, sits at {i}")

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(t.text for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Typed token span, start inclusive, end exclusive."""

    start: int
    end: int
    etype: str


@dataclass(frozen=True)
class Dataset:
    name: str
    train: tuple[LabeledSentence, ...]
    test: tuple[LabeledSentence, ...]
    entity_types: tuple[str, ...]
    label_repairs: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.train + self.test]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})[:3]
            raise ValueError(f"duplicate sentence ids in dataset: {dupes}")

    @property
    def bio_alphabet(self) -> tuple[str, ...]:
        labels = [OUTSIDE]
        for t in self.entity_types:
            labels.extend((f"B-{t}", f"I-{t}"))
        return tuple(labels)

    def sentence(self, sentence_id: str) -> LabeledSentence:
        for s in self.train + self.test:
            if s.id == sentence_id:
                return s
        raise KeyError(sentence_id)


@dataclass(frozen=True)
class FrequencyLexicon:
    """Per entity type, lowercased in-span words ranked by (count desc, word asc)."""

    per_type: dict[str, tuple[tuple[str, int], ...]]

    def words(self, etype: str) -> tuple[str, ...]:
        return tuple(w for w, _ in self.per_type.get(etype, ()))


@dataclass
class DatasetStats:
    name: str
    train_sentences: int
    test_sentences: int
    train_tokens: int
    test_tokens: int
    entities: int
    entities_train: int
    entities_test: int
    entity_types: int
    types: tuple[str, ...]
    label_repairs: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, default=list)


def split_bio(label: str) -> tuple[str, str | None]:
    """Return (prefix, type); prefix is one of B, I, O."""
    if label == OUTSIDE:
        return OUTSIDE, None
    if len(label) > 2 and label[1] == "-" and label[0] in "BI":
        return label[0], label[2:]
    raise LabelSchemeError(f"not a BIO label: {label!r}")


def canonicalize_labels(labels: list[str]) -> tuple[list[str], int]:
    """Rewrite I-T with no open T span to B-T; return (labels, repair count).

    Real corpora contain IOB1-ish noise and the pipeline must not crash on it,
    so the repair happens once at load time and downstream code may assume
    well-formed BIO.
    """
    out: list[str] = []
    repairs = 0
    open_type: str | None = None
    for label in labels:
        prefix, etype = split_bio(label)
        if prefix == "I" and etype != open_type:
            out.append(f"B-{etype}")
            repairs += 1
            open_type = etype
        else:
            out.append(label)
            open_type = etype if prefix in ("B", "I") else None
    return out, repairs


def plain_to_bio(labels: list[str]) -> list[str]:
    """Convert bare class names to BIO by opening B- at each run start."""
    out: list[str] = []
    prev: str | None = None
    for label in labels:
        if label == OUTSIDE:
            out.append(OUTSIDE)
        elif label == prev:
            out.append(f"I-{label}")
        else:
            out.append(f"B-{label}")
        prev = label if label != OUTSIDE else None
    return out


def _read_blocks(path: Path) -> list[list[tuple[int, str, str]]]:
    blocks: list[list[tuple[int, str, str]]] = []
    current: list[tuple[int, str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                if current:
                    blocks.append(current)
                current = []
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise CorpusFormatError(
                    f"expected 'token<TAB>label', got {len(cols)} column(s)",
                    path=str(path), line=lineno,
                )
            token, label = cols
            if not token or any(c.isspace() for c in token):
                raise CorpusFormatError(
                    f"bad token {token!r}", path=str(path), line=lineno)
            if not label:
                raise CorpusFormatError("empty label", path=str(path), line=lineno)
            current.append((lineno, token, label))
    if current:
        blocks.append(current)
    return blocks


def read_sentences(path: str | Path, scheme: str = "bio", split: str = "train",
                   id_prefix: str | None = None) -> tuple[list[LabeledSentence], int]:
    """Read one TSV file into sentences; returns (sentences, repair count)."""
    if scheme not in ("bio", "plain"):
        raise ValueError(f"unknown scheme: {scheme}")
    path = Path(path)
    if not path.exists():
        raise CorpusFormatError("no such file", path=str(path))
    blocks = _read_blocks(path)
    if not blocks:
        raise EmptyDatasetError(f"{path}: no sentences")
    prefix = id_prefix if id_prefix is not None else split
    sentences: list[LabeledSentence] = []
    total_repairs = 0
    for i, block in enumerate(blocks):
        labels = [label for _, _, label in block]
        if scheme == "plain":
            labels = plain_to_bio(labels)
        else:
            for (lineno, _, label) in block:
                try:
                    split_bio(label)
                except LabelSchemeError:
                    raise LabelSchemeError(
                        f"unknown label {label!r} under bio scheme",
                        path=str(path), line=lineno) from None
        labels, repairs = canonicalize_labels(labels)
        total_repairs += repairs
        tokens = tuple(Token(text, j) for j, (_, text, _) in enumerate(block))
        sentences.append(LabeledSentence(
            id=f"{prefix}-{i:05d}", tokens=tokens, labels=tuple(labels), split=split))
    return sentences, total_repairs


def collect_entity_types(sentences: list[LabeledSentence]) -> tuple[str, ...]:
    types: set[str] = set()
    for s in sentences:
        for label in s.labels:
            _, etype = split_bio(label)
            if etype is not None:
                types.add(etype)
    return tuple(sorted(types))


def load_conll(path: str | Path, scheme: str = "bio", split: str = "train",
               name: str | None = None) -> Dataset:
    """Load a single two-column file into the given split of a new Dataset."""
    sentences, repairs = read_sentences(path, scheme=scheme, split=split)
    train = tuple(sentences) if split == "train" else ()
    test = tuple(sentences) if split == "test" else ()
    return Dataset(
        name=name or Path(path).stem,
        train=train,
        test=test,
        entity_types=collect_entity_types(sentences),
        label_repairs=repairs,
    )


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load train/test splits from a sidecar JSON manifest.

    Manifest keys: name, scheme, train, test (paths relative to the manifest),
    optional entity_types pinning the alphabet.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = manifest_path.parent
    scheme = manifest.get("scheme", "bio")
    train, rep_train = read_sentences(base / manifest["train"], scheme=scheme, split="train")
    test: list[LabeledSentence] = []
    rep_test = 0
    if manifest.get("test"):
        test, rep_test = read_sentences(base / manifest["test"], scheme=scheme, split="test")
    types = collect_entity_types(train + test)
    if manifest.get("entity_types"):
        declared = tuple(manifest["entity_types"])
        missing = set(types) - set(declared)
        if missing:
            raise CorpusFormatError(
                f"labels use types absent from declared alphabet: {sorted(missing)}",
                path=str(manifest_path))
        types = declared
    return Dataset(
        name=manifest.get("name", manifest_path.stem),
        train=tuple(train),
        test=tuple(test),
        entity_types=types,
        label_repairs=rep_train + rep_test,
    )


def save_conll(sentences: list[LabeledSentence] | tuple[LabeledSentence, ...],
               path: str | Path) -> None:
    """Write sentences back to the two-column format (round-trip safe)."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            for token, label in zip(s.tokens, s.labels):
                fh.write(f"{token.text}\t{label}\n")
            fh.write("\n")


def spans_from_labels(labels: tuple[str, ...] | list[str]) -> list[EntitySpan]:
    """Decode maximal B/I runs from canonical BIO labels."""
    spans: list[EntitySpan] = []
    start: int | None = None
    open_type: str | None = None
    for i, label in enumerate(labels):
        prefix, etype = split_bio(label)
        if prefix == "B":
            if start is not None:
                spans.append(EntitySpan(start, i, open_type))
            start, open_type = i, etype
        elif prefix == "I" and etype == open_type and start is not None:
            continue
        else:
            if start is not None:
                spans.append(EntitySpan(start, i, open_type))
            start, open_type = None, None
    if start is not None:
        spans.append(EntitySpan(start, len(labels), open_type))
    return spans


def extract_spans(sentence: LabeledSentence) -> list[EntitySpan]:
    return spans_from_labels(sentence.labels)


def dataset_stats(d: Dataset) -> DatasetStats:
    ent_train = sum(len(extract_spans(s)) for s in d.train)
    ent_test = sum(len(extract_spans(s)) for s in d.test)
    return DatasetStats(
        name=d.name,
        train_sentences=len(d.train),
        test_sentences=len(d.test),
        train_tokens=sum(len(s) for s in d.train),
        test_tokens=sum(len(s) for s in d.test),
        entities=ent_train + ent_test,
        entities_train=ent_train,
        entities_test=ent_test,
        entity_types=len(d.entity_types),
        types=d.entity_types,
        label_repairs=d.label_repairs,
    )


def frequency_lexicon(d: Dataset, top_k: int = 6) -> FrequencyLexicon:
    """Top-k lowercased words occurring inside train-split spans, per type.

    Ties break by word ascending so identical corpora always produce the same
    prompt text.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    counters: dict[str, Counter[str]] = {t: Counter() for t in d.entity_types}
    for s in d.train:
        for span in extract_spans(s):
            for token in s.tokens[span.start:span.end]:
                counters[span.etype][token.text.lower()] += 1
    per_type: dict[str, tuple[tuple[str, int], ...]] = {}
    for etype, counter in counters.items():
        ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
        per_type[etype] = tuple(ranked[:top_k])
    return FrequencyLexicon(per_type=per_type)
