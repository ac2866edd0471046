"""Turn raw LLM response text into per-token BIO labels aligned to the query.

Parsing is total: arbitrary bytes in, full-length label vector out. Malformed
responses degrade through explicit repair states instead of raising, because a
batch experiment must never abort on one bad completion.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .corpus import EntitySpan, Token, canonicalize_labels, spans_from_labels

_BRACKET_RE = re.compile(r"\[(.*?)\]", re.S)
_SINGLE_SEP = re.compile(r"'\s*,\s*'")
_DOUBLE_SEP = re.compile(r'"\s*,\s*"')


class Repair(str, Enum):
    NONE = "none"
    LENGTH_MISMATCH = "length_mismatch"
    TOKEN_MISMATCH = "token_mismatch"
    UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class Prediction:
    labels: tuple[str, ...]
    repair: Repair
    dropped_items: int = 0
    filled_items: int = 0


def _split_items(content: str) -> list[str]:
    content = content.strip()
    if not content:
        return []
    for sep_re, quote in ((_SINGLE_SEP, "'"), (_DOUBLE_SEP, '"')):
        if sep_re.search(content):
            if content.startswith(quote):
                content = content[1:]
            if content.endswith(quote):
                content = content[:-1]
            return sep_re.split(content)
    if len(content) >= 2 and content[0] in "'\"" and content[-1] == content[0]:
        return [content[1:-1]]
    return [p.strip().strip("'\"") for p in content.split(",") if p.strip()]


def _candidate_item_lists(raw: str) -> list[list[str]]:
    candidates = [_split_items(m.group(1)) for m in _BRACKET_RE.finditer(raw)]
    candidates = [c for c in candidates if c]
    if candidates:
        return candidates
    # fallback: bare comma/newline separated token-label items
    pieces = [p.strip().strip("'\"") for p in re.split(r"[,\n]", raw)]
    pieces = [p for p in pieces if p]
    return [pieces] if pieces else []


def _valid_suffixes(alphabet: Sequence[str]) -> list[str]:
    valid = set(alphabet)
    for label in alphabet:
        if label != "O" and len(label) > 2 and label[1] == "-":
            valid.add(label[2:])  # plain class names are accepted too
    return sorted(valid, key=lambda s: (-len(s), s))


def _split_item(item: str, suffixes: list[str]) -> tuple[str | None, str | None]:
    """Split at the longest valid label suffix; hyphen-separated preferred."""
    for label in suffixes:
        if item == label:
            return None, label
        if item.endswith("-" + label) and len(item) > len(label) + 1:
            return item[: -len(label) - 1], label
        if item.endswith(label) and len(item) > len(label):
            return item[: -len(label)], label
    return item, None


def _plains_to_bio(raw_labels: list[str | None], bio: set[str]) -> list[str]:
    """Run-length group plain class names into B-/I-; junk becomes O."""
    out: list[str] = []
    prev: str | None = None
    for label in raw_labels:
        if label is None or label == "O":
            out.append("O")
            prev = None
        elif label in bio:
            out.append(label)
            prev = label[2:]
        else:  # plain class name
            out.append(f"I-{label}" if prev == label else f"B-{label}")
            prev = label
    return out


def parse_response(raw: str, query_tokens: Sequence[str] | Sequence[Token],
                   alphabet: Sequence[str]) -> Prediction:
    """Parse the first bracketed token-label list and align it to the query.

    Repair ladder: equal-length lists map positionally (flagging any token
    text drift); unequal lists fall back to greedy in-order text matching
    where unmatched query tokens get O and surplus items are dropped; no list
    at all yields an all-O unparseable prediction.
    """
    if not alphabet:
        raise ValueError("alphabet must be non-empty")
    alphabet = tuple(alphabet) if "O" in alphabet else tuple(alphabet) + ("O",)
    texts = [t.text if isinstance(t, Token) else t for t in query_tokens]
    n = len(texts)
    bio = {label for label in alphabet if label == "O" or label[:2] in ("B-", "I-")}
    suffixes = _valid_suffixes(alphabet)

    parsed: list[tuple[str | None, str | None]] | None = None
    for items in _candidate_item_lists(raw) if raw else []:
        split = [_split_item(item, suffixes) for item in items]
        if any(label is not None for _, label in split):
            parsed = split
            break
    if parsed is None:
        return Prediction(labels=("O",) * n, repair=Repair.UNPARSEABLE,
                          dropped_items=0, filled_items=n)

    if len(parsed) == n:
        raw_labels = [label for _, label in parsed]
        drift = any(tok is not None and tok != texts[i]
                    for i, (tok, _) in enumerate(parsed))
        repair = Repair.TOKEN_MISMATCH if drift else Repair.NONE
        dropped = filled = 0
    else:
        raw_labels = [None] * n
        cursor = 0
        matched = 0
        for i, text in enumerate(texts):
            hit = None
            for j in range(cursor, len(parsed)):
                if parsed[j][0] == text:
                    hit = j
                    break
            if hit is None:
                lowered = text.lower()
                for j in range(cursor, len(parsed)):
                    if parsed[j][0] is not None and parsed[j][0].lower() == lowered:
                        hit = j
                        break
            if hit is not None:
                raw_labels[i] = parsed[hit][1]
                cursor = hit + 1
                matched += 1
        dropped = len(parsed) - matched
        filled = n - matched
        repair = Repair.LENGTH_MISMATCH

    labels = _plains_to_bio(raw_labels, bio)
    labels = [label if label in bio or label == "O" else "O" for label in labels]
    return Prediction(labels=tuple(labels), repair=repair,
                      dropped_items=dropped, filled_items=filled)


def to_spans(p: Prediction) -> list[EntitySpan]:
    """Decode spans from a prediction exactly like gold-side extraction."""
    canonical, _ = canonicalize_labels(list(p.labels))
    return spans_from_labels(canonical)
