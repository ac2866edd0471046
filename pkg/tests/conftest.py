from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from promptner.corpus import Dataset, LabeledSentence, Token, save_conll

# Vocabulary deliberately salted with hyphenated tokens, label-like substrings,
# and trailing punctuation so format/parse round trips get exercised hard.
PLAIN_WORDS = [
    "I", "was", "a", "the", "and", "with", "patient", "took", "daily", "after",
    "feeling", "started", "stopped", "doctor", "said", "really", "bad", "since",
    "withdrawal", "rehab", "addicted", "detox", "overdosed", "rehabs",
    "lost", "homeless", "charged", "streets", "jail", "disorderly",
    "codeine", "morphine", "oxycodone", "pain", "relapse", "clean",
]
TRICKY_WORDS = [
    "addict.", "withdrawal.", "non-bloody", "alpha-methyldopa", "year-old",
    "2195-6-6", "B-52", "x-O", "don't", "opioid-related", "self-harm",
    "I-beam", "O", ".", "jail,", "re-admitted",
]
ENTITY_TYPES = ("Clinical_Impacts", "Social_Impacts")

CODEINE_TEXTS = ("I", "was", "a", "codeine", "addict.")
CODEINE_LABELS = ("O", "O", "O", "B-Clinical_Impacts", "I-Clinical_Impacts")


def make_sentence(texts, labels, sid, split="train") -> LabeledSentence:
    return LabeledSentence(
        id=sid,
        tokens=tuple(Token(t, i) for i, t in enumerate(texts)),
        labels=tuple(labels),
        split=split,
    )


def build_fixture_sentences(n: int, split: str, seed: int,
                            include_codeine: bool = False) -> list[LabeledSentence]:
    """Deterministic corpus with canonical BIO labels covering both types."""
    rng = random.Random(seed)
    sentences: list[LabeledSentence] = []
    for i in range(n):
        sid = f"{split}-{i:05d}"
        if include_codeine and i == 0:
            sentences.append(make_sentence(CODEINE_TEXTS, CODEINE_LABELS, sid, split))
            continue
        length = rng.randint(3, 12)
        texts = []
        for _ in range(length):
            pool = TRICKY_WORDS if rng.random() < 0.25 else PLAIN_WORDS
            texts.append(rng.choice(pool))
        labels = ["O"] * length
        # guarantee type coverage early so per-label sampling always succeeds
        n_spans = rng.randint(1, 2) if rng.random() < 0.8 else 0
        forced = ENTITY_TYPES[i % 2] if i < 10 else None
        if forced and n_spans == 0:
            n_spans = 1
        for j in range(n_spans):
            etype = forced if (forced and j == 0) else rng.choice(ENTITY_TYPES)
            width = rng.randint(1, min(3, length))
            start = rng.randint(0, length - width)
            if any(labels[k] != "O" for k in range(start, start + width)):
                continue
            labels[start] = f"B-{etype}"
            for k in range(start + 1, start + width):
                labels[k] = f"I-{etype}"
        sentences.append(make_sentence(texts, labels, sid, split))
    return sentences


def build_fixture_dataset(n_train=20, n_test=10, seed=1234, name="fixture") -> Dataset:
    train = build_fixture_sentences(n_train, "train", seed, include_codeine=True)
    test = build_fixture_sentences(n_test, "test", seed + 1, include_codeine=True)
    return Dataset(name=name, train=tuple(train), test=tuple(test),
                   entity_types=ENTITY_TYPES)


@pytest.fixture(scope="session")
def fixture_dataset() -> Dataset:
    return build_fixture_dataset()


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    """30-sentence corpus written to disk with a sidecar manifest."""
    d = build_fixture_dataset()
    root = tmp_path_factory.mktemp("corpus")
    save_conll(list(d.train), root / "train.tsv")
    save_conll(list(d.test), root / "test.tsv")
    (root / "data.json").write_text(
        '{"name": "fixture", "scheme": "bio", "train": "train.tsv", "test": "test.tsv"}')
    return {"manifest": root / "data.json", "train": root / "train.tsv",
            "test": root / "test.tsv"}


PROMPT_FIXTURE = """\
[task_description]
Label every token with Clinical_Impacts, Social_Impacts, or O.

[entity_definitions]
Clinical_Impacts covers health effects; Social_Impacts covers life effects.

[format_spec]
Return the bracketed token-label list, one item per input token.

[dataset_description]
Synthetic posts about recovery and relapse.

[high_freq]
Frequent words include 'withdrawal' and 'jail'.

[umls_knowledge]
Background clinical vocabulary is assumed.

[error_feedback]
Mind conditional phrasing; not every mention is an impact.
"""


def materialize_corpus(root: Path, n_train=30, n_test=20, seed=1234) -> Path:
    """Write the deterministic fixture corpus plus a prompt fixture to disk."""
    d = build_fixture_dataset(n_train, n_test, seed)
    root.mkdir(parents=True, exist_ok=True)
    save_conll(list(d.train), root / "train.tsv")
    save_conll(list(d.test), root / "test.tsv")
    (root / "data.json").write_text(json.dumps({
        "name": "fixture", "scheme": "bio",
        "train": "train.tsv", "test": "test.tsv"}))
    (root / "prompts.txt").write_text(PROMPT_FIXTURE)
    return root


def manifest_data(corpus: Path, out: Path, **overrides) -> dict:
    data = {
        "version": 1,
        "name": "demo",
        "dataset": {"manifest": str(corpus / "data.json")},
        "prompts": str(corpus / "prompts.txt"),
        "components": ["dataset_description", "high_freq"],
        "mode": "static",
        "shots": 3,
        "runs": 1,
        "seeds": [1],
        "llm": {"preset": "gpt-4", "mock": {"behavior": "gold_echo"}},
        "bootstrap": {"n_boot": 100, "seed": 42, "level": 0.95},
        "output_dir": str(out),
    }
    data.update(overrides)
    return data
