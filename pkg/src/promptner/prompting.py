"""Prompt assembly: static components, few-shot example blocks, query block.

Rendering is pure string concatenation in a fixed component order, so a given
configuration always produces a byte-identical prompt. The per-dataset prompt
texts live in editable fixture files (``fixtures/prompts``), not in code.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from .corpus import Dataset, FrequencyLexicon, LabeledSentence, Token, extract_spans
from .errors import ConfigError, SamplingError
from .retrieval import EngineKind

FIXTURE_DIR = Path(__file__).parent / "fixtures" / "prompts"

BASE_SECTIONS = ("task_description", "entity_definitions", "format_spec")
OPTIONAL_SECTIONS = ("dataset_description", "high_freq", "umls_knowledge", "error_feedback")


class ExampleMode(str, Enum):
    STATIC_RANDOM = "static_random"
    DYNAMIC_RETRIEVED = "dynamic_retrieved"


class ExampleFormat(str, Enum):
    TOKENS_IN_TOKENS_OUT = "tokens_in_tokens_out"
    SENTENCE_IN_TOKENS_OUT = "sentence_in_tokens_out"


class SamplingUnit(str, Enum):
    PER_LABEL = "per_label"
    TOTAL = "total"


@dataclass(frozen=True)
class ExampleBlockConfig:
    mode: ExampleMode = ExampleMode.STATIC_RANDOM
    k: int = 5
    format: ExampleFormat = ExampleFormat.TOKENS_IN_TOKENS_OUT
    sampling: SamplingUnit = SamplingUnit.PER_LABEL
    seed: int | None = None
    engine: EngineKind | None = None

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError("shots must be >= 0")
        if self.mode is ExampleMode.STATIC_RANDOM and self.seed is None:
            raise ConfigError("static_random sampling requires a seed")
        if self.mode is ExampleMode.DYNAMIC_RETRIEVED and self.engine is None:
            raise ConfigError("dynamic_retrieved requires an engine kind")


@dataclass(frozen=True)
class PromptComponents:
    """Base prompt plus optional add-ons; None means the add-on is off."""

    task_description: str
    entity_definitions: str
    format_spec: str
    dataset_description: str | None = None
    high_freq: str | None = None
    umls_knowledge: str | None = None
    error_feedback: str | None = None
    example_config: ExampleBlockConfig = field(
        default_factory=lambda: ExampleBlockConfig(seed=0, k=0))
    base_in_system: bool = True
    order: tuple[str, ...] = OPTIONAL_SECTIONS

    @classmethod
    def from_fixture(cls, fixture: dict[str, str], enabled: Sequence[str] = (),
                     high_freq_text: str | None = None,
                     example_config: ExampleBlockConfig | None = None) -> "PromptComponents":
        missing = [s for s in BASE_SECTIONS if not fixture.get(s)]
        if missing:
            raise ConfigError(f"prompt fixture lacks base section(s): {missing}")
        unknown = set(enabled) - set(OPTIONAL_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown prompt component(s): {sorted(unknown)}")
        kwargs = {}
        for section in OPTIONAL_SECTIONS:
            if section not in enabled:
                kwargs[section] = None
            elif section == "high_freq" and high_freq_text is not None:
                kwargs[section] = high_freq_text
            else:
                text = fixture.get(section)
                if not text:
                    raise ConfigError(f"component {section!r} enabled but fixture has no text")
                kwargs[section] = text
        return cls(
            task_description=fixture["task_description"],
            entity_definitions=fixture["entity_definitions"],
            format_spec=fixture["format_spec"],
            example_config=example_config or ExampleBlockConfig(seed=0, k=0),
            **kwargs,
        )


@dataclass(frozen=True)
class PromptBundle:
    system_message: str
    user_message: str
    included_example_ids: tuple[str, ...]
    component_provenance: dict[str, bool]
    query_id: str | None = None
    query_token_count: int = 0


_SECTION_RE = re.compile(r"^\[([a-z_]+)\]\s*$")


def load_prompt_fixture(path: str | Path) -> dict[str, str]:
    """Parse a ``[section]``-headed UTF-8 text file into section texts."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"prompt fixture not found: {path}")
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in path.read_text(encoding="utf-8").splitlines():
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1)
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    return {name: "\n".join(lines).strip() for name, lines in sections.items()}


def bundled_fixture_path(dataset: str) -> Path:
    return FIXTURE_DIR / f"{dataset}.txt"


def render_item(token_text: str, label: str) -> str:
    """Join a token with its label; the separator hyphen is dropped after
    tokens ending in punctuation ('addict.' + 'I-T' -> 'addict.I-T')."""
    sep = "-" if token_text[-1].isalnum() else ""
    return f"{token_text}{sep}{label}"


def render_token_list(items: Sequence[str]) -> str:
    return "[" + ", ".join(f"'{item}'" for item in items) + "]"


def render_output_list(texts: Sequence[str], labels: Sequence[str]) -> str:
    return render_token_list([render_item(t, l) for t, l in zip(texts, labels)])


def render_input_block(texts: Sequence[str], fmt: ExampleFormat) -> str:
    if fmt is ExampleFormat.SENTENCE_IN_TOKENS_OUT:
        return "Input: ['" + " ".join(texts) + "']"
    return "Input: " + render_token_list(texts)


def format_example(s: LabeledSentence, fmt: ExampleFormat = ExampleFormat.TOKENS_IN_TOKENS_OUT) -> str:
    return (render_input_block(s.texts, fmt) + "\n"
            + "Output: " + render_output_list(s.texts, s.labels))


def render_high_freq(lexicon: FrequencyLexicon, top_k: int = 6) -> str:
    """Render the per-type high-frequency word lists as one prompt paragraph."""
    parts = []
    for etype, ranked in lexicon.per_type.items():
        words = [w for w, _ in ranked[:top_k]]
        if not words:
            continue
        quoted = ", ".join(f"'{w}'" for w in words[:-1])
        tail = f"'{words[-1]}'" if len(words) == 1 else f"{quoted}, and '{words[-1]}'"
        parts.append(f"High-frequency '{etype}' instances include {tail}.")
    return "In this dataset, " + " ".join(parts) if parts else ""


def sample_static_examples(d: Dataset, cfg: ExampleBlockConfig) -> list[LabeledSentence]:
    """Seeded random draw of annotated examples for the static prompt.

    per_label draws k sentences containing each entity type (duplicates across
    types collapse by id); total draws k sentences uniformly. Types with fewer
    than k carrier sentences contribute all of them; only a type with none at
    all is an error.
    """
    if cfg.mode is not ExampleMode.STATIC_RANDOM:
        raise ConfigError("sample_static_examples requires static_random mode")
    if cfg.k == 0:
        return []
    rng = random.Random(cfg.seed)
    by_id = {s.id: s for s in d.train}
    drawn: list[str] = []
    if cfg.sampling is SamplingUnit.PER_LABEL:
        for etype in d.entity_types:
            candidates = sorted(
                s.id for s in d.train
                if any(span.etype == etype for span in extract_spans(s)))
            if not candidates:
                raise SamplingError(
                    f"no training sentence contains a span of type {etype!r}")
            drawn.extend(rng.sample(candidates, min(cfg.k, len(candidates))))
    else:
        ids = sorted(by_id)
        drawn = rng.sample(ids, min(cfg.k, len(ids)))
    seen: set[str] = set()
    out = []
    for sid in drawn:
        if sid not in seen:
            seen.add(sid)
            out.append(by_id[sid])
    return out


def build_prompt(components: PromptComponents, examples: Sequence[LabeledSentence],
                 query_tokens: Sequence[str] | Sequence[Token],
                 query_id: str | None = None) -> PromptBundle:
    """Assemble the final system/user message pair with full provenance."""
    texts = [t.text if isinstance(t, Token) else t for t in query_tokens]
    if not texts:
        raise ValueError("query tokens must be non-empty")
    fmt = components.example_config.format

    base = "\n\n".join(
        getattr(components, section) for section in BASE_SECTIONS)
    blocks: list[str] = [] if components.base_in_system else [base]

    provenance: dict[str, bool] = {"base": True}
    for section in components.order:
        text = getattr(components, section)
        provenance[section] = text is not None
        if text is not None:
            blocks.append(text)

    provenance["examples"] = bool(examples)
    if examples:
        blocks.append("\n\n".join(format_example(s, fmt) for s in examples))

    blocks.append(render_input_block(texts, fmt) + "\nOutput:")

    return PromptBundle(
        system_message=base if components.base_in_system else "",
        user_message="\n\n".join(blocks),
        included_example_ids=tuple(s.id for s in examples),
        component_provenance=provenance,
        query_id=query_id,
        query_token_count=len(texts),
    )
