"""Exception hierarchy shared across the package."""


class PromptNerError(Exception):
    """Base for all errors raised by this package."""


class CorpusFormatError(PromptNerError):
    """Malformed corpus file (bad column count, bad token, arbitrary junk)."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}]" if line is not None else "]")
        super().__init__(message + where)


class LabelSchemeError(CorpusFormatError):
    """Label not expressible under the declared labeling scheme."""


class EmptyDatasetError(PromptNerError):
    """File produced no sentences."""


class IndexBuildError(PromptNerError):
    """Retrieval index could not be built."""


class EmbeddingProviderError(PromptNerError):
    """Embedding provider failed; carries the offending sentence id."""

    def __init__(self, message: str, sentence_id: str | None = None):
        self.sentence_id = sentence_id
        if sentence_id is not None:
            message = f"{message} (sentence {sentence_id})"
        super().__init__(message)


class ScoringError(PromptNerError):
    """Representation mismatch while scoring (wrong kind or dimension)."""


class SamplingError(PromptNerError):
    """Static example sampling impossible under the requested config."""


class TransportError(PromptNerError):
    """LLM endpoint unreachable after exhausting retries."""

    def __init__(self, message: str, status: int | None = None):
        self.status = status
        super().__init__(message)


class ProtocolError(PromptNerError):
    """Endpoint responded with a body that is not a chat completion."""


class ConfigError(PromptNerError):
    """Invalid manifest, missing fixture, or inconsistent settings."""


class EvaluationError(PromptNerError):
    """Gold and predicted span sets are not comparable."""


class ReportError(PromptNerError):
    """No completed records to report on."""
