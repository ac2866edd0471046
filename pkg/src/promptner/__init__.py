"""Few-shot biomedical NER: static and retrieval-augmented prompting, response
parsing, and entity-level evaluation with bootstrap confidence intervals."""

__version__ = "0.1.0"
