"""Encoder backends behind the /embed endpoint.

Every backend maps a list of dataset tokens to one unit vector per token
(token granularity) or to the normalized mean of those vectors (sentence
granularity). The dataset's tokenization is authoritative: backends that
subtokenize internally (e.g. transformer encoders) must mean-pool the pieces
back to one vector per input token before returning.

The default backend is a deterministic character-3-gram feature hasher, so
the service runs with no model weights and answers bit-identically forever.
"""

from __future__ import annotations

import hashlib

import numpy as np

ROLES = ("query", "document", "symmetric")


class HashingEncoder:
    """Signed feature hashing of character 3-grams; no weights, no state."""

    def __init__(self, dim: int = 256, salt: str = ""):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.salt = salt
        self.roles = ROLES  # single encoder: every role maps to it

    def _token_vector(self, text: str) -> np.ndarray:
        padded = f"^{text}$"
        vec = np.zeros(self.dim)
        for i in range(len(padded) - 2):
            gram = self.salt + padded[i:i + 3]
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            sign = 1.0 if (value >> 16) & 1 else -1.0
            vec[value % self.dim] += sign
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def encode_tokens(self, tokens: list[str], role: str = "symmetric") -> np.ndarray:
        return np.stack([self._token_vector(t) for t in tokens])

    def encode_sentence(self, tokens: list[str], role: str = "symmetric") -> np.ndarray:
        rows = self.encode_tokens(tokens, role)
        mean = rows.mean(axis=0)
        norm = np.linalg.norm(mean)
        return mean / norm if norm > 0 else mean


class DualEncoder:
    """Pair of encoders selected by role; symmetric requests use the query side."""

    def __init__(self, query_encoder, document_encoder):
        if query_encoder.dim != document_encoder.dim:
            raise ValueError("query and document encoders must share a dimension")
        self.query_encoder = query_encoder
        self.document_encoder = document_encoder
        self.dim = query_encoder.dim
        self.roles = ROLES

    def _pick(self, role: str):
        return self.document_encoder if role == "document" else self.query_encoder

    def encode_tokens(self, tokens: list[str], role: str = "symmetric") -> np.ndarray:
        return self._pick(role).encode_tokens(tokens, role)

    def encode_sentence(self, tokens: list[str], role: str = "symmetric") -> np.ndarray:
        return self._pick(role).encode_sentence(tokens, role)


def default_models() -> dict:
    return {"hash-256": HashingEncoder(256)}
