"""Embedding microservice: sentence, per-token, and dual-role encodings over HTTP."""

from .app import create_app
from .encoders import DualEncoder, HashingEncoder

__version__ = "0.1.0"
__all__ = ["create_app", "HashingEncoder", "DualEncoder"]
