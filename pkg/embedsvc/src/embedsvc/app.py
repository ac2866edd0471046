"""FastAPI application exposing /embed, /info, and /healthz."""

from __future__ import annotations

import os
from typing import Literal

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .encoders import ROLES, default_models


class EmbedRequest(BaseModel):
    texts: list[list[str] | str] = Field(min_length=1)
    granularity: Literal["sentence", "token"] = "sentence"
    role: Literal["query", "document", "symmetric"] = "symmetric"
    model: str = "hash-256"


class EmbedResponse(BaseModel):
    dim: int
    model: str
    vectors: list[list[float] | list[list[float]]]


def create_app(models: dict | None = None, auth_token: str | None = None) -> FastAPI:
    """Build the service; model weights load once and are treated as read-only."""
    registry = models if models is not None else default_models()
    token = auth_token if auth_token is not None else os.environ.get("EMBEDSVC_TOKEN")
    app = FastAPI(title="embedsvc")

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.middleware("http")
    async def shared_token_check(request: Request, call_next):
        if token and request.headers.get("x-auth-token") != token:
            return JSONResponse(status_code=401, content={"detail": "bad or missing token"})
        return await call_next(request)

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.get("/info")
    async def info():
        return {
            "models": sorted(registry),
            "dims": {name: enc.dim for name, enc in sorted(registry.items())},
            "roles": list(ROLES),
        }

    @app.post("/embed")
    async def embed(req: EmbedRequest):
        encoder = registry.get(req.model)
        if encoder is None:
            return JSONResponse(status_code=404,
                                content={"detail": f"unknown model: {req.model}"})
        token_lists: list[list[str]] = []
        for text in req.texts:
            if isinstance(text, str):
                if req.granularity == "token":
                    return JSONResponse(
                        status_code=400,
                        content={"detail": "token granularity requires token lists"})
                token_lists.append(text.split())
            else:
                token_lists.append(text)
            if not token_lists[-1]:
                return JSONResponse(status_code=400,
                                    content={"detail": "empty text in request"})
        vectors = []
        try:
            for tokens in token_lists:
                if req.granularity == "token":
                    vectors.append(encoder.encode_tokens(tokens, req.role).tolist())
                else:
                    vectors.append(encoder.encode_sentence(tokens, req.role).tolist())
        except Exception as exc:  # encoder failure surfaces as 500 with a message
            return JSONResponse(status_code=500, content={"detail": str(exc)})
        return EmbedResponse(dim=encoder.dim, model=req.model, vectors=vectors)

    return app


app = create_app()
