"""HTTP inference service: one loaded model behind three JSON endpoints.

The model snapshot is immutable after startup. Every request draws from its
own seeded sampler, so identical requests return identical bodies no matter
how many are in flight at once; omitted seeds are drawn fresh and echoed
back for exact replay.
"""

from __future__ import annotations

import secrets

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .autodiff import SeededSampler
from .data import SPECIAL_TOKENS, tokenize
from .decoder import generate_n

MAX_SEED = 2**63 - 1


class GenerateRequest(BaseModel):
    context: list[str] = Field(min_length=1)
    personas: list[str] = Field(default_factory=list)
    n: int = Field(default=1, ge=1, le=64)
    seed: int | None = Field(default=None, ge=0, le=MAX_SEED)
    sds_on: bool = True
    fds_on: bool = True
    max_len: int | None = Field(default=None, ge=1, le=128)


class ResponseItem(BaseModel):
    tokens: list[str]
    text: str
    selected_persona: int | None
    fds_used: bool


class GenerateResponse(BaseModel):
    responses: list[ResponseItem]
    attention: list[list[float]]
    type_trace: list[list[float]]
    z_norms: list[float]
    seed: int


class ModelInfo(BaseModel):
    vocab_size: int
    vocab_hash: str
    hidden: int
    embed_dim: int
    mem_dim: int
    latent_dim: int
    hops: int
    enc_layers: int
    k_max: int
    max_len: int
    n_parameters: int


def create_app(params, vocab):
    app = FastAPI(title="persona-cvae")
    config = params.config
    # the browser client may be opened from file:// or another port
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request, exc):
        # schema violations are client errors, not unprocessable entities
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/api/health")
    def health():
        return {"status": "ok"}

    @app.get("/api/model", response_model=ModelInfo)
    def model_info():
        return ModelInfo(
            vocab_size=len(vocab.id_to_word),
            vocab_hash=vocab.hash(),
            hidden=config.hidden,
            embed_dim=config.embed_dim,
            mem_dim=config.mem_dim,
            latent_dim=config.latent_dim,
            hops=config.hops,
            enc_layers=config.enc_layers,
            k_max=config.k_max,
            max_len=config.max_len,
            n_parameters=params.n_parameters(),
        )

    @app.post("/api/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        if len(req.personas) > config.k_max:
            raise HTTPException(
                status_code=400,
                detail=f"at most {config.k_max} personas supported",
            )
        context = [vocab.encode(tokenize(u)) for u in req.context]
        if any(not toks for toks in context):
            raise HTTPException(status_code=400, detail="empty context utterance")
        personas = [vocab.encode(tokenize(p)) for p in req.personas]
        if any(not toks for toks in personas):
            raise HTTPException(status_code=400, detail="empty persona sentence")

        seed = req.seed if req.seed is not None else secrets.randbelow(MAX_SEED)
        result = generate_n(
            context, personas, req.n, params, SeededSampler(seed),
            max_len=req.max_len or config.max_len,
            sds_on=req.sds_on, fds_on=req.fds_on,
        )
        items = []
        for ids, sel, used in zip(
            result.responses, result.selected_persona, result.fds_used
        ):
            words = vocab.decode(ids)
            items.append(ResponseItem(
                tokens=words,
                text=" ".join(w for w in words if w not in SPECIAL_TOKENS),
                selected_persona=sel,
                fds_used=used,
            ))
        return GenerateResponse(
            responses=items,
            attention=[list(map(float, row)) for row in result.attention_trace],
            type_trace=[[a[0] for a in trace] for trace in result.type_trace],
            z_norms=[float(np.linalg.norm(z)) for z in result.z_used],
            seed=seed,
        )

    return app
