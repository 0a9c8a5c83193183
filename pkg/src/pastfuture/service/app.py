"""FastAPI application serving a loaded checkpoint.

Inference only reads model parameters, so concurrent requests against
one loaded checkpoint are safe. Endpoints return 503 until a checkpoint
is loaded and 400 for direction/shape misuse.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..checkpoint import load_checkpoint
from ..decoding import translate_corpus
from ..errors import ConfigError
from ..metrics import adequacy_proxy, bleu4
from ..training import model_for_direction, models_from_checkpoint
from .schemas import (EvaluateRequest, EvaluateResponse, HealthResponse,
                      TranslateRequest, TranslateResponse)


class _Loaded:
    def __init__(self, checkpoint_path):
        self.ck = load_checkpoint(checkpoint_path)
        (self.cfg, self.models,
         self.src_vocab, self.tgt_vocab) = models_from_checkpoint(self.ck)

    def direction(self, name: str):
        try:
            model = model_for_direction(self.ck, self.models, name)
        except ConfigError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        if name == "fwd":
            return model, self.src_vocab, self.tgt_vocab
        return model, self.tgt_vocab, self.src_vocab


def create_app(checkpoint_path=None) -> FastAPI:
    app = FastAPI(title="pastfuture translation service",
                  version=__version__)
    app.state.loaded = (_Loaded(checkpoint_path)
                        if checkpoint_path is not None else None)

    def _require_loaded() -> _Loaded:
        if app.state.loaded is None:
            raise HTTPException(status_code=503,
                                detail="no checkpoint loaded")
        return app.state.loaded

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        loaded = app.state.loaded
        if loaded is None:
            return HealthResponse(status="empty")
        return HealthResponse(status="ready", mode=loaded.ck.mode,
                              step=loaded.ck.step,
                              directions=sorted(loaded.models))

    @app.post("/translate", response_model=TranslateResponse)
    def translate(req: TranslateRequest) -> TranslateResponse:
        loaded = _require_loaded()
        model, in_vocab, out_vocab = loaded.direction(req.direction)
        sentences = [line.split() for line in req.sentences]
        hyps = translate_corpus(model, in_vocab, out_vocab, sentences)
        return TranslateResponse(
            translations=[" ".join(h) for h in hyps],
            direction=req.direction)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest) -> EvaluateResponse:
        loaded = _require_loaded()
        if len(req.sources) != len(req.references):
            raise HTTPException(
                status_code=400,
                detail=f"{len(req.sources)} sources vs "
                       f"{len(req.references)} references")
        model, in_vocab, out_vocab = loaded.direction(req.direction)
        sources = [line.split() for line in req.sources]
        references = [line.split() for line in req.references]
        hyps = translate_corpus(model, in_vocab, out_vocab, sources)
        under, over = adequacy_proxy(hyps, references)
        return EvaluateResponse(bleu=bleu4(hyps, references),
                                under_rate=under, over_rate=over,
                                n_sentences=len(sources))

    return app
