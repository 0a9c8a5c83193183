"""Request/response bodies for the translation service."""

from typing import Literal, Optional

from pydantic import BaseModel, Field

Direction = Literal["fwd", "bwd"]


class HealthResponse(BaseModel):
    status: Literal["ready", "empty"]
    mode: Optional[str] = None
    step: Optional[int] = None
    directions: list[str] = Field(default_factory=list)


class TranslateRequest(BaseModel):
    sentences: list[str] = Field(min_length=1,
                                 description="whitespace-tokenized lines")
    direction: Direction = "fwd"


class TranslateResponse(BaseModel):
    translations: list[str]
    direction: Direction


class EvaluateRequest(BaseModel):
    sources: list[str] = Field(min_length=1)
    references: list[str] = Field(min_length=1)
    direction: Direction = "fwd"


class EvaluateResponse(BaseModel):
    bleu: float
    under_rate: float
    over_rate: float
    n_sentences: int
