"""Pydantic request/response models for the serving API."""

from __future__ import annotations

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    model_loaded: bool
    version: str


class ModelInfoResponse(BaseModel):
    config: dict
    metadata: dict
    n_parameters: int


class TagWindow(BaseModel):
    onset_s: float
    offset_s: float
    label: str
    probs: Dict[str, float]


class TagResponse(BaseModel):
    windows: List[TagWindow]
    hop_s: float
    duration_s: float


class EvaluateRequest(BaseModel):
    manifest_path: str
    mode: str = Field(default="single_label", pattern="^(single_label|multi_label)$")
    allow_train_eval: bool = False
    threads: int = Field(default=1, ge=1, le=32)


class MacroMetrics(BaseModel):
    precision: float
    recall: float
    f1: float


class EvaluateResponse(BaseModel):
    accuracy: float
    macro: MacroMetrics
    per_class: Dict[str, Dict[str, float]]
    kappa: Optional[float] = None
    p_o: Optional[float] = None
    p_e: Optional[float] = None
    confusion: Optional[List[List[int]]] = None
    n: int
    mode: str
