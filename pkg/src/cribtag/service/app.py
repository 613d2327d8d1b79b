"""FastAPI wrapper around a loaded checkpoint.

The service owns one model instance (immutable after load, shared across
requests) and exposes the inference surface: health/info probes, sliding-
window tagging of uploaded recordings, and manifest evaluation. Batch work
(dataset preparation, training) stays in the CLI.
"""

from __future__ import annotations

import hashlib
import io
import logging
import tempfile
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, File, HTTPException, Query, UploadFile

from .. import __version__
from ..audio import read_wav
from ..checkpoint import Checkpoint, load_checkpoint
from ..dataset import load_manifest, load_segments
from ..errors import ConfigError, CribtagError, DataError
from ..frontend import FrontendConfig, NormStats
from ..metrics import DecisionMode, evaluate, report_to_dict
from ..tagging import tag_waveform
from .schemas import (
    EvaluateRequest,
    EvaluateResponse,
    HealthResponse,
    ModelInfoResponse,
    TagResponse,
    TagWindow,
)

log = logging.getLogger(__name__)


class ModelBundle:
    """A checkpoint made servable: model, normalization stats, metadata."""

    def __init__(self, ckpt: Checkpoint):
        ns = ckpt.metadata.get("norm_stats")
        if not ns:
            raise ConfigError("checkpoint carries no norm_stats; re-train or supply stats at import")
        self.model = ckpt.build_model()
        self.stats = NormStats(mean=ns["mean"], std=ns["std"])
        self.metadata = ckpt.metadata
        self.config = ckpt.config
        self.train_digests = set(ckpt.metadata.get("train_record_digests", []))

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.model.params.values())


def record_digest(key: str) -> str:
    return hashlib.sha1(key.encode("utf-8")).hexdigest()


def create_app(checkpoint_path: Optional[str] = None, frontend: Optional[FrontendConfig] = None) -> FastAPI:
    app = FastAPI(title="cribtag", version=__version__)
    app.state.bundle = None
    app.state.frontend = frontend or FrontendConfig()
    if checkpoint_path is not None:
        app.state.bundle = ModelBundle(load_checkpoint(checkpoint_path))
        log.info("serving checkpoint %s (%d parameters)", checkpoint_path, app.state.bundle.n_parameters)

    def require_bundle() -> ModelBundle:
        if app.state.bundle is None:
            raise HTTPException(status_code=503, detail="no checkpoint loaded")
        return app.state.bundle

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", model_loaded=app.state.bundle is not None, version=__version__)

    @app.get("/model", response_model=ModelInfoResponse)
    def model_info() -> ModelInfoResponse:
        bundle = require_bundle()
        return ModelInfoResponse(
            config=bundle.config.to_dict(),
            metadata={k: v for k, v in bundle.metadata.items() if k != "train_record_digests"},
            n_parameters=bundle.n_parameters,
        )

    @app.post("/tag", response_model=TagResponse)
    async def tag(
        file: UploadFile = File(...),
        hop_s: float = Query(default=4.0, gt=0),
    ) -> TagResponse:
        bundle = require_bundle()
        blob = await file.read()
        with tempfile.NamedTemporaryFile(suffix=".wav") as tmp:
            tmp.write(blob)
            tmp.flush()
            try:
                w = read_wav(tmp.name)
            except CribtagError as e:
                raise HTTPException(status_code=400, detail=str(e)) from None
        try:
            windows = tag_waveform(bundle.model, w, bundle.stats, hop_s=hop_s, frontend=app.state.frontend)
        except DataError as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        duration = len(w.samples) / w.sample_rate
        return TagResponse(windows=[TagWindow(**win) for win in windows], hop_s=hop_s, duration_s=duration)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate_manifest(req: EvaluateRequest) -> EvaluateResponse:
        bundle = require_bundle()
        if not Path(req.manifest_path).exists():
            raise HTTPException(status_code=400, detail=f"manifest not found: {req.manifest_path}")
        try:
            records = load_manifest(req.manifest_path)
            if not req.allow_train_eval and bundle.train_digests:
                overlap = [r.key for r in records if record_digest(r.key) in bundle.train_digests]
                if overlap:
                    raise HTTPException(
                        status_code=400,
                        detail=f"{len(overlap)} records were in the training split; "
                        "set allow_train_eval to evaluate anyway",
                    )
            segments = load_segments(records, threads=req.threads)
            report = evaluate(
                bundle.model,
                segments,
                DecisionMode(req.mode),
                stats=bundle.stats,
                frontend=app.state.frontend,
            )
        except HTTPException:
            raise
        except CribtagError as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return EvaluateResponse(**report_to_dict(report))

    return app
