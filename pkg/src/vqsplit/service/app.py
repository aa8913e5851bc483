"""HTTP wrapper around the receiver role.

Exposes the same classify/inspect operations the socket protocol
carries, plus health and model-info endpoints. Like the socket server,
this module never touches image pixels: requests carry packets.
"""

from __future__ import annotations

import base64
import binascii

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from ..bitstream import compute_bpp, index_bits
from ..cloud import PACKET_ERRORS, CloudRuntime, classify_packet, describe_packet
from ..labels import CLASS_NAMES
from .schemas import (
    ClassifyRequest,
    ClassifyResponse,
    HealthResponse,
    InspectResponse,
    ModelResponse,
    RateResponse,
    SectionInfo,
)


def _packet_bytes(request: ClassifyRequest) -> bytes:
    try:
        return base64.b64decode(request.packet_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(status_code=422,
                            detail=f"packet_b64 is not valid base64: {exc}")


def create_app(runtime: CloudRuntime) -> FastAPI:
    app = FastAPI(title="token packet classifier", version="1")
    cfg = runtime.config

    async def packet_error(request, exc):
        return JSONResponse(status_code=400, content={
            "error": type(exc).__name__, "detail": str(exc)})

    for klass in PACKET_ERRORS:
        app.add_exception_handler(klass, packet_error)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok")

    @app.get("/model", response_model=ModelResponse)
    def model():
        sections = [
            SectionInfo(name="token_encoder", values=runtime.encoder.num_values()),
            SectionInfo(name="task_head", values=runtime.head.num_values()),
        ]
        return ModelResponse(
            grid=cfg.grid_size, codebook_size=cfg.codebook_size,
            code_dim=cfg.code_dim, d_model=cfg.d_model,
            num_classes=cfg.num_classes, class_names=list(CLASS_NAMES),
            fill_dropped=cfg.fill_dropped, sections=sections,
            config_text=cfg.to_text())

    @app.get("/rate/{k}", response_model=RateResponse)
    def rate(k: int):
        if not 1 <= k <= cfg.total_tokens:
            raise HTTPException(status_code=422,
                                detail=f"k must lie in [1, {cfg.total_tokens}]")
        report = compute_bpp(k, cfg.codebook_size, cfg.grid_size,
                             cfg.grid_size, cfg.image_size, cfg.image_size)
        return RateResponse(k=k, index_bits=report.index_bits,
                            mask_bits=report.mask_bits,
                            total_bits=report.total_bits, bpp=report.bpp)

    @app.post("/classify", response_model=ClassifyResponse)
    def classify(request: ClassifyRequest):
        result = classify_packet(runtime, _packet_bytes(request))
        return ClassifyResponse(
            label=result.label, label_name=result.label_name,
            logits=[float(v) for v in result.logits], k=result.k,
            bpp=result.bpp)

    @app.post("/inspect", response_model=InspectResponse)
    def inspect(request: ClassifyRequest):
        return InspectResponse(**describe_packet(_packet_bytes(request)))

    return app
