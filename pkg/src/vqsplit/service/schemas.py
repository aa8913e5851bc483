"""Request/response models for the HTTP front of the receiver role."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ClassifyRequest(BaseModel):
    packet_b64: str = Field(description="base64-encoded token packet bytes")


class ClassifyResponse(BaseModel):
    label: int
    label_name: str
    logits: list[float]
    k: int
    bpp: float


class InspectResponse(BaseModel):
    h: int
    w: int
    n_codes: int
    k: int
    bits_per_index: int
    kept_positions: list[int]
    indices: list[int]
    payload_bytes: int


class RateResponse(BaseModel):
    k: int
    index_bits: int
    mask_bits: int
    total_bits: int
    bpp: float


class SectionInfo(BaseModel):
    name: str
    values: int


class ModelResponse(BaseModel):
    grid: int
    codebook_size: int
    code_dim: int
    d_model: int
    num_classes: int
    class_names: list[str]
    fill_dropped: bool
    sections: list[SectionInfo]
    config_text: str


class HealthResponse(BaseModel):
    status: str


class ErrorResponse(BaseModel):
    error: str
    detail: str
