"""Receiver role: decode token packets and classify them.

This module is the entire import surface of the receiving process. It
deliberately never imports the image tokenizer, the token selector, the
dataset generator, or the sender role, so a deployment built from it has
no code path that can touch pixels; packets are its only input.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import modeling
from .bitstream import (
    PacketCorruptionError,
    PacketFormatError,
    PacketLengthError,
    compute_bpp,
    decode_packet,
    index_bits,
)
from .channel import Channel, ChannelClosed, ChannelServer
from .checkpoint import Checkpoint, load_checkpoint, load_into
from .config import RunConfig
from .labels import CLASS_NAMES
from .modeling import TaskHead, TokenEncoder
from .nn import freeze
from .protocol import SHUTDOWN, encode_error, encode_ok

PACKET_ERRORS = (PacketFormatError, PacketLengthError, PacketCorruptionError)


@dataclass(frozen=True)
class ClassifyResult:
    label: int
    label_name: str
    logits: np.ndarray
    k: int
    bpp: float


@dataclass
class CloudRuntime:
    config: RunConfig
    encoder: TokenEncoder
    head: TaskHead

    @property
    def fill_total(self) -> int | None:
        return self.config.total_tokens if self.config.fill_dropped else None


def build_cloud_models(cfg: RunConfig, seed: int = 0) -> tuple[TokenEncoder, TaskHead]:
    encoder = TokenEncoder(cfg.encoder_config(), np.random.default_rng([seed, 1]))
    head = TaskHead(cfg.d_model, cfg.num_classes, np.random.default_rng([seed, 5]))
    return encoder, head


def load_cloud_runtime(source: str | Path | Checkpoint) -> CloudRuntime:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    cfg = ckpt.config
    encoder, head = build_cloud_models(cfg)
    load_into(encoder, ckpt.section("token_encoder"), "token_encoder")
    load_into(head, ckpt.section("task_head"), "task_head")
    freeze(encoder)
    freeze(head)
    return CloudRuntime(config=cfg, encoder=encoder, head=head)


def classify_packet(runtime: CloudRuntime, packet: bytes) -> ClassifyResult:
    decoded = decode_packet(packet)
    cfg = runtime.config
    if decoded.h * decoded.w != cfg.total_tokens or decoded.N != cfg.codebook_size:
        raise PacketFormatError(
            f"packet geometry {decoded.h}x{decoded.w}/N={decoded.N} does "
            f"not match the loaded model "
            f"({cfg.grid_size}x{cfg.grid_size}/N={cfg.codebook_size})")
    sel = decoded.selection
    if sel.K == 0:
        raise PacketFormatError("packet carries zero tokens, nothing to classify")
    label, logits = modeling.classify_tokens(
        runtime.encoder, runtime.head, decoded.indices, sel.kept_positions,
        fill_total=runtime.fill_total)
    rate = compute_bpp(sel.K, cfg.codebook_size, decoded.h, decoded.w,
                       cfg.image_size, cfg.image_size)
    return ClassifyResult(label=label, label_name=CLASS_NAMES[label],
                          logits=logits, k=sel.K, bpp=rate.bpp)


def serve(channel: Channel, runtime: CloudRuntime,
          timeout: float | None = None) -> int:
    """Answer classification requests until shutdown or disconnect.

    Codec and geometry failures are reported to the peer as error
    replies; the loop keeps serving. Returns the number of requests
    answered.
    """
    served = 0
    while True:
        try:
            request = channel.recv(timeout=timeout)
        except ChannelClosed:
            return served
        if request == SHUTDOWN:
            return served
        try:
            result = classify_packet(runtime, request)
            reply = encode_ok(result.label, result.label_name, result.logits)
        except PACKET_ERRORS as exc:
            reply = encode_error(f"{type(exc).__name__}: {exc}")
        try:
            channel.send(reply)
        except ChannelClosed:
            return served
        served += 1


def describe_packet(packet: bytes) -> dict:
    """Human-readable summary of one packet (inspection path)."""
    decoded = decode_packet(packet)
    sel = decoded.selection
    return {
        "h": decoded.h,
        "w": decoded.w,
        "n_codes": decoded.N,
        "k": sel.K,
        "bits_per_index": index_bits(decoded.N),
        "kept_positions": sel.kept_positions.tolist(),
        "indices": decoded.indices.tolist(),
        "payload_bytes": len(packet),
    }


class CloudServer:
    """Socket front for serve(): one connection at a time, sequential."""

    def __init__(self, runtime: CloudRuntime, host: str = "127.0.0.1",
                 port: int = 0):
        self.runtime = runtime
        self._server = ChannelServer(host, port)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.address

    def serve_connections(self, max_connections: int | None = None,
                          accept_timeout: float | None = None) -> int:
        """Accept and serve connections sequentially; returns requests served."""
        served = 0
        accepted = 0
        while max_connections is None or accepted < max_connections:
            try:
                channel = self._server.accept(timeout=accept_timeout)
            except ChannelClosed:
                break
            except OSError:
                break
            accepted += 1
            try:
                served += serve(channel, self.runtime)
            finally:
                channel.close()
        return served

    def close(self) -> None:
        self._server.close()
