"""Sender role: turn one image into one token packet.

The edge holds the tokenizer and the selector. For a given budget K it
encodes the image to the latent grid, scores every cell, keeps the top
K positions, quantizes the full grid, and packs the kept indices plus
the position mask into the wire format. Pure function of
(image, K, weights).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bitstream import IndexMap, SelectionResult, encode_packet
from .channel import Channel
from .checkpoint import Checkpoint, load_checkpoint, load_into
from .config import RunConfig
from .nn import freeze
from .protocol import ClassReply, decode_reply
from .selection import TokenScorer, score_grid, select_top_k
from .tokenizer import VQTokenizer, quantize_grid


@dataclass
class EdgeRuntime:
    config: RunConfig
    tokenizer: VQTokenizer
    scorer: TokenScorer


def build_edge_models(cfg: RunConfig, seed: int = 0) -> tuple[VQTokenizer, TokenScorer]:
    tokenizer = VQTokenizer(cfg.tokenizer_config(), np.random.default_rng([seed, 0]))
    scorer = TokenScorer(cfg.code_dim, np.random.default_rng([seed, 4]))
    return tokenizer, scorer


def load_edge_runtime(source: str | Path | Checkpoint) -> EdgeRuntime:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    cfg = ckpt.config
    tokenizer, scorer = build_edge_models(cfg)
    load_into(tokenizer, ckpt.section("tokenizer"), "tokenizer")
    load_into(scorer, ckpt.section("selector"), "selector")
    freeze(tokenizer)
    freeze(scorer)
    return EdgeRuntime(config=cfg, tokenizer=tokenizer, scorer=scorer)


def select_for_image(runtime: EdgeRuntime, image: np.ndarray,
                     k: int) -> tuple[SelectionResult, IndexMap]:
    """Score, select, and quantize: selection plus the full index grid."""
    grid = runtime.tokenizer.encode_image(image)
    importance = score_grid(runtime.scorer, grid)
    sel = select_top_k(importance, k)
    imap, _ = quantize_grid(grid, runtime.tokenizer.codebook)
    return sel, imap


def run_edge(runtime: EdgeRuntime, image: np.ndarray, k: int) -> bytes:
    """image (3, H, W) in [0,1] plus a budget K -> packet bytes."""
    sel, imap = select_for_image(runtime, image, k)
    return encode_packet(imap, sel, runtime.config.codebook_size)


def request_classification(channel: Channel, packet: bytes,
                           timeout: float | None = 30.0) -> ClassReply:
    """Send one packet over an open channel and parse the reply."""
    channel.send(packet)
    return decode_reply(channel.recv(timeout=timeout))
