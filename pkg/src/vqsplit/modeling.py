"""Masked token modeling over codeword index grids.

Pretraining: mask most tokens, encode the visible ones plus a class token,
fill every masked slot with the encoded class token, and predict the
missing codeword indices. The encoded class token doubles as the semantic
feature that a projection head aligns with a frozen teacher.

This module deliberately works on plain integer index arrays and never
imports the image tokenizer: the receiving side of a deployment runs only
the code here (plus the wire codec) and has no path to pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class TokenEncoderConfig:
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    max_tokens: int = 64
    vocab: int = 64  # codebook size the index embeddings cover

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class MaskSpec:
    """Partition of the token grid into masked and visible positions."""

    total: int
    ratio: float
    masked: np.ndarray    # sorted positions
    unmasked: np.ndarray  # sorted complement

    def __post_init__(self):
        m = np.asarray(self.masked, dtype=np.int64)
        u = np.asarray(self.unmasked, dtype=np.int64)
        object.__setattr__(self, "masked", m)
        object.__setattr__(self, "unmasked", u)
        if m.size == 0 or u.size == 0:
            raise ContractError("both masked and visible sets must be non-empty")
        if m.size != round(self.ratio * self.total):
            raise ContractError(
                f"|masked|={m.size} != round({self.ratio} * {self.total})")
        merged = np.concatenate([m, u])
        if np.unique(merged).size != self.total or merged.size != self.total:
            raise ContractError("masked and unmasked must partition the grid")


def sample_mask(total: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Uniformly random masked subset of size round(ratio * total)."""
    if total < 2:
        raise ContractError(f"need at least 2 tokens, got {total}")
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"mask ratio must be in (0, 1), got {ratio}")
    k = round(ratio * total)
    if k in (0, total):
        raise ContractError(
            f"ratio {ratio} leaves an empty set at {total} tokens (|masked|={k})")
    perm = rng.permutation(total)
    return MaskSpec(total=total, ratio=ratio,
                    masked=np.sort(perm[:k]), unmasked=np.sort(perm[k:]))


def sample_mask_batch(total: int, ratio: float, rng: np.random.Generator,
                      batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Independent per-sample masks with a shared size; rows are sorted."""
    specs = [sample_mask(total, ratio, rng) for _ in range(batch)]
    return (np.stack([s.masked for s in specs]),
            np.stack([s.unmasked for s in specs]))


class TokenEncoder(nn.Module):
    """Mini transformer over index embeddings with a leading class token."""

    def __init__(self, cfg: TokenEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        std = 0.02
        self.index_embed = ad.parameter(
            rng.normal(0, std, (cfg.vocab, cfg.d_model)), dtype=ad.DEFAULT_DTYPE)
        self.pos_embed = ad.parameter(
            rng.normal(0, std, (cfg.max_tokens, cfg.d_model)), dtype=ad.DEFAULT_DTYPE)
        self.class_token = ad.parameter(
            rng.normal(0, std, (1, cfg.d_model)), dtype=ad.DEFAULT_DTYPE)
        self.blocks = [nn.TransformerBlock(cfg.d_model, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.depth)]
        self.ln = nn.LayerNorm(cfg.d_model)

    # -- sequence assembly --

    def _prepend_class(self, seq: Tensor) -> Tensor:
        b = seq.shape[0]
        ct = ad.add(ad.reshape(self.class_token, (1, 1, self.cfg.d_model)),
                    Tensor(np.zeros((b, 1, self.cfg.d_model), dtype=ad.DEFAULT_DTYPE)))
        return ad.concat([ct, seq], axis=1)

    def embed_positions(self, indices: np.ndarray, positions: np.ndarray,
                        gate: Tensor | None = None) -> Tensor:
        """Index + positional embeddings for chosen grid positions.

        indices: (B, P) codeword ids already gathered at `positions` (B, P).
        gate: optional (B, P, 1) multiplier applied to the token embeddings
        (training-time selection gradient path). Output: (B, P+1, d_model)
        with the class token at row 0.
        """
        idx = np.asarray(indices)
        pos = np.asarray(positions)
        if idx.shape != pos.shape or idx.ndim != 2:
            raise DimensionError(f"indices {idx.shape} vs positions {pos.shape}")
        if pos.size and (pos.min() < 0 or pos.max() >= self.cfg.max_tokens):
            raise IndexError(f"position out of range [0, {self.cfg.max_tokens})")
        tok = ad.embedding(self.index_embed, idx)
        if gate is not None:
            tok = ad.mul(tok, gate)
        seq = ad.add(tok, ad.embedding(self.pos_embed, pos))
        return self._prepend_class(seq)

    def embed_visible(self, indices: np.ndarray, visible: np.ndarray) -> Tensor:
        """Embed only the visible positions of full index grids (B, total)."""
        kept = np.take_along_axis(np.asarray(indices), np.asarray(visible), axis=1)
        return self.embed_positions(kept, visible)

    def embed_full(self, indices: np.ndarray) -> Tensor:
        """Embed every grid position (inference and linear-probe path)."""
        idx = np.asarray(indices)
        pos = np.broadcast_to(np.arange(idx.shape[1]), idx.shape)
        return self.embed_positions(idx, pos)

    # -- transformer --

    def forward(self, seq: Tensor) -> Tensor:
        if seq.shape[1] > self.cfg.max_tokens + 1:
            raise ContractError(
                f"sequence of {seq.shape[1]} exceeds max {self.cfg.max_tokens + 1}")
        x = seq
        for block in self.blocks:
            x = block(x)
        return self.ln(x)

    __call__ = forward

    def attention_maps(self) -> list[np.ndarray]:
        """Per-block attention from the most recent forward."""
        return [b.attn.last_attention for b in self.blocks]

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "token_encoder"
        out = {f"{base}.index_embed": self.index_embed,
               f"{base}.pos_embed": self.pos_embed,
               f"{base}.class_token": self.class_token}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"{base}.blocks.{i}"))
        out.update(self.ln.params(f"{base}.ln"))
        return out


def fill_masked(encoded: Tensor, visible: np.ndarray, total: int) -> Tensor:
    """Scatter encoder output to the full grid, class token filling the rest.

    encoded: (B, V+1, d) from forward(embed_visible(...)); row 0 is the
    encoded class token. Returns (B, total, d).
    """
    vis = np.asarray(visible)
    if encoded.shape[1] != vis.shape[1] + 1:
        raise ContractError(
            f"encoded length {encoded.shape[1]} != visible {vis.shape[1]} + 1")
    return ad.fill_sequence(encoded, vis, total)


class ReconstructionDecoder(nn.Module):
    """Shallow transformer predicting codeword ids at every grid position."""

    def __init__(self, cfg: TokenEncoderConfig, rng: np.random.Generator,
                 depth: int = 2):
        self.cfg = cfg
        self.pos_embed = ad.parameter(
            rng.normal(0, 0.02, (cfg.max_tokens, cfg.d_model)), dtype=ad.DEFAULT_DTYPE)
        self.blocks = [nn.TransformerBlock(cfg.d_model, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(depth)]
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab, rng, std=0.02)

    def __call__(self, filled: Tensor) -> Tensor:
        b, length, d = filled.shape
        if length > self.cfg.max_tokens:
            raise ContractError(f"grid of {length} exceeds max {self.cfg.max_tokens}")
        pos = ad.slice_axis(self.pos_embed, 0, 0, length)
        x = ad.add(filled, ad.reshape(pos, (1, length, d)))
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln(x))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "recon_decoder"
        out = {f"{base}.pos_embed": self.pos_embed}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"{base}.blocks.{i}"))
        out.update(self.ln.params(f"{base}.ln"))
        out.update(self.head.params(f"{base}.head"))
        return out


class ProjectionHead(nn.Module):
    """Two-layer MLP with GELU, then L2 normalization onto the teacher sphere."""

    def __init__(self, d_model: int, d_teacher: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(d_model, d_model, rng)
        self.fc2 = nn.Linear(d_model, d_teacher, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.l2_normalize(self.fc2(ad.gelu(self.fc1(x))))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "projection"
        out = self.fc1.params(f"{base}.fc1")
        out.update(self.fc2.params(f"{base}.fc2"))
        return out


class TaskHead(nn.Module):
    """Linear classifier over the encoded class token."""

    def __init__(self, d_model: int, num_classes: int, rng: np.random.Generator):
        self.linear = nn.Linear(d_model, num_classes, rng)
        self.num_classes = num_classes

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear(x)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        return self.linear.params(prefix or "task_head")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_rec(logits: Tensor, indices: np.ndarray, masked: np.ndarray) -> Tensor:
    """Mean NLL of the true codeword ids at masked positions only.

    logits: (B, total, vocab); indices: (B, total); masked: (B, k).
    """
    msk = np.asarray(masked)
    if msk.ndim != 2 or msk.size == 0:
        raise ContractError("need a non-empty (B, k) masked position array")
    picked = ad.gather_axis1(logits, msk)                    # (B, k, vocab)
    targets = np.take_along_axis(np.asarray(indices), msk, axis=1)  # (B, k)
    b, k, vocab = picked.shape
    flat = ad.reshape(picked, (b * k, vocab))
    return ad.softmax_cross_entropy(flat, targets.reshape(-1))


def loss_dist(z_c: Tensor, z_img: np.ndarray) -> Tensor:
    """Distillation: mean squared error between projected and teacher vectors."""
    target = np.asarray(z_img, dtype=z_c.data.dtype)
    if target.shape != tuple(z_c.shape):
        raise DimensionError(f"teacher {target.shape} vs projection {tuple(z_c.shape)}")
    d = ad.sub(z_c, Tensor(target))
    return ad.mean(ad.mul(d, d))


def loss_contra(z_c: Tensor, z_text: np.ndarray, tau: float) -> Tensor:
    """Symmetric InfoNCE between projected vectors and label embeddings.

    Both directions of the (B, B) similarity matrix are averaged; the
    positive pair is the diagonal.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    target = np.asarray(z_text, dtype=z_c.data.dtype)
    b = z_c.shape[0]
    if b < 2:
        raise ContractError(f"contrastive loss needs a batch of >= 2, got {b}")
    if target.shape != tuple(z_c.shape):
        raise DimensionError(f"teacher {target.shape} vs projection {tuple(z_c.shape)}")
    sim = ad.scale(ad.matmul(Tensor(target), ad.transpose(z_c, (1, 0))), 1.0 / tau)
    diag = np.arange(b)
    text_to_c = ad.softmax_cross_entropy(sim, diag)
    c_to_text = ad.softmax_cross_entropy(ad.transpose(sim, (1, 0)), diag)
    return ad.scale(ad.add(text_to_c, c_to_text), 0.5)


def combine_losses(l_rec: Tensor, l_dist: Tensor, l_contra: Tensor,
                   lambda_dist: float, lambda_contra: float) -> Tensor:
    """total = rec + lambda_d * dist + lambda_c * contra, exactly this shape."""
    return ad.add(l_rec, ad.add(ad.scale(l_dist, lambda_dist),
                                ad.scale(l_contra, lambda_contra)))


# ---------------------------------------------------------------------------
# inference path (receiving side)
# ---------------------------------------------------------------------------

def class_logits(encoder: TokenEncoder, head: TaskHead, indices: np.ndarray,
                 positions: np.ndarray) -> Tensor:
    """Logits from kept tokens placed at their true grid positions."""
    seq = encoder.embed_positions(indices, positions)
    encoded = encoder(seq)
    cls = ad.reshape(ad.slice_axis(encoded, 1, 0, 1), (encoded.shape[0], -1))
    return head(cls)


def class_logits_filled(encoder: TokenEncoder, head: TaskHead,
                        indices: np.ndarray, positions: np.ndarray,
                        total: int) -> Tensor:
    """Ablation path: keep full-length sequences, filling dropped slots.

    A first pass over the kept tokens produces the encoded class token,
    which then stands in for every dropped grid slot (with that slot's
    positional embedding) in a second full-length pass.
    """
    idx = np.asarray(indices)
    pos = np.asarray(positions)
    enc1 = encoder(encoder.embed_positions(idx, pos))
    cls_fill = ad.slice_axis(enc1, 1, 0, 1)
    tok = ad.embedding(encoder.index_embed, idx)
    packed = ad.concat([cls_fill, tok], axis=1)  # row 0 fills dropped slots
    grid = ad.fill_sequence(packed, pos, total)
    all_pos = np.broadcast_to(np.arange(total), (idx.shape[0], total))
    seq = ad.add(grid, ad.embedding(encoder.pos_embed, all_pos))
    enc2 = encoder(encoder._prepend_class(seq))
    cls = ad.reshape(ad.slice_axis(enc2, 1, 0, 1), (enc2.shape[0], -1))
    return head(cls)


def classify_tokens(encoder: TokenEncoder, head: TaskHead, indices: np.ndarray,
                    positions: np.ndarray,
                    fill_total: int | None = None) -> tuple[int, np.ndarray]:
    """Single-sample classification: kept codeword ids + their positions.

    fill_total switches to the full-length fill path (ablation flag).
    """
    idx = np.asarray(indices)[None]
    pos = np.asarray(positions)[None]
    if fill_total is None:
        logits = class_logits(encoder, head, idx, pos)
    else:
        logits = class_logits_filled(encoder, head, idx, pos, fill_total)
    row = logits.data[0]
    return int(np.argmax(row)), row
