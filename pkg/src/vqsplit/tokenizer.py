"""Convolutional VQ tokenizer: image -> latent grid -> codeword index map.

The encoder downsamples by a power of two with strided convs, producing one
D-dimensional latent per grid cell. Each latent is snapped to its nearest
codeword (squared euclidean, ties to the lowest index); the index grid is
what crosses the wire. A mirrored transposed-conv decoder reconstructs
pixels and exists only to train the tokenizer.

encode/quantize/lookup are pure under frozen weights and safe to call
concurrently; training runs on a single logical thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, DimensionError, NumericsError, ParamStore, Tape, Tensor
from .bitstream import IndexMap


@dataclass(frozen=True)
class TokenizerConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    downsample: int = 4
    widths: tuple[int, ...] = (32, 64)
    codebook_size: int = 64
    code_dim: int = 16
    beta: float = 0.25

    def __post_init__(self):
        if self.height % self.downsample or self.width % self.downsample:
            raise ValueError(
                f"image {self.height}x{self.width} not divisible by downsample "
                f"{self.downsample}")
        if self.downsample != 2 ** len(self.widths):
            raise ValueError(
                f"downsample {self.downsample} needs {int(math.log2(self.downsample))} "
                f"stride-2 stages, got widths {self.widths}")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")

    @property
    def grid_h(self) -> int:
        return self.height // self.downsample

    @property
    def grid_w(self) -> int:
        return self.width // self.downsample


@dataclass(frozen=True)
class LatentGrid:
    """Pre- or post-quantization feature grid for one image."""

    h: int
    w: int
    z: np.ndarray  # shape (h, w, D)

    def __post_init__(self):
        if self.z.shape[:2] != (self.h, self.w):
            raise ValueError(f"grid {self.h}x{self.w} does not match z {self.z.shape}")


class Codebook(nn.Module):
    """Learnable table of N codewords of dimension D."""

    def __init__(self, n_codes: int, dim: int, rng: np.random.Generator):
        if n_codes < 2:
            raise ContractError("codebook needs at least 2 entries")
        self.n_codes = n_codes
        self.dim = dim
        self.vectors = ad.parameter(
            rng.uniform(-1.0 / n_codes, 1.0 / n_codes, size=(n_codes, dim)),
            dtype=ad.DEFAULT_DTYPE)

    @property
    def index_bits(self) -> int:
        return (self.n_codes - 1).bit_length()

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "codebook"
        return {f"{base}.vectors": self.vectors}


def nearest_indices(z: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Nearest codeword per vector; ties go to the lowest index.

    Distances are plain elementwise (v - c)^2 sums in float64 so the result
    is bit-for-bit reproducible against a per-vector exhaustive search.
    """
    if z.shape[-1] != codewords.shape[-1]:
        raise DimensionError(
            f"latent dim {z.shape[-1]} != codeword dim {codewords.shape[-1]}")
    if codewords.shape[0] < 1:
        raise ContractError("empty codebook")
    flat = z.reshape(-1, z.shape[-1]).astype(np.float64)
    cw = codewords.astype(np.float64)
    dist = ((flat[:, None, :] - cw[None, :, :]) ** 2).sum(axis=-1)
    # np.argmin returns the first minimum, which is the lowest index
    return np.argmin(dist, axis=1).reshape(z.shape[:-1])


class VQTokenizer(nn.Module):
    """Encoder + codebook + pixel decoder."""

    def __init__(self, cfg: TokenizerConfig, rng: np.random.Generator):
        self.cfg = cfg
        enc: list[nn.Module] = []
        c_prev = cfg.channels
        for width in cfg.widths:
            enc.append(nn.Conv2d(c_prev, width, kernel=4, stride=2, padding=1, rng=rng))
            c_prev = width
        enc.append(nn.Conv2d(c_prev, cfg.code_dim, kernel=3, stride=1, padding=1, rng=rng))
        self.enc_layers = enc

        dec: list[nn.Module] = [
            nn.Conv2d(cfg.code_dim, c_prev, kernel=3, stride=1, padding=1, rng=rng)]
        for width in reversed((cfg.channels,) + cfg.widths[:-1]):
            dec.append(nn.ConvTranspose2d(c_prev, width, kernel=4, stride=2, padding=1,
                                          rng=rng))
            c_prev = width
        self.dec_layers = dec
        self.codebook = Codebook(cfg.codebook_size, cfg.code_dim, rng)

    # -- batched tensor paths (training and batch inference) --

    def encode(self, images: Tensor) -> Tensor:
        """(B, C, H, W) -> latent grid (B, h, w, D)."""
        b, c, h, w = images.shape
        cfg = self.cfg
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width):
            raise DimensionError(
                f"expected (B, {cfg.channels}, {cfg.height}, {cfg.width}), "
                f"got {images.shape}")
        x = images
        for layer in self.enc_layers[:-1]:
            x = ad.relu(layer(x))
        x = self.enc_layers[-1](x)
        return ad.transpose(x, (0, 2, 3, 1))

    def quantize(self, z: Tensor) -> tuple[np.ndarray, Tensor]:
        """Snap each latent to its nearest codeword.

        Returns the integer index array (same leading shape as z without D)
        and zq holding the exact codeword values. Under an active tape zq
        carries a straight-through gradient: d(loss)/dz = d(loss)/dzq. The
        codebook itself receives no gradient here; it learns through the
        codebook loss term built from lookup().
        """
        idx = nearest_indices(z.data, self.codebook.vectors.data)
        values = self.codebook.vectors.data[idx.reshape(-1)].reshape(z.shape)
        zq = ad.passthrough(z, values)
        return idx, zq

    def lookup(self, indices: np.ndarray) -> Tensor:
        """Gather codewords for an index array; differentiable w.r.t. codebook."""
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.codebook.n_codes):
            raise IndexError(
                f"index out of range for codebook of {self.codebook.n_codes}")
        flat = ad.embedding(self.codebook.vectors, idx.reshape(1, -1))
        return ad.reshape(flat, idx.shape + (self.codebook.dim,))

    def decode_pixels(self, zq: Tensor) -> Tensor:
        """(B, h, w, D) -> reconstructed image (B, C, H, W)."""
        cfg = self.cfg
        if zq.shape[1:] != (cfg.grid_h, cfg.grid_w, cfg.code_dim):
            raise DimensionError(
                f"expected (B, {cfg.grid_h}, {cfg.grid_w}, {cfg.code_dim}), "
                f"got {zq.shape}")
        x = ad.transpose(zq, (0, 3, 1, 2))
        for layer in self.dec_layers[:-1]:
            x = ad.relu(layer(x))
        return self.dec_layers[-1](x)

    # -- single-image typed path (edge inference) --

    def encode_image(self, image: np.ndarray) -> LatentGrid:
        batch = Tensor(image[None].astype(ad.DEFAULT_DTYPE))
        z = self.encode(batch)
        return LatentGrid(h=z.shape[1], w=z.shape[2], z=z.data[0])

    def tokenize_image(self, image: np.ndarray) -> tuple[IndexMap, LatentGrid]:
        grid = self.encode_image(image)
        imap, zq = quantize_grid(grid, self.codebook)
        return imap, zq

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "tokenizer"
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.enc_layers):
            out.update(layer.params(f"{base}.enc.{i}"))
        for i, layer in enumerate(self.dec_layers):
            out.update(layer.params(f"{base}.dec.{i}"))
        out.update(self.codebook.params(f"{base}.codebook"))
        return out


def quantize_grid(grid: LatentGrid, codebook: Codebook) -> tuple[IndexMap, LatentGrid]:
    """Typed single-image quantize: nearest codeword per cell."""
    idx = nearest_indices(grid.z, codebook.vectors.data)
    zq = codebook.vectors.data[idx.reshape(-1)].reshape(grid.z.shape)
    imap = IndexMap(h=grid.h, w=grid.w, indices=idx.reshape(-1))
    return imap, LatentGrid(h=grid.h, w=grid.w, z=zq)


def lookup_grid(imap: IndexMap, codebook: Codebook) -> LatentGrid:
    """Typed single-image lookup: zq[p] = codeword[I[p]]."""
    idx = imap.indices
    if idx.size and idx.max() >= codebook.n_codes:
        raise IndexError(
            f"index {int(idx.max())} out of range for codebook of {codebook.n_codes}")
    z = codebook.vectors.data[idx].reshape(imap.h, imap.w, codebook.dim)
    return LatentGrid(h=imap.h, w=imap.w, z=z)


def vq_losses(tokenizer: VQTokenizer, images: Tensor) -> tuple[dict[str, Tensor], np.ndarray]:
    """Reconstruction + codebook + commitment terms for one batch.

    total = MSE(x, xhat) + mean((sg(z) - zq)^2) + beta * mean((z - sg(zq))^2)
    where sg is stop-gradient. Each term is a mean over elements.
    """
    z = tokenizer.encode(images)
    idx, zq_st = tokenizer.quantize(z)
    xhat = tokenizer.decode_pixels(zq_st)

    diff = ad.sub(images, xhat)
    recon = ad.mean(ad.mul(diff, diff))

    zq_emb = tokenizer.lookup(idx)          # gradient reaches the codebook
    d_cb = ad.sub(z.detach(), zq_emb)
    codebook_term = ad.mean(ad.mul(d_cb, d_cb))
    d_commit = ad.sub(z, zq_emb.detach())
    commitment = ad.mean(ad.mul(d_commit, d_commit))

    total = ad.add(recon, ad.add(codebook_term,
                                 ad.scale(commitment, tokenizer.cfg.beta)))
    losses = {"recon": recon, "codebook": codebook_term,
              "commitment": commitment, "total": total}
    return losses, idx


def tokenizer_train_step(tokenizer: VQTokenizer, store: ParamStore,
                         images: np.ndarray, lr: float = 3e-4) -> dict[str, float]:
    """One optimizer step on the VQ loss. Returns scalar loss components.

    A non-finite loss aborts the step: no parameter is touched and the
    report carries aborted=1.0.
    """
    batch = Tensor(images.astype(ad.DEFAULT_DTYPE))
    try:
        with Tape() as tape:
            losses, idx = vq_losses(tokenizer, batch)
        tape.backward(losses["total"])
    except NumericsError:
        return {"recon": float("nan"), "codebook": float("nan"),
                "commitment": float("nan"), "total": float("nan"),
                "codes_used": 0.0, "aborted": 1.0}
    store.adam_step(lr=lr)
    store.zero_grads()
    out = {name: float(t.data) for name, t in losses.items()}
    out["codes_used"] = float(np.unique(idx).size)
    out["aborted"] = 0.0
    return out
