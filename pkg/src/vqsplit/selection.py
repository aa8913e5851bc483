"""Token importance scoring and top-K selection.

A small convolutional scorer reads the pre-quantization feature grid and
emits one importance score per token. The K highest-scoring tokens are
kept, ties going to the lower spatial position, and the kept set is
reported as a SelectionResult ready for the wire codec.

During training the kept token embeddings are multiplied by
sigmoid(score), which is the only gradient path into the scorer; inference
uses hard selection with no scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, DimensionError, Tensor
from .bitstream import SelectionResult
from .tokenizer import LatentGrid


@dataclass(frozen=True)
class ImportanceMap:
    """One scalar score per grid position, row-major."""

    h: int
    w: int
    scores: np.ndarray  # (h*w,)

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.shape != (self.h * self.w,):
            raise ValueError(f"expected {self.h * self.w} scores, got {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", s)


class TokenScorer(nn.Module):
    """3x3 depthwise conv, then two pointwise projections down to one score."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.dw_weight = ad.parameter(
            rng.normal(0, np.sqrt(2.0 / 9.0), (dim, 1, 3, 3)), dtype=ad.DEFAULT_DTYPE)
        self.dw_bias = ad.parameter(np.zeros(dim), dtype=ad.DEFAULT_DTYPE)
        self.p1 = nn.Linear(dim, dim, rng)
        self.p2 = nn.Linear(dim, 1, rng)

    def __call__(self, z: Tensor) -> Tensor:
        """(B, h, w, D) feature grid -> (B, h*w) scores."""
        if len(z.shape) != 4 or z.shape[-1] != self.dim:
            raise DimensionError(
                f"expected (B, h, w, {self.dim}) grid, got {z.shape}")
        b, h, w, d = z.shape
        x = ad.transpose(z, (0, 3, 1, 2))
        x = ad.add(ad.depthwise_conv2d(x, self.dw_weight),
                   ad.reshape(self.dw_bias, (1, d, 1, 1)))
        x = ad.transpose(x, (0, 2, 3, 1))
        s = self.p2(ad.relu(self.p1(x)))  # (B, h, w, 1)
        return ad.reshape(s, (b, h * w))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "selector"
        out = {f"{base}.dw_weight": self.dw_weight, f"{base}.dw_bias": self.dw_bias}
        out.update(self.p1.params(f"{base}.p1"))
        out.update(self.p2.params(f"{base}.p2"))
        return out


def score_grid(scorer: TokenScorer, grid: LatentGrid) -> ImportanceMap:
    """Typed single-image scoring of a pre-quantization latent grid."""
    z = Tensor(grid.z[None].astype(ad.DEFAULT_DTYPE))
    scores = scorer(z).data[0]
    return ImportanceMap(h=grid.h, w=grid.w, scores=scores)


def top_k_positions(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the K largest scores, ties to the lower position; ascending.

    Works on (hw,) or batched (B, hw) score arrays.
    """
    s = np.asarray(scores)
    total = s.shape[-1]
    if not 1 <= k <= total:
        raise ContractError(f"K must be in [1, {total}], got {k}")
    # stable argsort of -scores ranks by (-score, position)
    order = np.argsort(-s, axis=-1, kind="stable")
    kept = order[..., :k]
    return np.sort(kept, axis=-1)


def select_top_k(importance: ImportanceMap | np.ndarray, k: int) -> SelectionResult:
    scores = importance.scores if isinstance(importance, ImportanceMap) else \
        np.asarray(importance)
    if scores.ndim != 1:
        raise DimensionError(f"expected flat scores, got shape {scores.shape}")
    kept = top_k_positions(scores, k)
    return SelectionResult.from_positions(kept, int(scores.shape[0]))


def sample_K(k_min: int, k_max: int, rng: np.random.Generator,
             total: int | None = None) -> int:
    """Uniform integer K in [k_min, k_max]."""
    if not 1 <= k_min <= k_max:
        raise ContractError(f"need 1 <= k_min <= k_max, got [{k_min}, {k_max}]")
    if total is not None and k_max > total:
        raise ContractError(f"k_max {k_max} exceeds the grid of {total}")
    return int(rng.integers(k_min, k_max + 1))


def gate_embeddings(kept_embeddings: Tensor, kept_scores: Tensor) -> Tensor:
    """Multiply each kept embedding by sigmoid(its score).

    kept_embeddings: (B, K, d); kept_scores: (B, K). The sigmoid factor is
    the training-time gradient path into the scorer.
    """
    if kept_embeddings.shape[:2] != kept_scores.shape:
        raise ContractError(
            f"embeddings {kept_embeddings.shape} vs scores {kept_scores.shape}")
    b, k = kept_scores.shape
    factor = ad.reshape(ad.sigmoid(kept_scores), (b, k, 1))
    return ad.mul(kept_embeddings, factor)


def selection_gate(kept_scores: Tensor) -> Tensor:
    """(B, K) scores -> (B, K, 1) sigmoid factors for embed-time gating."""
    b, k = kept_scores.shape
    return ad.reshape(ad.sigmoid(kept_scores), (b, k, 1))
