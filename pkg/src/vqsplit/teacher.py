"""Frozen semantic teachers: unit-norm image and label embeddings.

A teacher supplies the supervision targets for pretraining: z_img for the
distillation term and z_text for the contrastive term. Two implementations:

* ToyTeacher: a frozen random-weight convnet plus a random label table,
  fully self-contained and deterministic per seed.
* FileTeacher: reads precomputed embeddings from disk so externally
  computed vectors (e.g. from a large vision-language model) can be
  injected without any ML runtime dependency. Image embeddings are keyed
  by dataset sample index, label embeddings by class id.

Embedding file layout, all little-endian:
    u32 record count, u32 dim, then per record: u32 key, dim * f32 values.

Teachers are frozen: every method is pure and concurrent-safe.
"""

from __future__ import annotations

import struct
from typing import Protocol, runtime_checkable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

TEACHER_DIM = 32
_MAX_PAIR_COS = 0.99


@runtime_checkable
class SemanticTeacher(Protocol):
    """Interface every teacher satisfies."""

    @property
    def dim(self) -> int: ...

    def embed_image(self, image: np.ndarray, sample_id: int | None = None) -> np.ndarray: ...

    def embed_images(self, images: np.ndarray,
                     sample_ids: np.ndarray | None = None) -> np.ndarray: ...

    def embed_label(self, label: int) -> np.ndarray: ...

    def embed_labels(self, labels: np.ndarray) -> np.ndarray: ...


def _normalize_rows(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + eps)


class ToyTeacher:
    """Random frozen convnet for images, random table for labels.

    Construction verifies the label rows are pairwise distinct (cosine
    below 0.99) and redraws from a shifted seed until they are.
    """

    def __init__(self, seed: int, dim: int = TEACHER_DIM, num_classes: int = 8,
                 image_size: int = 32):
        self.dim = dim
        self.image_size = image_size
        for attempt in range(64):
            rng = np.random.default_rng([seed, attempt])
            self._w1 = rng.normal(0, np.sqrt(2 / 48), (16, 3, 4, 4)).astype(np.float32)
            self._w2 = rng.normal(0, np.sqrt(2 / 256), (32, 16, 4, 4)).astype(np.float32)
            self._proj = rng.normal(0, np.sqrt(1 / 32), (32, dim)).astype(np.float32)
            table = _normalize_rows(rng.normal(size=(num_classes, dim)))
            cos = table @ table.T
            np.fill_diagonal(cos, 0.0)
            if np.abs(cos).max() < _MAX_PAIR_COS:
                self._label_table = table.astype(np.float32)
                return
        raise RuntimeError("could not draw a distinct label table")

    def embed_images(self, images: np.ndarray,
                     sample_ids: np.ndarray | None = None) -> np.ndarray:
        x = np.asarray(images, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected (B, 3, H, W) images, got {x.shape}")
        h = ad.relu(ad.conv2d(Tensor(x), Tensor(self._w1), stride=2, padding=1))
        h = ad.relu(ad.conv2d(h, Tensor(self._w2), stride=2, padding=1))
        pooled = h.data.mean(axis=(2, 3))  # (B, 32)
        return _normalize_rows(pooled @ self._proj)

    def embed_image(self, image: np.ndarray, sample_id: int | None = None) -> np.ndarray:
        return self.embed_images(np.asarray(image)[None])[0]

    def embed_labels(self, labels: np.ndarray) -> np.ndarray:
        idx = np.asarray(labels, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self._label_table)):
            raise IndexError(f"class id out of range [0, {len(self._label_table)})")
        return self._label_table[idx]

    def embed_label(self, label: int) -> np.ndarray:
        return self.embed_labels(np.array([label]))[0]


def write_embedding_file(path: str, embeddings: dict[int, np.ndarray]) -> None:
    if not embeddings:
        raise ValueError("refusing to write an empty embedding file")
    dims = {np.asarray(v).shape for v in embeddings.values()}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError(f"all embeddings must share one 1-d shape, got {dims}")
    dim = next(iter(dims))[0]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", len(embeddings), dim))
        for key in sorted(embeddings):
            fh.write(struct.pack("<I", key))
            fh.write(np.asarray(embeddings[key], dtype="<f4").tobytes())


def read_embedding_file(path: str) -> tuple[dict[int, np.ndarray], int]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ValueError("embedding file shorter than its 8-byte header")
        count, dim = struct.unpack("<II", head)
        if dim == 0:
            raise ValueError("embedding dim 0")
        out: dict[int, np.ndarray] = {}
        record = 4 + 4 * dim
        for _ in range(count):
            buf = fh.read(record)
            if len(buf) != record:
                raise ValueError(f"truncated record (got {len(buf)} of {record} bytes)")
            key = struct.unpack_from("<I", buf)[0]
            out[key] = np.frombuffer(buf, dtype="<f4", count=dim, offset=4).copy()
        if fh.read(1):
            raise ValueError("trailing bytes after last record")
    return out, dim


class FileTeacher:
    """Teacher backed by precomputed embedding files.

    Image vectors are keyed by sample index, so callers must pass
    sample_ids; pixels are never read. Rows are re-normalized on load so
    the unit-norm contract holds regardless of how the file was produced.
    """

    def __init__(self, label_path: str, image_path: str | None = None):
        labels, dim = read_embedding_file(label_path)
        self.dim = dim
        self._labels = {k: _normalize_rows(v[None])[0] for k, v in labels.items()}
        self._images: dict[int, np.ndarray] = {}
        if image_path is not None:
            images, idim = read_embedding_file(image_path)
            if idim != dim:
                raise ValueError(f"label dim {dim} != image dim {idim}")
            self._images = {k: _normalize_rows(v[None])[0] for k, v in images.items()}

    def embed_images(self, images: np.ndarray,
                     sample_ids: np.ndarray | None = None) -> np.ndarray:
        if sample_ids is None:
            raise ContractError("file teacher needs sample_ids to look up image vectors")
        rows = []
        for sid in np.asarray(sample_ids, dtype=np.int64):
            if int(sid) not in self._images:
                raise KeyError(f"no image embedding for sample {int(sid)}")
            rows.append(self._images[int(sid)])
        return np.stack(rows)

    def embed_image(self, image: np.ndarray, sample_id: int | None = None) -> np.ndarray:
        if sample_id is None:
            raise ContractError("file teacher needs a sample_id")
        return self.embed_images(None, np.array([sample_id]))[0]

    def embed_labels(self, labels: np.ndarray) -> np.ndarray:
        rows = []
        for lab in np.asarray(labels, dtype=np.int64):
            if int(lab) not in self._labels:
                raise KeyError(f"no label embedding for class {int(lab)}")
            rows.append(self._labels[int(lab)])
        return np.stack(rows)

    def embed_label(self, label: int) -> np.ndarray:
        return self.embed_labels(np.array([label]))[0]
