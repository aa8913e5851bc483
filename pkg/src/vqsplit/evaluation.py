"""Evaluation: batched accuracy, loss probes, and rate-accuracy sweeps.

The sweep drives the real sender/receiver pair over a channel for every
sample, so its numbers come from decoded packets, not from a shortcut
through shared arrays.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import cloud as cloud_mod
from . import modeling
from .autodiff import Tensor
from .bitstream import compute_bpp
from .channel import queue_pair
from .cloud import CloudRuntime
from .config import RunConfig
from .edge import EdgeRuntime, request_classification, run_edge
from .modeling import ReconstructionDecoder, TaskHead, TokenEncoder
from .selection import TokenScorer, top_k_positions
from .tokenizer import VQTokenizer, nearest_indices
from .training import latent_grids, pretrain_losses


@dataclass(frozen=True)
class EvalRecord:
    k: int
    bpp: float
    top1: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise ValueError(f"top1 must lie in [0,1], got {self.top1}")
        if self.n <= 0:
            raise ValueError(f"sample count must be positive, got {self.n}")


CSV_HEADER = ("K", "bpp", "top1", "n")


def write_sweep_csv(records: list[EvalRecord], target) -> None:
    """Write records as `K,bpp,top1,n` rows to a path or text file object."""
    if isinstance(target, (str, Path)):
        with open(target, "w", newline="") as fh:
            write_sweep_csv(records, fh)
        return
    writer = csv.writer(target)
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow([rec.k, repr(rec.bpp), f"{rec.top1:.6f}", rec.n])


def sweep_csv_text(records: list[EvalRecord]) -> str:
    buf = io.StringIO()
    write_sweep_csv(records, buf)
    return buf.getvalue()


def read_sweep_csv(path: str | Path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"expected header {','.join(CSV_HEADER)}")
    return [EvalRecord(k=int(r[0]), bpp=float(r[1]), top1=float(r[2]),
                       n=int(r[3])) for r in rows[1:]]


# ---------------------------------------------------------------------------
# loss probes on fixed data (before/after training comparisons)
# ---------------------------------------------------------------------------

def recon_mse(tokenizer: VQTokenizer, images: np.ndarray,
              batch_size: int = 128) -> float:
    """Mean squared pixel error through encode -> quantize -> decode."""
    total, count = 0.0, 0
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size].astype(ad.DEFAULT_DTYPE)
        z = tokenizer.encode(Tensor(chunk))
        idx = nearest_indices(z.data, tokenizer.codebook.vectors.data)
        zq = tokenizer.codebook.vectors.data[idx.reshape(-1)].reshape(z.shape)
        xhat = tokenizer.decode_pixels(Tensor(zq)).data
        total += float(((chunk - xhat) ** 2).sum())
        count += chunk.size
    return total / count


def masked_prediction_loss(cfg: RunConfig, encoder: TokenEncoder,
                           decoder: ReconstructionDecoder,
                           index_grids: np.ndarray, masked: np.ndarray,
                           unmasked: np.ndarray,
                           batch_size: int = 64) -> float:
    """Mean NLL of true indices at masked positions, on fixed masks."""
    losses, weights = [], []
    for start in range(0, len(index_grids), batch_size):
        sl = slice(start, start + batch_size)
        encoded = encoder(encoder.embed_visible(index_grids[sl], unmasked[sl]))
        filled = modeling.fill_masked(encoded, unmasked[sl], cfg.total_tokens)
        logits = decoder(filled)
        l = modeling.loss_rec(logits, index_grids[sl], masked[sl])
        losses.append(float(l.data))
        weights.append(len(index_grids[sl]))
    return float(np.average(losses, weights=weights))


# ---------------------------------------------------------------------------
# batched accuracy (in-process shortcut used during training)
# ---------------------------------------------------------------------------

def accuracy_at_k(cfg: RunConfig, tokenizer: VQTokenizer, scorer: TokenScorer,
                  encoder: TokenEncoder, head: TaskHead, images: np.ndarray,
                  labels: np.ndarray, k: int, batch_size: int = 64) -> float:
    """Top-1 accuracy with hard top-K selection, batched for speed."""
    labels = np.asarray(labels, dtype=np.int64)
    hits = 0
    fill = cfg.total_tokens if cfg.fill_dropped else None
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        grids = latent_grids(tokenizer, chunk, batch_size)
        idx = nearest_indices(grids, tokenizer.codebook.vectors.data)
        idx = idx.reshape(len(chunk), -1)
        scores = scorer(Tensor(grids)).data
        kept = top_k_positions(scores, k)
        kept_idx = np.take_along_axis(idx, kept, axis=1)
        if fill is None:
            logits = modeling.class_logits(encoder, head, kept_idx, kept)
        else:
            logits = modeling.class_logits_filled(encoder, head, kept_idx,
                                                  kept, fill)
        hits += int((np.argmax(logits.data, axis=1)
                     == labels[start:start + batch_size]).sum())
    return hits / len(images)


# ---------------------------------------------------------------------------
# the real path: edge -> channel -> cloud, one packet per sample
# ---------------------------------------------------------------------------

def classify_over_channel(edge_rt: EdgeRuntime, cloud_rt: CloudRuntime,
                          images: np.ndarray, k: int) -> np.ndarray:
    """Predicted labels for each image via a queue channel round trip."""
    edge_chan, cloud_chan = queue_pair()
    server = threading.Thread(
        target=cloud_mod.serve, args=(cloud_chan, cloud_rt), kwargs={"timeout": 30})
    server.start()
    try:
        preds = []
        for image in images:
            packet = run_edge(edge_rt, image, k)
            preds.append(request_classification(edge_chan, packet).label)
    finally:
        edge_chan.send(b"")
        server.join(timeout=30)
        edge_chan.close()
        cloud_chan.close()
    return np.array(preds, dtype=np.int64)


def rate_accuracy_sweep(edge_rt: EdgeRuntime, cloud_rt: CloudRuntime,
                        images: np.ndarray, labels: np.ndarray,
                        k_list: list[int], printer=None) -> list[EvalRecord]:
    """Full-path accuracy and rate for each K in k_list."""
    labels = np.asarray(labels, dtype=np.int64)
    cfg = edge_rt.config
    records = []
    for k in k_list:
        preds = classify_over_channel(edge_rt, cloud_rt, images, k)
        top1 = float((preds == labels).mean())
        rate = compute_bpp(k, cfg.codebook_size, cfg.grid_size, cfg.grid_size,
                           cfg.image_size, cfg.image_size)
        rec = EvalRecord(k=k, bpp=rate.bpp, top1=top1, n=len(images))
        records.append(rec)
        if printer is not None:
            printer(f"K {k} bpp {rate.bpp:.6f} top1 {top1:.4f} n {rec.n}")
    return records


def eval_pretrain_losses(cfg: RunConfig, result, index_grids: np.ndarray,
                         masked: np.ndarray, unmasked: np.ndarray,
                         z_img: np.ndarray, z_text: np.ndarray) -> dict[str, float]:
    """All pretraining loss terms on a fixed eval batch (no training)."""
    losses = pretrain_losses(result.encoder, result.decoder, result.projection,
                             index_grids, masked, unmasked, z_img, z_text, cfg)
    return {name: float(t.data) for name, t in losses.items()}
