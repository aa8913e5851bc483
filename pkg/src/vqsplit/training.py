"""Training drivers: tokenizer, masked pretraining, finetuning, probing.

Each driver is deterministic given a RunConfig: every random stream is
seeded as default_rng([seed, stream-id]) so results do not depend on
call order. The tokenizer is trained first and stays frozen afterwards;
pretraining fits the token encoder, the reconstruction decoder, and the
projection head; finetuning fits the token encoder, the selector, and
the task head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import modeling
from .autodiff import ParamStore, Tape, Tensor
from .config import RunConfig
from .modeling import (
    ProjectionHead,
    ReconstructionDecoder,
    TaskHead,
    TokenEncoder,
    fill_masked,
    sample_mask_batch,
)
from .nn import Linear, freeze
from .selection import TokenScorer, sample_K, selection_gate, top_k_positions
from .teacher import FileTeacher, SemanticTeacher, ToyTeacher
from .tokenizer import VQTokenizer, nearest_indices, tokenizer_train_step

# random stream ids, one per concern
STREAM_TOKENIZER = 0
STREAM_ENCODER = 1
STREAM_DECODER = 2
STREAM_PROJECTION = 3
STREAM_SELECTOR = 4
STREAM_HEAD = 5
STREAM_BATCHES = 7
STREAM_MASKS = 8
STREAM_BUDGET = 9
STREAM_PROBE = 10


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def make_teacher(cfg: RunConfig) -> SemanticTeacher:
    """File-backed teacher when paths are configured, built-in otherwise."""
    if cfg.teacher_labels:
        return FileTeacher(cfg.teacher_labels, cfg.teacher_images or None)
    return ToyTeacher(seed=cfg.data_seed, dim=cfg.teacher_dim)


class _Batches:
    """Endless shuffled minibatches over a fixed sample count."""

    def __init__(self, count: int, batch_size: int, rng: np.random.Generator):
        if count < batch_size:
            raise ad.ContractError(
                f"dataset of {count} smaller than batch size {batch_size}")
        self.count = count
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(count)
        self._at = 0

    def next(self) -> np.ndarray:
        if self._at + self.batch_size > self.count:
            self._order = self.rng.permutation(self.count)
            self._at = 0
        out = self._order[self._at:self._at + self.batch_size]
        self._at += self.batch_size
        return out


# ---------------------------------------------------------------------------
# frozen-tokenizer precomputation
# ---------------------------------------------------------------------------

def latent_grids(tokenizer: VQTokenizer, images: np.ndarray,
                 batch_size: int = 256) -> np.ndarray:
    """Continuous latent grids (B, h, w, D) for a frozen tokenizer."""
    outs = []
    for start in range(0, len(images), batch_size):
        chunk = Tensor(images[start:start + batch_size].astype(ad.DEFAULT_DTYPE))
        outs.append(tokenizer.encode(chunk).data)
    return np.concatenate(outs, axis=0)


def tokenize_dataset(tokenizer: VQTokenizer, images: np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """Codeword index grids flattened to (B, h*w) for a frozen tokenizer."""
    grids = latent_grids(tokenizer, images, batch_size)
    idx = nearest_indices(grids, tokenizer.codebook.vectors.data)
    return idx.reshape(len(images), -1)


# ---------------------------------------------------------------------------
# stage 1: tokenizer
# ---------------------------------------------------------------------------

def train_tokenizer(cfg: RunConfig, images: np.ndarray,
                    steps: int | None = None,
                    printer=None) -> tuple[VQTokenizer, list[dict]]:
    steps = cfg.tokenizer_steps if steps is None else steps
    tokenizer = VQTokenizer(cfg.tokenizer_config(),
                            stream_rng(cfg.seed, STREAM_TOKENIZER))
    store = ParamStore()
    store.adopt(tokenizer.params())
    batches = _Batches(len(images), cfg.batch_size,
                       stream_rng(cfg.seed, STREAM_BATCHES))
    history = []
    for step in range(steps):
        metrics = tokenizer_train_step(tokenizer, store,
                                       images[batches.next()], lr=cfg.lr)
        metrics["step"] = step
        history.append(metrics)
        if printer is not None:
            printer(f"tokenizer step {step} "
                    f"recon {metrics['recon']:.6f} total {metrics['total']:.6f} "
                    f"codes {metrics['codes_used']:.0f}")
    return tokenizer, history


# ---------------------------------------------------------------------------
# stage 2: masked pretraining with the semantic teacher
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    encoder: TokenEncoder
    decoder: ReconstructionDecoder
    projection: ProjectionHead
    history: list[dict] = field(default_factory=list)


def _class_row(encoded: Tensor) -> Tensor:
    """(B, T+1, d) -> the encoded class token (B, d)."""
    return ad.reshape(ad.slice_axis(encoded, 1, 0, 1), (encoded.shape[0], -1))


def pretrain_losses(encoder: TokenEncoder, decoder: ReconstructionDecoder,
                    projection: ProjectionHead, indices: np.ndarray,
                    masked: np.ndarray, unmasked: np.ndarray,
                    z_img: np.ndarray, z_text: np.ndarray,
                    cfg: RunConfig) -> dict[str, Tensor]:
    """All pretraining losses for one batch of index grids."""
    total = indices.shape[1]
    encoded = encoder(encoder.embed_visible(indices, unmasked))
    filled = fill_masked(encoded, unmasked, total)
    logits = decoder(filled)
    l_rec = modeling.loss_rec(logits, indices, masked)
    z_c = projection(_class_row(encoded))
    l_dist = modeling.loss_dist(z_c, z_img)
    l_contra = modeling.loss_contra(z_c, z_text, cfg.temperature)
    l_total = modeling.combine_losses(l_rec, l_dist, l_contra,
                                      cfg.lambda_dist, cfg.lambda_contra)
    return {"rec": l_rec, "dist": l_dist, "contra": l_contra, "total": l_total}


def pretrain(cfg: RunConfig, tokenizer: VQTokenizer, images: np.ndarray,
             labels: np.ndarray, teacher: SemanticTeacher | None = None,
             steps: int | None = None, printer=None) -> PretrainResult:
    steps = cfg.pretrain_steps if steps is None else steps
    if teacher is None:
        teacher = make_teacher(cfg)
    freeze(tokenizer)

    encoder = TokenEncoder(cfg.encoder_config(), stream_rng(cfg.seed, STREAM_ENCODER))
    decoder = ReconstructionDecoder(cfg.encoder_config(),
                                    stream_rng(cfg.seed, STREAM_DECODER),
                                    depth=cfg.recon_depth)
    projection = ProjectionHead(cfg.d_model, cfg.teacher_dim,
                                stream_rng(cfg.seed, STREAM_PROJECTION))
    store = ParamStore()
    store.adopt(encoder.params())
    store.adopt(decoder.params())
    store.adopt(projection.params())

    index_grids = tokenize_dataset(tokenizer, images)
    z_img = teacher.embed_images(images, sample_ids=np.arange(len(images)))
    z_text = teacher.embed_labels(labels)

    total = cfg.total_tokens
    batches = _Batches(len(images), cfg.batch_size, stream_rng(cfg.seed, STREAM_BATCHES))
    mask_rng = stream_rng(cfg.seed, STREAM_MASKS)
    result = PretrainResult(encoder=encoder, decoder=decoder, projection=projection)
    for step in range(steps):
        pick = batches.next()
        masked, unmasked = sample_mask_batch(total, cfg.mask_ratio, mask_rng,
                                             len(pick))
        with Tape() as tape:
            losses = pretrain_losses(encoder, decoder, projection,
                                     index_grids[pick], masked, unmasked,
                                     z_img[pick], z_text[pick], cfg)
        tape.backward(losses["total"])
        store.adam_step(lr=cfg.lr)
        store.zero_grads()
        entry = {name: float(t.data) for name, t in losses.items()}
        entry["step"] = step
        result.history.append(entry)
        if printer is not None:
            printer(f"pretrain step {step} rec {entry['rec']:.6f} "
                    f"dist {entry['dist']:.6f} contra {entry['contra']:.6f} "
                    f"total {entry['total']:.6f}")
    return result


# ---------------------------------------------------------------------------
# stage 3: task finetuning with token selection
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    encoder: TokenEncoder
    scorer: TokenScorer
    head: TaskHead
    history: list[dict] = field(default_factory=list)


def finetune(cfg: RunConfig, tokenizer: VQTokenizer, encoder: TokenEncoder,
             images: np.ndarray, labels: np.ndarray, mode: str = "variable",
             k: int | None = None, steps: int | None = None,
             printer=None) -> FinetuneResult:
    """Train encoder + selector + classification head at a token budget.

    mode "fixed" uses the same K every step (default k_max); mode
    "variable" samples K uniformly from [k_min, k_max] once per step.
    """
    if mode not in ("fixed", "variable"):
        raise ad.ContractError(f"mode must be fixed or variable, got {mode!r}")
    steps = cfg.finetune_steps if steps is None else steps
    fixed_k = cfg.k_max if k is None else k
    if not 1 <= fixed_k <= cfg.total_tokens:
        raise ad.ContractError(f"k {fixed_k} out of [1, {cfg.total_tokens}]")
    freeze(tokenizer)

    scorer = TokenScorer(cfg.code_dim, stream_rng(cfg.seed, STREAM_SELECTOR))
    head = TaskHead(cfg.d_model, cfg.num_classes, stream_rng(cfg.seed, STREAM_HEAD))
    store = ParamStore()
    store.adopt(encoder.params())
    store.adopt(scorer.params("selector"))
    store.adopt(head.params("task_head"))

    grids = latent_grids(tokenizer, images)
    index_grids = nearest_indices(
        grids, tokenizer.codebook.vectors.data).reshape(len(images), -1)
    labels = np.asarray(labels, dtype=np.int64)

    batches = _Batches(len(images), cfg.batch_size, stream_rng(cfg.seed, STREAM_BATCHES))
    budget_rng = stream_rng(cfg.seed, STREAM_BUDGET)
    result = FinetuneResult(encoder=encoder, scorer=scorer, head=head)
    for step in range(steps):
        pick = batches.next()
        if mode == "variable":
            k_step = sample_K(cfg.k_min, cfg.k_max, budget_rng, cfg.total_tokens)
        else:
            k_step = fixed_k
        with Tape() as tape:
            scores = scorer(Tensor(grids[pick]))                    # (B, hw)
            kept = top_k_positions(scores.data, k_step)             # (B, K)
            kept_idx = np.take_along_axis(index_grids[pick], kept, axis=1)
            gate = selection_gate(ad.gather_axis1(scores, kept))
            seq = encoder.embed_positions(kept_idx, kept, gate=gate)
            logits = head(_class_row(encoder(seq)))
            loss = ad.softmax_cross_entropy(logits, labels[pick])
        tape.backward(loss)
        store.adam_step(lr=cfg.lr)
        store.zero_grads()
        top1 = float((np.argmax(logits.data, axis=1) == labels[pick]).mean())
        entry = {"step": step, "k": int(k_step), "loss": float(loss.data),
                 "batch_top1": top1}
        result.history.append(entry)
        if printer is not None:
            printer(f"finetune step {step} k {k_step} "
                    f"loss {entry['loss']:.6f} batch_top1 {top1:.3f}")
    return result


# ---------------------------------------------------------------------------
# linear probing of pretrained features
# ---------------------------------------------------------------------------

def class_features(encoder: TokenEncoder, index_grids: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Encoded class token over the full (unselected) sequence, per sample."""
    outs = []
    for start in range(0, len(index_grids), batch_size):
        chunk = index_grids[start:start + batch_size]
        encoded = encoder(encoder.embed_full(chunk))
        outs.append(_class_row(encoded).data)
    return np.concatenate(outs, axis=0)


def linear_probe(cfg: RunConfig, tokenizer: VQTokenizer, encoder: TokenEncoder,
                 train_images: np.ndarray, train_labels: np.ndarray,
                 test_images: np.ndarray, test_labels: np.ndarray,
                 steps: int | None = None,
                 printer=None) -> tuple[float, Linear]:
    """Freeze everything, fit a linear classifier on [C'], report test top1."""
    steps = cfg.probe_steps if steps is None else steps
    freeze(tokenizer)
    freeze(encoder)
    train_feats = class_features(encoder, tokenize_dataset(tokenizer, train_images))
    test_feats = class_features(encoder, tokenize_dataset(tokenizer, test_images))
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)

    probe = Linear(train_feats.shape[1], cfg.num_classes,
                   stream_rng(cfg.seed, STREAM_PROBE))
    store = ParamStore()
    store.adopt(probe.params("probe"))
    batches = _Batches(len(train_feats), min(cfg.batch_size * 4, len(train_feats)),
                       stream_rng(cfg.seed, STREAM_PROBE + 1))
    for step in range(steps):
        pick = batches.next()
        with Tape() as tape:
            logits = probe(Tensor(train_feats[pick]))
            loss = ad.softmax_cross_entropy(logits, train_labels[pick])
        tape.backward(loss)
        store.adam_step(lr=1e-2)
        store.zero_grads()
        if printer is not None and step % 50 == 0:
            printer(f"probe step {step} loss {float(loss.data):.6f}")
    pred = np.argmax(probe(Tensor(test_feats)).data, axis=1)
    top1 = float((pred == test_labels).mean())
    return top1, probe
