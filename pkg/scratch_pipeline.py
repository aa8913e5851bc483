"""Scratch: tiny end-to-end pipeline run with timings."""
import time

import numpy as np

from vqsplit import training
from vqsplit.config import RunConfig
from vqsplit.dataset import dataset_arrays, generate_toy_dataset

t0 = time.time()
cfg = RunConfig(train_count=512, test_count=128,
                tokenizer_steps=20, pretrain_steps=20, finetune_steps=20,
                probe_steps=50)
train_x, train_y = dataset_arrays(generate_toy_dataset(cfg.data_seed, cfg.train_count))
test_x, test_y = dataset_arrays(generate_toy_dataset(cfg.data_seed + 1, cfg.test_count))
print(f"data: {time.time()-t0:.2f}s shapes {train_x.shape} {train_y.shape}")

t = time.time()
tok, tok_hist = training.train_tokenizer(cfg, train_x)
dt = time.time() - t
print(f"tokenizer: {dt:.2f}s ({dt/20*1000:.0f} ms/step) "
      f"recon {tok_hist[0]['recon']:.4f} -> {tok_hist[-1]['recon']:.4f}")

t = time.time()
pre = training.pretrain(cfg, tok, train_x, train_y)
dt = time.time() - t
print(f"pretrain: {dt:.2f}s ({dt/20*1000:.0f} ms/step) "
      f"rec {pre.history[0]['rec']:.4f} -> {pre.history[-1]['rec']:.4f} "
      f"dist {pre.history[0]['dist']:.4f} -> {pre.history[-1]['dist']:.4f} "
      f"contra {pre.history[0]['contra']:.4f} -> {pre.history[-1]['contra']:.4f}")

t = time.time()
fin = training.finetune(cfg, tok, pre.encoder, train_x, train_y, mode="variable")
dt = time.time() - t
print(f"finetune: {dt:.2f}s ({dt/20*1000:.0f} ms/step) "
      f"loss {fin.history[0]['loss']:.4f} -> {fin.history[-1]['loss']:.4f}")

t = time.time()
top1, _ = training.linear_probe(cfg, tok, pre.encoder, train_x, train_y,
                                test_x, test_y)
print(f"probe: {time.time()-t:.2f}s top1 {top1:.3f}")
print(f"total: {time.time()-t0:.2f}s")
