"""VQ tokenizer tests: shapes, nearest-codeword oracle, losses, gradients."""

from __future__ import annotations

import numpy as np
import pytest

from vqsplit import autodiff as ad
from vqsplit.autodiff import ParamStore, Tape, Tensor
from vqsplit.bitstream import IndexMap
from vqsplit.tokenizer import (
    Codebook,
    LatentGrid,
    TokenizerConfig,
    VQTokenizer,
    lookup_grid,
    nearest_indices,
    quantize_grid,
    tokenizer_train_step,
    vq_losses,
)

from helpers import cast_module_f64, check_param_gradients


def small_tokenizer(seed=0, **overrides):
    cfg = TokenizerConfig(**overrides) if overrides else TokenizerConfig()
    return VQTokenizer(cfg, np.random.default_rng(seed))


def brute_force_nearest(vectors: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Per-vector exhaustive search with strict < (first minimum wins)."""
    out = np.zeros(len(vectors), dtype=np.int64)
    for i, v in enumerate(vectors):
        best, best_d = 0, float("inf")
        for j, c in enumerate(codewords):
            d = float(((v.astype(np.float64) - c.astype(np.float64)) ** 2).sum())
            if d < best_d:
                best, best_d = j, d
        out[i] = best
    return out


class TestConfig:
    def test_grid_shape_arithmetic(self):
        cfg = TokenizerConfig()
        assert (cfg.grid_h, cfg.grid_w) == (8, 8)

    def test_large_image_grid_arithmetic(self):
        cfg = TokenizerConfig(height=256, width=256, downsample=16,
                              widths=(8, 8, 8, 8), codebook_size=1024)
        assert (cfg.grid_h, cfg.grid_w) == (16, 16)

    def test_indivisible_image_rejected(self):
        with pytest.raises(ValueError):
            TokenizerConfig(height=30)

    def test_downsample_widths_mismatch_rejected(self):
        with pytest.raises(ValueError):
            TokenizerConfig(downsample=8, widths=(16, 32))


class TestEncode:
    def test_output_grid_shape(self):
        tok = small_tokenizer()
        x = Tensor(np.random.default_rng(1).random((2, 3, 32, 32), dtype=np.float32))
        z = tok.encode(x)
        assert z.shape == (2, 8, 8, 16)

    def test_sixteen_fold_downsample_shape(self):
        tok = small_tokenizer(height=64, width=64, downsample=16,
                              widths=(4, 4, 4, 4), code_dim=8)
        x = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        assert tok.encode(x).shape == (1, 4, 4, 8)

    def test_identical_images_identical_grids(self):
        tok = small_tokenizer()
        img = np.random.default_rng(2).random((1, 3, 32, 32), dtype=np.float32)
        z1 = tok.encode(Tensor(img.copy())).data
        z2 = tok.encode(Tensor(img.copy())).data
        np.testing.assert_array_equal(z1, z2)

    def test_wrong_image_dims_rejected(self):
        tok = small_tokenizer()
        with pytest.raises(ad.DimensionError):
            tok.encode(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))


class TestNearestIndices:
    def test_hand_example(self):
        cb = np.array([[1.0, 0.0], [0.0, 1.0]])
        idx = nearest_indices(np.array([[0.9, 0.1]]), cb)
        assert idx.tolist() == [0]

    def test_exact_codeword_hit(self):
        cb = np.random.default_rng(3).normal(size=(8, 4))
        idx = nearest_indices(cb[5][None], cb)
        assert idx.tolist() == [5]

    def test_tie_breaks_to_lowest_index(self):
        cb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
        idx = nearest_indices(np.array([[1.0, 0.0], [0.5, 0.0]]), cb)
        assert idx.tolist() == [0, 0]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        cb = rng.normal(size=(64, 16)).astype(np.float32)
        vecs = rng.normal(size=(100, 16)).astype(np.float32)
        np.testing.assert_array_equal(nearest_indices(vecs, cb),
                                      brute_force_nearest(vecs, cb))

    def test_nearest_property(self):
        rng = np.random.default_rng(5)
        cb = rng.normal(size=(32, 8))
        vecs = rng.normal(size=(50, 8))
        idx = nearest_indices(vecs, cb)
        d_all = ((vecs[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
        chosen = d_all[np.arange(50), idx]
        assert (chosen[:, None] <= d_all).all()

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ad.DimensionError):
            nearest_indices(np.zeros((2, 3)), np.zeros((4, 5)))


class TestQuantizeLookup:
    def test_zq_holds_exact_codewords(self):
        tok = small_tokenizer()
        z = Tensor(np.random.default_rng(6).normal(size=(1, 8, 8, 16)).astype(np.float32))
        idx, zq = tok.quantize(z)
        np.testing.assert_array_equal(
            zq.data, tok.codebook.vectors.data[idx.reshape(-1)].reshape(zq.shape))

    def test_lookup_matches_quantize_zq_exactly(self):
        tok = small_tokenizer()
        z = Tensor(np.random.default_rng(7).normal(size=(1, 8, 8, 16)).astype(np.float32))
        idx, zq = tok.quantize(z)
        np.testing.assert_array_equal(tok.lookup(idx).data, zq.data)

    def test_quantize_idempotent_on_quantized_grid(self):
        tok = small_tokenizer()
        z = Tensor(np.random.default_rng(8).normal(size=(1, 8, 8, 16)).astype(np.float32))
        idx, zq = tok.quantize(z)
        idx2, zq2 = tok.quantize(Tensor(zq.data.copy()))
        np.testing.assert_array_equal(idx, idx2)
        np.testing.assert_array_equal(zq.data, zq2.data)

    def test_lookup_all_zeros_repeats_first_codeword(self):
        tok = small_tokenizer()
        out = tok.lookup(np.zeros((4,), dtype=np.int64))
        np.testing.assert_array_equal(out.data, np.tile(tok.codebook.vectors.data[0], (4, 1)))

    def test_lookup_rejects_out_of_range(self):
        tok = small_tokenizer()
        with pytest.raises(IndexError):
            tok.lookup(np.array([64]))

    def test_straight_through_gradient_identity(self):
        tok = small_tokenizer()
        rng = np.random.default_rng(9)
        z = ad.parameter(rng.normal(size=(1, 2, 2, 16)).astype(np.float32))
        w = rng.normal(size=(1, 2, 2, 16)).astype(np.float32)
        with Tape() as tape:
            _, zq = tok.quantize(z)
            loss = ad.sum_(ad.mul(zq, Tensor(w)))
        tape.backward(loss)
        np.testing.assert_allclose(z.grad, w, rtol=1e-6)
        # the codebook is not on this gradient path
        cb_grad = tok.codebook.vectors.grad
        assert cb_grad is None or np.all(cb_grad == 0)


class TestTypedSingleImagePath:
    def test_tokenize_image_roundtrip(self):
        tok = small_tokenizer()
        img = np.random.default_rng(10).random((3, 32, 32), dtype=np.float32)
        imap, zq = tok.tokenize_image(img)
        assert isinstance(imap, IndexMap)
        assert (imap.h, imap.w) == (8, 8)
        assert zq.z.shape == (8, 8, 16)
        looked = lookup_grid(imap, tok.codebook)
        np.testing.assert_array_equal(looked.z, zq.z)

    def test_quantize_grid_matches_gather_oracle(self):
        tok = small_tokenizer()
        rng = np.random.default_rng(11)
        grid = LatentGrid(h=8, w=8, z=rng.normal(size=(8, 8, 16)))
        imap, zq = quantize_grid(grid, tok.codebook)
        for p in range(64):
            np.testing.assert_array_equal(
                zq.z.reshape(64, 16)[p], tok.codebook.vectors.data[imap.indices[p]])

    def test_lookup_grid_rejects_bad_index(self):
        tok = small_tokenizer()
        imap = IndexMap(h=1, w=2, indices=np.array([0, 99]))
        with pytest.raises(IndexError):
            lookup_grid(imap, tok.codebook)


class TestDecode:
    def test_output_shape_matches_image(self):
        tok = small_tokenizer()
        zq = Tensor(np.random.default_rng(12).normal(size=(2, 8, 8, 16)).astype(np.float32))
        assert tok.decode_pixels(zq).shape == (2, 3, 32, 32)

    def test_zero_grid_zero_bias_gives_zero_image(self):
        tok = small_tokenizer()
        out = tok.decode_pixels(Tensor(np.zeros((1, 8, 8, 16), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3, 32, 32), dtype=np.float32))

    def test_grid_shape_mismatch_rejected(self):
        tok = small_tokenizer()
        with pytest.raises(ad.DimensionError):
            tok.decode_pixels(Tensor(np.zeros((1, 4, 4, 16), dtype=np.float32)))


class TestVQLoss:
    def test_all_components_nonnegative(self):
        tok = small_tokenizer()
        x = Tensor(np.random.default_rng(13).random((2, 3, 32, 32), dtype=np.float32))
        losses, _ = vq_losses(tok, x)
        for name in ("recon", "codebook", "commitment", "total"):
            assert float(losses[name].data) >= 0.0

    def test_codebook_frozen_at_exact_latents_zeroes_vq_terms(self):
        tok = small_tokenizer(beta=0.0)
        x = Tensor(np.random.default_rng(14).random((1, 3, 32, 32), dtype=np.float32))
        z = tok.encode(x).data.reshape(64, 16)
        tok.codebook.vectors.data = z.copy()
        losses, _ = vq_losses(tok, x)
        assert float(losses["codebook"].data) == 0.0
        assert float(losses["commitment"].data) == 0.0
        assert float(losses["total"].data) == float(losses["recon"].data)

    def test_total_is_weighted_sum_of_components(self):
        tok = small_tokenizer()
        x = Tensor(np.random.default_rng(15).random((2, 3, 32, 32), dtype=np.float32))
        losses, _ = vq_losses(tok, x)
        expect = np.float32(losses["recon"].data) + np.float32(
            losses["codebook"].data + np.float32(0.25 * losses["commitment"].data))
        assert float(losses["total"].data) == pytest.approx(float(expect), rel=1e-6)

    def test_decoder_gradients_match_finite_differences(self):
        tok = small_tokenizer(height=8, width=8, widths=(4, 6), code_dim=4,
                              codebook_size=8)
        cast_module_f64(tok)
        x = Tensor(np.random.default_rng(16).random((1, 3, 8, 8)))

        def loss_fn():
            losses, _ = vq_losses(tok, x)
            return losses["total"]

        params = [tok.dec_layers[1].weight, tok.dec_layers[-1].bias]
        check_param_gradients(loss_fn, params, rel_tol=1e-4)

    def test_encoder_gradient_through_commitment_term(self):
        tok = small_tokenizer(height=8, width=8, widths=(4, 6), code_dim=4,
                              codebook_size=8)
        cast_module_f64(tok)
        x = Tensor(np.random.default_rng(17).random((1, 3, 8, 8)))

        def loss_fn():
            z = tok.encode(x)
            idx, _ = tok.quantize(z)
            d = ad.sub(z, tok.lookup(idx).detach())
            return ad.mean(ad.mul(d, d))

        check_param_gradients(loss_fn, [tok.enc_layers[0].weight], rel_tol=1e-4)

    def test_codebook_gradient_through_codebook_term(self):
        tok = small_tokenizer(height=8, width=8, widths=(4, 6), code_dim=4,
                              codebook_size=8)
        cast_module_f64(tok)
        x = Tensor(np.random.default_rng(18).random((1, 3, 8, 8)))

        def loss_fn():
            z = tok.encode(x)
            idx, _ = tok.quantize(z)
            d = ad.sub(z.detach(), tok.lookup(idx))
            return ad.mean(ad.mul(d, d))

        check_param_gradients(loss_fn, [tok.codebook.vectors], rel_tol=1e-4)


class TestTrainStep:
    def test_step_applies_update_and_reports_components(self):
        tok = small_tokenizer()
        store = ParamStore()
        store.adopt(tok.params())
        before = tok.enc_layers[0].weight.data.copy()
        x = np.random.default_rng(19).random((4, 3, 32, 32), dtype=np.float32)
        out = tokenizer_train_step(tok, store, x)
        assert out["aborted"] == 0.0
        assert out["total"] >= out["recon"] >= 0.0
        assert 1.0 <= out["codes_used"] <= 64.0
        assert not np.array_equal(before, tok.enc_layers[0].weight.data)

    def test_nan_aborts_without_touching_params(self):
        tok = small_tokenizer()
        store = ParamStore()
        store.adopt(tok.params())
        tok.enc_layers[0].weight.data[:] = np.inf
        snapshot = {k: p.data.copy() for k, p in tok.params().items()}
        x = np.random.default_rng(20).random((2, 3, 32, 32), dtype=np.float32)
        with np.errstate(invalid="ignore", over="ignore"):
            out = tokenizer_train_step(tok, store, x)
        assert out["aborted"] == 1.0
        for k, p in tok.params().items():
            np.testing.assert_array_equal(p.data, snapshot[k])

    def test_loss_decreases_over_short_run(self):
        tok = small_tokenizer()
        store = ParamStore()
        store.adopt(tok.params())
        rng = np.random.default_rng(21)
        base = rng.random((8, 3, 32, 32), dtype=np.float32)
        first = tokenizer_train_step(tok, store, base)["recon"]
        last = first
        for _ in range(30):
            last = tokenizer_train_step(tok, store, base)["recon"]
        assert last < first
