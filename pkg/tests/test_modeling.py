"""Token modeling tests: masking, encoder, fill, losses, inference path."""

from __future__ import annotations

import math

import numpy as np
import pytest

from vqsplit import autodiff as ad
from vqsplit.autodiff import ContractError, Tape, Tensor
from vqsplit.modeling import (
    MaskSpec,
    ProjectionHead,
    ReconstructionDecoder,
    TaskHead,
    TokenEncoder,
    TokenEncoderConfig,
    class_logits,
    classify_tokens,
    combine_losses,
    fill_masked,
    loss_contra,
    loss_dist,
    loss_rec,
    sample_mask,
    sample_mask_batch,
)

from helpers import cast_module_f64, check_param_gradients

SMALL = TokenEncoderConfig(d_model=16, depth=2, heads=2, mlp_ratio=2,
                           max_tokens=12, vocab=10)


def small_encoder(seed=0, cfg=SMALL):
    return TokenEncoder(cfg, np.random.default_rng(seed))


class TestMaskSampling:
    def test_sizes_at_default_ratio(self):
        spec = sample_mask(64, 0.75, np.random.default_rng(0))
        assert spec.masked.size == 48 and spec.unmasked.size == 16

    def test_same_seed_identical(self):
        a = sample_mask(64, 0.75, np.random.default_rng(7))
        b = sample_mask(64, 0.75, np.random.default_rng(7))
        np.testing.assert_array_equal(a.masked, b.masked)

    def test_partition_properties(self):
        spec = sample_mask(20, 0.5, np.random.default_rng(1))
        merged = np.sort(np.concatenate([spec.masked, spec.unmasked]))
        np.testing.assert_array_equal(merged, np.arange(20))
        assert (np.diff(spec.masked) > 0).all()
        assert (np.diff(spec.unmasked) > 0).all()

    def test_marginal_frequency_uniform(self):
        rng = np.random.default_rng(2)
        hits = np.zeros(64)
        draws = 10_000
        for _ in range(draws):
            hits[sample_mask(64, 0.5, rng).masked] += 1
        assert (np.abs(hits / draws - 0.5) <= 0.02).all()

    def test_degenerate_ratios_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ContractError):
            sample_mask(4, 0.05, rng)   # rounds to empty mask
        with pytest.raises(ContractError):
            sample_mask(4, 0.95, rng)   # rounds to full mask
        with pytest.raises(ContractError):
            sample_mask(64, 1.5, rng)

    def test_spec_validation(self):
        with pytest.raises(ContractError):
            MaskSpec(total=4, ratio=0.5, masked=np.array([0, 1]),
                     unmasked=np.array([1, 3]))  # overlap

    def test_batch_rows_are_independent(self):
        masked, unmasked = sample_mask_batch(64, 0.75, np.random.default_rng(4), 8)
        assert masked.shape == (8, 48) and unmasked.shape == (8, 16)
        assert not all(np.array_equal(masked[0], masked[i]) for i in range(1, 8))


class TestTokenEncoder:
    def test_config_head_divisibility(self):
        with pytest.raises(ValueError):
            TokenEncoderConfig(d_model=10, heads=4)

    def test_visible_sequence_length(self):
        enc = small_encoder()
        indices = np.random.default_rng(5).integers(0, 10, (2, 12))
        visible = np.stack([np.arange(12)] * 2)
        seq = enc.embed_visible(indices, visible)
        assert seq.shape == (2, 13, 16)

    def test_zeroed_tables_give_zeros_except_class_token(self):
        enc = small_encoder()
        enc.index_embed.data[:] = 0
        enc.pos_embed.data[:] = 0
        seq = enc.embed_visible(np.zeros((1, 12), dtype=int),
                                np.arange(12)[None]).data
        np.testing.assert_array_equal(seq[0, 1:], np.zeros((12, 16), dtype=np.float32))
        np.testing.assert_array_equal(seq[0, 0], enc.class_token.data[0])

    def test_masked_indices_do_not_affect_visible_embedding(self):
        enc = small_encoder()
        rng = np.random.default_rng(6)
        indices = rng.integers(0, 10, (1, 12))
        visible = np.array([[0, 3, 5, 9]])
        seq1 = enc.embed_visible(indices, visible).data
        perturbed = indices.copy()
        for p in range(12):
            if p not in visible[0]:
                perturbed[0, p] = (perturbed[0, p] + 1) % 10
        seq2 = enc.embed_visible(perturbed, visible).data
        np.testing.assert_array_equal(seq1, seq2)

    def test_forward_preserves_shape_and_is_deterministic(self):
        enc = small_encoder()
        x = Tensor(np.random.default_rng(7).normal(size=(2, 13, 16)).astype(np.float32))
        y1 = enc(x).data
        y2 = enc(Tensor(x.data.copy())).data
        assert y1.shape == (2, 13, 16)
        np.testing.assert_array_equal(y1, y2)

    def test_attention_rows_sum_to_one_every_layer(self):
        enc = small_encoder()
        x = Tensor(np.random.default_rng(8).normal(size=(2, 13, 16)).astype(np.float32))
        enc(x)
        for attn in enc.attention_maps():
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)

    def test_overlength_sequence_rejected(self):
        enc = small_encoder()
        with pytest.raises(ContractError):
            enc(Tensor(np.zeros((1, 14, 16), dtype=np.float32)))

    def test_position_out_of_range_rejected(self):
        enc = small_encoder()
        with pytest.raises(IndexError):
            enc.embed_positions(np.zeros((1, 1), dtype=int), np.array([[12]]))


class TestFillMasked:
    def test_masked_slots_carry_encoded_class_token(self):
        rng = np.random.default_rng(9)
        encoded = Tensor(rng.normal(size=(2, 5, 4)).astype(np.float32))
        visible = np.array([[0, 2, 7, 9], [1, 3, 4, 8]])
        filled = fill_masked(encoded, visible, total=10).data
        for b in range(2):
            for p in range(10):
                hits = np.where(visible[b] == p)[0]
                expect = encoded.data[b, 1 + hits[0]] if hits.size else encoded.data[b, 0]
                np.testing.assert_array_equal(filled[b, p], expect)

    def test_single_masked_slot(self):
        rng = np.random.default_rng(10)
        encoded = Tensor(rng.normal(size=(1, 4, 3)).astype(np.float32))
        visible = np.array([[0, 1, 3]])
        filled = fill_masked(encoded, visible, total=4).data
        np.testing.assert_array_equal(filled[0, 2], encoded.data[0, 0])
        np.testing.assert_array_equal(filled[0, [0, 1, 3]], encoded.data[0, 1:])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            fill_masked(Tensor(np.zeros((1, 4, 3), dtype=np.float32)),
                        np.zeros((1, 4), dtype=int), total=6)


class TestReconstructionDecoder:
    def test_logit_shape(self):
        dec = ReconstructionDecoder(SMALL, np.random.default_rng(11))
        out = dec(Tensor(np.random.default_rng(12).normal(size=(2, 12, 16)).astype(np.float32)))
        assert out.shape == (2, 12, 10)

    def test_zero_head_uniform_softmax(self):
        dec = ReconstructionDecoder(SMALL, np.random.default_rng(13))
        dec.head.weight.data[:] = 0
        dec.head.bias.data[:] = 0
        logits = dec(Tensor(np.random.default_rng(14).normal(size=(1, 12, 16)).astype(np.float32)))
        probs = ad.softmax(logits).data
        np.testing.assert_allclose(probs, 1.0 / 10, atol=1e-7)


class TestLossRec:
    def test_uniform_logits_give_log_vocab(self):
        logits = Tensor(np.zeros((2, 8, 64)))
        indices = np.random.default_rng(15).integers(0, 64, (2, 8))
        masked = np.stack([np.arange(6)] * 2)
        val = float(loss_rec(logits, indices, masked).data)
        assert val == pytest.approx(math.log(64), abs=1e-5)

    def test_confident_logits_near_zero(self):
        indices = np.random.default_rng(16).integers(0, 10, (1, 8))
        logits_np = np.zeros((1, 8, 10))
        logits_np[0, np.arange(8), indices[0]] = 50.0
        val = float(loss_rec(Tensor(logits_np), indices, np.arange(8)[None]).data)
        assert val < 1e-6

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(17)
        logits_np = rng.normal(size=(3, 8, 10))
        indices = rng.integers(0, 10, (3, 8))
        masked = np.stack([np.sort(rng.choice(8, 5, replace=False)) for _ in range(3)])
        got = float(loss_rec(Tensor(logits_np), indices, masked).data)
        total = 0.0
        for b in range(3):
            for p in masked[b]:
                row = logits_np[b, p]
                lse = math.log(np.exp(row - row.max()).sum()) + row.max()
                total += lse - row[indices[b, p]]
        assert got == pytest.approx(total / masked.size, rel=1e-9)

    def test_gradient_zero_at_unmasked_positions(self):
        rng = np.random.default_rng(18)
        logits = ad.parameter(rng.normal(size=(2, 8, 10)))
        indices = rng.integers(0, 10, (2, 8))
        masked = np.array([[1, 4, 6], [0, 2, 7]])
        with Tape() as tape:
            loss = loss_rec(logits, indices, masked)
        tape.backward(loss)
        for b in range(2):
            for p in range(8):
                if p in masked[b]:
                    assert np.abs(logits.grad[b, p]).max() > 0
                else:
                    np.testing.assert_array_equal(logits.grad[b, p], np.zeros(10))

    def test_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            loss_rec(Tensor(np.zeros((1, 4, 5))), np.zeros((1, 4), dtype=int),
                     np.zeros((1, 0), dtype=int))


class TestLossDist:
    def test_equal_vectors_zero(self):
        z = np.random.default_rng(19).normal(size=(4, 8))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        assert float(loss_dist(Tensor(z.copy()), z).data) == 0.0

    def test_orthogonal_unit_vectors(self):
        d = 16
        a = np.zeros((1, d)); a[0, 0] = 1.0
        b = np.zeros((1, d)); b[0, 1] = 1.0
        val = float(loss_dist(Tensor(a), b).data)
        assert val == pytest.approx(2.0 / d, rel=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(20)
        zc, zi = rng.normal(size=(5, 12)), rng.normal(size=(5, 12))
        got = float(loss_dist(Tensor(zc), zi).data)
        expect = sum(float(((zc[b] - zi[b]) ** 2).mean()) for b in range(5)) / 5
        assert got == pytest.approx(expect, rel=1e-7)

    def test_dim_mismatch(self):
        with pytest.raises(ad.DimensionError):
            loss_dist(Tensor(np.zeros((2, 4))), np.zeros((2, 5)))


class TestLossContra:
    def test_identical_rows_give_log_batch(self):
        row = np.ones(8) / math.sqrt(8)
        batch = np.tile(row, (5, 1))
        val = float(loss_contra(Tensor(batch.copy()), batch, tau=0.07).data)
        assert val == pytest.approx(math.log(5), abs=1e-5)

    def test_aligned_orthonormal_rows_analytic_value(self):
        b, tau = 4, 0.07
        eye = np.eye(8)[:b]
        got = float(loss_contra(Tensor(eye.copy()), eye, tau).data)
        expect = math.log(1 + (b - 1) * math.exp(-1.0 / tau))
        assert got == pytest.approx(expect, rel=1e-9)
        assert got < 1e-4

    def test_common_permutation_invariance(self):
        rng = np.random.default_rng(21)
        zc = rng.normal(size=(6, 8))
        zc /= np.linalg.norm(zc, axis=1, keepdims=True)
        zt = rng.normal(size=(6, 8))
        zt /= np.linalg.norm(zt, axis=1, keepdims=True)
        base = float(loss_contra(Tensor(zc.copy()), zt, 0.07).data)
        perm = rng.permutation(6)
        permuted = float(loss_contra(Tensor(zc[perm].copy()), zt[perm], 0.07).data)
        assert permuted == pytest.approx(base, rel=1e-12)

    def test_small_batch_rejected(self):
        with pytest.raises(ContractError):
            loss_contra(Tensor(np.ones((1, 4))), np.ones((1, 4)), 0.07)

    def test_bad_temperature_rejected(self):
        with pytest.raises(ContractError):
            loss_contra(Tensor(np.ones((2, 4))), np.ones((2, 4)), 0.0)

    def test_nonnegative_for_unit_rows(self):
        rng = np.random.default_rng(22)
        for _ in range(20):
            zc = rng.normal(size=(4, 6))
            zc /= np.linalg.norm(zc, axis=1, keepdims=True)
            zt = rng.normal(size=(4, 6))
            zt /= np.linalg.norm(zt, axis=1, keepdims=True)
            assert float(loss_contra(Tensor(zc), zt, 0.07).data) >= -1e-6


class TestCombine:
    def test_recomposition_identity_exact(self):
        rng = np.random.default_rng(23)
        rec, dist, contra = (Tensor(np.asarray(v)) for v in rng.random(3))
        lam_d, lam_c = 0.7, 1.3
        total = combine_losses(rec, dist, contra, lam_d, lam_c)
        recomputed = rec.data + (dist.data * lam_d + contra.data * lam_c)
        assert float(total.data) == float(recomputed)

    def test_zero_weights_reduce_to_rec(self):
        rec, dist, contra = Tensor(np.asarray(0.9)), Tensor(np.asarray(0.4)), Tensor(np.asarray(0.2))
        total = combine_losses(rec, dist, contra, 0.0, 0.0)
        assert float(total.data) == 0.9


class TestProjectionHead:
    def test_unit_norm_output(self):
        proj = ProjectionHead(16, 8, np.random.default_rng(24))
        z = proj(Tensor(np.random.default_rng(25).normal(size=(5, 16)).astype(np.float32)))
        np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-5)

    def test_scale_invariance_on_linear_cone(self):
        proj = ProjectionHead(6, 4, np.random.default_rng(26))
        proj.fc1.bias.data[:] = 0
        proj.fc2.bias.data[:] = 0
        # gelu is only identity-like when saturated: keep pre-activations >= 5
        x = np.random.default_rng(27).uniform(0.5, 1.5, size=(1, 6)).astype(np.float32)
        proj.fc1.weight.data[:] = np.eye(6, dtype=np.float32) * 10.0
        z1 = proj(Tensor(x)).data
        z2 = proj(Tensor(3.0 * x)).data
        np.testing.assert_allclose(z1, z2, atol=1e-4)

    def test_gradient_through_normalization(self):
        proj = ProjectionHead(5, 3, np.random.default_rng(28))
        cast_module_f64(proj)
        x = Tensor(np.random.default_rng(29).normal(size=(2, 5)))
        w = np.random.default_rng(30).normal(size=(2, 3))

        def loss_fn():
            return ad.sum_(ad.mul(proj(x), Tensor(w)))

        check_param_gradients(loss_fn, [proj.fc2.weight, proj.fc1.weight],
                              rel_tol=1e-4)


class TestInferencePath:
    def test_full_sequence_classification_matches_embed_full(self):
        enc = small_encoder(31)
        head = TaskHead(16, 8, np.random.default_rng(32))
        indices = np.random.default_rng(33).integers(0, 10, (1, 12))
        label, row = classify_tokens(enc, head, indices[0], np.arange(12))
        full_logits = head(ad.reshape(
            ad.slice_axis(enc(enc.embed_full(indices)), 1, 0, 1), (1, -1))).data[0]
        np.testing.assert_allclose(row, full_logits, atol=1e-6)
        assert label == int(np.argmax(full_logits))

    def test_token_order_permutation_keeps_logits(self):
        enc = small_encoder(34)
        head = TaskHead(16, 8, np.random.default_rng(35))
        cast_module_f64(enc)
        cast_module_f64(head)
        rng = np.random.default_rng(36)
        indices = rng.integers(0, 10, 6)
        positions = np.array([0, 2, 5, 7, 9, 11])
        _, base = classify_tokens(enc, head, indices, positions)
        perm = rng.permutation(6)
        _, permuted = classify_tokens(enc, head, indices[perm], positions[perm])
        np.testing.assert_allclose(permuted, base, atol=1e-9)

    def test_deterministic(self):
        enc = small_encoder(37)
        head = TaskHead(16, 8, np.random.default_rng(38))
        indices = np.random.default_rng(39).integers(0, 10, 5)
        positions = np.arange(5)
        a = classify_tokens(enc, head, indices, positions)
        b = classify_tokens(enc, head, indices, positions)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])


class TestCompositePretrainGradient:
    def test_full_loss_path_matches_finite_differences(self):
        cfg = TokenEncoderConfig(d_model=8, depth=1, heads=2, mlp_ratio=2,
                                 max_tokens=6, vocab=5)
        rng = np.random.default_rng(40)
        enc = TokenEncoder(cfg, rng)
        dec = ReconstructionDecoder(cfg, rng, depth=1)
        proj = ProjectionHead(8, 4, rng)
        for m in (enc, dec, proj):
            cast_module_f64(m)
        indices = rng.integers(0, 5, (2, 6))
        masked = np.array([[1, 3, 4], [0, 2, 5]])
        visible = np.array([[0, 2, 5], [1, 3, 4]])
        z_img = rng.normal(size=(2, 4))
        z_img /= np.linalg.norm(z_img, axis=1, keepdims=True)
        z_text = rng.normal(size=(2, 4))
        z_text /= np.linalg.norm(z_text, axis=1, keepdims=True)

        def loss_fn():
            seq = enc.embed_visible(indices, visible)
            encoded = enc(seq)
            filled = fill_masked(encoded, visible, total=6)
            logits = dec(filled)
            l_rec = loss_rec(logits, indices, masked)
            cls = ad.reshape(ad.slice_axis(encoded, 1, 0, 1), (2, 8))
            z_c = proj(cls)
            return combine_losses(l_rec, loss_dist(z_c, z_img),
                                  loss_contra(z_c, z_text, 0.07), 1.0, 1.0)

        params = [enc.class_token, enc.index_embed,
                  enc.blocks[0].attn.wq.weight, proj.fc2.weight,
                  dec.head.bias]
        check_param_gradients(loss_fn, params, rel_tol=1e-4)
