"""Teacher tests: unit norms, determinism, distinct labels, file roundtrip."""

from __future__ import annotations

import numpy as np
import pytest

from vqsplit.autodiff import ContractError
from vqsplit.teacher import (
    FileTeacher,
    ToyTeacher,
    read_embedding_file,
    write_embedding_file,
)


@pytest.fixture(scope="module")
def teacher():
    return ToyTeacher(seed=0)


class TestToyTeacher:
    def test_image_embedding_unit_norm(self, teacher):
        rng = np.random.default_rng(1)
        z = teacher.embed_images(rng.random((5, 3, 32, 32), dtype=np.float32))
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)

    def test_label_embedding_unit_norm(self, teacher):
        z = teacher.embed_labels(np.arange(8))
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)

    def test_same_image_twice_identical(self, teacher):
        img = np.random.default_rng(2).random((3, 32, 32), dtype=np.float32)
        np.testing.assert_array_equal(teacher.embed_image(img.copy()),
                                      teacher.embed_image(img.copy()))

    def test_same_seed_same_teacher(self):
        a, b = ToyTeacher(seed=3), ToyTeacher(seed=3)
        img = np.random.default_rng(4).random((3, 32, 32), dtype=np.float32)
        np.testing.assert_array_equal(a.embed_image(img), b.embed_image(img))
        np.testing.assert_array_equal(a.embed_labels(np.arange(8)),
                                      b.embed_labels(np.arange(8)))

    def test_distinct_label_rows(self, teacher):
        z = teacher.embed_labels(np.arange(8))
        cos = z @ z.T
        np.fill_diagonal(cos, 0.0)
        assert np.abs(cos).max() < 0.99

    def test_different_images_differ(self, teacher):
        rng = np.random.default_rng(5)
        a = teacher.embed_image(rng.random((3, 32, 32), dtype=np.float32))
        b = teacher.embed_image(rng.random((3, 32, 32), dtype=np.float32))
        assert not np.allclose(a, b)

    def test_batch_matches_single(self, teacher):
        rng = np.random.default_rng(6)
        imgs = rng.random((3, 3, 32, 32), dtype=np.float32)
        batch = teacher.embed_images(imgs)
        for i in range(3):
            np.testing.assert_allclose(batch[i], teacher.embed_image(imgs[i]),
                                       atol=1e-6)

    def test_label_out_of_range(self, teacher):
        with pytest.raises(IndexError):
            teacher.embed_label(8)

    def test_bad_image_shape(self, teacher):
        with pytest.raises(ContractError):
            teacher.embed_images(np.zeros((2, 1, 32, 32), dtype=np.float32))

    def test_dim_default(self, teacher):
        assert teacher.dim == 32
        assert teacher.embed_label(0).shape == (32,)


class TestEmbeddingFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        table = {i: rng.normal(size=16).astype(np.float32) for i in range(5)}
        path = str(tmp_path / "emb.bin")
        write_embedding_file(path, table)
        loaded, dim = read_embedding_file(path)
        assert dim == 16
        assert set(loaded) == set(table)
        for k in table:
            np.testing.assert_array_equal(loaded[k], table[k])

    def test_layout_is_little_endian(self, tmp_path):
        path = str(tmp_path / "emb.bin")
        write_embedding_file(path, {7: np.array([1.0, 2.0], dtype=np.float32)})
        raw = open(path, "rb").read()
        assert raw[:4] == (1).to_bytes(4, "little")
        assert raw[4:8] == (2).to_bytes(4, "little")
        assert raw[8:12] == (7).to_bytes(4, "little")
        assert np.frombuffer(raw[12:], dtype="<f4").tolist() == [1.0, 2.0]

    def test_truncated_file_rejected(self, tmp_path):
        path = str(tmp_path / "emb.bin")
        write_embedding_file(path, {0: np.ones(4, dtype=np.float32)})
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-3])
        with pytest.raises(ValueError):
            read_embedding_file(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = str(tmp_path / "emb.bin")
        write_embedding_file(path, {0: np.ones(4, dtype=np.float32)})
        with open(path, "ab") as fh:
            fh.write(b"x")
        with pytest.raises(ValueError):
            read_embedding_file(path)

    def test_mixed_dims_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_embedding_file(str(tmp_path / "e.bin"),
                                 {0: np.ones(4), 1: np.ones(5)})


class TestFileTeacher:
    def _write_teacher_files(self, tmp_path, dim=8):
        rng = np.random.default_rng(8)
        labels = {i: rng.normal(size=dim).astype(np.float32) for i in range(8)}
        images = {i: rng.normal(size=dim).astype(np.float32) for i in range(20)}
        lp, ip = str(tmp_path / "labels.bin"), str(tmp_path / "images.bin")
        write_embedding_file(lp, labels)
        write_embedding_file(ip, images)
        return lp, ip, labels, images

    def test_lookup_normalizes(self, tmp_path):
        lp, ip, labels, images = self._write_teacher_files(tmp_path)
        t = FileTeacher(lp, ip)
        z = t.embed_labels(np.arange(8))
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)
        zi = t.embed_images(None, sample_ids=np.array([3, 7]))
        np.testing.assert_allclose(np.linalg.norm(zi, axis=1), 1.0, atol=1e-5)
        expect = images[3] / np.linalg.norm(images[3])
        np.testing.assert_allclose(zi[0], expect, atol=1e-6)

    def test_requires_sample_ids(self, tmp_path):
        lp, ip, _, _ = self._write_teacher_files(tmp_path)
        t = FileTeacher(lp, ip)
        with pytest.raises(ContractError):
            t.embed_images(np.zeros((1, 3, 32, 32)))

    def test_missing_key_raises(self, tmp_path):
        lp, ip, _, _ = self._write_teacher_files(tmp_path)
        t = FileTeacher(lp, ip)
        with pytest.raises(KeyError):
            t.embed_images(None, sample_ids=np.array([999]))

    def test_dim_mismatch_between_files(self, tmp_path):
        lp = str(tmp_path / "l.bin")
        ip = str(tmp_path / "i.bin")
        write_embedding_file(lp, {0: np.ones(4, dtype=np.float32)})
        write_embedding_file(ip, {0: np.ones(6, dtype=np.float32)})
        with pytest.raises(ValueError):
            FileTeacher(lp, ip)
