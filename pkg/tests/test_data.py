"""PPM codec, resizing, dataset loading, the synthetic task, and splits."""

import zlib

import numpy as np
import pytest

from fakedet.data import (
    LabeledDataset,
    SyntheticTaskConfig,
    generate_synthetic,
    load_dataset_dir,
    load_ppm,
    resize_bilinear,
    save_ppm,
    split_dataset,
    synthesize_image,
)
from fakedet.errors import DatasetError, FormatError


class TestPpmCodec:
    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (10, 7, 3)).astype(np.uint8)
        path = tmp_path / "img.ppm"
        save_ppm(img, path)
        np.testing.assert_array_equal(load_ppm(path), img)

    def test_save_load_save_bytes(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (5, 5, 3)).astype(np.uint8)
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        save_ppm(img, p1)
        save_ppm(load_ppm(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_byte_level_layout(self, tmp_path):
        # 2x1 image: canonical header then 6 payload bytes
        img = np.array([[[255, 0, 0], [0, 0, 255]]], dtype=np.uint8)
        path = tmp_path / "tiny.ppm"
        save_ppm(img, path)
        data = path.read_bytes()
        header = b"P6\n2 1\n255\n"
        assert data[: len(header)] == header
        assert data[len(header) :] == bytes([255, 0, 0, 0, 0, 255])
        assert len(data) == len(header) + 6

    def test_comments_and_whitespace_tolerated(self, tmp_path):
        path = tmp_path / "odd.ppm"
        path.write_bytes(b"P6 # magic\n# a comment line\n  2\t1\n# more\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
        img = load_ppm(path)
        assert img.shape == (1, 2, 3)
        assert img.ravel().tolist() == [1, 2, 3, 4, 5, 6]

    def test_p5_rejected(self, tmp_path):
        path = tmp_path / "gray.ppm"
        path.write_bytes(b"P5\n2 1\n255\n\x00\x01")
        with pytest.raises(FormatError, match="magic") as err:
            load_ppm(path)
        assert err.value.offset == 0

    def test_wrong_maxval_rejected(self, tmp_path):
        path = tmp_path / "deep.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(FormatError, match="maxval"):
            load_ppm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(FormatError, match="truncated"):
            load_ppm(path)


class TestResize:
    def test_same_size_identity(self):
        img = np.random.default_rng(2).random((9, 9, 3))
        np.testing.assert_allclose(resize_bilinear(img, 9, 9), img, atol=1e-6)

    def test_constant_stays_constant(self):
        img = np.full((4, 4, 3), 0.77)
        np.testing.assert_allclose(resize_bilinear(img, 64, 64), 0.77, atol=1e-12)

    def test_checkerboard_center(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]])[:, :, None]
        big = resize_bilinear(img, 64, 64)
        assert big.min() >= 0 and big.max() <= 1
        center = big[31:33, 31:33].mean()
        assert abs(center - 0.5) < 0.02

    def test_upscale_shape(self):
        img = np.zeros((3, 5, 3), dtype=np.float32)
        assert resize_bilinear(img, 64, 64).shape == (64, 64, 3)
        assert resize_bilinear(img, 64, 64).dtype == np.float32


class TestDatasetDir:
    def _write(self, root, sub, count, size=64, start=0):
        (root / sub).mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(hash(sub) % 2**32)
        for i in range(start, start + count):
            save_ppm(rng.integers(0, 256, (size, size, 3)).astype(np.uint8), root / sub / f"{i:03d}.ppm")

    def test_counts_and_labels(self, tmp_path):
        self._write(tmp_path, "real", 3)
        self._write(tmp_path, "fake", 2)
        ds = load_dataset_dir(tmp_path)
        assert len(ds) == 5
        assert ds.class_counts() == {0: 3, 1: 2}

    def test_lexicographic_order(self, tmp_path):
        self._write(tmp_path, "real", 2)
        self._write(tmp_path, "fake", 2)
        ds = load_dataset_dir(tmp_path)
        assert ds.paths == sorted(ds.paths)

    def test_oversized_image_resized(self, tmp_path):
        self._write(tmp_path, "real", 1)
        self._write(tmp_path, "fake", 1, size=128)
        ds = load_dataset_dir(tmp_path)
        assert ds.images.shape[1:] == (64, 64, 3)

    def test_missing_class_dir(self, tmp_path):
        self._write(tmp_path, "real", 1)
        with pytest.raises(DatasetError, match="missing"):
            load_dataset_dir(tmp_path)

    def test_empty_class_dir(self, tmp_path):
        self._write(tmp_path, "real", 1)
        (tmp_path / "fake").mkdir()
        with pytest.raises(DatasetError, match="no .ppm"):
            load_dataset_dir(tmp_path)


class TestSynthetic:
    def test_generation_is_deterministic_on_disk(self, tmp_path):
        cfg = SyntheticTaskConfig(n_per_class=4, seed=11)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        generate_synthetic(cfg, out1)
        generate_synthetic(cfg, out2)
        for rel in sorted(p.relative_to(out1) for p in out1.rglob("*") if p.is_file()):
            assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel

    def test_manifest_written(self, tmp_path):
        cfg = SyntheticTaskConfig(n_per_class=2, seed=3)
        generate_synthetic(cfg, tmp_path / "d")
        manifest = (tmp_path / "d" / "manifest.csv").read_text().splitlines()
        assert manifest[0] == "path,label,seed"
        assert len(manifest) == 5

    def test_zero_amplitude_fakes_match_their_clean_twins(self):
        base = SyntheticTaskConfig(n_per_class=3, seed=5, artifact_amplitude=0.0)
        spiked = SyntheticTaskConfig(n_per_class=3, seed=5, artifact_amplitude=0.25)
        for i in range(3):
            clean = synthesize_image(base, 1, i)
            fake = synthesize_image(spiked, 1, i)
            assert (clean != fake).any()
            # the clean twin shares the rng stream, so real-class draws agree
            np.testing.assert_array_equal(synthesize_image(base, 0, i), synthesize_image(spiked, 0, i))

    def test_artifact_residual_alternates_with_period_two(self):
        cfg = SyntheticTaskConfig(n_per_class=2, seed=9, artifact_amplitude=0.25, artifact_period=2)
        clean_cfg = SyntheticTaskConfig(n_per_class=2, seed=9, artifact_amplitude=0.0, artifact_period=2)
        fake = synthesize_image(cfg, 1, 0).astype(np.int32)
        clean = synthesize_image(clean_cfg, 1, 0).astype(np.int32)
        residual = (fake - clean)[:, :, 0]
        rows, cols = np.nonzero(residual)
        assert len(rows) > 500
        signs = np.sign(residual[rows, cols])
        anchor_parity = (rows[0] + cols[0]) % 2
        expected = np.where((rows + cols) % 2 == anchor_parity, signs[0], -signs[0])
        np.testing.assert_array_equal(signs, expected)

    def test_loaded_images_match_in_memory(self, tmp_path):
        cfg = SyntheticTaskConfig(n_per_class=3, seed=13)
        in_memory = generate_synthetic(cfg, tmp_path / "d")
        from_disk = load_dataset_dir(tmp_path / "d")
        by_path = dict(zip([str(p) for p in in_memory.paths], in_memory.images))
        for path, img in zip(from_disk.paths, from_disk.images):
            rel = "/".join(path.split("/")[-2:])
            np.testing.assert_array_equal(img, by_path[rel])


class TestSplit:
    def _dataset(self, n=90):
        rng = np.random.default_rng(20)
        return LabeledDataset(
            images=rng.random((n, 64, 64, 3), dtype=np.float32),
            labels=np.arange(n) % 2,
            paths=[f"p{i}" for i in range(n)],
        )

    def test_partition_disjoint_and_complete(self):
        ds = self._dataset()
        parts = split_dataset(ds, (0.6, 0.18, 0.2, 0.02), seed=1)
        seen = [p for part in parts for p in part.paths]
        assert sorted(seen) == sorted(ds.paths)
        assert len(set(seen)) == len(seen)

    def test_stratification_within_one(self):
        ds = self._dataset()
        for part in split_dataset(ds, (0.4, 0.3, 0.2, 0.1), seed=2):
            counts = part.class_counts()
            assert abs(counts[0] - counts[1]) <= 1

    def test_split_tags(self):
        parts = split_dataset(self._dataset(), (0.25, 0.25, 0.25, 0.25), seed=3)
        assert [p.split for p in parts] == ["train", "val", "test", "finetune"]

    def test_exact_sizes_for_acceptance_fractions(self):
        ds = self._dataset(n=1800)  # 900 per class
        parts = split_dataset(ds, (400 / 900, 100 / 900, 200 / 900, 200 / 900), seed=4)
        assert [len(p) for p in parts] == [800, 200, 400, 400]
        assert all(p.class_counts()[0] == p.class_counts()[1] for p in parts)

    def test_bad_fractions(self):
        with pytest.raises(DatasetError, match="sum to 1"):
            split_dataset(self._dataset(), (0.5, 0.2, 0.2, 0.2), seed=0)

    def test_empty_split_rejected(self):
        small = self._dataset(n=4)
        with pytest.raises(DatasetError, match="empty"):
            split_dataset(small, (0.97, 0.01, 0.01, 0.01), seed=0)

    def test_seed_changes_assignment(self):
        ds = self._dataset()
        a = split_dataset(ds, (0.5, 0.2, 0.2, 0.1), seed=1)[0].paths
        b = split_dataset(ds, (0.5, 0.2, 0.2, 0.1), seed=2)[0].paths
        assert a != b
