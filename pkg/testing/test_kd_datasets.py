"""Synthetic data, CIFAR binary records and the seeded loader."""

import numpy as np
import pytest
import torch

from kd_datasets import (
    ArrayDataset,
    DatasetFormatError,
    DatasetSpec,
    build_datasets,
    cifar_load,
    cifar_record_size,
    make_loader,
    synth_generate,
    write_cifar_binary,
)


def _spec(**overrides):
    values = {"class_count": 4, "input_size": 16, "train_size": 40, "val_size": 12, "seed": 5}
    values.update(overrides)
    return DatasetSpec(**values)


class TestSynthetic:
    def test_same_seed_is_byte_identical(self):
        first, second = synth_generate(_spec()), synth_generate(_spec())
        assert first.train.images.numpy().tobytes() == second.train.images.numpy().tobytes()
        assert torch.equal(first.val.labels, second.val.labels)
        batch_a = next(iter(make_loader(first.train, 8, seed=1, shuffle=True)))
        batch_b = next(iter(make_loader(second.train, 8, seed=1, shuffle=True)))
        assert torch.equal(batch_a.images, batch_b.images)

    def test_different_seed_differs(self):
        assert not torch.equal(synth_generate(_spec()).train.images, synth_generate(_spec(seed=6)).train.images)

    def test_labels_are_balanced(self):
        splits = synth_generate(_spec(train_size=42))
        histogram = splits.train.label_histogram()
        assert histogram.max() - histogram.min() <= 1
        assert histogram.sum() == 42

    def test_pixels_in_unit_range(self):
        images = synth_generate(_spec(noise_scale=2.0)).train.images
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_noiseless_two_class_data_is_linearly_separable(self):
        splits = synth_generate(_spec(class_count=2, noise_scale=0.0, train_size=20))
        features = splits.train.images.reshape(20, -1).numpy()
        design = np.hstack([features, np.ones((20, 1))])
        targets = np.where(splits.train.labels.numpy() == 1, 1.0, -1.0)
        weights, *_ = np.linalg.lstsq(design, targets, rcond=None)
        predictions = (design @ weights > 0).astype(int)
        assert (predictions == splits.train.labels.numpy()).mean() == 1.0

    def test_normalization_centres_train_split(self):
        splits = build_datasets(_spec(train_size=200))
        normalized = splits.train.normalize(splits.train.images)
        assert normalized.mean(dim=(0, 2, 3)).abs().max().item() <= 0.05

    def test_explicit_normalization_is_used(self):
        splits = build_datasets(_spec(normalization_mean=[0.5, 0.5, 0.5], normalization_std=[0.25, 0.25, 0.25]))
        image = splits.val.images[:1]
        assert torch.allclose(splits.val.normalize(image), (image - 0.5) / 0.25)


class TestSpecValidation:
    def test_class_count_must_be_at_least_two(self):
        with pytest.raises(ValueError):
            DatasetSpec(class_count=1)

    def test_split_sizes_must_be_positive(self):
        with pytest.raises(ValueError):
            DatasetSpec(train_size=0)

    def test_unknown_keys_are_rejected(self):
        with pytest.raises(ValueError):
            DatasetSpec(colour="red")

    def test_cifar_requires_32_pixels(self):
        with pytest.raises(ValueError, match="32x32"):
            DatasetSpec(kind="cifar-binary", input_size=16)

    def test_augmentation_defaults_follow_kind(self):
        assert not DatasetSpec().augmentation_enabled
        assert DatasetSpec(kind="cifar-binary").augmentation_enabled
        assert not DatasetSpec(kind="cifar-binary", augment=False).augmentation_enabled


class TestCifarBinary:
    def _fixture(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
        path = write_cifar_binary(tmp_path / "fixture.bin", pixels, fine_labels=[7, 3], coarse_labels=[1, 2])
        return path, pixels

    def test_round_trip(self, tmp_path):
        path, pixels = self._fixture(tmp_path)
        dataset = cifar_load(path, DatasetSpec(kind="cifar-binary", class_count=100))
        assert dataset.labels.tolist() == [7, 3]
        raw = path.read_bytes()
        assert dataset.images[0, 0, 0, 0].item() == raw[2] / 255.0
        assert np.array_equal(np.rint(dataset.images.numpy() * 255).astype(np.uint8), pixels)

    def test_record_layout(self, tmp_path):
        path, pixels = self._fixture(tmp_path)
        raw = path.read_bytes()
        assert len(raw) == 2 * cifar_record_size("cifar100") == 2 * 3074
        assert raw[0] == 1 and raw[1] == 7
        assert raw[3074] == 2 and raw[3075] == 3
        # full R plane first, row-major
        assert raw[2 + 1024] == pixels[0, 1, 0, 0]
        assert raw[2 + 33] == pixels[0, 0, 1, 1]

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        assert len(cifar_load(path, DatasetSpec(kind="cifar-binary", class_count=100))) == 0

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(bytes(3073))
        with pytest.raises(DatasetFormatError) as excinfo:
            cifar_load(path, DatasetSpec(kind="cifar-binary", class_count=100))
        assert excinfo.value.actual_bytes == 3073
        assert excinfo.value.expected_bytes == 3074

    def test_label_out_of_range(self, tmp_path):
        pixels = np.zeros((3, 3, 32, 32), dtype=np.uint8)
        path = write_cifar_binary(tmp_path / "labels.bin", pixels, fine_labels=[0, 1, 9])
        with pytest.raises(DatasetFormatError) as excinfo:
            cifar_load(path, DatasetSpec(kind="cifar-binary", class_count=5))
        assert excinfo.value.record_index == 2

    def test_cifar10_variant(self, tmp_path):
        pixels = np.full((2, 3, 32, 32), 255, dtype=np.uint8)
        path = write_cifar_binary(tmp_path / "c10.bin", pixels, fine_labels=[4, 9], variant="cifar10")
        assert path.stat().st_size == 2 * 3073
        dataset = cifar_load(path, DatasetSpec(kind="cifar-binary", class_count=10, cifar_variant="cifar10"))
        assert dataset.labels.tolist() == [4, 9]
        assert dataset.images.max().item() == 1.0

    def test_build_datasets_needs_paths(self):
        with pytest.raises(DatasetFormatError, match="train_path"):
            build_datasets(DatasetSpec(kind="cifar-binary", class_count=100))


class TestLoader:
    def _dataset(self, size=10):
        images = np.arange(size, dtype=np.float64)[:, None, None, None] * np.ones((1, 3, 4, 4))
        return ArrayDataset(images, np.arange(size) % 2, class_count=2)

    def _order(self, loader):
        return [int(v) for batch in loader for v in batch.images[:, 0, 0, 0]]

    def test_storage_order_without_shuffle(self):
        assert self._order(make_loader(self._dataset(), 4, seed=0, shuffle=False)) == list(range(10))

    def test_partial_batch_is_kept(self):
        sizes = [len(batch) for batch in make_loader(self._dataset(), 4, seed=0, shuffle=True)]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self):
        first = self._order(make_loader(self._dataset(), 3, seed=4, shuffle=True))
        second = self._order(make_loader(self._dataset(), 3, seed=4, shuffle=True))
        assert first == second
        assert sorted(first) == list(range(10))

    def test_order_depends_on_epoch(self):
        loader = make_loader(self._dataset(50), 50, seed=4, shuffle=True)
        loader.set_epoch(0)
        epoch0 = self._order(loader)
        loader.set_epoch(1)
        assert self._order(loader) != epoch0
        loader.set_epoch(0)
        assert self._order(loader) == epoch0

    def test_workers_do_not_change_the_stream(self):
        single = self._order(make_loader(self._dataset(), 3, seed=8, shuffle=True, num_workers=0))
        parallel = self._order(make_loader(self._dataset(), 3, seed=8, shuffle=True, num_workers=2))
        assert single == parallel

    def test_augmentation_is_seeded(self):
        splits = synth_generate(_spec(input_size=32, train_size=16))
        first = [b.images for b in make_loader(splits.train, 8, seed=2, shuffle=True, augment=True)]
        second = [b.images for b in make_loader(splits.train, 8, seed=2, shuffle=True, augment=True)]
        assert all(torch.equal(a, b) for a, b in zip(first, second))
        plain = [b.images for b in make_loader(splits.train, 8, seed=2, shuffle=True, augment=False)]
        assert not all(torch.equal(a, b) for a, b in zip(first, plain))

    def test_rejects_zero_batch_size(self):
        with pytest.raises(ValueError):
            make_loader(self._dataset(), 0, seed=0, shuffle=False)
