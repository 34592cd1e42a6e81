import gzip
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from nrflab.datasets import (
    DatasetSplit,
    NormalizeMode,
    load_cifar10,
    load_cifar100,
    load_mnist_idx,
    normalize,
    normalize_pair,
    read_cifar_records,
    read_idx,
    split_indices,
    subsample,
    synth_blobs,
)
from nrflab.errors import CorruptFileError, FormatError, InsufficientExamplesError
from nrflab.rng import DataStream, data_stream, derive_stream


def _cifar_record(labels: tuple[int, ...], red: int, green: int, blue: int) -> bytearray:
    record = bytearray(labels)
    for value in (red, green, blue):
        record += bytes([value]) * 1024
    return record


def _idx_images(count: int, fill: int = 0) -> bytes:
    return struct.pack(">IIII", 0x803, count, 28, 28) + bytes([fill]) * (count * 28 * 28)


def _idx_labels(labels: list[int]) -> bytes:
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class CifarTests(TempDirTestCase):
    def test_record_layout(self):
        first = _cifar_record((3,), 10, 20, 30)
        first[1 + 1 * 32 + 2] = 255  # red plane, row 1, column 2
        second = _cifar_record((7,), 0, 0, 0)
        path = self.root / "batch.bin"
        path.write_bytes(bytes(first + second))

        images, labels = read_cifar_records(path, 2)
        self.assertEqual(images.shape, (2, 32, 32, 3))
        self.assertEqual(images.dtype, np.float32)
        np.testing.assert_array_equal(labels[:, 0], [3, 7])
        np.testing.assert_allclose(images[0, 0, 0], np.array([10, 20, 30]) / 255.0, rtol=1e-6)
        self.assertEqual(images[0, 1, 2, 0], 1.0)
        self.assertAlmostEqual(float(images[0, 1, 2, 1]), 20 / 255.0, places=6)

    def test_wrong_size_is_corrupt(self):
        path = self.root / "batch.bin"
        path.write_bytes(bytes(_cifar_record((1,), 0, 0, 0))[:-1])
        with self.assertRaises(CorruptFileError) as ctx:
            read_cifar_records(path, 1)
        self.assertEqual(ctx.exception.expected, 3073)
        self.assertEqual(ctx.exception.actual, 3072)

    def test_load_cifar10(self):
        batch_dir = self.root / "cifar-10-batches-bin"
        batch_dir.mkdir()
        for i in range(1, 6):
            (batch_dir / f"data_batch_{i}.bin").write_bytes(
                bytes(_cifar_record((i,), i, 0, 0) + _cifar_record((0,), 0, 0, 0))
            )
        (batch_dir / "test_batch.bin").write_bytes(bytes(_cifar_record((9,), 255, 255, 255) * 2))

        train, test = load_cifar10(self.root, records_per_batch=2)
        self.assertEqual(len(train), 10)
        self.assertEqual(len(test), 2)
        np.testing.assert_array_equal(train.labels, [1, 0, 2, 0, 3, 0, 4, 0, 5, 0])
        self.assertEqual(train.class_names[9], "truck")
        self.assertEqual(float(test.images.max()), 1.0)

    def test_load_cifar100_label_modes(self):
        (self.root / "train.bin").write_bytes(bytes(_cifar_record((2, 41), 0, 0, 0) + _cifar_record((5, 99), 0, 0, 0)))
        (self.root / "test.bin").write_bytes(bytes(_cifar_record((19, 7), 0, 0, 0)))
        fine, fine_test = load_cifar100(self.root, "fine", train_records=2, test_records=1)
        coarse, _ = load_cifar100(self.root, "coarse", train_records=2, test_records=1)
        np.testing.assert_array_equal(fine.labels, [41, 99])
        np.testing.assert_array_equal(fine_test.labels, [7])
        np.testing.assert_array_equal(coarse.labels, [2, 5])
        self.assertEqual(fine.num_classes, 100)
        self.assertEqual(coarse.num_classes, 20)

    def test_missing_directory(self):
        with self.assertRaises(FileNotFoundError):
            load_cifar10(self.root / "nowhere")


class MnistTests(TempDirTestCase):
    def write_mnist(self, train_labels=(1, 2, 3), test_labels=(4,)):
        (self.root / "train-images-idx3-ubyte").write_bytes(_idx_images(len(train_labels), 255))
        (self.root / "train-labels-idx1-ubyte").write_bytes(_idx_labels(list(train_labels)))
        # the test split ships gzip-compressed
        (self.root / "t10k-images-idx3-ubyte.gz").write_bytes(gzip.compress(_idx_images(len(test_labels))))
        (self.root / "t10k-labels-idx1-ubyte.gz").write_bytes(gzip.compress(_idx_labels(list(test_labels))))

    def test_load(self):
        self.write_mnist()
        train, test = load_mnist_idx(self.root)
        self.assertEqual(train.images.shape, (3, 28, 28, 1))
        self.assertEqual(float(train.images.max()), 1.0)
        np.testing.assert_array_equal(train.labels, [1, 2, 3])
        np.testing.assert_array_equal(test.labels, [4])

    def test_label_out_of_range(self):
        self.write_mnist(train_labels=(1, 10))
        with self.assertRaises(FormatError):
            load_mnist_idx(self.root)

    def test_wrong_magic(self):
        path = self.root / "labels"
        path.write_bytes(_idx_labels([1, 2]))
        with self.assertRaises(FormatError):
            read_idx(path, 0x803)

    def test_truncated(self):
        path = self.root / "images"
        path.write_bytes(_idx_images(2)[:-5])
        with self.assertRaises(CorruptFileError):
            read_idx(path, 0x803)

    def test_missing_directory(self):
        with self.assertRaises(FileNotFoundError):
            load_mnist_idx(self.root / "nowhere")


class SplitTests(unittest.TestCase):
    def test_fingerprint_tracks_content(self):
        images = np.zeros((2, 2, 2, 1), np.float32)
        labels = np.array([0, 1])
        a = DatasetSplit(images, labels, ("a", "b"))
        b = DatasetSplit(images.copy(), labels.copy(), ("a", "b"))
        self.assertEqual(a.fingerprint, b.fingerprint)
        changed = images.copy()
        changed[1, 1, 1, 0] = 0.5
        self.assertNotEqual(DatasetSplit(changed, labels, ("a", "b")).fingerprint, a.fingerprint)

    def test_rejects_bad_labels(self):
        with self.assertRaises(ValueError):
            DatasetSplit(np.zeros((2, 1)), np.array([0, 2]), ("a", "b"))
        with self.assertRaises(ValueError):
            DatasetSplit(np.zeros((2, 1)), np.array([0]), ("a", "b"))

    def test_synth_blobs(self):
        train, test = synth_blobs(4, 10, 6, 3.0, seed=2, test_per_class=5)
        self.assertEqual(train.images.shape, (40, 1, 1, 6))
        self.assertEqual(len(test), 20)
        np.testing.assert_array_equal(np.bincount(train.labels), [10, 10, 10, 10])
        again, _ = synth_blobs(4, 10, 6, 3.0, seed=2)
        np.testing.assert_array_equal(again.images, train.images)
        other, _ = synth_blobs(4, 10, 6, 3.0, seed=3)
        self.assertFalse(np.array_equal(other.images, train.images))

    def test_subsample(self):
        train, _ = synth_blobs(3, 20, 2, 1.0, seed=0)
        small = subsample(train, 5, seed=1)
        np.testing.assert_array_equal(np.bincount(small.labels), [5, 5, 5])
        np.testing.assert_array_equal(subsample(train, 5, seed=1).images, small.images)
        self.assertFalse(np.array_equal(subsample(train, 5, seed=2).images, small.images))
        with self.assertRaises(InsufficientExamplesError):
            subsample(train, 21, seed=1)

    def test_split_indices(self):
        fit, holdout = split_indices(50, 0.2, seed=3)
        self.assertEqual(len(holdout), 10)
        self.assertEqual(len(fit), 40)
        self.assertEqual(sorted(np.concatenate([fit, holdout]).tolist()), list(range(50)))
        fit_again, holdout_again = split_indices(50, 0.2, seed=3)
        np.testing.assert_array_equal(holdout, holdout_again)
        with self.assertRaises(ValueError):
            split_indices(50, 1.0, seed=3)

    def test_split_does_not_reuse_network_streams(self):
        _, holdout = split_indices(100, 0.1, seed=5)
        expected = np.sort(data_stream(5, DataStream.VALIDATION_SPLIT).permutation(100)[:10])
        np.testing.assert_array_equal(holdout, expected)
        for index in range(4):
            with self.subTest(index=index):
                network_order = np.sort(derive_stream(5, index).permutation(100)[:10])
                self.assertFalse(np.array_equal(holdout, network_order))


class NormalizeTests(unittest.TestCase):
    def split(self, images) -> DatasetSplit:
        images = np.asarray(images, dtype=np.float32)
        return DatasetSplit(images, np.zeros(images.shape[0], dtype=np.int64), ("only",))

    def test_unit_range_leaves_unit_data_alone(self):
        split = self.split(np.full((2, 1, 1, 3), 0.25))
        self.assertIs(normalize(split, NormalizeMode.UNIT_RANGE), split)

    def test_unit_range_uses_train_range(self):
        train = self.split(np.array([0.0, 255.0]).reshape(2, 1, 1, 1))
        test = self.split(np.array([51.0]).reshape(1, 1, 1, 1))
        train_n, test_n = normalize_pair(train, test, "unit_range")
        np.testing.assert_allclose(train_n.images.ravel(), [0.0, 1.0])
        np.testing.assert_allclose(test_n.images.ravel(), [0.2], rtol=1e-6)

    def test_per_channel_standardize(self):
        stream_values = np.arange(24, dtype=np.float32).reshape(4, 2, 1, 3)
        stream_values[..., 2] = 5.0  # constant channel
        train = self.split(stream_values)
        with self.assertLogs("nrflab.datasets", level="WARNING"):
            out = normalize(train, NormalizeMode.PER_CHANNEL_STANDARDIZE)
        flat = out.images.reshape(-1, 3).astype(np.float64)
        np.testing.assert_allclose(flat[:, :2].mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(flat[:, :2].std(axis=0), 1.0, rtol=1e-5)
        np.testing.assert_array_equal(flat[:, 2], 0.0)

    def test_none(self):
        split = self.split(np.full((1, 1, 1, 1), 300.0))
        self.assertIs(normalize(split, "none"), split)


if __name__ == "__main__":
    unittest.main()
