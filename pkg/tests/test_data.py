"""IDX parsing, 28->32 preprocessing and seeded batching."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zskd import data as D
from zskd.errors import IDXCountMismatchError, IDXError, IDXMagicError, IDXTruncatedError, ParameterError


def idx_bytes(arr: np.ndarray, magic: int | None = None) -> bytes:
    arr = np.ascontiguousarray(arr, np.uint8)
    magic = (0x800 | arr.ndim) if magic is None else magic
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


@pytest.fixture
def fixture_files(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    labels = np.array([3, 7], np.uint8)
    D.write_idx(tmp_path / "img", images)
    D.write_idx(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab", images, labels


class TestIDX:
    def test_round_trip_byte_exact(self, fixture_files, tmp_path):
        img, lab, images, labels = fixture_files
        raw = D.load_idx(img, lab)
        np.testing.assert_array_equal(raw.images, images)
        np.testing.assert_array_equal(raw.labels, labels)
        D.write_idx(tmp_path / "img2", raw.images)
        assert (tmp_path / "img2").read_bytes() == img.read_bytes()

    def test_header_layout(self, fixture_files):
        blob = fixture_files[0].read_bytes()
        assert struct.unpack(">4I", blob[:16]) == (0x803, 2, 28, 28)

    def test_labels_with_image_magic_rejected(self):
        with pytest.raises(IDXMagicError):
            D.parse_idx(idx_bytes(np.zeros(2), magic=0x803), D.LABELS_MAGIC)

    def test_truncated_payload(self):
        blob = idx_bytes(np.zeros((2, 28, 28)))
        with pytest.raises(IDXTruncatedError):
            D.parse_idx(blob[:-1], D.IMAGES_MAGIC)
        with pytest.raises(IDXTruncatedError):
            D.parse_idx(blob[:10], D.IMAGES_MAGIC)

    def test_count_mismatch(self, tmp_path):
        D.write_idx(tmp_path / "i", np.zeros((3, 28, 28)))
        D.write_idx(tmp_path / "l", np.zeros(2))
        with pytest.raises(IDXCountMismatchError):
            D.load_idx(tmp_path / "i", tmp_path / "l")

    def test_error_kinds_distinct(self):
        kinds = {IDXMagicError, IDXTruncatedError, IDXCountMismatchError}
        assert len(kinds) == 3 and all(issubclass(k, IDXError) for k in kinds)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 15), st.integers(1, 255))
    def test_any_mutated_image_header_byte_rejected(self, pos, flip):
        blob = bytearray(idx_bytes(np.zeros((2, 28, 28))))
        blob[pos] ^= flip
        with pytest.raises(IDXError):
            D.parse_idx(bytes(blob), D.IMAGES_MAGIC)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 7), st.integers(1, 255))
    def test_any_mutated_label_header_byte_rejected(self, pos, flip):
        blob = bytearray(idx_bytes(np.arange(5)))
        blob[pos] ^= flip
        with pytest.raises(IDXError):
            D.parse_idx(bytes(blob), D.LABELS_MAGIC)


class TestPreprocess:
    def test_shape_padding_and_range(self, fixture_files):
        raw = D.load_idx(*fixture_files[:2])
        ds = D.preprocess(raw)
        assert ds.images.shape == (2, 32, 32, 1)
        assert np.all(ds.images[:, :2] == 0) and np.all(ds.images[:, :, -2:] == 0)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        np.testing.assert_array_equal(ds.images[:, 2:30, 2:30, 0], raw.images / 255.0)
        assert ds.labels.dtype == np.int64

    def test_double_normalisation_rejected(self, fixture_files):
        raw = D.load_idx(*fixture_files[:2])
        ds = D.preprocess(raw)
        with pytest.raises(ParameterError):
            D.preprocess(D.RawDataset(ds.images[..., 0], ds.labels, ""))

    def test_bilinear_option(self, fixture_files):
        ds = D.preprocess(D.load_idx(*fixture_files[:2]), resize="bilinear")
        assert ds.images.shape == (2, 32, 32, 1) and ds.resize == "bilinear"
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        const = D.preprocess(D.RawDataset(np.full((1, 28, 28), 51, np.uint8), np.zeros(1), ""), resize="bilinear")
        np.testing.assert_allclose(const.images, 0.2)
        with pytest.raises(ParameterError):
            D.preprocess(D.load_idx(*fixture_files[:2]), resize="nearest")


class TestBatches:
    def test_counts(self):
        sizes = [len(b) for b in D.batches(60000, 512, seed=0, epoch=0)]
        # 117 full batches cover 59904 items, leaving 96
        assert len(sizes) == 118 and sizes[-1] == 96 and set(sizes[:-1]) == {512}

    def test_permutation_and_determinism(self):
        a = np.concatenate(list(D.batches(1000, 64, seed=1, epoch=3)))
        b = np.concatenate(list(D.batches(1000, 64, seed=1, epoch=3)))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(np.sort(a), np.arange(1000))
        c = np.concatenate(list(D.batches(1000, 64, seed=1, epoch=4)))
        assert not np.array_equal(a, c)

    def test_bad_batch_size(self):
        with pytest.raises(ParameterError):
            next(D.batches(10, 0, 0, 0))


class TestRealFiles:
    def test_mnist_sizes(self, mnist_available):
        train = D.load_idx(*(mnist_available / f for f in D.FILES["train"]))
        test = D.load_idx(*(mnist_available / f for f in D.FILES["test"]))
        assert train.images.shape == (60000, 28, 28) and test.images.shape == (10000, 28, 28)
        assert set(np.unique(train.labels)) == set(range(10))
