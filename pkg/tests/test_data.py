import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moras import data
from moras.data import Dataset, Splits, SyntheticSpec, generate_synthetic, split
from moras.errors import DatasetValidationError, FormatError


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(n_per_class=30, classes=4), seed=1)


class TestMds:
    def test_roundtrip_is_byte_exact(self, small, tmp_path):
        path = tmp_path / "d.mds"
        data.save(small, path)
        back = data.load(path)
        assert np.array_equal(back.pixels, small.pixels)
        assert np.array_equal(back.labels, small.labels)
        assert data.to_bytes(back) == path.read_bytes()

    def test_header_layout(self, small):
        buf = data.to_bytes(small)
        assert buf[:4] == b"MDS1"
        assert struct.unpack_from("<IHHHH", buf, 4) == (120, 1, 16, 16, 4)
        assert len(buf) == 16 + 120 * 256 + 2 * 120

    def test_truncated_file_names_lengths(self, small):
        buf = data.to_bytes(small)[:-7]
        with pytest.raises(FormatError, match=f"expected {len(buf) + 7} bytes, got {len(buf)}") as exc:
            data.from_bytes(buf)
        assert exc.value.offset == len(buf)

    def test_bad_magic(self, small):
        with pytest.raises(FormatError) as exc:
            data.from_bytes(b"XDS1" + data.to_bytes(small)[4:])
        assert exc.value.offset == 0

    def test_short_header(self):
        with pytest.raises(FormatError):
            data.from_bytes(b"MDS")

    def test_label_out_of_range(self, small):
        buf = bytearray(data.to_bytes(small))
        buf[-2:] = struct.pack("<H", 4)
        with pytest.raises(DatasetValidationError, match="class_count"):
            data.from_bytes(bytes(buf))

    def test_images_are_scaled(self, small):
        imgs = small.images
        assert imgs.dtype == np.float32 and 0 <= imgs.min() and imgs.max() <= 1
        np.testing.assert_array_equal(np.rint(imgs * 255).astype(np.uint8), small.pixels)

    def test_dataset_is_read_only(self, small):
        with pytest.raises(ValueError):
            small.pixels[0, 0, 0, 0] = 1


class TestCsv:
    def test_import_matches_mds(self, small, tmp_path):
        path = tmp_path / "d.csv"
        k = 16 * 16
        rows = [",".join(f"pixel_{i}" for i in range(k)) + ",label"]
        for img, lab in zip(small.pixels.reshape(len(small), -1), small.labels):
            rows.append(",".join(map(str, img)) + f",{lab}")
        path.write_text("\n".join(rows) + "\n")
        back = data.load(path)
        assert np.array_equal(back.pixels, small.pixels)
        assert np.array_equal(back.labels, small.labels) and back.class_count == 4

    def test_bad_header(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("a,b\n1,0\n")
        with pytest.raises(FormatError):
            data.load_csv(path)

    def test_non_square_needs_shape(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("pixel_0,pixel_1,label\n1,2,0\n")
        with pytest.raises(FormatError):
            data.load_csv(path)
        assert data.load_csv(path, shape=(1, 1, 2)).shape == (1, 1, 2)


class TestSplit:
    def test_coverage_and_disjointness(self, small):
        parts = split(small, seed=3)
        keys = [{p.pixels[i].tobytes() + bytes([p.labels[i]]) for i in range(len(p))} for p in parts]
        assert sum(len(p) for p in parts) == len(small)
        assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])

    def test_stratified_within_one_sample(self, small):
        parts = split(small, seed=3)
        for cls in range(4):
            n_cls = int(np.sum(small.labels == cls))
            for part, w in zip(parts, (10, 2, 3)):
                assert abs(np.sum(part.labels == cls) - n_cls * w / 15) < 1

    def test_deterministic_and_seed_dependent(self, small):
        a, b, c = split(small, seed=3), split(small, seed=3), split(small, seed=4)
        assert a[0].digest() == b[0].digest()
        assert a[0].digest() != c[0].digest()

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_invariant_to_input_order(self, small, perm_seed):
        order = np.random.default_rng(perm_seed).permutation(len(small))
        shuffled = small.subset(order)
        for p, q in zip(split(small, seed=5), split(shuffled, seed=5)):
            assert sorted(x.tobytes() for x in p.pixels) == sorted(x.tobytes() for x in q.pixels)

    def test_invalid_fractions(self, small):
        with pytest.raises(ValueError):
            split(small, (1, -1, 1))

    def test_tracked_access(self, small):
        splits = Splits.from_dataset(small, seed=0)
        splits.train, splits.val
        assert splits.accessed == {"train", "val"}


class TestSynthetic:
    def test_deterministic_by_seed(self):
        spec = SyntheticSpec(n_per_class=10)
        assert generate_synthetic(spec, 2).digest() == generate_synthetic(spec, 2).digest()
        assert generate_synthetic(spec, 2).digest() != generate_synthetic(spec, 3).digest()

    def test_exact_class_balance(self):
        ds = generate_synthetic(SyntheticSpec(n_per_class=17, classes=6), 0)
        assert np.bincount(ds.labels).tolist() == [17] * 6
        assert ds.shape == (1, 16, 16)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(classes=7)

    def test_concatenate(self, small):
        a, b, _ = split(small)
        both = Dataset.concatenate([a, b])
        assert len(both) == len(a) + len(b) and both.class_count == 4

    def test_float_export_quantizes(self):
        imgs = np.array([[[[0.0, 0.5, 1.2]]]])
        ds = data.from_float_images(imgs, [0], 2)
        assert ds.pixels.ravel().tolist() == [0, 128, 255]

    def test_empty_rejected(self):
        with pytest.raises(DatasetValidationError):
            Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0), 2)
