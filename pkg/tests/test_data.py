import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lesionnet import data as D


def write_pair(tmp_path, name, image, mask):
    (tmp_path / "images").mkdir(exist_ok=True)
    (tmp_path / "masks").mkdir(exist_ok=True)
    ip = tmp_path / "images" / f"{name}.png"
    mp = tmp_path / "masks" / f"{name}_segmentation.png"
    Image.fromarray(image, mode="RGB").save(ip)
    Image.fromarray(mask, mode="L").save(mp)
    return ip, mp


class TestLoad:
    def test_downsize(self, tmp_path, rng):
        img = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
        mask = np.zeros((512, 512), np.uint8)
        mask[100:300, 150:350] = 255
        s = D.load_pair(*write_pair(tmp_path, "big", img, mask), 256)
        assert s.image.shape == (3, 256, 256) and s.label.shape == (2, 256, 256)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert np.all(s.label.sum(axis=0) == 1)

    def test_no_resize_preserves_values(self, tmp_path, rng):
        img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        s = D.load_pair(*write_pair(tmp_path, "a", img, np.zeros((16, 16), np.uint8)), 16)
        assert np.array_equal(s.image, img.transpose(2, 0, 1).astype(np.float32) / 255)

    def test_mask_binarize(self, tmp_path):
        mask = np.array([[0, 255], [255, 0]], np.uint8)
        s = D.load_pair(*write_pair(tmp_path, "m", np.zeros((2, 2, 3), np.uint8), mask), 2)
        assert s.label[1].tolist() == [[0, 1], [1, 0]]
        mask = np.array([[127, 128], [3, 250]], np.uint8)
        s = D.load_pair(*write_pair(tmp_path, "t", np.zeros((2, 2, 3), np.uint8), mask), 2)
        assert s.label[1].tolist() == [[0, 1], [0, 1]]

    def test_three_class_labels(self, tmp_path):
        mask = np.zeros((9, 9), np.uint8)
        mask[2:7, 2:7] = 255
        s = D.load_pair(*write_pair(tmp_path, "b", np.zeros((9, 9, 3), np.uint8), mask), 9, classes=3)
        assert s.label.shape == (3, 9, 9)
        assert s.label[2].sum() == 16 and s.label[1].sum() == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="nope.png"):
            D.load_pair(tmp_path / "nope.png", tmp_path / "nope_segmentation.png", 8)

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(OSError, match="bad.png"):
            D.load_image(bad, 8)

    def test_save_reload_fixpoint(self, tmp_path, rng):
        img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        mask = (rng.random((32, 32)) * 255).astype(np.uint8)
        s = D.load_pair(*write_pair(tmp_path, "f", img, mask), 16)
        D.save_mask(s.lesion, tmp_path / "re.png")
        again = D.load_mask(tmp_path / "re.png", 16)
        assert np.array_equal(again, s.lesion)

    def test_discover_dir_and_manifest(self, tmp_path):
        for n in ("b", "a"):
            write_pair(tmp_path, n, np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4), np.uint8))
        pairs = D.discover_pairs(tmp_path)
        assert [p[0] for p in pairs] == ["a", "b"]
        manifest = tmp_path / "list.txt"
        manifest.write_text("images/b.png,masks/b_segmentation.png\n# comment\nimages/a.png,masks/a_segmentation.png\n")
        got = D.discover_pairs(manifest)
        assert [p[0] for p in got] == ["b", "a"]
        assert len(D.load_dataset(manifest, 4)) == 2

    def test_discover_flat_dir_and_missing_mask(self, tmp_path):
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "x.png")
        Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "x_segmentation.png")
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "y.jpg")
        with pytest.raises(FileNotFoundError, match="y"):
            D.discover_pairs(tmp_path)
        pairs = D.discover_pairs(tmp_path, require_masks=False)
        assert [(p[0], p[2] is None) for p in pairs] == [("x", False), ("y", True)]


class TestSplit:
    def test_uneven_sizes(self):
        tr, va, te = D.split_dataset(2594, D.SplitSpec((0.6, 0.2, 0.2), 0))
        assert (len(tr), len(va), len(te)) == (1556, 520, 518)

    def test_exact_division(self):
        assert tuple(map(len, D.split_dataset(10))) == (6, 2, 2)
        assert tuple(map(len, D.split_dataset(200, D.SplitSpec((0.8, 0.1, 0.1))))) == (160, 20, 20)

    def test_determinism(self):
        a = D.split_dataset(50, D.SplitSpec(seed=3))
        assert a == D.split_dataset(50, D.SplitSpec(seed=3))
        assert a != D.split_dataset(50, D.SplitSpec(seed=4))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(3, 500), st.integers(0, 1000))
    def test_partition(self, n, seed):
        tr, va, te = D.split_dataset(n, D.SplitSpec(seed=seed))
        assert sorted(tr + va + te) == list(range(n))

    def test_invalid(self):
        with pytest.raises(ValueError):
            D.split_dataset(2)
        with pytest.raises(ValueError):
            D.SplitSpec((0.5, 0.5, 0.0))


def toy_sample(rng, classes=2, h=12, w=10):
    mask = np.zeros((h, w), bool)
    mask[3:8, 2:6] = True
    return D.Sample("toy", rng.random((3, h, w)).astype(np.float32), D.mask_to_label(mask, classes))


class TestAugment:
    def test_identity(self, rng):
        s = toy_sample(rng)
        out = D.augment(s, D.AugmentSpec.identity(), np.random.default_rng(0))
        assert np.array_equal(out.image, s.image) and np.array_equal(out.label, s.label)

    def test_flip_involution(self, rng):
        s = toy_sample(rng)
        spec = D.AugmentSpec(1.0, 0.0, 0.0, 0.0, (1.0, 1.0))
        once = D.augment(s, spec, np.random.default_rng(0))
        twice = D.augment(once, spec, np.random.default_rng(1))
        assert not np.array_equal(once.image, s.image)
        assert np.array_equal(twice.image, s.image) and np.array_equal(twice.label, s.label)

    def test_forced_hflip_tiny(self):
        s = D.Sample("t", np.zeros((3, 1, 2), np.float32), D.mask_to_label(np.array([[0, 1]], bool)))
        out = D.augment(s, D.AugmentSpec(1.0, 0.0, 0.0, 0.0, (1.0, 1.0)), np.random.default_rng(0))
        assert out.label[1].tolist() == [[1, 0]]

    def test_deterministic(self, rng):
        s = toy_sample(rng)
        a = D.augment(s, D.AugmentSpec(), D.sample_rng(1, "toy", 3))
        b = D.augment(s, D.AugmentSpec(), D.sample_rng(1, "toy", 3))
        assert np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([2, 3]), st.floats(0, 45), st.floats(0, 0.3))
    def test_preserves_invariants(self, seed, classes, rot, shear):
        r = np.random.default_rng(seed)
        s = toy_sample(r, classes)
        out = D.augment(s, D.AugmentSpec(0.5, 0.5, rot, shear, (0.8, 1.2)), r)
        assert out.image.shape == s.image.shape and out.label.shape == s.label.shape
        assert out.image.min() >= 0 and out.image.max() <= 1
        assert np.all(out.label.sum(axis=0) == 1)
        assert set(np.unique(out.label)) <= {0.0, 1.0}

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            D.AugmentSpec(flip_h=1.5)
        with pytest.raises(ValueError):
            D.AugmentSpec(zoom=(1.2, 0.8))


class TestBoundary:
    def _label(self, mask):
        return D.one_hot(mask.astype(int), 2)

    def test_no_lesion(self):
        out = D.derive_boundary(self._label(np.zeros((5, 5), bool)))
        assert not out[2].any() and np.all(out[0] == 1)

    def test_single_pixel(self):
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        out = D.derive_boundary(self._label(m))
        assert out[2].sum() == 1 and out[2, 2, 2] == 1 and not out[1].any()

    def test_square_ring(self):
        m = np.zeros((9, 9), bool)
        m[2:7, 2:7] = True
        out = D.derive_boundary(self._label(m))
        assert out[2].sum() == 16 and out[1].sum() == 9
        assert np.array_equal(out[1] + out[2] > 0, m)
        expected_ring = m.copy()
        expected_ring[3:6, 3:6] = False
        assert np.array_equal(out[2] > 0, expected_ring)

    def test_exclusive_exhaustive(self, rng):
        for _ in range(20):
            m = rng.random((12, 12)) < rng.random()
            out = D.derive_boundary(self._label(m))
            assert np.all(out.sum(axis=0) == 1)


class TestSynth:
    def test_deterministic(self):
        a = D.synth_generate(5, 32, seed=7)
        b = D.synth_generate(5, 32, seed=7)
        for x, y in zip(a, b):
            assert x.id == y.id
            assert x.image.tobytes() == y.image.tobytes() and x.label.tobytes() == y.label.tobytes()
        c = D.synth_generate(5, 32, seed=8)
        assert a[0].image.tobytes() != c[0].image.tobytes()

    def test_empty(self):
        assert D.synth_generate(0) == []

    def test_coverage_bounds(self):
        cover = np.array([s.lesion.mean() for s in D.synth_generate(1000, 64, seed=0)])
        assert cover.min() >= 0.02 and cover.max() <= 0.6

    def test_samples_valid(self):
        for s in D.synth_generate(10, 48, seed=2, classes=3):
            assert s.image.shape == (3, 48, 48) and s.label.shape == (3, 48, 48)
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert np.all(s.label.sum(axis=0) == 1)

    def test_write_roundtrip(self, tmp_path):
        samples = D.synth_generate(3, 32, seed=1)
        D.write_dataset(samples, tmp_path)
        loaded = D.load_dataset(tmp_path, 32, workers=2)
        assert [s.id for s in loaded] == [s.id for s in samples]
        for a, b in zip(samples, loaded):
            assert np.array_equal(a.label, b.label)
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-6
