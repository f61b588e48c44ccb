from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchsr.errors import DataError
from patchsr.imaging import resize_bicubic
from patchsr.patches import (CoupledDictionary, build_dictionaries, extract_patches, load_dictionary,
                             make_grid, save_dictionary, stitch_patches)


class TestGrid:
    def test_exact_tiling(self):
        g = make_grid(8, 8, 4, 4)
        assert g.xs == (0, 4) and g.ys == (0, 4)
        assert len(g) == 4

    def test_last_anchor_appended(self):
        g = make_grid(9, 9, 4, 4)
        assert g.xs == (0, 4, 5)
        assert len(g) == 9

    def test_single_position(self):
        g = make_grid(4, 4, 4, 1)
        assert g.positions == [(0, 0)]

    def test_raster_order(self):
        g = make_grid(6, 5, 3, 2)
        assert g.positions[:3] == [(0, 0), (2, 0), (3, 0)]
        assert g.positions[3] == (0, 2)

    @pytest.mark.parametrize("args", [(3, 3, 4, 1), (8, 8, 0, 1), (8, 8, 3, 0), (8, 8, 2, 3)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            make_grid(*args)


class TestExtract:
    def test_two_by_two(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        p = extract_patches(img, make_grid(2, 2, 2, 2))
        # column-major vectorization
        assert p.tolist() == [[1.0, 3.0, 2.0, 4.0]]

    def test_constant(self):
        p = extract_patches(np.full((7, 9), 3.0), make_grid(9, 7, 3, 2))
        assert np.all(p == 3.0)

    def test_index_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(8, 8))
        g = make_grid(8, 8, 4, 2)
        p = extract_patches(img, g)
        for n, (x, y) in enumerate(g.positions):
            expected = [img[y + r, x + c] for c in range(4) for r in range(4)]
            assert p[n].tolist() == expected

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            extract_patches(np.zeros((5, 5)), make_grid(6, 6, 3, 3))


class TestStitch:
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 6), st.integers(1, 6),
           st.integers(0, 2 ** 31))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_exact(self, w, h, p, s, seed):
        p = min(p, w, h)
        s = min(s, p)
        img = np.random.default_rng(seed).normal(0, 100, (h, w))
        g = make_grid(w, h, p, s)
        assert np.array_equal(stitch_patches(extract_patches(img, g), g), img)

    def test_overlap_average(self):
        g = make_grid(4, 2, 2, 1)  # positions x = 0, 1, 2
        patches = np.stack([np.zeros(4), np.full(4, 10.0), np.full(4, 10.0)])
        out = stitch_patches(patches, g)
        # column 1 is covered by patches 0 and 1
        assert out[0, 1] == 5.0
        assert out[0, 0] == 0.0 and out[0, 3] == 10.0

    def test_single_patch(self):
        v = np.arange(9.0)
        out = stitch_patches(v[None], make_grid(3, 3, 3, 3))
        assert np.array_equal(out, v.reshape(3, 3, order="F"))


def _training(m=3, size=(12, 16), seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0, 255, size) for _ in range(m)]


class TestDictionary:
    def test_single_image(self):
        d = build_dictionaries(_training(1), 2, lr_patch_size=3, lr_stride=2)
        assert d.M == 1
        for j in range(d.n_positions):
            assert d.lr(j).shape == (9, 1)
            assert d.hr(j).shape == (36, 1)

    def test_collocation(self):
        hr = _training(4, (16, 20))
        d = build_dictionaries(hr, 2, lr_patch_size=4, lr_stride=2)
        for j in (0, 3, d.n_positions - 1):
            H = d.hr(j)
            for i in range(d.M):
                lr_img = resize_bicubic(hr[i], 10, 8, antialias=True)
                x0, y0 = d.lr_grid.positions[j]
                expected = lr_img[y0:y0 + 4, x0:x0 + 4].ravel(order="F")
                np.testing.assert_allclose(d.lr(j)[:, i], expected, atol=1e-6)
                hx, hy = d.hr_grid.positions[j]
                np.testing.assert_array_equal(H[:, i], hr[i][hy:hy + 8, hx:hx + 8].ravel(order="F"))

    def test_global_dimensions(self):
        d = build_dictionaries(_training(3, (20, 20)), 4, mode="global")
        assert d.lr(0).shape == (25, 3)
        assert d.hr(0).shape == (400, 3)

    def test_blocks_match_single(self):
        d = build_dictionaries(_training(5), 2, lr_patch_size=3, lr_stride=1)
        Lb, Hb = d.blocks([1, 4])
        assert np.array_equal(Lb[1], d.lr(4))
        assert np.array_equal(Hb[0], d.hr(1))

    def test_fractional_magnification(self):
        d = build_dictionaries(_training(2, (24, 16)), Fraction(8, 3), lr_patch_size=3, lr_stride=3)
        assert d.lr_shape == (9, 6)
        assert d.hr_grid.patch_size == 8

    def test_subset(self):
        d = build_dictionaries(_training(4), 2, lr_patch_size=3, lr_stride=2, sample_ids=list("abcd"))
        s = d.subset([0, 2])
        assert s.sample_ids == ["a", "c"]
        assert np.array_equal(s.hr(1), d.hr(1)[:, [0, 2]])

    def test_rejects_small_magnification(self):
        with pytest.raises(ValueError):
            build_dictionaries(_training(2), Fraction(3, 2))

    def test_rejects_mixed_sizes(self):
        with pytest.raises(ValueError):
            build_dictionaries([np.zeros((8, 8)), np.zeros((8, 10))], 2)


class TestContainer:
    @pytest.mark.parametrize("mode", ["position", "global"])
    def test_round_trip(self, tmp_path, mode):
        d = build_dictionaries(_training(3, (12, 16)), 2, lr_patch_size=3, lr_stride=2, mode=mode,
                               sample_ids=["s1", "s2", "s3"])
        sidecar = save_dictionary(tmp_path / "d.pldc", d)
        assert sidecar.exists()
        e = load_dictionary(tmp_path / "d.pldc")
        assert e.mode == mode and e.sample_ids == d.sample_ids
        assert e.magnification == d.magnification
        for j in range(d.n_positions):
            assert np.array_equal(e.lr(j), d.lr(j))
            assert np.array_equal(e.hr(j), d.hr(j))

    def test_header_layout(self, tmp_path):
        d = build_dictionaries(_training(2, (8, 8)), 2, lr_patch_size=2, lr_stride=2)
        save_dictionary(tmp_path / "d.pldc", d)
        raw = (tmp_path / "d.pldc").read_bytes()
        assert raw[:4] == b"PLDC"
        payload = d.n_positions * (4 + 16) * 2 * 8
        assert len(raw) - payload == 77

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.pldc").write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(DataError):
            load_dictionary(tmp_path / "x.pldc")

    def test_truncated(self, tmp_path):
        d = build_dictionaries(_training(2, (8, 8)), 2, lr_patch_size=2, lr_stride=2)
        save_dictionary(tmp_path / "d.pldc", d)
        raw = (tmp_path / "d.pldc").read_bytes()
        (tmp_path / "d.pldc").write_bytes(raw[:-8])
        with pytest.raises(DataError):
            load_dictionary(tmp_path / "d.pldc")


def test_dictionary_validates_shapes():
    with pytest.raises(ValueError):
        CoupledDictionary(np.zeros((2, 4, 4)), np.zeros((2, 9, 9)), 2, "position", 2, 2)
