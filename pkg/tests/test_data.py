import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egotr.data import (PALETTE, SceneObject, SceneSpec, batch_iter, heading_to_columns,
                        load_dataset, make_dataset, polar_transform, read_manifest, read_ppm,
                        render_aerial, render_ground, render_pair, save_dataset, split_counts,
                        write_ppm)
from egotr.exceptions import DataError, UsageError


def empty_scene(**kw):
    base = dict(seed=0, objects=(), background=(0.5, 0.5, 0.5), texture=(1.0,) * 4 + (0.0,) * 4)
    base.update(kw)
    return SceneSpec(**base)


def one_object(x, y, shape="box", color=(0.9, 0.1, 0.1), heading=0.0):
    obj = SceneObject(x, y, shape, color, 0.6, 2.0)
    return SceneSpec(seed=0, objects=(obj,), background=(0.5, 0.5, 0.5),
                     texture=(1.0,) * 4 + (0.0,) * 4, heading=heading)


def object_columns(img, reference):
    """Columns where ``img`` differs from ``reference``."""
    return np.flatnonzero(np.abs(img - reference).sum(axis=(0, 1)) > 1e-6)


def circular_centre(cols, width):
    ang = 2 * np.pi * np.asarray(cols) / width
    return (math.atan2(np.sin(ang).mean(), np.cos(ang).mean()) % (2 * np.pi)) * width / (2 * np.pi)


class TestRender:
    def test_empty_scene_has_no_objects(self):
        spec = empty_scene()
        pair = render_pair(spec, (16, 64), 32)
        assert pair.ground.shape == (3, 16, 64) and pair.aerial.shape == (3, 32, 32)
        # only background (with its texture) and sky: no palette colour appears
        for c in PALETTE:
            assert not np.all(np.isclose(pair.aerial, c[:, None, None], atol=1e-3), axis=0).any()

    def test_uniform_without_texture(self):
        spec = empty_scene(texture=(0.0,) * 8)
        aerial = render_aerial(spec, 16)
        assert np.ptp(aerial.reshape(3, -1), axis=1).max() == 0

    def test_same_seed_bit_identical(self):
        a = render_pair(SceneSpec.random(11), (16, 64), 32)
        b = render_pair(SceneSpec.random(11), (16, 64), 32)
        assert a.ground.tobytes() == b.ground.tobytes()
        assert a.aerial.tobytes() == b.aerial.tobytes()

    def test_scene_bounds_and_counts(self):
        for seed in range(20):
            spec = SceneSpec.random(seed)
            assert 5 <= len(spec.objects) <= 15
            for o in spec.objects:
                assert abs(o.x) + o.radius <= 8 and abs(o.y) + o.radius <= 8

    def test_quantized_to_bytes(self):
        pair = render_pair(SceneSpec.random(3), (16, 64), 32)
        for img in (pair.ground, pair.aerial):
            scaled = img.astype(np.float64) * 255
            np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-4)

    def test_north_object_positions(self):
        base = empty_scene()
        spec = one_object(0.0, 4.0)
        size, (h, w) = 32, (16, 64)
        aerial = render_aerial(spec, size)
        rows, cols = np.nonzero(np.abs(aerial - render_aerial(base, size)).sum(0) > 1e-6)
        # directly above the centre in the aerial image
        assert abs(cols.mean() - (size / 2 - 0.5)) <= 0.5 and rows.mean() < size / 2
        ground_cols = object_columns(render_ground(spec, h, w), render_ground(base, h, w))
        # azimuth pi/2 counterclockwise from east
        assert abs(circular_centre(ground_cols, w) - w / 4) <= 1.0

    def test_nearer_objects_look_larger(self):
        base = render_ground(empty_scene(), 32, 128)
        near = object_columns(render_ground(one_object(2.0, 0.0), 32, 128), base)
        far = object_columns(render_ground(one_object(6.0, 0.0), 32, 128), base)
        assert len(near) > len(far)

    @pytest.mark.parametrize("seed", range(5))
    def test_heading_roll_identity(self, seed):
        w = 64
        spec = SceneSpec.random(seed)
        for k in (1, 5, 63):
            rolled = render_ground(spec.with_heading(2 * np.pi * k / w), 16, w)
            np.testing.assert_array_equal(rolled, np.roll(render_ground(spec, 16, w), -k, axis=-1))

    def test_heading_to_columns(self):
        assert heading_to_columns(0.0, 256) == 0
        assert heading_to_columns(np.pi / 2, 256) == 64
        assert heading_to_columns(2 * np.pi, 256) == 0

    @pytest.mark.parametrize("angle_deg", [0, 37, 90, 200, 300])
    def test_cross_view_azimuth_consistency(self, angle_deg):
        th = math.radians(angle_deg)
        spec = one_object(4.5 * math.cos(th), 4.5 * math.sin(th))
        base = empty_scene()
        h, w, s = 32, 128, 128
        g_cols = object_columns(render_ground(spec, h, w), render_ground(base, h, w))
        warped = polar_transform(render_aerial(spec, s), (h, w))
        a_cols = object_columns(warped, polar_transform(render_aerial(base, s), (h, w)))
        diff = abs(circular_centre(g_cols, w) - circular_centre(a_cols, w))
        assert min(diff, w - diff) <= 1.0


class TestPolar:
    def test_bottom_row_is_centre(self):
        img = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
        out = polar_transform(img, (16, 64))
        # radius (S/2)/H at the bottom row: within one pixel of the centre
        centre = img[:, 15:18, 15:18]
        assert out[:, -1].min() >= centre.min() - 1e-6 and out[:, -1].max() <= centre.max() + 1e-6

    def test_constant_image(self):
        out = polar_transform(np.full((3, 16, 16), 0.3, np.float32), (8, 32))
        np.testing.assert_allclose(out, 0.3, atol=1e-7)

    def test_ring_maps_to_stripe(self):
        s, h, w = 128, 64, 256
        r = 32.0
        yy, xx = np.mgrid[0:s, 0:s]
        dist = np.hypot(xx - s / 2, yy - s / 2)
        img = np.exp(-0.5 * ((dist - r) / 3.0) ** 2)[None]
        out = polar_transform(img, (h, w))
        row = int(np.argmax(out[0].mean(axis=1)))
        assert row == round(h * (1 - r / (s / 2)))
        assert np.ptp(out[0, row]) < 0.05

    def test_matches_sampling_formula(self):
        rng = np.random.default_rng(1)
        img = rng.random((1, 20, 20))
        h, w = 7, 12
        out = polar_transform(img, (h, w))
        for i in range(h):
            for j in range(w):
                rad = 10 * (h - i) / h
                x = 10 + rad * math.cos(2 * math.pi * j / w)
                y = 10 - rad * math.sin(2 * math.pi * j / w)
                x, y = min(max(x, 0), 19), min(max(y, 0), 19)
                x0, y0 = min(int(x), 18), min(int(y), 18)
                fx, fy = x - x0, y - y0
                ref = ((img[0, y0, x0] * (1 - fx) + img[0, y0, x0 + 1] * fx) * (1 - fy)
                       + (img[0, y0 + 1, x0] * (1 - fx) + img[0, y0 + 1, x0 + 1] * fx) * fy)
                assert out[0, i, j] == pytest.approx(ref, abs=1e-12)

    def test_fill_outside(self):
        img = np.ones((1, 8, 8))
        out = polar_transform(img, (4, 16), fill=-1.0)
        # the top row reaches x = S, just past the last pixel centre
        assert (out == -1.0).any() and (out[:, 1:] == 1.0).all()

    def test_non_square(self):
        with pytest.raises(UsageError):
            polar_transform(np.zeros((3, 8, 10)), (4, 16))

    def test_batch(self):
        imgs = np.random.default_rng(2).random((4, 3, 16, 16)).astype(np.float32)
        out = polar_transform(imgs, (8, 32))
        assert out.shape == (4, 3, 8, 32) and out.dtype == np.float32
        np.testing.assert_array_equal(out[2], polar_transform(imgs[2], (8, 32)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (1, 9, 9), elements=st.floats(-3, 3)))
    def test_preserves_range(self, img):
        out = polar_transform(img, (5, 12))
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


class TestDataset:
    @pytest.mark.parametrize("n, expected", [(10, (7, 1, 2)), (64, (44, 7, 13)), (256, (179, 26, 51)),
                                             (2, (1, 1, 0))])
    def test_split_counts(self, n, expected):
        assert split_counts(n) == expected

    def test_splits_disjoint_and_complete(self):
        ds = make_dataset(10, seed=1, ground_size=(8, 32), aerial_size=16)
        parts = [set(ds.splits[k]) for k in ("train", "val", "test")]
        assert [len(p) for p in parts] == [7, 1, 2]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        assert set().union(*parts) == set(ds.ids)

    def test_needs_two_pairs(self):
        with pytest.raises(UsageError, match="need >= 2 pairs"):
            make_dataset(1)

    def test_aligned_headings_zero(self):
        ds = make_dataset(6, seed=0, ground_size=(8, 32), aerial_size=16)
        assert not ds.headings.any() and ds.orientation_aligned

    def test_unaligned_is_rolled_panorama(self):
        ds = make_dataset(6, seed=3, ground_size=(8, 32), aerial_size=16, orientation_aligned=False)
        ref = make_dataset(6, seed=3, ground_size=(8, 32), aerial_size=16)
        assert ds.headings.any()
        np.testing.assert_array_equal(ds.aerial, ref.aerial)
        for k in range(6):
            shift = heading_to_columns(ds.headings[k], 32)
            np.testing.assert_array_equal(ds.ground[k], np.roll(ref.ground[k], -shift, axis=-1))

    def test_deterministic(self):
        a = make_dataset(5, seed=9, ground_size=(8, 32), aerial_size=16)
        b = make_dataset(5, seed=9, ground_size=(8, 32), aerial_size=16)
        assert a.ids == b.ids
        assert a.ground.tobytes() == b.ground.tobytes() and a.aerial.tobytes() == b.aerial.tobytes()

    def test_subset_and_manifest(self):
        ds = make_dataset(10, seed=0, ground_size=(8, 32), aerial_size=16)
        test = ds.subset("test")
        assert test.ids == ds.splits["test"] and len(test) == 2
        np.testing.assert_array_equal(test.ground[0], ds.ground[ds.ids.index(test.ids[0])])
        m = ds.manifest("val")
        assert m.split == "val" and m.orientation_aligned
        with pytest.raises(DataError):
            ds.manifest("holdout")


class TestBatches:
    def data(self, n):
        return make_dataset(n, seed=0, ground_size=(8, 32), aerial_size=16)

    @pytest.mark.parametrize("n, sizes", [(32, [32]), (33, [32]), (34, [32, 2]), (7, [3, 3])])
    def test_drop_rule(self, n, sizes):
        bs = 3 if n == 7 else 32
        assert [len(b) for b in batch_iter(self.data(n), bs, seed=0)] == sizes

    def test_covers_every_pair_once(self):
        ds = self.data(12)
        ids = [i for b in batch_iter(ds, 4, seed=5) for i in b.ids]
        assert sorted(ids) == sorted(ds.ids)

    def test_same_seed_same_order(self):
        ds = self.data(12)
        a = [b.ids for b in batch_iter(ds, 4, seed=1)]
        assert a == [b.ids for b in batch_iter(ds, 4, seed=1)]
        assert a != [b.ids for b in batch_iter(ds, 4, seed=2)]

    def test_pairs_stay_together(self):
        ds = self.data(8)
        for b in batch_iter(ds, 4, seed=3):
            for k, pid in enumerate(b.ids):
                np.testing.assert_array_equal(b.aerial[k], ds.aerial[ds.ids.index(pid)])
                np.testing.assert_array_equal(b.ground[k], ds.ground[ds.ids.index(pid)])

    def test_batch_size_too_small(self):
        with pytest.raises(UsageError):
            list(batch_iter(self.data(4), 1))


class TestDisk:
    def test_ppm_round_trip(self, tmp_path):
        img = render_aerial(SceneSpec.random(2), 16)
        write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)

    def test_dataset_round_trip(self, tmp_path):
        ds = make_dataset(6, seed=4, ground_size=(8, 32), aerial_size=16, orientation_aligned=False)
        save_dataset(ds, tmp_path / "d")
        assert (tmp_path / "d" / "pairs" / "00000_g.ppm").exists()
        kv = read_manifest(tmp_path / "d")
        assert kv["split.train"].split() == ds.splits["train"]
        back = load_dataset(tmp_path / "d")
        assert back.ids == ds.ids and back.params == ds.params
        np.testing.assert_array_equal(back.ground, ds.ground)
        np.testing.assert_array_equal(back.headings, ds.headings)
        # PPM files alone reproduce the pixels exactly
        (tmp_path / "d" / "ground.npy").unlink()
        np.testing.assert_array_equal(load_dataset(tmp_path / "d").ground, ds.ground)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)
