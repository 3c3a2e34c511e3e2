import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densattn import oracles
from densattn.density import (
    DensityMap,
    KernelSpec,
    PointAnnotation,
    downsample_sum,
    generate_density_map,
    kernel_sigmas,
    knn_mean_distance,
    load_annotation,
    read_dmap,
    write_dmap,
    write_dmap_csv,
)


class TestKnn:
    def test_three_four_five(self):
        np.testing.assert_allclose(knn_mean_distance([(0, 0), (3, 4)], 1), [5.0, 5.0])

    def test_unit_square(self):
        d = knn_mean_distance([(0, 0), (1, 0), (0, 1), (1, 1)], 3)
        np.testing.assert_allclose(d, (2 + math.sqrt(2)) / 3, rtol=1e-15)
        assert d[0] == pytest.approx(1.138071, abs=1e-6)

    def test_collinear_fewer_than_k(self):
        pts = [(0, 0), (1, 0), (2, 0)]
        np.testing.assert_allclose(knn_mean_distance(pts, 3), [1.5, 1.0, 1.5])
        np.testing.assert_allclose(oracles.knn_mean_distance_bruteforce(pts, 3), [1.5, 1.0, 1.5])

    @settings(max_examples=30)
    @given(st.integers(2, 25), st.integers(1, 6), st.integers(0, 2**31))
    def test_matches_bruteforce(self, n, k, seed):
        pts = np.random.default_rng(seed).uniform(0, 50, (n, 2))
        np.testing.assert_allclose(knn_mean_distance(pts, k), oracles.knn_mean_distance_bruteforce(pts, k),
                                   rtol=1e-12)

    def test_single_point_raises(self):
        with pytest.raises(ValueError):
            knn_mean_distance([(1, 1)], 3)


class TestGenerate:
    def test_single_centred_point_fixed(self):
        ann = PointAnnotation("c", 101, 101, [(50.5, 50.5)])
        dm = generate_density_map(ann, KernelSpec.fixed(15))
        assert 0.995 <= dm.count <= 1.0
        # independent 1-D integration: mass of a centred Gaussian on [-R, R], R = ceil(3 sigma) = 45 (+0.5 cell)
        one_d = math.erf(45.5 / (15 * math.sqrt(2)))
        assert dm.count == pytest.approx(one_d**2, rel=1e-12)

    def test_zero_points(self):
        dm = generate_density_map(PointAnnotation("z", 7, 5), KernelSpec.adaptive())
        assert dm.values.shape == (5, 7) and dm.count == 0 and not dm.values.any()

    def test_two_far_points_adaptive(self):
        ann = PointAnnotation("p", 400, 300, [(150.5, 150.5), (245.5, 150.5)])
        dm = generate_density_map(ann, KernelSpec.adaptive(0.3, 3))
        assert dm.meta["sigmas"].tolist() == pytest.approx([28.5, 28.5])
        np.testing.assert_allclose(dm.meta["sigmas"], 0.3 * np.asarray(oracles.knn_mean_distance_bruteforce(ann.points, 3)))
        assert abs(dm.count - 2.0) / 2.0 <= 0.005

    def test_single_point_adaptive_falls_back(self, caplog):
        ann = PointAnnotation("s", 101, 101, [(50.5, 50.5)])
        with caplog.at_level(logging.WARNING):
            sig = kernel_sigmas(ann, KernelSpec.adaptive())
        assert sig.tolist() == [15.0] and "single point" in caplog.text

    def test_small_sigma_clamped(self, caplog):
        ann = PointAnnotation("t", 20, 20, [(5.0, 5.0), (5.2, 5.0)])
        with caplog.at_level(logging.WARNING):
            sig = kernel_sigmas(ann, KernelSpec.adaptive(0.3, 1))
        assert sig.tolist() == [0.5, 0.5] and "clamped" in caplog.text

    def test_values_non_negative(self, rng):
        ann = PointAnnotation("r", 40, 30, rng.uniform(0, 30, (12, 2)))
        assert (generate_density_map(ann, KernelSpec.adaptive()).values >= 0).all()

    def test_border_point_loses_mass(self):
        dm = generate_density_map(PointAnnotation("b", 60, 60, [(0.0, 30.0)]), KernelSpec.fixed(4))
        assert 0.45 < dm.count < 0.55

    @settings(max_examples=40)
    @given(st.floats(0.5, 40), st.floats(0, 1), st.floats(0, 1))
    def test_box_truncation_lower_bound(self, sigma, fx, fy):
        # the window reaches at least 3 sigma on every side, so mass >= erf(3/sqrt 2)^2
        r = math.ceil(3 * sigma) + 2
        x, y = r + fx, r + fy
        dm = generate_density_map(PointAnnotation("l", 2 * r + 2, 2 * r + 2, [(x, y)]), KernelSpec.fixed(sigma))
        assert math.erf(3 / math.sqrt(2)) ** 2 - 1e-12 <= dm.count <= 1.0

    def test_worst_alignment_exceeds_half_percent(self):
        # 3 sigma integral and an integer centre: the window is tight on two sides
        dm = generate_density_map(PointAnnotation("w", 200, 200, [(100.0, 100.0)]), KernelSpec.fixed(30))
        assert 0.005 < 1 - dm.count < 0.0054

    @settings(max_examples=20)
    @given(st.integers(0, 2**31), st.integers(-10, 10), st.integers(-10, 10))
    def test_translation_covariance(self, seed, dx, dy):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(40, 60, (6, 2))
        a = generate_density_map(PointAnnotation("a", 120, 110, pts), KernelSpec.adaptive())
        b = generate_density_map(PointAnnotation("b", 120, 110, pts + [dx, dy]), KernelSpec.adaptive())
        shifted = np.roll(a.values, (dy, dx), axis=(0, 1))
        assert np.abs(shifted - b.values).max() <= 1e-9

    def test_adaptive_fixed_agreement(self):
        side = 20.0
        pts = np.array([(40, 40), (40 + side, 40), (40, 40 + side), (40 + side, 40 + side)])
        dbar = (2 + math.sqrt(2)) * side / 3
        ann = PointAnnotation("q", 100, 100, pts)
        adaptive = generate_density_map(ann, KernelSpec.adaptive(0.3, 3))
        fixed = generate_density_map(ann, KernelSpec.fixed(0.3 * dbar))
        assert np.abs(adaptive.values - fixed.values).max() <= 1e-9

    @pytest.mark.parametrize("spec", [KernelSpec.adaptive(0.3, 3), KernelSpec.fixed(15)])
    def test_interior_mass(self, rng, spec):
        pts = rng.uniform(50, 150, (15, 2))
        dm = generate_density_map(PointAnnotation("m", 200, 200, pts), spec)
        assert np.all(3 * dm.meta["sigmas"] <= 50)
        assert abs(dm.count - 15) / 15 <= 0.005


class TestDownsample:
    def test_ones(self):
        out = downsample_sum(np.ones((4, 4)), 2)
        np.testing.assert_array_equal(out.values, np.full((2, 2), 4.0))
        assert out.count == 16

    def test_identity(self, rng):
        v = rng.uniform(0, 1, (5, 3))
        np.testing.assert_array_equal(downsample_sum(DensityMap(v), 1).values, v)

    def test_random_count(self, rng):
        v = rng.uniform(0, 1, (8, 8))
        assert abs(downsample_sum(v, 4).count - DensityMap(v).count) <= 1e-12

    def test_pads_and_records(self):
        out = downsample_sum(np.ones((5, 7)), 4)
        assert out.values.shape == (2, 2) and out.meta["padded"] == (3, 1) and out.count == 35

    @pytest.mark.parametrize("factor", [0, -2])
    def test_bad_factor(self, factor):
        with pytest.raises(ValueError):
            downsample_sum(np.ones((4, 4)), factor)

    @settings(max_examples=30)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 9), st.integers(0, 2**31))
    def test_conservation(self, h, w, factor, seed):
        v = np.random.default_rng(seed).uniform(0, 1, (h, w))
        assert abs(downsample_sum(v, factor).count - math.fsum(v.ravel())) <= 1e-12 * max(1, v.sum())


class TestAnnotationIO:
    def test_out_of_bounds_rejected(self, caplog):
        with caplog.at_level(logging.WARNING):
            ann = PointAnnotation("o", 10, 10, [(1, 1), (10, 2), (-0.1, 3), (9.99, 9.99)])
        assert len(ann) == 2 and ann.rejected == 2 and "out-of-bounds" in caplog.text

    def test_json_round_trip(self, tmp_path):
        ann = PointAnnotation("j", 30, 20, [(1.5, 2.5), (10, 11)])
        path = tmp_path / "j.json"
        path.write_text(json.dumps(ann.to_dict()))
        back = load_annotation(path)
        assert back.image_id == "j" and (back.width, back.height) == (30, 20)
        np.testing.assert_array_equal(back.points, ann.points)

    def test_csv_with_size(self, tmp_path):
        (tmp_path / "img7.csv").write_text("1.0,2.0\n3.5,4.5\n")
        (tmp_path / "img7.size").write_text("16 12\n")
        ann = load_annotation(tmp_path / "img7.csv")
        assert ann.image_id == "img7" and (ann.width, ann.height) == (16, 12) and len(ann) == 2

    def test_csv_without_size(self, tmp_path):
        (tmp_path / "x.csv").write_text("1,2\n")
        with pytest.raises(ValueError, match="sidecar"):
            load_annotation(tmp_path / "x.csv")

    @pytest.mark.parametrize("text", ["{not json", "[1, 2]", '{"image_id": "a"}'])
    def test_malformed_json(self, tmp_path, text):
        (tmp_path / "bad.json").write_text(text)
        with pytest.raises(ValueError):
            load_annotation(tmp_path / "bad.json")


class TestDmapIO:
    def test_round_trip(self, tmp_path, rng):
        dm = DensityMap(rng.uniform(0, 1, (6, 9)))
        write_dmap(tmp_path / "a.dmap", dm)
        back = read_dmap(tmp_path / "a.dmap")
        np.testing.assert_array_equal(back.values, dm.values.astype(np.float32))

    def test_header_layout(self, tmp_path):
        write_dmap(tmp_path / "h.dmap", DensityMap(np.zeros((2, 3))))
        raw = (tmp_path / "h.dmap").read_bytes()
        assert raw[:4] == b"DMAP" and raw[4:12] == bytes([2, 0, 0, 0, 3, 0, 0, 0]) and len(raw) == 12 + 24

    def test_truncated_payload(self, tmp_path):
        write_dmap(tmp_path / "t.dmap", DensityMap(np.ones((4, 4))))
        (tmp_path / "t.dmap").write_bytes((tmp_path / "t.dmap").read_bytes()[:-4])
        with pytest.raises(ValueError, match="payload"):
            read_dmap(tmp_path / "t.dmap")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.dmap").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(ValueError):
            read_dmap(tmp_path / "m.dmap")

    def test_csv(self, tmp_path):
        write_dmap_csv(tmp_path / "d.csv", DensityMap(np.array([[0.25, 1.0]])))
        assert (tmp_path / "d.csv").read_text().strip() == "0.25,1"

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            DensityMap(np.array([[-1e-3]]))


class TestKernelSpec:
    def test_parse(self):
        assert KernelSpec.parse("adaptive:beta=0.3,k=3") == KernelSpec.adaptive(0.3, 3)
        assert KernelSpec.parse("fixed:sigma=15") == KernelSpec.fixed(15)

    @pytest.mark.parametrize("text", ["gauss:sigma=1", "fixed:sigma=0", "adaptive:k=0", "fixed:width=3"])
    def test_parse_invalid(self, text):
        with pytest.raises(ValueError):
            KernelSpec.parse(text)

    @pytest.mark.parametrize("spec", [KernelSpec.adaptive(0.2, 5), KernelSpec.fixed(4)])
    def test_dict_round_trip(self, spec):
        assert KernelSpec.from_dict(spec.to_dict()) == spec
