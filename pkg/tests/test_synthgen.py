import math
from dataclasses import replace

import numpy as np
import pytest

from oodlab import synthgen as sg
from oodlab.synthgen import (AREA_BENIGN, AREA_MALIGNANT, BACKGROUND, DistributionSpec, GeometryConfig,
                             Outline, ShapeClass, TransformConfig, TransformSample)

IDENTITY = TransformSample(np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.zeros((4, 4, 2)))


def polygon_fraction(outline):
    return outline.area  # unit square has area 1


# ---------------------------------------------------------------- outlines

@pytest.mark.parametrize("cls,target", [(ShapeClass.BENIGN, AREA_BENIGN), (ShapeClass.MALIGNANT, AREA_MALIGNANT)])
def test_canonical_area_fractions(cls, target):
    outline = sg.base_outline(cls)
    assert polygon_fraction(outline) == pytest.approx(target, abs=0.01)
    assert sg.rasterize(outline).mean() == pytest.approx(target, abs=0.01)


def test_benign_smoother_and_larger():
    ben, mal = sg.base_outline(ShapeClass.BENIGN), sg.base_outline(ShapeClass.MALIGNANT)
    assert sg.convexity_ratio(ben) < sg.convexity_ratio(mal)
    assert ben.area > mal.area


def test_spikes_off_gives_smooth_blob():
    geo = replace(GeometryConfig(), spike_amplitude=0.0)
    r_ben = sg.convexity_ratio(sg.base_outline(ShapeClass.BENIGN, geo))
    r_mal = sg.convexity_ratio(sg.base_outline(ShapeClass.MALIGNANT, geo))
    assert r_mal == pytest.approx(r_ben, rel=0.02)


def test_outline_invariants():
    for cls in ShapeClass:
        o = sg.base_outline(cls)
        assert len(o.vertices) >= 64 and o.is_simple()
    with pytest.raises(ValueError):
        sg.base_outline(ShapeClass.BENIGN, replace(GeometryConfig(), n_vertices=10))


# ---------------------------------------------------------------- transforms

def test_zero_ranges_give_identity():
    cfg = TransformConfig(rotation_deg=0, scale_range=(1.0, 1.0), shear=0, translation=0, ffd_cap=0)
    t = sg.sample_transform(np.random.default_rng(0), cfg)
    np.testing.assert_allclose(t.affine, [[1, 0, 0], [0, 1, 0]], atol=1e-15)
    np.testing.assert_array_equal(t.ffd, 0.0)


def test_transform_determinism():
    a = sg.sample_transform(np.random.default_rng(5))
    b = sg.sample_transform(np.random.default_rng(5))
    np.testing.assert_array_equal(a.affine, b.affine)
    np.testing.assert_array_equal(a.ffd, b.ffd)


def test_default_transforms_satisfy_invariants():
    rng = np.random.default_rng(99)
    cfg = TransformConfig()
    for _ in range(1000):
        t = sg.sample_transform(rng, cfg)
        assert np.linalg.det(t.affine[:, :2]) > 0
        assert np.abs(t.ffd).max() <= cfg.ffd_cap


def test_aggressive_ranges_raise():
    cfg = TransformConfig(scale_range=(0.0, 0.0), max_retries=5)
    with pytest.raises(sg.GenerationError):
        sg.sample_transform(np.random.default_rng(0), cfg)


def test_identity_warp_is_exact():
    o = sg.base_outline(ShapeClass.MALIGNANT)
    np.testing.assert_array_equal(sg.warp(o, IDENTITY).vertices, o.vertices)


def test_translation_shifts_centroid():
    o = sg.base_outline(ShapeClass.BENIGN)
    t = TransformSample(np.array([[1.0, 0, 0.03], [0, 1.0, -0.02]]), np.zeros((4, 4, 2)))
    np.testing.assert_allclose(sg.warp(o, t).centroid - o.centroid, [0.03, -0.02], atol=1e-15)


def test_single_control_point_moves_only_its_support():
    ffd = np.zeros((4, 4, 2))
    ffd[1, 2] = [0.04, -0.03]
    pts = np.random.default_rng(0).uniform(0, 1, (4000, 2))
    moved = np.abs(sg.ffd_displacement(pts, ffd)).sum(axis=1) > 0
    spacing = 1 / 3
    inside = (np.abs(pts[:, 0] - 1 * spacing) < 2 * spacing) & (np.abs(pts[:, 1] - 2 * spacing) < 2 * spacing)
    np.testing.assert_array_equal(moved, inside)


def test_bspline_partition_of_unity():
    t = np.linspace(0, 1, 11)
    total = sum(sg.bspline3(t - k) for k in range(-2, 4))
    np.testing.assert_allclose(total, 1.0, atol=1e-15)


def test_self_intersection_detected():
    bowtie = Outline(np.array([[0.2, 0.2], [0.8, 0.8], [0.8, 0.2], [0.2, 0.8]]))
    assert not bowtie.is_simple()
    with pytest.raises(sg.SelfIntersection):
        sg.warp(bowtie, IDENTITY)


# ---------------------------------------------------------------- rasterization and rendering

def test_full_square_is_all_true():
    sq = Outline(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float))
    assert sg.rasterize(sq, 16).all()


def test_disk_popcount():
    phi = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    disk = Outline(np.column_stack([0.5 + 20 / 64 * np.cos(phi), 0.5 + 20 / 64 * np.sin(phi)]))
    assert sg.rasterize(disk).sum() == pytest.approx(math.pi * 400, rel=0.02)


def test_rasterize_matches_pixel_loop():
    rng = np.random.default_rng(3)
    o = sg.warp(sg.base_outline(ShapeClass.MALIGNANT), sg.sample_transform(rng), check=False)
    mask = sg.rasterize(o, 32)
    v = o.vertices * 32
    for r in range(32):
        for c in range(32):
            x, y, inside = c + 0.5, r + 0.5, False
            for (x0, y0), (x1, y1) in zip(v, np.roll(v, -1, axis=0)):
                if (y0 > y) != (y1 > y) and x < x0 + (y - y0) * (x1 - x0) / (y1 - y0):
                    inside = not inside
            assert mask[r, c] == inside


def test_noise_free_render_is_exact():
    mask = np.zeros((64, 64), bool)
    mask[10:30, 10:30] = True
    spec = DistributionSpec(150, 120, noise_sigma=0)
    img = sg.render(mask, spec, ShapeClass.MALIGNANT, np.random.default_rng(0))
    assert np.all(img.pixels[mask] == 150 / 255)
    assert np.all(img.pixels[~mask] == BACKGROUND / 255)


def test_noisy_foreground_mean():
    mask = np.zeros((64, 64), bool)
    mask[5:40, 5:40] = True  # 1225 pixels
    img = sg.render(mask, DistributionSpec(150, 150), ShapeClass.BENIGN, np.random.default_rng(1))
    assert img.pixels[mask].mean() * 255 == pytest.approx(150, abs=1)
    assert 0 <= img.pixels.min() and img.pixels.max() <= 1


def test_render_rejects_empty_mask():
    with pytest.raises(ValueError):
        sg.render(np.zeros((64, 64), bool), DistributionSpec(150, 150), ShapeClass.BENIGN, np.random.default_rng(0))


def test_spec_grid_enforced():
    with pytest.raises(ValueError):
        DistributionSpec(155, 150)
    with pytest.raises(ValueError):
        DistributionSpec(100, 150)


# ---------------------------------------------------------------- datasets

@pytest.fixture(scope="module")
def d150():
    return sg.generate_dataset(DistributionSpec(150, 150), 200, seed=3)


def test_dataset_balanced_and_in_band(d150):
    labels = d150.labels
    assert (labels == 1).sum() == (labels == 0).sum() == 100
    for s in d150.samples:
        assert sg.MASK_FRACTION_BAND[0] <= s.mask.mean() <= sg.MASK_FRACTION_BAND[1]
        assert np.isfinite(s.pixels).all() and 0 <= s.pixels.min() and s.pixels.max() <= 1


def test_foreground_means_per_class(d150):
    for cls in (0, 1):
        fg = np.concatenate([s.pixels[s.mask] for s in d150.samples if s.label == cls])
        assert fg.mean() * 255 == pytest.approx(150, abs=1)


def test_area_ordering(d150):
    fr = {c: np.mean([s.mask.mean() for s in d150.samples if s.label == c]) for c in (0, 1)}
    assert fr[0] > fr[1]


def test_generation_is_bit_identical():
    a = sg.generate_dataset(DistributionSpec(130, 170), 10, seed=8)
    b = sg.generate_dataset(DistributionSpec(130, 170), 10, seed=8)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_samples_are_order_independent():
    ds = sg.generate_dataset(DistributionSpec(150, 150), 8, seed=4)
    lone = sg.generate_sample(DistributionSpec(150, 150), ShapeClass(5 % 2), sg.sample_seed(4, 5))
    np.testing.assert_array_equal(ds.samples[5].pixels, lone.pixels)


def test_odd_n_rejected():
    with pytest.raises(ValueError):
        sg.generate_dataset(DistributionSpec(150, 150), 7, seed=0)


def test_global_mean_constant_image():
    assert sg.global_mean(np.full((8, 8), 0.4)) == pytest.approx(102.0)


def test_calibrated_global_means():
    ds = sg.generate_dataset(DistributionSpec(150, 150), 200, seed=21)
    g = np.array([sg.global_mean(s) for s in ds.samples])
    assert g[ds.labels == 1].mean() == pytest.approx(110, abs=2)
    assert g[ds.labels == 0].mean() == pytest.approx(114, abs=2)
    ds = sg.generate_dataset(DistributionSpec(180, 160), 200, seed=22)
    g = np.array([sg.global_mean(s) for s in ds.samples])
    assert g[ds.labels == 1].mean() == pytest.approx(117, abs=1)
    assert g[ds.labels == 0].mean() == pytest.approx(117, abs=1)


# ---------------------------------------------------------------- calibration algebra

def test_equalizing_pair_default():
    mal, ben, exact = sg.equalizing_pair(7 / 30, 0.3, 97.8, 117)
    assert (mal, ben) == (180, 160)
    # exact solution of a*i + (1-a)*b = g, computed by hand
    assert exact[0] == pytest.approx((117 - (23 / 30) * 97.8) / (7 / 30), abs=1e-9)
    assert exact[1] == pytest.approx((117 - 0.7 * 97.8) / 0.3, abs=1e-9)


def test_equalizing_pair_symmetry_and_background():
    mal, ben, _ = sg.equalizing_pair(0.25, 0.25, 97.8, 120)
    assert mal == ben
    _, _, exact = sg.equalizing_pair(0.2, 0.3, 140.0, 140.0)
    assert exact == pytest.approx((140.0, 140.0))


def test_equalizing_pair_out_of_range():
    with pytest.raises(ValueError):
        sg.equalizing_pair(0.1, 0.1, 97.8, 150)
    with pytest.raises(ValueError):
        sg.equalizing_pair(0.0, 0.3)


def test_solve_calibration_recovers_constants():
    a_mal, a_ben, b = sg.solve_calibration((110.0, 117.0), (114.0, 117.0))
    assert a_mal == pytest.approx(7 / 30)
    assert a_ben == pytest.approx(0.3)
    # least squares over all four reported means; the malignant pair alone gives 97.8
    assert b == pytest.approx(98.2, abs=0.05)
    assert (110.0 - a_mal * 150) / (1 - a_mal) == pytest.approx(97.8, abs=0.05)


# ---------------------------------------------------------------- export

def test_export_round_trip(tmp_path):
    ds = sg.generate_dataset(DistributionSpec(180, 160), 6, seed=2, role="test")
    sg.export_dataset(ds, tmp_path, pgm=True)
    raw = (tmp_path / "samples.bin").read_bytes()
    assert raw[:4] == b"OODL" and int.from_bytes(raw[4:8], "little") == 6
    back = sg.load_dataset(tmp_path)
    np.testing.assert_array_equal(back.images, ds.images.astype(np.float32))
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert [s.sample_seed for s in back.samples] == [s.sample_seed for s in ds.samples]
    for a, b in zip(back.samples, ds.samples):
        np.testing.assert_array_equal(a.mask, b.mask)
    assert back.spec == ds.spec and back.role == sg.Role.TEST and back.geometry == ds.geometry
    assert len(list(tmp_path.glob("*.pgm"))) == 6


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (5, 7))
    sg.write_pgm(tmp_path / "a.pgm", img, "config_hash=abc")
    back, notes = sg.read_pgm(tmp_path / "a.pgm")
    assert notes == ["config_hash=abc"]
    np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-12)
