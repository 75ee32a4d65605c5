"""Intensity and spatial transform behavior."""

import numpy as np
import pytest

from segkit.errors import ConfigError
from segkit.transforms import (
    IntensityAugment,
    NormalizeMinMax,
    PadTo,
    RandomCrop,
    RandomFlip,
    RandomRescale,
    RandomRotate,
    build_pipeline,
    intensity_augment,
    normalize_mean_std,
    normalize_min_max,
    pad_params,
    random_crop_params,
    random_flip_params,
    random_rescale_params,
    random_rotate_params,
    spatial_apply,
    spatial_invert,
)
from segkit.volio.volume import Sample, Volume


def _image(shape=(1, 12, 16), seed=0, spacing=None):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.0, 200.0, size=shape).astype(np.float32)
    return Volume(data=data, spacing=spacing)


def _label_for(image, n_classes=3, seed=1):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, n_classes, size=image.spatial_shape).astype(np.int64)
    return Volume(data=lab[None], spacing=image.spacing, is_label=True)


def _sample(shape=(1, 12, 16), seed=0):
    img = _image(shape, seed=seed)
    return Sample(image=img, label=_label_for(img), id="t")


# ---------------------------------------------------------------------------
# intensity


def test_normalize_mean_std_moments():
    out = normalize_mean_std(_image(seed=3))
    c = out.data[0]
    assert abs(float(c.mean())) < 1e-5
    assert abs(float(c.std()) - 1.0) < 1e-5


def test_normalize_mean_std_constant_channel_is_zero():
    v = Volume(data=np.full((1, 6, 6), 7.0, dtype=np.float32))
    out = normalize_mean_std(v)
    assert np.all(out.data == 0.0)


def test_normalize_mean_std_per_channel_independent():
    rng = np.random.default_rng(5)
    data = np.stack([
        rng.uniform(0, 1, size=(8, 8)).astype(np.float32),
        rng.uniform(50, 90, size=(8, 8)).astype(np.float32),
    ])
    out = normalize_mean_std(Volume(data=data))
    for c in out.data:
        assert abs(float(c.mean())) < 1e-4
        assert abs(float(c.std()) - 1.0) < 1e-4


def test_normalize_mean_std_masked_region_sets_stats():
    data = np.zeros((1, 4, 4), dtype=np.float32)
    data[0, :2] = 10.0
    data[0, 2:] = 20.0
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2] = True
    out = normalize_mean_std(Volume(data=data), mask=mask)
    # masked values are constant -> mean 10, std 0 would zero out; std over
    # mask is 0 so the whole channel collapses to zeros
    assert np.all(out.data == 0.0)


def test_normalize_min_max_range():
    out = normalize_min_max(_image(seed=4))
    assert float(out.data.min()) == pytest.approx(0.0, abs=1e-6)
    assert float(out.data.max()) == pytest.approx(1.0, abs=1e-6)


def test_normalize_min_max_constant_channel_is_zero():
    v = Volume(data=np.full((1, 5, 5), -3.0, dtype=np.float32))
    assert np.all(normalize_min_max(v).data == 0.0)


def test_normalize_min_max_masked_clips_outside():
    data = np.linspace(0.0, 100.0, 16, dtype=np.float32).reshape(1, 4, 4)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3] = True  # min/max computed over middle rows only
    out = normalize_min_max(Volume(data=data), mask=mask)
    assert float(out.data.min()) == 0.0
    assert float(out.data.max()) == 1.0


def test_intensity_augment_deterministic_for_seed():
    v = _image(seed=6)
    a = intensity_augment(v, seed=11)
    b = intensity_augment(v, seed=11)
    c = intensity_augment(v, seed=12)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_intensity_augment_gamma_one_no_noise_is_identity():
    v = _image(seed=7)
    out = intensity_augment(v, gamma_range=(1.0, 1.0), noise_std=0.0, seed=0)
    np.testing.assert_allclose(out.data, v.data, rtol=1e-5, atol=1e-3)


def test_intensity_augment_preserves_range_no_noise():
    v = _image(seed=8)
    out = intensity_augment(v, gamma_range=(0.5, 2.0), noise_std=0.0, seed=3)
    assert float(out.data.min()) == pytest.approx(float(v.data.min()), abs=1e-2)
    assert float(out.data.max()) == pytest.approx(float(v.data.max()), abs=1e-2)


def test_intensity_augment_validation():
    v = _image()
    with pytest.raises(ValueError):
        intensity_augment(v, gamma_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        intensity_augment(v, gamma_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        intensity_augment(v, noise_std=-0.1)


# ---------------------------------------------------------------------------
# spatial params


def test_crop_params_within_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = random_crop_params((12, 16), (8, 8), rng)
        assert p.kind == "crop"
        assert all(0 <= o <= s - 8 for o, s in zip(p.offsets, (12, 16)))


def test_crop_params_rejects_oversize_and_rank():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        random_crop_params((12, 16), (13, 8), rng)
    with pytest.raises(ValueError):
        random_crop_params((12, 16), (8, 8, 8), rng)


def test_flip_params_respect_axis_pool():
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(100):
        p = random_flip_params(3, rng, axes=(1,))
        assert set(p.axes) <= {1}
        seen.add(p.axes)
    assert seen == {(), (1,)}


def test_rotate_params_angle_in_range():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = random_rotate_params(rng, angle_range=(-10.0, 10.0))
        assert -10.0 <= p.angle <= 10.0
        assert p.plane == (0, 1)


def test_rotate_params_default_plane_3d():
    rng = np.random.default_rng(2)
    p = random_rotate_params(rng, n_spatial=3)
    assert p.plane == (1, 2)


def test_rescale_params_in_range():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = random_rescale_params(rng, factor_range=(0.8, 1.25), n_spatial=3)
        assert len(p.factors) == 3
        assert all(0.8 <= f <= 1.25 for f in p.factors)
        assert len(set(p.factors)) == 1  # isotropic


def test_rescale_params_rejects_nonpositive():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        random_rescale_params(rng, factor_range=(-1.0, -0.5))


# ---------------------------------------------------------------------------
# apply / invert


def test_crop_apply_shape_and_content():
    s = _sample((1, 12, 16), seed=10)
    rng = np.random.default_rng(4)
    p = random_crop_params(s.image.spatial_shape, (8, 10), rng)
    out, realized = spatial_apply(s, p)
    assert out.image.spatial_shape == (8, 10)
    assert out.label.spatial_shape == (8, 10)
    assert realized.orig_size == (12, 16)
    oy, ox = realized.offsets
    np.testing.assert_array_equal(
        out.image.data, s.image.data[:, oy:oy + 8, ox:ox + 10]
    )
    np.testing.assert_array_equal(
        out.label.data, s.label.data[:, oy:oy + 8, ox:ox + 10]
    )


def test_crop_invert_restores_window():
    s = _sample((1, 12, 16), seed=11)
    rng = np.random.default_rng(5)
    p = random_crop_params(s.image.spatial_shape, (6, 6), rng)
    out, realized = spatial_apply(s, p)
    back = spatial_invert(out.image, realized)
    assert back.spatial_shape == (12, 16)
    oy, ox = realized.offsets
    np.testing.assert_array_equal(
        back.data[:, oy:oy + 6, ox:ox + 6], out.image.data
    )


def test_flip_apply_matches_numpy_and_inverts_exactly():
    s = _sample((1, 12, 16), seed=12)
    from segkit.transforms import SpatialParams

    p = SpatialParams(kind="flip", axes=(0, 1))
    out, realized = spatial_apply(s, p)
    np.testing.assert_array_equal(out.image.data, s.image.data[:, ::-1, ::-1])
    np.testing.assert_array_equal(out.label.data, s.label.data[:, ::-1, ::-1])
    back = spatial_invert(out.image, realized)
    np.testing.assert_array_equal(back.data, s.image.data)
    back_lab = spatial_invert(out.label, realized)
    np.testing.assert_array_equal(back_lab.data, s.label.data)


def test_flip_empty_axes_is_identity():
    s = _sample((1, 8, 8), seed=13)
    from segkit.transforms import SpatialParams

    out, _ = spatial_apply(s, SpatialParams(kind="flip", axes=()))
    np.testing.assert_array_equal(out.image.data, s.image.data)


def test_pad_apply_and_invert():
    s = _sample((1, 8, 9), seed=14)
    p = pad_params((2, 3), (1, 0))
    out, realized = spatial_apply(s, p)
    assert out.image.spatial_shape == (11, 12)
    np.testing.assert_array_equal(out.image.data[:, 2:10, 3:12], s.image.data)
    back = spatial_invert(out.image, realized)
    np.testing.assert_array_equal(back.data, s.image.data)
    # label padding uses an id already present, so ids stay a subset
    assert set(np.unique(out.label.data)) <= set(np.unique(s.label.data))


def test_rotate_label_preserves_ids_and_inverts_approximately():
    img = _image((1, 24, 24), seed=15)
    lab = np.zeros((24, 24), dtype=np.int64)
    lab[6:18, 6:18] = 2
    s = Sample(image=img, label=Volume(data=lab[None], is_label=True), id="r")
    from segkit.transforms import SpatialParams

    p = SpatialParams(kind="rotate", angle=30.0, plane=(0, 1))
    out, realized = spatial_apply(s, p)
    assert set(np.unique(out.label.data)) <= {0, 2}
    back = spatial_invert(out.label, realized)
    inner = (slice(None), slice(8, 16), slice(8, 16))
    np.testing.assert_array_equal(back.data[inner], s.label.data[inner])


def test_rescale_changes_shape_and_spacing_then_inverts():
    img = _image((1, 16, 16), seed=16, spacing=(2.0, 2.0))
    s = Sample(image=img, label=_label_for(img), id="z")
    from segkit.transforms import SpatialParams

    p = SpatialParams(kind="rescale", factors=(1.25, 1.25))
    out, realized = spatial_apply(s, p)
    assert out.image.spatial_shape == (20, 20)
    assert out.image.spacing == pytest.approx((1.6, 1.6))
    assert out.label.spatial_shape == (20, 20)
    back = spatial_invert(out.image, realized)
    assert back.spatial_shape == (16, 16)
    back_lab = spatial_invert(out.label, realized)
    assert back_lab.spatial_shape == (16, 16)
    assert set(np.unique(back_lab.data)) <= set(np.unique(s.label.data))


def test_invert_requires_realized_params():
    s = _sample((1, 8, 8))
    from segkit.transforms import SpatialParams

    with pytest.raises(ValueError):
        spatial_invert(s.image, SpatialParams(kind="flip", axes=(0,)))


def test_label_interpolation_never_invents_ids():
    img = _image((1, 20, 20), seed=17)
    lab = np.zeros((20, 20), dtype=np.int64)
    lab[4:16, 4:16] = 5  # deliberately sparse id set {0, 5}
    s = Sample(image=img, label=Volume(data=lab[None], is_label=True), id="ids")
    rng = np.random.default_rng(9)
    from segkit.transforms import SpatialParams

    cases = [
        SpatialParams(kind="rotate", angle=17.0, plane=(0, 1)),
        SpatialParams(kind="rescale", factors=(1.3, 1.3)),
        random_crop_params((20, 20), (12, 12), rng),
        SpatialParams(kind="flip", axes=(0,)),
        pad_params((3, 3), (3, 3)),
    ]
    for p in cases:
        out, _ = spatial_apply(s, p)
        assert set(np.unique(out.label.data)) <= {0, 5}, p.kind


# ---------------------------------------------------------------------------
# pipeline wrappers


def test_wrappers_move_image_and_label_together():
    s = _sample((1, 16, 16), seed=18)
    rng = np.random.default_rng(0)
    for t in (RandomFlip(), RandomCrop((8, 8)), RandomRotate((-20, 20)), RandomRescale((0.8, 1.2))):
        out = t(s, rng)
        assert out.image.spatial_shape == out.label.spatial_shape


def test_pad_to_only_grows():
    s = _sample((1, 10, 20), seed=19)
    out = PadTo((16, 16))(s, np.random.default_rng(0))
    assert out.image.spatial_shape == (16, 20)
    again = PadTo((8, 8))(s, np.random.default_rng(0))
    assert again.image.spatial_shape == (10, 20)
    assert again is s  # no-op returns the sample unchanged


def test_normalize_wrapper_keeps_label():
    s = _sample((1, 8, 8), seed=20)
    out = NormalizeMinMax()(s, np.random.default_rng(0))
    np.testing.assert_array_equal(out.label.data, s.label.data)
    assert float(out.image.data.max()) == pytest.approx(1.0, abs=1e-6)


def test_intensity_wrapper_reproducible_with_same_rng_state():
    s = _sample((1, 8, 8), seed=21)
    a = IntensityAugment()(s, np.random.default_rng(42))
    b = IntensityAugment()(s, np.random.default_rng(42))
    np.testing.assert_array_equal(a.image.data, b.image.data)
    np.testing.assert_array_equal(a.label.data, s.label.data)


def test_build_pipeline_by_name_and_params():
    pipe = build_pipeline(
        ("normalize_minmax", "random_crop", "intensity_augment"),
        {"crop_size": (8, 8), "gamma_range": (0.9, 1.1), "noise_std": 0.01},
    )
    assert isinstance(pipe[0], NormalizeMinMax)
    assert isinstance(pipe[1], RandomCrop)
    assert pipe[1].size == (8, 8)
    assert isinstance(pipe[2], IntensityAugment)
    assert pipe[2].gamma_range == (0.9, 1.1)

    s = _sample((1, 16, 16), seed=22)
    rng = np.random.default_rng(7)
    out = s
    for t in pipe:
        out = t(out, rng)
    assert out.image.spatial_shape == (8, 8)


def test_build_pipeline_unknown_name():
    with pytest.raises(ConfigError, match="unknown transform"):
        build_pipeline(("warp_fields",))


def test_build_pipeline_missing_required_param():
    with pytest.raises(ConfigError, match="crop_size"):
        build_pipeline(("random_crop",))
    with pytest.raises(ConfigError, match="pad_to_size"):
        build_pipeline(("pad_to",))


def test_randomized_flags():
    assert NormalizeMinMax.randomized is False
    assert PadTo.randomized is False
    assert RandomFlip.randomized is True
    assert IntensityAugment.randomized is True
