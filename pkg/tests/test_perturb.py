import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evidence3.imgcore import luminance_plane, rgb_to_hsv, uniform_image
from evidence3.perturb import (
    CLEAN,
    PerturbationSpec,
    SamplerConfig,
    apply_perturbation,
    hue_shift,
    illum_adjust,
    mix_seed,
    noise_inject,
    sample_spec,
)


@pytest.mark.parametrize("delta", [0.0, 360.0, -360.0])
def test_hue_shift_identity(random_image, delta):
    assert np.abs(hue_shift(random_image, delta) - random_image).max() <= 1e-6


def test_hue_shift_red_to_green(red):
    np.testing.assert_allclose(hue_shift(red, 120.0), uniform_image(16, 16, (0, 1, 0)), atol=1e-12)


def test_hue_shift_keeps_value_and_saturation(random_image):
    before = rgb_to_hsv(random_image)
    after = rgb_to_hsv(hue_shift(random_image, 77.0))
    np.testing.assert_array_equal(after[..., 2], before[..., 2])
    assert np.abs(after[..., 1] - before[..., 1]).max() <= 1e-6


def test_illum_identity(random_image):
    np.testing.assert_array_equal(illum_adjust(random_image, 1.0), random_image)


def test_illum_scales_and_clamps():
    np.testing.assert_array_equal(illum_adjust(uniform_image(4, 4, (0.25,) * 3), 2.0), 0.5)
    np.testing.assert_array_equal(illum_adjust(uniform_image(4, 4, (0.8,) * 3), 2.0), 1.0)


def test_illum_rejects_nonpositive_gain(random_image):
    with pytest.raises(ValueError):
        illum_adjust(random_image, 0.0)


def test_noise_zero_sigma_identity(random_image):
    np.testing.assert_array_equal(noise_inject(random_image, 0.0, 5), random_image)


def test_noise_is_deterministic(random_image):
    a = noise_inject(random_image, 0.05, 2**63 + 11)
    b = noise_inject(random_image, 0.05, 2**63 + 11)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, noise_inject(random_image, 0.05, 12))


def test_noise_mean_is_unbiased():
    img = uniform_image(256, 256, (0.5, 0.5, 0.5))
    sigma = 0.05
    out = noise_inject(img, sigma, 99)
    n = img.size
    # at 0.5 +/- 10 sigma nothing is clamped, so the LLN bound applies directly
    assert abs((out - img).mean()) <= 3 * sigma / math.sqrt(n)


def test_apply_empty_spec_is_identity(random_image):
    np.testing.assert_array_equal(apply_perturbation(random_image, CLEAN), random_image)


def test_apply_all_three_matches_manual_composition(random_image):
    spec = PerturbationSpec(True, -64.0, True, 1.7, True, 0.04, 321)
    manual = noise_inject(illum_adjust(hue_shift(random_image, -64.0), 1.7), 0.04, 321)
    assert apply_perturbation(random_image, spec).tobytes() == manual.tobytes()


def test_apply_noise_only_zero_sigma(random_image):
    spec = PerturbationSpec(use_noise=True, sigma=0.0, seed=3)
    np.testing.assert_array_equal(apply_perturbation(random_image, spec), random_image)


def test_darkening_never_brightens(random_image):
    spec = PerturbationSpec(use_color=True, delta_hue=40.0, use_illum=True, gain=0.7)
    out = apply_perturbation(random_image, spec)
    # hue shift alone may move luma; compare against the hue-shifted input
    assert luminance_plane(out).mean() <= luminance_plane(hue_shift(random_image, 40.0)).mean()
    assert luminance_plane(illum_adjust(random_image, 0.9)).mean() <= luminance_plane(random_image).mean()


spec_strategy = st.builds(
    PerturbationSpec,
    use_color=st.booleans(),
    delta_hue=st.floats(-179.9, 180.0),
    use_illum=st.booleans(),
    gain=st.floats(0.05, 4.0),
    use_noise=st.booleans(),
    sigma=st.floats(0.0, 0.3),
    seed=st.integers(0, 2**64 - 1),
)


@settings(max_examples=40, deadline=None)
@given(spec_strategy)
def test_apply_is_pure_and_range_safe(spec):
    img = np.random.default_rng(0).random((12, 12, 3))
    a = apply_perturbation(img, spec)
    b = apply_perturbation(img, spec)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_sample_spec_forced_clean():
    cfg = SamplerConfig(p_clean=1.0)
    assert all(sample_spec(cfg, s).is_clean for s in range(50))


def test_sample_spec_deterministic():
    cfg = SamplerConfig()
    assert sample_spec(cfg, 77) == sample_spec(cfg, 77)


def test_sample_spec_subset_frequencies():
    cfg = SamplerConfig(p_clean=0.0)
    n = 7000
    counts = Counter(sample_spec(cfg, mix_seed(2024, i)).active for i in range(n))
    assert len(counts) == 7
    p = 1 / 7
    half_width = 3 * math.sqrt(p * (1 - p) / n)
    for subset, c in counts.items():
        assert abs(c / n - p) <= half_width, subset


def test_sample_spec_parameter_ranges():
    cfg = SamplerConfig(p_clean=0.0)
    specs = [sample_spec(cfg, mix_seed(5, i)) for i in range(2000)]
    hues = [s.delta_hue for s in specs if s.use_color]
    gains = [s.gain for s in specs if s.use_illum]
    sigmas = [s.sigma for s in specs if s.use_noise]
    assert all(30.0 <= abs(h) <= 150.0 for h in hues)
    assert 0.4 < np.mean(np.array(hues) > 0) < 0.6
    assert all(0.4 <= g <= 0.8 or 1.25 <= g <= 2.5 for g in gains)
    assert 0.4 < np.mean(np.array(gains) > 1) < 0.6
    assert all(0.02 <= s <= 0.10 for s in sigmas)


def test_sample_spec_restricted_transforms():
    cfg = SamplerConfig(p_clean=0.0, transforms=("noise",))
    assert {sample_spec(cfg, i).active for i in range(100)} == {("noise",)}


def test_spec_dict_round_trip():
    spec = sample_spec(SamplerConfig(p_clean=0.0), 31337)
    assert PerturbationSpec.from_dict(spec.to_dict()) == spec


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(p_clean=1.5)
    with pytest.raises(ValueError):
        SamplerConfig(sigma_range=(0.2, 0.1))
    with pytest.raises(ValueError):
        SamplerConfig(gain_ranges=((0.0, 1.0),))
    cfg = SamplerConfig()
    assert SamplerConfig.from_dict(cfg.to_dict()) == cfg
    assert replace(cfg, p_clean=0.0).p_clean == 0.0


def test_mix_seed_spreads_and_is_stable():
    seeds = {mix_seed(1, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert mix_seed(1, 0) == mix_seed(1, 0)
    assert mix_seed(1, 0) != mix_seed(2, 0)
