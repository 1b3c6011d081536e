from unittest.mock import patch

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from polar_pfcd.dataset import SceneSpec, add_mosaic_noise, synthesize_scene
from polar_pfcd.denoise import (
    PcaTransform,
    compute_pca_transform,
    denoise_cpfa,
    denoise_mpfa,
    pfcd_denoise,
    propagate_noise_variance,
)
from polar_pfcd.imagecore import (
    ANGLES,
    COLORS,
    DEFAULT_MPFA_LAYOUT,
    Channel,
    ContractError,
    MosaicImage,
    PatternDescriptor,
)
from polar_pfcd.meta_types.params import Bm3dParams, NoiseProfile
from polar_pfcd.mosaic import mosaic_from_stack


def identity_denoiser(component, sigma, params):
    return component


def passthrough(channels, sigmas, params=None):
    return [np.array(channel) for channel in channels]


@pytest.fixture
def correlated_channels():
    rng = np.random.default_rng(21)
    base = rng.random((16, 16))
    return [base * gain + rng.normal(0, 0.02, (16, 16)) for gain in (1.0, 0.8, 0.6, 0.9)]


def test_pca_transform_is_orthonormal(correlated_channels):
    transform = compute_pca_transform(correlated_channels)
    assert_allclose(transform.matrix @ transform.matrix.T, np.eye(4), atol=1e-10)
    samples = np.stack([channel.ravel() for channel in correlated_channels])
    variances = transform.forward(samples).var(axis=1)
    assert np.all(np.diff(variances) <= 1e-12)
    for row in transform.matrix:
        first = row[np.abs(row) > 1e-12][0]
        assert first > 0


def test_pca_round_trip():
    rng = np.random.default_rng(22)
    for _ in range(100):
        channels = [rng.random((6, 6)) for _ in range(4)]
        transform = compute_pca_transform(channels)
        samples = np.stack([channel.ravel() for channel in channels])
        assert_allclose(transform.inverse(transform.forward(samples)), samples, atol=1e-9)


def test_pca_of_constant_channels_is_the_identity():
    channels = [np.full((4, 4), value) for value in (0.1, 0.2, 0.3, 0.4)]
    transform = compute_pca_transform(channels)
    assert_allclose(transform.matrix, np.eye(4), atol=1e-12)
    assert_allclose(transform.mean, [0.1, 0.2, 0.3, 0.4])


def test_pca_is_deterministic_for_repeated_channels():
    base = np.random.default_rng(23).random((8, 8))
    first = compute_pca_transform([base] * 4)
    second = compute_pca_transform([base.copy() for _ in range(4)])
    assert_array_equal(first.matrix, second.matrix)
    assert_allclose(first.matrix[0], np.full(4, 0.5), atol=1e-10)


def test_noise_variance_propagation():
    transform = PcaTransform(matrix=np.eye(4), mean=np.zeros(4))
    variances = [0.1, 0.2, 0.3, 0.4]
    assert_allclose(propagate_noise_variance(transform, variances), variances)
    with pytest.raises(ContractError):
        propagate_noise_variance(transform, [0.1, 0.2, 0.3])
    with pytest.raises(ContractError):
        propagate_noise_variance(transform, [0.1, -0.2, 0.3, 0.4])


def test_noise_variance_matches_monte_carlo():
    rng = np.random.default_rng(24)
    for _ in range(3):
        matrix, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        sigmas = rng.uniform(0.01, 0.1, 4)
        transform = PcaTransform(matrix=matrix, mean=np.zeros(4))
        noise = rng.normal(size=(4, 200_000)) * sigmas[:, None]
        measured = transform.forward(noise).std(axis=1)
        assert_allclose(propagate_noise_variance(transform, sigmas), measured, rtol=0.02)


def test_pfcd_with_identity_denoiser(correlated_channels):
    result = pfcd_denoise(correlated_channels, [0.02] * 4, denoiser=identity_denoiser)
    for denoised, channel in zip(result, correlated_channels):
        assert_allclose(denoised, channel, atol=1e-9)


def test_pfcd_passes_component_noise_levels(correlated_channels):
    seen = []

    def recording_denoiser(component, sigma, params):
        seen.append(sigma)
        return component

    sigmas = [0.01, 0.02, 0.03, 0.04]
    pfcd_denoise(correlated_channels, sigmas, denoiser=recording_denoiser)
    expected = propagate_noise_variance(compute_pca_transform(correlated_channels), sigmas)
    assert_allclose(seen, expected)


def test_pfcd_zero_noise_is_identity(correlated_channels):
    def failing_denoiser(component, sigma, params):
        raise AssertionError("denoiser must not run without noise")

    result = pfcd_denoise(correlated_channels, [0.0] * 4, denoiser=failing_denoiser)
    for denoised, channel in zip(result, correlated_channels):
        assert_array_equal(denoised, channel)
    with pytest.raises(ContractError):
        pfcd_denoise(correlated_channels[:3], [0.0] * 3)


def test_pfcd_reduces_noise():
    rng = np.random.default_rng(25)
    clean = np.full((32, 32), 0.3)
    clean[8:24, 8:24] = 0.7
    planes = [clean * gain for gain in (1.0, 0.9, 0.8, 0.7)]
    noisy = [plane + rng.normal(0, 0.05, plane.shape) for plane in planes]
    denoised = pfcd_denoise(noisy, [0.05] * 4, Bm3dParams(search_radius=5))
    before = np.mean([(n - p) ** 2 for n, p in zip(noisy, planes)])
    after = np.mean([(d - p) ** 2 for d, p in zip(denoised, planes)])
    assert after < before / 3


@patch("polar_pfcd.denoise.pfcd_denoise", side_effect=passthrough)
def test_denoise_mpfa_splits_quads(pfcd):
    mosaic = MosaicImage(np.random.default_rng(26).random((8, 8)), PatternDescriptor.mpfa())
    result = denoise_mpfa(mosaic, NoiseProfile.mpfa(0.03))
    assert_array_equal(result.plane, mosaic.plane)
    pfcd.assert_called_once()
    channels, sigmas, _ = pfcd.call_args.args
    assert sigmas == [0.03] * 4
    # quads in angle order 0, 45, 90, 135
    assert_array_equal(channels[0], mosaic.plane[1::2, 1::2])
    assert_array_equal(channels[2], mosaic.plane[0::2, 0::2])
    with pytest.raises(ContractError):
        denoise_cpfa(mosaic, NoiseProfile.mpfa(0.03))


@patch("polar_pfcd.denoise.pfcd_denoise", side_effect=passthrough)
def test_denoise_cpfa_uses_color_noise_levels(pfcd):
    mosaic = MosaicImage(np.random.default_rng(27).random((8, 8)), PatternDescriptor.cpfa())
    result = denoise_cpfa(mosaic, NoiseProfile.cpfa(0.03, 0.02, 0.05))
    assert_array_equal(result.plane, mosaic.plane)
    assert pfcd.call_count == 4
    for call in pfcd.call_args_list:
        channels, sigmas, _ = call.args
        assert sigmas == [0.03, 0.02, 0.02, 0.05]
        assert all(channel.shape == (2, 2) for channel in channels)
    with pytest.raises(ContractError):
        denoise_mpfa(mosaic, NoiseProfile.mpfa(0.03))


def test_pca_of_independent_channels_follows_their_variances():
    rng = np.random.default_rng(28)
    channels = [rng.normal(0, np.sqrt(variance), (256, 256)) for variance in (4, 3, 2, 1)]
    transform = compute_pca_transform(channels)
    assert_allclose(np.abs(transform.matrix), np.eye(4), atol=0.05)


def mosaic_rmse(noisy, denoised, clean, mask=None):
    mask = np.ones(clean.shape, dtype=bool) if mask is None else mask
    before = np.sqrt(np.mean((noisy.plane - clean.plane)[mask] ** 2))
    after = np.sqrt(np.mean((denoised.plane - clean.plane)[mask] ** 2))
    return before, after


def test_denoise_mpfa_reduces_noise():
    clean = mosaic_from_stack(
        synthesize_scene(SceneSpec(seed=29, height=96, width=96)), PatternDescriptor.mpfa()
    )
    profile = NoiseProfile.mpfa(7.31 / 255)
    noisy = add_mosaic_noise(clean, profile, seed=3)
    before, after = mosaic_rmse(noisy, denoise_mpfa(noisy, profile), clean)
    assert after <= 0.6 * before


def test_denoise_mpfa_commutes_with_angle_relabeling():
    rng = np.random.default_rng(30)
    plane = 0.5 + 0.1 * rng.standard_normal((32, 32))
    params = Bm3dParams(search_radius=5)
    sigmas = {"0": 0.02, "45": 0.03, "90": 0.04, "135": 0.05}
    relabel = {0: 45, 45: 135, 90: 0, 135: 90}

    original = MosaicImage(plane, PatternDescriptor.mpfa())
    layout = tuple(tuple(relabel[angle] for angle in row) for row in DEFAULT_MPFA_LAYOUT)
    relabeled = MosaicImage(plane, PatternDescriptor.mpfa(layout))
    relabeled_sigmas = {str(relabel[int(angle)]): sigma for angle, sigma in sigmas.items()}

    expected = denoise_mpfa(original, NoiseProfile(sigma=sigmas), params)
    result = denoise_mpfa(relabeled, NoiseProfile(sigma=relabeled_sigmas), params)
    assert result.pattern == relabeled.pattern
    assert_allclose(result.plane, expected.plane, atol=1e-6)


@pytest.mark.slow
def test_denoise_cpfa_reduces_noise_per_color():
    pattern = PatternDescriptor.cpfa()
    clean = mosaic_from_stack(
        synthesize_scene(SceneSpec(seed=31, height=256, width=256, color=True)), pattern
    )
    profile = NoiseProfile.cpfa(8.62 / 255, 7.31 / 255, 15.79 / 255)
    noisy = add_mosaic_noise(clean, profile, seed=4)
    denoised = denoise_cpfa(noisy, profile)
    for color in COLORS:
        mask = np.any(
            [pattern.mask(Channel(angle, color), 256, 256) for angle in ANGLES], axis=0
        )
        before, after = mosaic_rmse(noisy, denoised, clean, mask)
        assert after <= 0.6 * before, color
