import json
import os
import shutil

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from polar_pfcd.dataset import (
    NEAREST_MEDIAN,
    NOISE_CONDITIONS,
    CaptureBurst,
    DegenerateInputError,
    MissingManifestEntry,
    SceneSpec,
    add_awgn,
    add_mosaic_noise,
    add_stack_noise,
    build_dataset_from_bursts,
    build_ground_truth,
    compute_digital_gain,
    convert_directory_to_manifest,
    estimate_noise_levels,
    load_ground_truth,
    load_manifest,
    load_noisy_mosaic,
    median_frame_index,
    noisy_role,
    select_retained_frames,
    store_manifest,
    synthesize_scene,
)
from polar_pfcd.imagecore import (
    ANGLES,
    CPFA_CHANNELS,
    PFI_RAW,
    PNG16,
    Channel,
    ContractError,
    ImageFormatError,
    MosaicImage,
    PatternDescriptor,
    PolarizationStack,
    load_stack,
    store_plane,
    store_rgb_frame,
    store_stack,
)
from polar_pfcd.meta_types.dataset import GT_ROLE, Manifest, ManifestEntry
from polar_pfcd.meta_types.params import NoiseProfile
from polar_pfcd.mosaic import mosaic_from_stack
from polar_pfcd.polarimetry import compute_aop, compute_dop, stokes_from_stack

DATA_DIR = f"{os.path.dirname(__file__)}/data"
SIGMA = 8 / 255
FRAMES = 1000
OUTLIERS = list(range(7, FRAMES, 10))


@pytest.fixture
def burst_scene():
    rng = np.random.default_rng(40)
    clean = rng.uniform(0.2, 0.6, (16, 16, 3))
    frames = []
    for index in range(FRAMES):
        frame = clean + rng.normal(0, SIGMA, clean.shape)
        if index % 10 == 7:
            frame += 0.2
        frames.append(frame)
    return clean, CaptureBurst(frames, angle=45)


def constant_stack(channels, shape=(8, 8)):
    # multiples of 1/64 survive the float32 payload exactly
    return PolarizationStack(
        {channel: np.full(shape, (channel.angle + 1) / 64) for channel in channels}
    )


def test_median_frame_index():
    assert median_frame_index([3.0, 1.0, 2.0, 4.0]) == 2
    assert median_frame_index([3.0, 1.0, 2.0, 4.0], NEAREST_MEDIAN) == 0
    assert median_frame_index([2.0, 2.0, 2.0]) == 0
    with pytest.raises(ContractError):
        median_frame_index([1.0, 2.0, 3.0], "upper")


def test_select_retained_frames():
    burst = CaptureBurst([np.full((2, 2, 3), value) for value in (1, 1, 1, 10, 1)], angle=0)
    assert_array_equal(select_retained_frames(burst, 1), [0, 1, 2, 4])
    assert_array_equal(select_retained_frames(burst, 0), [0, 1, 2, 3, 4])
    with pytest.raises(ContractError):
        select_retained_frames(burst, 5)
    with pytest.raises(ContractError):
        select_retained_frames(burst, -1)


def test_burst_validation():
    with pytest.raises(ContractError):
        CaptureBurst([np.zeros((2, 2, 3))] * 2, angle=0)
    mismatched = CaptureBurst([np.zeros((2, 2, 3))] * 2 + [np.zeros((3, 2, 3))], angle=0)
    with pytest.raises(ContractError):
        mismatched.frame_means()
    with pytest.raises(ContractError):
        CaptureBurst([np.zeros((2, 2))] * 3, angle=0).frame(0)


def test_ground_truth_excludes_outliers(burst_scene):
    clean, burst = burst_scene
    gt, median_index = build_ground_truth(burst, exclude_count=len(OUTLIERS))
    retained = select_retained_frames(burst, len(OUTLIERS))
    assert set(range(FRAMES)) - set(retained) == set(OUTLIERS)
    assert median_index not in OUTLIERS
    rmse = np.sqrt(np.mean((gt - clean) ** 2))
    assert rmse <= 1.2 * SIGMA / np.sqrt(FRAMES - len(OUTLIERS))


def test_noise_levels_match_the_added_noise(burst_scene):
    clean, burst = burst_scene
    profile = estimate_noise_levels(burst, clean, exclude_count=len(OUTLIERS))
    assert set(profile.sigma) == {"R", "G", "B"}
    assert_allclose(list(profile.sigma.values()), SIGMA, rtol=0.03)
    with pytest.raises(ContractError):
        estimate_noise_levels(burst, clean[:8])


def test_digital_gain():
    image = np.linspace(0.0, 0.99, 100)
    assert_allclose(compute_digital_gain([image]), 1 / 0.99)
    assert_allclose(compute_digital_gain([image[:50], image[50:]], full_scale=2.0), 2 / 0.99)
    gain = compute_digital_gain([image], percentile=50)
    assert np.mean(image * gain <= 1.0) >= 0.5
    with pytest.raises(DegenerateInputError):
        compute_digital_gain([np.zeros((4, 4))])
    with pytest.raises(ContractError):
        compute_digital_gain([image], percentile=100)
    with pytest.raises(ContractError):
        compute_digital_gain([])


def test_ground_truth_ignores_frame_order(burst_scene):
    _, burst = burst_scene
    frames = list(burst.frames[:40])
    order = np.random.default_rng(41).permutation(len(frames))
    gt, median_index = build_ground_truth(CaptureBurst(frames, angle=45), exclude_count=4)
    shuffled = CaptureBurst([frames[k] for k in order], angle=45)
    shuffled_gt, shuffled_index = build_ground_truth(shuffled, exclude_count=4)
    assert_allclose(shuffled_gt, gt, rtol=0, atol=1e-12)
    assert order[shuffled_index] == median_index


def test_digital_gain_scales_inversely_with_the_images():
    rng = np.random.default_rng(42)
    images = [rng.uniform(0.0, 0.5, (16, 16)) for _ in range(2)]
    gain = compute_digital_gain(images)
    for scale in (0.5, 2.0, 3.0):
        scaled = compute_digital_gain([image * scale for image in images])
        assert scaled == pytest.approx(gain / scale, rel=1e-12)


def test_synthesize_scene_is_deterministic():
    first = synthesize_scene(SceneSpec(seed=4, height=24, width=16))
    second = synthesize_scene(SceneSpec(seed=4, height=24, width=16))
    other = synthesize_scene(SceneSpec(seed=5, height=24, width=16))
    assert first.shape == (24, 16)
    for channel in first.channels:
        assert_array_equal(first.planes[channel], second.planes[channel])
    assert not np.array_equal(first.plane(0), other.plane(0))


def test_synthesize_scene_with_constant_fields():
    spec = SceneSpec(
        height=8, width=8, color=True, s0=0.6, dop=0.5, aop=30.0, color_gains=(1.0, 0.5, 0.25)
    )
    stack = synthesize_scene(spec)
    assert set(stack.channels) == CPFA_CHANNELS
    for color, gain in zip("RGB", spec.color_gains):
        stokes = stokes_from_stack(stack, color)
        assert_allclose(stokes.s0, 0.6 * gain)
        assert_allclose(compute_dop(stokes), 0.5)
        assert_allclose(compute_aop(stokes), 30.0)
    with pytest.raises(ContractError):
        SceneSpec(dop=1.5)


def test_add_awgn():
    image = np.full((32, 32), 0.5)
    assert_array_equal(add_awgn(image, 0.0, seed=1), image)
    noisy = add_awgn(image, 0.1, seed=1)
    assert_array_equal(noisy, add_awgn(image, 0.1, seed=1))
    assert abs(np.std(noisy - image) - 0.1) < 0.01
    with pytest.raises(ContractError):
        add_awgn(image, -0.1, seed=1)


def test_add_mosaic_noise_follows_channel_levels():
    pattern = PatternDescriptor.cpfa()
    mosaic = MosaicImage(np.zeros((16, 16)), pattern)
    profile = NoiseProfile.cpfa(0.1, 0.05, 0.0)
    noisy = add_mosaic_noise(mosaic, profile, seed=3)
    assert noisy.pattern == pattern
    assert_array_equal(noisy.plane, add_mosaic_noise(mosaic, profile, seed=3).plane)
    for angle in ANGLES:
        assert_array_equal(noisy.plane[pattern.mask(Channel(angle, "B"), 16, 16)], 0.0)
        assert np.all(noisy.plane[pattern.mask(Channel(angle, "R"), 16, 16)] != 0.0)


def test_add_stack_noise():
    stack = PolarizationStack.from_angles({angle: np.zeros((64, 64)) for angle in ANGLES})
    noisy = add_stack_noise(stack, NoiseProfile.mpfa(0.1), seed=9)
    samples = np.stack([noisy.plane(angle) for angle in ANGLES])
    assert abs(samples.std() - 0.1) < 0.005
    again = add_stack_noise(stack, NoiseProfile.mpfa(0.1), seed=9)
    assert_array_equal(again.plane(90), noisy.plane(90))


def test_noise_conditions():
    assert noisy_role("High") == "noisy-high"
    assert noisy_role("noisy-low") == "noisy-low"
    high = NOISE_CONDITIONS["High"]
    assert high.role == "noisy-high"
    assert high.profile("mpfa").sigma_for(0) == high.sigma["G"]
    assert high.profile("cpfa").sigma_for(0, "B") == high.sigma["B"]


def test_load_manifest_fixture(tmp_path):
    shutil.copy(f"{DATA_DIR}/manifest.yaml", tmp_path / "manifest.yaml")
    images = tmp_path / "images" / "scene01"
    gt = PolarizationStack.from_angles(
        {angle: np.full((8, 8), (angle + 1) / 256) for angle in ANGLES}
    )
    for angle in ANGLES:
        store_plane(gt.plane(angle), str(images / f"gt_{angle}.png"), PNG16)
    raw = np.random.default_rng(41).random((8, 8)).astype(np.float32)
    store_plane(raw, str(images / "high_raw.pfi"), PFI_RAW)

    manifest = load_manifest(str(tmp_path / "manifest.yaml"))
    assert manifest.root == str(tmp_path / "images")
    assert manifest.pattern == "mpfa"
    assert manifest.scenes() == ["scene01"]

    loaded = load_ground_truth(manifest, "scene01", "mpfa")
    for angle in ANGLES:
        assert_allclose(loaded.plane(angle), gt.plane(angle), atol=1 / 65535)
    mosaic = load_noisy_mosaic(manifest, "scene01", "High", PatternDescriptor.mpfa())
    assert_array_equal(mosaic.plane, raw)
    with pytest.raises(MissingManifestEntry):
        load_ground_truth(manifest, "scene02")
    with pytest.raises(MissingManifestEntry):
        load_noisy_mosaic(manifest, "scene01", "Low", PatternDescriptor.mpfa())


def test_load_manifest_errors(tmp_path):
    (tmp_path / "list.yaml").write_text("- a\n- b\n")
    with pytest.raises(ImageFormatError):
        load_manifest(str(tmp_path / "list.yaml"))
    (tmp_path / "bad.yaml").write_text("root: .\nentries:\n  - file: a.png\n    role: gt\n")
    with pytest.raises(ImageFormatError):
        load_manifest(str(tmp_path / "bad.yaml"))


def test_color_stack_entries(tmp_path):
    stack = constant_stack(CPFA_CHANNELS)
    store_stack(stack, str(tmp_path / "scene" / "gt.pfi"))
    store_stack(stack, str(tmp_path / "scene" / "noisy-low.pfi"))
    manifest = Manifest(
        root=".",
        entries=[
            ManifestEntry("scene/gt.pfi", "scene", GT_ROLE, format=PFI_RAW, kind="stack"),
            ManifestEntry(
                "scene/noisy-low.pfi", "scene", "noisy-low", format=PFI_RAW, kind="stack"
            ),
        ],
    )
    store_manifest(manifest, str(tmp_path / "manifest.json"))
    manifest = load_manifest(str(tmp_path / "manifest.json"))

    assert load_ground_truth(manifest, "scene").is_color
    green = load_ground_truth(manifest, "scene", "mpfa")
    assert not green.is_color
    assert_array_equal(green.plane(45), stack.plane(45, "G"))

    mpfa = load_noisy_mosaic(manifest, "scene", "Low", PatternDescriptor.mpfa())
    expected = mosaic_from_stack(stack.select_color("G"), PatternDescriptor.mpfa())
    assert_array_equal(mpfa.plane, expected.plane)
    cpfa = load_noisy_mosaic(manifest, "scene", "Low", PatternDescriptor.cpfa())
    assert_array_equal(cpfa.plane, mosaic_from_stack(stack, PatternDescriptor.cpfa()).plane)


def test_mono_data_cannot_feed_a_cpfa_mosaic(tmp_path):
    mono = constant_stack({Channel(angle, "mono") for angle in ANGLES})
    store_stack(mono, str(tmp_path / "noisy.pfi"))
    manifest = Manifest(
        root=str(tmp_path),
        entries=[ManifestEntry("noisy.pfi", "s", "noisy-high", format=PFI_RAW, kind="stack")],
    )
    with pytest.raises(ContractError):
        load_noisy_mosaic(manifest, "s", "High", PatternDescriptor.cpfa())


def test_convert_directory_to_manifest(tmp_path):
    for name in ["gt_0", "gt_45", "gt_90", "gt_135", "high_0_R", "low_45"]:
        store_plane(np.zeros((4, 4)), str(tmp_path / "scene01" / f"{name}.png"))
    (tmp_path / "scene01" / "notes.txt").write_text("ignored")

    manifest = convert_directory_to_manifest(str(tmp_path))
    assert manifest.scenes() == ["scene01"]
    assert len(manifest.select("scene01", GT_ROLE)) == 4
    (high,) = manifest.select("scene01", "noisy-high")
    assert (high.file, high.angle, high.color, high.format) == (
        "scene01/high_0_R.png", 0, "R", PNG16
    )
    assert manifest.select("scene01", "noisy-low")[0].color == "mono"

    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ContractError):
        convert_directory_to_manifest(str(empty))


def test_build_dataset_from_bursts(tmp_path):
    rng = np.random.default_rng(42)
    burst_dir = tmp_path / "bursts"
    for angle in ANGLES:
        clean = rng.uniform(0.1, 0.4, (8, 8, 3))
        for index in range(4):
            frame = clean + rng.normal(0, 0.01, clean.shape)
            store_rgb_frame(frame, str(burst_dir / str(angle) / f"frame_{index:02d}.png"))

    out_dir = tmp_path / "out"
    result = build_dataset_from_bursts(
        str(burst_dir), str(out_dir), scene="lab", exclude_count=1
    )
    assert result.digital_gain > 1.0
    assert set(result.median_frames) == set(ANGLES)
    assert all(sigma > 0 for sigma in result.profile.sigma.values())

    scene_dir = out_dir / "lab"
    for name in ["gt.pfi", "noisy-high.pfi", "cpfa-noisy-high.pfi", "mpfa-noisy-high.pfi"]:
        assert (scene_dir / name).exists()
    noise = json.loads((scene_dir / "noise-noisy-high.json").read_text())
    assert_allclose(noise["digital_gain"], result.digital_gain)

    manifest = load_manifest(str(out_dir / "manifest.json"))
    gt = load_ground_truth(manifest, "lab")
    assert gt.is_color and gt.shape == (8, 8)
    assert_allclose(gt.plane(0, "R"), load_stack(str(scene_dir / "gt.pfi")).plane(0, "R"))
    assert load_noisy_mosaic(manifest, "lab", "High", PatternDescriptor.cpfa()).shape == (8, 8)
