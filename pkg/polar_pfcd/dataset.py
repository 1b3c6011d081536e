"""
Dataset construction from capture bursts, manifest-based dataset access and
synthetic scenes for self-contained runs.

A burst is a sequence of RGB frames of one scene behind one polarizer angle.
Ground truth is the mean of the frames left after dropping those whose mean
brightness is farthest from the median; the noisy input is the frame at the
median brightness.
"""
import json
import logging
import posixpath
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import fsspec
import numpy as np
import yaml
from dacite import DaciteError, from_dict
from fsspec.core import split_protocol
from scipy import ndimage

from polar_pfcd.imagecore import (
    ANGLES,
    COLORS,
    CPFA,
    MPFA,
    PFI_RAW,
    PNG16,
    Channel,
    ContractError,
    ImageFormatError,
    ImageIOError,
    MosaicImage,
    PatternDescriptor,
    PolarizationStack,
    load_plane,
    load_rgb_frame,
    load_stack,
    store_plane,
    store_stack,
)
from polar_pfcd.meta_types.dataset import GT_ROLE, Manifest, ManifestEntry, NoiseCondition
from polar_pfcd.meta_types.params import NoiseProfile
from polar_pfcd.mosaic import mosaic_from_stack
from polar_pfcd.polarimetry import StokesImage, angles_from_stokes
from polar_pfcd.storage import filesystem_for_path

logger = logging.getLogger(__name__)

LOWER_MEDIAN = "lower"
NEAREST_MEDIAN = "nearest"
DEFAULT_EXCLUDE_COUNT = 100
DEFAULT_PERCENTILE = 99.0
MANIFEST_NAME = "manifest.json"

DEFAULT_GT_PATTERN = r"(?P<scene>[^/]+)/gt_(?P<angle>\d+)(?:_(?P<color>[RGB]))?\.(?P<ext>png|pfi)"
DEFAULT_NOISY_PATTERN = (
    r"(?P<scene>[^/]+)/(?P<condition>low|medium|high)_(?P<angle>\d+)"
    r"(?:_(?P<color>[RGB]))?\.(?P<ext>png|pfi)"
)

NOISE_CONDITIONS = {
    "Low": NoiseCondition(
        name="Low",
        analog_gain_db=0.0,
        digital_gain=2.14,
        shutter="1/30",
        sigma={"R": 2.12 / 255, "G": 1.75 / 255, "B": 3.27 / 255},
    ),
    "Medium": NoiseCondition(
        name="Medium",
        analog_gain_db=12.0,
        digital_gain=1.90,
        shutter="1/120",
        sigma={"R": 5.16 / 255, "G": 4.29 / 255, "B": 9.08 / 255},
    ),
    "High": NoiseCondition(
        name="High",
        analog_gain_db=12.0,
        digital_gain=3.67,
        shutter="1/250",
        sigma={"R": 8.62 / 255, "G": 7.31 / 255, "B": 15.79 / 255},
    ),
}


class DegenerateInputError(ValueError):
    pass


class MissingManifestEntry(LookupError):
    pass


@dataclass(frozen=True, eq=False)
class CaptureBurst:
    """
    Frames are (H, W, 3) arrays. Any sequence works, so frames can be
    loaded lazily; dimensions are checked as frames are visited.
    """

    frames: Sequence[np.ndarray]
    angle: int

    def __post_init__(self):
        if len(self.frames) < 3:
            raise ContractError(f"A burst needs at least 3 frames, got {len(self.frames)}")

    def __len__(self):
        return len(self.frames)

    def frame(self, index: int, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        frame = np.asarray(self.frames[index], dtype=np.float64)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ContractError(f"Burst frames are (H, W, 3) images, got {frame.shape}")
        if shape is not None and frame.shape != shape:
            raise ContractError(f"Frame {index} is {frame.shape}, expected {shape}")
        return frame

    def frame_means(self) -> np.ndarray:
        shape = self.frame(0).shape
        return np.array([self.frame(k, shape).mean() for k in range(len(self))])


class FrameSequence(Sequence):
    """Frames read from files on first access."""

    def __init__(self, paths: Sequence[str], fs: Optional[fsspec.AbstractFileSystem] = None):
        self.paths = list(paths)
        self.fs = fs

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        return load_rgb_frame(self.paths[index], self.fs)


def median_frame_index(means: np.ndarray, mode: str = LOWER_MEDIAN) -> int:
    """
    Index of the frame at the median brightness.

    ``lower`` picks the lower median of the frame means; ``nearest`` the frame
    closest to the numeric median. Ties go to the lowest index.
    """
    means = np.asarray(means, dtype=np.float64)
    if mode == LOWER_MEDIAN:
        order = np.argsort(means, kind="stable")
        return int(order[(len(means) - 1) // 2])
    elif mode == NEAREST_MEDIAN:
        return int(np.argmin(np.abs(means - np.median(means))))
    raise ContractError(f"Unknown median mode {mode!r}")


def select_retained_frames(
    burst: CaptureBurst, exclude_count: int, means: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    Indices (ascending) of the frames kept after dropping the
    ``exclude_count`` frames whose mean is farthest from the median mean.
    ``means`` are the precomputed frame means, if at hand.
    """
    if not 0 <= exclude_count < len(burst):
        raise ContractError(
            f"Cannot exclude {exclude_count} of {len(burst)} frames and keep any"
        )
    means = burst.frame_means() if means is None else np.asarray(means)
    deviation = np.abs(means - np.median(means))
    # stable sort keeps the lower index on equal deviation
    order = np.argsort(deviation, kind="stable")
    return np.sort(order[:len(burst) - exclude_count])


def build_ground_truth(
    burst: CaptureBurst, exclude_count: int, median_mode: str = LOWER_MEDIAN
) -> Tuple[np.ndarray, int]:
    """Mean of the retained frames, and the index of the median-brightness frame."""
    means = burst.frame_means()
    retained = select_retained_frames(burst, exclude_count, means)
    shape = burst.frame(0).shape
    total = np.zeros(shape)
    # summed in index order for a reproducible result
    for index in retained:
        total += burst.frame(index, shape)
    index = median_frame_index(means, median_mode)
    logger.debug(
        f"Angle {burst.angle}: averaged {len(retained)} of {len(burst)} frames, "
        f"median frame {index}"
    )
    return total / len(retained), index


def estimate_noise_levels(
    burst: CaptureBurst, gt: np.ndarray, exclude_count: int = 0
) -> NoiseProfile:
    """Per-color standard deviation of (frame - gt) pooled over the retained frames."""
    gt = np.asarray(gt, dtype=np.float64)
    shape = burst.frame(0).shape
    if gt.shape != shape:
        raise ContractError(f"Ground truth {gt.shape} does not match frames {shape}")
    retained = select_retained_frames(burst, exclude_count)
    total = np.zeros(3)
    total_squared = np.zeros(3)
    for index in retained:
        difference = burst.frame(index, shape) - gt
        total += difference.sum(axis=(0, 1))
        total_squared += (difference**2).sum(axis=(0, 1))
    count = len(retained) * shape[0] * shape[1]
    mean = total / count
    sigma = np.sqrt(np.maximum(total_squared / count - mean**2, 0.0))
    return NoiseProfile.cpfa(*(float(value) for value in sigma))


def compute_digital_gain(
    images: Sequence[np.ndarray],
    percentile: float = DEFAULT_PERCENTILE,
    full_scale: float = 1.0,
) -> float:
    """
    Gain that keeps at least ``percentile`` percent of the pooled pixels at
    or below ``full_scale``.
    """
    if not 0 < percentile < 100:
        raise ContractError(f"percentile must lie in (0, 100), got {percentile}")
    if len(images) == 0:
        raise ContractError("No images to compute a digital gain from")
    pooled = np.concatenate([np.ravel(image) for image in images])
    # "higher" returns an observed sample, so the guarantee holds exactly
    level = float(np.percentile(pooled, percentile, method="higher"))
    if level <= 0:
        raise DegenerateInputError(
            f"The {percentile}th percentile of the images is {level}; nothing to scale"
        )
    gain = full_scale / level
    logger.debug(f"Digital gain {gain:.4f} from {percentile}th percentile {level:.6f}")
    return gain


@dataclass
class SceneSpec:
    """
    Parameters of a synthetic scene. ``s0``, ``dop`` and ``aop`` (degrees)
    replace the random fields with constants when given; ``color_gains``
    replaces the random per-color S0 modulation of color scenes.
    """

    seed: int = 0
    height: int = 64
    width: int = 64
    color: bool = False
    smoothness: float = 6.0
    shapes: int = 4
    s0_range: Tuple[float, float] = (0.2, 0.8)
    dop_range: Tuple[float, float] = (0.0, 0.6)
    s0: Optional[float] = None
    dop: Optional[float] = None
    aop: Optional[float] = None
    color_gains: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ContractError(f"Invalid scene size {self.height}x{self.width}")
        low, high = self.dop_range
        if not 0 <= low <= high <= 1:
            raise ContractError(f"DoP range {self.dop_range} must lie within [0, 1]")
        if self.dop is not None and not 0 <= self.dop <= 1:
            raise ContractError(f"DoP {self.dop} must lie within [0, 1]")
        if self.s0 is not None and self.s0 < 0:
            raise ContractError(f"S0 {self.s0} must be >= 0")
        if self.s0_range[0] < 0 or self.s0_range[0] > self.s0_range[1]:
            raise ContractError(f"Invalid S0 range {self.s0_range}")


def _smooth_field(
    rng: np.random.Generator, shape: Tuple[int, int], smoothness: float, low: float, high: float
) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), smoothness, mode="reflect")
    span = noise.max() - noise.min()
    unit = (noise - noise.min()) / span if span > 0 else np.full(shape, 0.5)
    return low + (high - low) * unit


def synthesize_fields(spec: SceneSpec) -> Dict[str, np.ndarray]:
    """S0, DoP and AoP (degrees) fields of a scene: smooth backgrounds plus flat shapes."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    s0 = _smooth_field(rng, shape, spec.smoothness, *spec.s0_range)
    dop = _smooth_field(rng, shape, spec.smoothness, *spec.dop_range)
    aop = _smooth_field(rng, shape, spec.smoothness, 0.0, 180.0)

    rows, cols = np.mgrid[:spec.height, :spec.width]
    for _ in range(spec.shapes):
        cy, cx = rng.uniform(0, spec.height), rng.uniform(0, spec.width)
        radius = rng.uniform(0.1, 0.3) * min(shape)
        if rng.random() < 0.5:
            region = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius**2
        else:
            region = (np.abs(rows - cy) <= radius) & (np.abs(cols - cx) <= radius)
        s0[region] = rng.uniform(*spec.s0_range)
        dop[region] = rng.uniform(*spec.dop_range)
        aop[region] = rng.uniform(0.0, 180.0)

    if spec.s0 is not None:
        s0 = np.full(shape, float(spec.s0))
    if spec.dop is not None:
        dop = np.full(shape, float(spec.dop))
    if spec.aop is not None:
        aop = np.full(shape, float(spec.aop))
    return {"S0": s0, "DoP": dop, "AoP": np.mod(aop, 180.0)}


def _angle_planes(s0: np.ndarray, dop: np.ndarray, aop: np.ndarray) -> Dict[int, np.ndarray]:
    psi = np.radians(2.0 * aop)
    return angles_from_stokes(StokesImage(s0, s0 * dop * np.cos(psi), s0 * dop * np.sin(psi)))


def synthesize_scene(spec: SceneSpec) -> PolarizationStack:
    """Deterministic polarization stack for ``spec``; color scenes share DoP and AoP."""
    fields = synthesize_fields(spec)
    if not spec.color:
        planes = _angle_planes(fields["S0"], fields["DoP"], fields["AoP"])
        return PolarizationStack.from_angles(planes)
    rng = np.random.default_rng([spec.seed, 1])
    color_planes = {}
    for index, color in enumerate(COLORS):
        if spec.color_gains is not None:
            gain = spec.color_gains[index]
        else:
            gain = _smooth_field(rng, fields["S0"].shape, spec.smoothness, 0.5, 1.0)
        color_planes[color] = _angle_planes(fields["S0"] * gain, fields["DoP"], fields["AoP"])
    return PolarizationStack.from_colors(color_planes)


def add_awgn(image: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise; values are not clamped."""
    if not sigma >= 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    return image + rng.normal(0.0, sigma, image.shape)


def add_mosaic_noise(mosaic: MosaicImage, profile: NoiseProfile, seed: int) -> MosaicImage:
    """White Gaussian noise at the level of each pixel's channel."""
    height, width = mosaic.shape
    sigma = np.zeros((height, width))
    for channel in mosaic.pattern.channels:
        level = profile.sigma_for(channel.angle, channel.color)
        if not level >= 0:
            raise ContractError(f"sigma must be >= 0, got {level}")
        sigma[mosaic.pattern.mask(channel, height, width)] = level
    rng = np.random.default_rng(seed)
    return mosaic.with_plane(mosaic.plane + rng.standard_normal((height, width)) * sigma)


def add_stack_noise(
    stack: PolarizationStack, profile: NoiseProfile, seed: int
) -> PolarizationStack:
    """White Gaussian noise on every plane at the level of its channel."""
    rng = np.random.default_rng(seed)
    noisy = {}
    for channel in stack.channels:
        level = profile.sigma_for(channel.angle, channel.color)
        if not level >= 0:
            raise ContractError(f"sigma must be >= 0, got {level}")
        plane = stack.planes[channel]
        noisy[channel] = plane + rng.standard_normal(plane.shape) * level
    return PolarizationStack(noisy)


def noisy_role(condition: str) -> str:
    if condition.startswith("noisy-"):
        return condition
    return f"noisy-{condition.lower()}"


def _resolve(manifest: Manifest, entry: ManifestEntry) -> str:
    return posixpath.join(manifest.root, entry.file)


def load_manifest(path: str, fs: Optional[fsspec.AbstractFileSystem] = None) -> Manifest:
    """Load a YAML or JSON manifest; a relative root is taken relative to the manifest."""
    fs = fs or filesystem_for_path(path)
    try:
        with fs.open(path, "r") as handle:
            data = yaml.safe_load(handle)
    except OSError as e:
        raise ImageIOError(f"Cannot read manifest {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ImageFormatError(f"Manifest {path} is not valid YAML/JSON: {e}") from e
    if not isinstance(data, dict):
        raise ImageFormatError(f"Manifest {path} must be a mapping")
    root = data.get("root") or "."
    protocol, _ = split_protocol(root)
    if protocol is None and not posixpath.isabs(root):
        root = posixpath.normpath(posixpath.join(posixpath.dirname(path), root))
    try:
        return from_dict(data_class=Manifest, data={**data, "root": root})
    except DaciteError as e:
        raise ImageFormatError(f"Invalid manifest {path}: {e}") from e


def store_manifest(manifest: Manifest, path: str, fs: Optional[fsspec.AbstractFileSystem] = None):
    fs = fs or filesystem_for_path(path)
    with fs.open(path, "w") as handle:
        json.dump(asdict(manifest), handle, indent=2)


def _load_entries(
    manifest: Manifest, entries: List[ManifestEntry], fs
) -> PolarizationStack:
    if len(entries) == 1 and entries[0].kind == "stack":
        return load_stack(_resolve(manifest, entries[0]), fs)
    planes = {}
    for entry in entries:
        if entry.kind != "plane" or entry.angle is None:
            raise ContractError(f"{entry.file} is not a per-angle plane")
        planes[Channel(entry.angle, entry.color)] = load_plane(
            _resolve(manifest, entry), entry.format, fs
        )
    try:
        return PolarizationStack(planes)
    except ContractError as e:
        raise ImageFormatError(f"Incomplete planes for scene {entries[0].scene}: {e}") from e


def load_ground_truth(
    manifest: Manifest,
    scene: str,
    pattern_kind: Optional[str] = None,
    fs: Optional[fsspec.AbstractFileSystem] = None,
) -> PolarizationStack:
    """Ground-truth stack of a scene; MPFA evaluation of color data uses the green channel."""
    entries = manifest.select(scene, GT_ROLE)
    if not entries:
        raise MissingManifestEntry(f"No ground truth for scene {scene}")
    stack = _load_entries(manifest, entries, fs)
    if pattern_kind == MPFA and stack.is_color:
        return stack.select_color("G")
    return stack


def load_noisy_mosaic(
    manifest: Manifest,
    scene: str,
    condition: str,
    pattern: PatternDescriptor,
    fs: Optional[fsspec.AbstractFileSystem] = None,
) -> MosaicImage:
    """
    Noisy mosaic of a scene under a noise condition. Per-angle noisy images
    are sampled through ``pattern``; a raw mosaic entry is used as is.
    """
    role = noisy_role(condition)
    entries = manifest.select(scene, role)
    if not entries:
        raise MissingManifestEntry(f"No {role} data for scene {scene}")
    if len(entries) == 1 and entries[0].kind == "mosaic":
        plane = load_plane(_resolve(manifest, entries[0]), entries[0].format, fs)
        return MosaicImage(plane, pattern)
    stack = _load_entries(manifest, entries, fs)
    if pattern.kind == MPFA and stack.is_color:
        stack = stack.select_color("G")
    elif pattern.kind == CPFA and not stack.is_color:
        raise ContractError(f"Scene {scene} has no color data for a {CPFA} mosaic")
    return mosaic_from_stack(stack, pattern)


def convert_directory_to_manifest(
    root: str,
    gt_pattern: str = DEFAULT_GT_PATTERN,
    noisy_pattern: str = DEFAULT_NOISY_PATTERN,
    fs: Optional[fsspec.AbstractFileSystem] = None,
) -> Manifest:
    """
    Describe a directory of per-scene images as a manifest.

    Relative file paths are matched against the two regular expressions,
    which name the groups ``scene``, ``angle``, optionally ``color`` and
    ``ext``, and (noisy files only) ``condition``.
    """
    fs = fs or filesystem_for_path(root)
    base = fs.info(root)["name"].rstrip("/")
    patterns = ((GT_ROLE, re.compile(gt_pattern)), (None, re.compile(noisy_pattern)))
    entries = []
    for path in sorted(fs.find(root)):
        relative = posixpath.relpath(path, base)
        for role, regex in patterns:
            match = regex.fullmatch(relative)
            if match is None:
                continue
            groups = match.groupdict()
            entries.append(
                ManifestEntry(
                    file=relative,
                    scene=groups["scene"],
                    role=role or noisy_role(groups["condition"]),
                    angle=int(groups["angle"]),
                    color=groups.get("color") or "mono",
                    format=PFI_RAW if groups.get("ext") == "pfi" else PNG16,
                )
            )
            break
    if not entries:
        raise ContractError(f"No file under {root} matches the dataset patterns")
    entries.sort(key=lambda e: (e.scene, e.role, e.angle, e.color))
    logger.info(f"Found {len(entries)} images of {len({e.scene for e in entries})} scenes")
    return Manifest(root=root, entries=entries)


@dataclass
class BurstDataset:
    manifest: Manifest
    profile: NoiseProfile
    digital_gain: float
    median_frames: Dict[int, int] = field(default_factory=dict)


def build_dataset_from_bursts(
    burst_dir: str,
    out_dir: str,
    scene: Optional[str] = None,
    condition: str = "High",
    exclude_count: int = DEFAULT_EXCLUDE_COUNT,
    percentile: float = DEFAULT_PERCENTILE,
    median_mode: str = LOWER_MEDIAN,
    fs: Optional[fsspec.AbstractFileSystem] = None,
) -> BurstDataset:
    """
    Turn per-angle bursts (``<burst_dir>/<angle>/*.png``, 16-bit RGB frames)
    into ground truth, a noisy input, simulated CPFA/MPFA mosaics and the
    estimated noise profile, all scaled by the digital gain.

    Writes under ``<out_dir>/<scene>/``: ``gt.pfi``, ``<role>.pfi`` (noisy
    stack), ``cpfa-<role>.pfi``, ``mpfa-<role>.pfi`` (green channel),
    ``noise-<role>.json``, and ``<out_dir>/manifest.json``.
    """
    fs = fs or filesystem_for_path(burst_dir)
    scene = scene or posixpath.basename(burst_dir.rstrip("/"))
    role = noisy_role(condition)

    ground_truth, noisy, variances, median_frames = {}, {}, [], {}
    for angle in ANGLES:
        paths = sorted(fs.glob(posixpath.join(burst_dir, str(angle), "*.png")))
        if not paths:
            raise ImageIOError(f"No frames for angle {angle} under {burst_dir}")
        burst = CaptureBurst(FrameSequence(paths, fs), angle)
        gt, median_index = build_ground_truth(burst, exclude_count, median_mode)
        profile = estimate_noise_levels(burst, gt, exclude_count)
        ground_truth[angle] = gt
        noisy[angle] = burst.frame(median_index)
        median_frames[angle] = median_index
        variances.append([profile.sigma[color] ** 2 for color in COLORS])
        logger.info(f"Scene {scene}, angle {angle}: {len(burst)} frames reduced")

    gain = compute_digital_gain(list(noisy.values()), percentile)
    sigma = np.sqrt(np.mean(variances, axis=0)) * gain
    profile = NoiseProfile.cpfa(*(float(value) for value in sigma))

    def to_stack(images):
        return PolarizationStack.from_colors(
            {
                color: {angle: images[angle][..., index] * gain for angle in ANGLES}
                for index, color in enumerate(COLORS)
            }
        )

    gt_stack, noisy_stack = to_stack(ground_truth), to_stack(noisy)
    out_fs = filesystem_for_path(out_dir)
    scene_dir = posixpath.join(out_dir, scene)
    store_stack(gt_stack, posixpath.join(scene_dir, "gt.pfi"), out_fs)
    store_stack(noisy_stack, posixpath.join(scene_dir, f"{role}.pfi"), out_fs)
    cpfa = mosaic_from_stack(noisy_stack, PatternDescriptor.cpfa())
    mpfa = mosaic_from_stack(noisy_stack.select_color("G"), PatternDescriptor.mpfa())
    store_plane(cpfa.plane, posixpath.join(scene_dir, f"cpfa-{role}.pfi"), PFI_RAW, out_fs)
    store_plane(mpfa.plane, posixpath.join(scene_dir, f"mpfa-{role}.pfi"), PFI_RAW, out_fs)
    with out_fs.open(posixpath.join(scene_dir, f"noise-{role}.json"), "w") as handle:
        json.dump({**asdict(profile), "digital_gain": gain}, handle, indent=2)

    manifest = Manifest(
        root=".",
        entries=[
            ManifestEntry(
                file=f"{scene}/gt.pfi", scene=scene, role=GT_ROLE, format=PFI_RAW, kind="stack"
            ),
            ManifestEntry(
                file=f"{scene}/{role}.pfi", scene=scene, role=role, format=PFI_RAW, kind="stack"
            ),
        ],
    )
    store_manifest(manifest, posixpath.join(out_dir, MANIFEST_NAME), out_fs)
    logger.info(f"Built scene {scene} with digital gain {gain:.3f} and noise {profile.sigma}")
    return BurstDataset(manifest, profile, gain, median_frames)
