"""
Demosaicking: guided filtering, residual interpolation (RI), the
intensity-guided RI for MPFA mosaics, Bayer RI, the CPFA pipeline and a
bilinear baseline.

Kernels applied to a mosaic use mirror padding so the 2x2 sampling phase is
kept at the borders. Guided-filter windows use replicate padding.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy import ndimage

from polar_pfcd.imagecore import (
    ANGLES,
    BAYER,
    COLORS,
    CPFA,
    MPFA,
    Channel,
    ContractError,
    MosaicImage,
    PatternDescriptor,
    PolarizationStack,
    as_plane,
)
from polar_pfcd.meta_types.params import MONO, DemosaicParams, GuidedFilterParams
from polar_pfcd.mosaic import rearrange_rgb_to_mpfa, split_cpfa_to_bayer

logger = logging.getLogger(__name__)

GRADIENT_EPSILON = 1e-10
GRADIENT_WINDOW = np.ones((5, 5))
# one sample of each angle per direction: [1,2,1]/4 across, [1,2,2,2,1]/8 along
HORIZONTAL_GUIDE_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 2.0, 2.0, 1.0]) / 32.0
CENTRAL_DIFFERENCE = np.array([-1.0, 0.0, 1.0])
SECOND_DIFFERENCE = np.array([-1.0, 0.0, 2.0, 0.0, -1.0])
# neighbour average plus half the same-color second difference
GREEN_ESTIMATE = np.array([-0.25, 0.5, 0.5, 0.5, -0.25])


@dataclass(frozen=True, eq=False)
class SparseChannel:
    """One channel of a mosaic at full resolution, zero where it is not observed."""

    plane: np.ndarray
    mask: np.ndarray
    period: int = 2

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        plane = as_plane(self.plane)
        if mask.shape != plane.shape:
            raise ContractError(f"Mask {mask.shape} does not match plane {plane.shape}")
        if self.period < 1:
            raise ContractError(f"period must be >= 1, got {self.period}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "plane", np.where(mask, plane, 0.0))

    @classmethod
    def from_mosaic(cls, mosaic: MosaicImage, channel: Channel) -> "SparseChannel":
        height, width = mosaic.shape
        mask = mosaic.pattern.mask(channel, height, width)
        if not mask.any():
            raise ContractError(f"{mosaic.pattern.kind} pattern does not observe {channel}")
        period = mosaic.pattern.tile_height if mosaic.pattern.kind == CPFA else 2
        return cls(np.where(mask, mosaic.plane, 0.0), mask, period)


def _box_mean(plane: np.ndarray, radius: int) -> np.ndarray:
    return ndimage.uniform_filter(plane, size=2 * radius + 1, mode="nearest")


def guided_filter(
    p: np.ndarray,
    guide: np.ndarray,
    params: Optional[GuidedFilterParams] = None,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Edge-preserving filter of ``p`` under a local linear model of ``guide``.

    With a ``mask`` the window statistics are ratios of box filters over the
    observed samples only, so that unobserved zeros do not bias them.
    """
    params = params or GuidedFilterParams()
    p = as_plane(p)
    guide = as_plane(guide)
    if p.shape != guide.shape:
        raise ContractError(f"Plane {p.shape} and guide {guide.shape} differ in size")
    radius = params.radius
    weights = np.ones_like(p) if mask is None else np.asarray(mask, dtype=np.float64)
    if weights.shape != p.shape:
        raise ContractError(f"Mask {weights.shape} does not match plane {p.shape}")

    count = _box_mean(weights, radius)
    if np.any(count < 0.5 / (2 * radius + 1) ** 2):
        raise ContractError(f"Some {2 * radius + 1}x{2 * radius + 1} windows hold no samples")
    mean_guide = _box_mean(weights * guide, radius) / count
    mean_p = _box_mean(weights * p, radius) / count
    var_guide = _box_mean(weights * guide * guide, radius) / count - mean_guide**2
    cov = _box_mean(weights * guide * p, radius) / count - mean_guide * mean_p

    a = cov / (np.maximum(var_guide, 0.0) + params.epsilon)
    b = mean_p - a * mean_guide
    return _box_mean(a, radius) * guide + _box_mean(b, radius)


def _interpolate_sparse(values: np.ndarray, mask: np.ndarray, period: int) -> np.ndarray:
    """Bilinear interpolation of lattice samples by normalized convolution with a tent."""
    tent = 1.0 - np.abs(np.arange(1 - period, period)) / period

    def smooth(plane):
        plane = ndimage.correlate1d(plane, tent, axis=0, mode="constant")
        return ndimage.correlate1d(plane, tent, axis=1, mode="constant")

    weights = mask.astype(np.float64)
    support = smooth(weights)
    if np.any(support <= 0):
        raise ContractError(f"Samples are too sparse for a period-{period} interpolation")
    return smooth(values * weights) / support


def _gradient_weight(gradient: np.ndarray) -> np.ndarray:
    energy = ndimage.correlate(gradient**2, GRADIENT_WINDOW, mode="mirror")
    return 1.0 / (GRADIENT_EPSILON + energy)


def _blend_directions(
    estimate_h: np.ndarray, estimate_v: np.ndarray, gradient_h: np.ndarray, gradient_v: np.ndarray
) -> np.ndarray:
    weight_h = _gradient_weight(gradient_h)
    weight_v = _gradient_weight(gradient_v)
    return (weight_h * estimate_h + weight_v * estimate_v) / (weight_h + weight_v)


def generate_intensity_guide(mosaic: MosaicImage) -> np.ndarray:
    """
    Edge-aware estimate of the four-angle average from an MPFA mosaic.

    Horizontal and vertical low-pass estimates each average one sample of
    every angle; they are blended with weights inversely proportional to the
    local gradient energy in their direction.
    """
    if mosaic.pattern.kind != MPFA:
        raise ContractError(f"Expected an {MPFA} mosaic, got {mosaic.pattern.kind}")
    plane = mosaic.plane
    estimate_h = ndimage.correlate(plane, HORIZONTAL_GUIDE_KERNEL, mode="mirror")
    estimate_v = ndimage.correlate(plane, HORIZONTAL_GUIDE_KERNEL.T, mode="mirror")
    gradient_h = ndimage.correlate1d(plane, CENTRAL_DIFFERENCE, axis=1, mode="mirror")
    gradient_v = ndimage.correlate1d(plane, CENTRAL_DIFFERENCE, axis=0, mode="mirror")
    return _blend_directions(estimate_h, estimate_v, gradient_h, gradient_v)


def residual_interpolate_channel(
    sparse: SparseChannel, guide: np.ndarray, params: Optional[GuidedFilterParams] = None
) -> np.ndarray:
    if not sparse.mask.any():
        raise ContractError("Cannot interpolate a channel without observed samples")
    guide = as_plane(guide)
    tentative = guided_filter(sparse.plane, guide, params, mask=sparse.mask)
    residual = np.where(sparse.mask, sparse.plane - tentative, 0.0)
    estimate = tentative + _interpolate_sparse(residual, sparse.mask, sparse.period)
    return np.where(sparse.mask, sparse.plane, estimate)


def demosaick_mpfa_igri2(
    mosaic: MosaicImage, params: Optional[DemosaicParams] = None
) -> PolarizationStack:
    """
    Intensity-guided residual interpolation of an MPFA mosaic.

    With ``params.iterations > 1`` the guide of every further pass is the
    four-angle average of the previous pass's planes.
    """
    if mosaic.pattern.kind != MPFA:
        raise ContractError(f"Expected an {MPFA} mosaic, got {mosaic.pattern.kind}")
    params = params or DemosaicParams()
    sparse = {angle: SparseChannel.from_mosaic(mosaic, Channel(angle, MONO)) for angle in ANGLES}
    guide = generate_intensity_guide(mosaic)
    planes: Dict[int, np.ndarray] = {}
    for iteration in range(params.iterations):
        if iteration:
            guide = np.mean([planes[angle] for angle in ANGLES], axis=0)
        planes = {
            angle: residual_interpolate_channel(sparse[angle], guide, params.polarization)
            for angle in ANGLES
        }
    return PolarizationStack.from_angles(planes)


def _color_channel(pattern: PatternDescriptor, color: str) -> Channel:
    return next(channel for channel in pattern.channels if channel.color == color)


def _interpolate_green(bayer: MosaicImage) -> np.ndarray:
    plane = bayer.plane
    height, width = plane.shape
    observed = bayer.pattern.mask(_color_channel(bayer.pattern, "G"), height, width)

    def gradient(axis):
        first = ndimage.correlate1d(plane, CENTRAL_DIFFERENCE, axis=axis, mode="mirror")
        second = ndimage.correlate1d(plane, SECOND_DIFFERENCE, axis=axis, mode="mirror")
        return np.abs(first) + np.abs(second)

    estimate_h = ndimage.correlate1d(plane, GREEN_ESTIMATE, axis=1, mode="mirror")
    estimate_v = ndimage.correlate1d(plane, GREEN_ESTIMATE, axis=0, mode="mirror")
    blended = _blend_directions(estimate_h, estimate_v, gradient(1), gradient(0))
    return np.where(observed, plane, blended)


def demosaick_bayer_ri(
    bayer: MosaicImage, params: Optional[GuidedFilterParams] = None
) -> Dict[str, np.ndarray]:
    """Green by gradient-weighted directional interpolation, then R and B by RI against it."""
    if bayer.pattern.kind != BAYER:
        raise ContractError(f"Expected a {BAYER} mosaic, got {bayer.pattern.kind}")
    params = params or GuidedFilterParams(radius=2, epsilon=1e-5)
    green = _interpolate_green(bayer)
    rgb = {"G": green}
    for color in ("R", "B"):
        sparse = SparseChannel.from_mosaic(bayer, _color_channel(bayer.pattern, color))
        rgb[color] = residual_interpolate_channel(sparse, green, params)
    return rgb


def demosaick_cpfa(
    mosaic: MosaicImage, params: Optional[DemosaicParams] = None
) -> PolarizationStack:
    """
    Bayer RI on every per-angle Bayer mosaic, then IGRI-2 on every per-color
    MPFA mosaic.

    The per-angle RGB images live on the half-resolution Bayer grid. With
    ``params.cpfa_full_resolution`` they are shuffled back to the CPFA grid
    so the output matches the mosaic size; otherwise the output stays at
    half resolution.
    """
    if mosaic.pattern.kind != CPFA:
        raise ContractError(f"Expected a {CPFA} mosaic, got {mosaic.pattern.kind}")
    params = params or DemosaicParams()
    rgb_per_angle = {
        angle: demosaick_bayer_ri(bayer, params.bayer)
        for angle, bayer in split_cpfa_to_bayer(mosaic).items()
    }
    color_mosaics = rearrange_rgb_to_mpfa(
        rgb_per_angle, mosaic.pattern, full_resolution=params.cpfa_full_resolution
    )
    color_planes = {
        color: demosaick_mpfa_igri2(color_mosaics[color], params).angle_planes()
        for color in COLORS
    }
    logger.debug(f"Demosaicked {mosaic.shape} CPFA mosaic to {color_mosaics['G'].shape} planes")
    return PolarizationStack.from_colors(color_planes)


def demosaick_bilinear(
    mosaic: MosaicImage, pattern: Optional[PatternDescriptor] = None
) -> PolarizationStack:
    """Interpolate every channel independently from its own samples."""
    if pattern is not None:
        mosaic = MosaicImage(mosaic.plane, pattern)
    if mosaic.pattern.kind not in (MPFA, CPFA):
        raise ContractError(f"Bilinear demosaicking needs an {MPFA} or {CPFA} mosaic")
    planes = {}
    for channel in mosaic.pattern.channels:
        sparse = SparseChannel.from_mosaic(mosaic, channel)
        interpolated = _interpolate_sparse(sparse.plane, sparse.mask, sparse.period)
        planes[channel] = np.where(sparse.mask, sparse.plane, interpolated)
    return PolarizationStack(planes)
