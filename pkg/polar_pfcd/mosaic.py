"""
Pattern-aware rearrangements between mosaics, sub-sampled planes and stacks.

Everything here is index arithmetic: a sub-sampled plane of a tile phase
(y, x) holds ``mosaic[y::tile_h, x::tile_w]``, so the top-left sample of
each phase lands at index (0, 0) and every split/merge pair is exactly
invertible.
"""
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from polar_pfcd.imagecore import (
    ANGLES,
    BAYER,
    COLORS,
    CPFA,
    MPFA,
    ContractError,
    MosaicImage,
    PatternDescriptor,
    PolarizationStack,
    as_plane,
)


def _require_kind(mosaic: MosaicImage, kind: str):
    if mosaic.pattern.kind != kind:
        raise ContractError(f"Expected a {kind} mosaic, got {mosaic.pattern.kind}")


def _require_keys(mapping: Mapping, keys, what: str):
    missing = [key for key in keys if key not in mapping]
    if missing:
        raise ContractError(f"Missing {what}: {missing}")


def _angle_offsets(pattern: PatternDescriptor) -> Dict[int, tuple]:
    return {
        angle: (y, x)
        for y, row in enumerate(pattern.angle_layout)
        for x, angle in enumerate(row)
    }


def split_mpfa_quads(mosaic: MosaicImage) -> Dict[int, np.ndarray]:
    _require_kind(mosaic, MPFA)
    return {
        angle: mosaic.plane[y::2, x::2].copy()
        for angle, (y, x) in _angle_offsets(mosaic.pattern).items()
    }


def merge_quads_to_mpfa(
    quads: Mapping[int, np.ndarray], pattern: Optional[PatternDescriptor] = None
) -> MosaicImage:
    pattern = pattern or PatternDescriptor.mpfa()
    if pattern.kind != MPFA:
        raise ContractError(f"Expected an {MPFA} pattern, got {pattern.kind}")
    _require_keys(quads, ANGLES, "angles")
    planes = {angle: as_plane(quads[angle]) for angle in ANGLES}
    shapes = {plane.shape for plane in planes.values()}
    if len(shapes) != 1:
        raise ContractError(f"Quads must share dimensions, got {sorted(shapes)}")
    height, width = shapes.pop()
    merged = np.empty((2 * height, 2 * width))
    for angle, (y, x) in _angle_offsets(pattern).items():
        merged[y::2, x::2] = planes[angle]
    return MosaicImage(merged, pattern)


def split_cpfa_to_bayer(mosaic: MosaicImage) -> Dict[int, MosaicImage]:
    """
    Collect, for every angle, the one pixel of that angle from each 2x2
    single-color block. The result is a half-resolution Bayer mosaic whose
    colors follow the CPFA block arrangement.
    """
    _require_kind(mosaic, CPFA)
    color_layout = mosaic.pattern.color_layout
    return {
        angle: MosaicImage(
            mosaic.plane[y::2, x::2], PatternDescriptor.bayer(angle, color_layout)
        )
        for angle, (y, x) in _angle_offsets(mosaic.pattern).items()
    }


def merge_bayer_to_cpfa(
    bayers: Mapping[int, MosaicImage], pattern: Optional[PatternDescriptor] = None
) -> MosaicImage:
    _require_keys(bayers, ANGLES, "angles")
    for angle in ANGLES:
        _require_kind(bayers[angle], BAYER)
    color_layout = bayers[ANGLES[0]].pattern.color_layout
    if pattern is None:
        pattern = PatternDescriptor.cpfa(color_layout=color_layout)
    if pattern.kind != CPFA:
        raise ContractError(f"Expected a {CPFA} pattern, got {pattern.kind}")
    if any(bayers[angle].pattern.color_layout != pattern.color_layout for angle in ANGLES):
        raise ContractError("Bayer color layouts disagree with the CPFA pattern")
    shapes = {bayers[angle].shape for angle in ANGLES}
    if len(shapes) != 1:
        raise ContractError(f"Bayer mosaics must share dimensions, got {sorted(shapes)}")
    height, width = shapes.pop()
    merged = np.empty((2 * height, 2 * width))
    for angle, (y, x) in _angle_offsets(pattern).items():
        merged[y::2, x::2] = bayers[angle].plane
    return MosaicImage(merged, pattern)


def rearrange_rgb_to_mpfa(
    full_color_per_angle: Mapping[int, Mapping[str, np.ndarray]],
    pattern: Optional[PatternDescriptor] = None,
    full_resolution: bool = True,
) -> Dict[str, MosaicImage]:
    """
    Turn four per-angle RGB images into one MPFA mosaic per color.

    With ``full_resolution`` the per-angle images (which live on the
    Bayer-split grid) are shuffled back to the CPFA grid: the angle-θ pixel
    of block (i, j) takes the value of angle θ's image at (i, j), doubling
    each dimension. Otherwise the mosaic stays on the Bayer-split grid and
    the angle-θ cell takes angle θ's value at the same position.
    """
    pattern = pattern or PatternDescriptor.mpfa()
    if pattern.kind == CPFA:
        pattern = PatternDescriptor.mpfa(pattern.angle_layout)
    if pattern.kind != MPFA:
        raise ContractError(f"Expected an {MPFA} or {CPFA} pattern, got {pattern.kind}")
    _require_keys(full_color_per_angle, ANGLES, "angles")
    shapes = set()
    for angle in ANGLES:
        _require_keys(full_color_per_angle[angle], COLORS, f"colors for angle {angle}")
        shapes.update(np.shape(full_color_per_angle[angle][c]) for c in COLORS)
    if len(shapes) != 1:
        raise ContractError(f"Per-angle RGB images must share dimensions, got {sorted(shapes)}")
    height, width = shapes.pop()
    offsets = _angle_offsets(pattern)
    mosaics = {}
    for color in COLORS:
        if full_resolution:
            plane = np.empty((2 * height, 2 * width))
            for angle, (y, x) in offsets.items():
                plane[y::2, x::2] = full_color_per_angle[angle][color]
        else:
            plane = np.empty((height, width))
            for angle, (y, x) in offsets.items():
                plane[y::2, x::2] = np.asarray(full_color_per_angle[angle][color])[y::2, x::2]
        mosaics[color] = MosaicImage(plane, pattern)
    return mosaics


def mosaic_from_stack(stack: PolarizationStack, pattern: PatternDescriptor) -> MosaicImage:
    height, width = stack.shape
    mosaic = np.empty((height, width))
    for y, row in enumerate(pattern.cells):
        for x, channel in enumerate(row):
            if channel not in stack.planes:
                raise ContractError(f"Stack has no plane for {channel}")
            mosaic[y::pattern.tile_height, x::pattern.tile_width] = stack.planes[channel][
                y::pattern.tile_height, x::pattern.tile_width
            ]
    return MosaicImage(mosaic, pattern)


def split_bayer_phases(bayer: MosaicImage) -> Dict[Tuple[int, int], np.ndarray]:
    """Split a Bayer mosaic into its four phase planes keyed by (row, col) tile offset."""
    _require_kind(bayer, BAYER)
    return {
        (y, x): bayer.plane[y::2, x::2].copy() for y in range(2) for x in range(2)
    }


def merge_bayer_phases(
    phases: Mapping[Tuple[int, int], np.ndarray], pattern: PatternDescriptor
) -> MosaicImage:
    if pattern.kind != BAYER:
        raise ContractError(f"Expected a {BAYER} pattern, got {pattern.kind}")
    offsets = [(y, x) for y in range(2) for x in range(2)]
    _require_keys(phases, offsets, "phases")
    extra = sorted(set(phases) - set(offsets))
    if extra:
        raise ContractError(f"Unexpected phases: {extra}")
    planes = {offset: as_plane(phases[offset]) for offset in offsets}
    shapes = {plane.shape for plane in planes.values()}
    if len(shapes) != 1:
        raise ContractError(f"Phases must share dimensions, got {sorted(shapes)}")
    height, width = shapes.pop()
    merged = np.empty((2 * height, 2 * width))
    for (y, x), plane in planes.items():
        merged[y::2, x::2] = plane
    return MosaicImage(merged, pattern)
