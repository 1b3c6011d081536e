"""
Denoising and demosaicking chains from a raw mosaic to polarization outputs.
"""
import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from polar_pfcd.bm3d import bm3d_denoise
from polar_pfcd.demosaic import demosaick_bilinear, demosaick_cpfa, demosaick_mpfa_igri2
from polar_pfcd.denoise import denoise_cpfa, denoise_mpfa
from polar_pfcd.imagecore import (
    CPFA,
    DEFAULT_MPFA_LAYOUT,
    MPFA,
    MosaicImage,
    PatternDescriptor,
    PolarizationStack,
)
from polar_pfcd.meta_types.params import Bm3dParams, NoiseProfile
from polar_pfcd.meta_types.run import (
    BILINEAR_DEMOSAICKER,
    DEMOSAICK_ONLY,
    DEMOSAICK_THEN_DENOISE,
    DENOISE_THEN_DEMOSAICK,
    IGRI2_DEMOSAICKER,
    RunConfig,
)
from polar_pfcd.polarimetry import StokesImage, compute_aop, compute_dop, stokes_from_stack

logger = logging.getLogger(__name__)

PIPELINES = (DEMOSAICK_ONLY, DEMOSAICK_THEN_DENOISE, DENOISE_THEN_DEMOSAICK)
DEMOSAICKERS = (IGRI2_DEMOSAICKER, BILINEAR_DEMOSAICKER)


class PipelineConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PipelineResult:
    stack: PolarizationStack
    stokes: Dict[str, StokesImage]
    dop: Dict[str, np.ndarray]
    aop: Dict[str, np.ndarray]


def pattern_for(config: RunConfig) -> PatternDescriptor:
    layout = config.mpfa_layout or DEFAULT_MPFA_LAYOUT
    if config.pattern == MPFA:
        return PatternDescriptor.mpfa(layout)
    elif config.pattern == CPFA:
        return PatternDescriptor.cpfa(angle_layout=layout)
    raise PipelineConfigError(f"Unsupported pattern {config.pattern!r}")


def bm3d_params_for(config: RunConfig) -> Bm3dParams:
    if config.threads is None:
        return config.bm3d
    return dataclasses.replace(config.bm3d, workers=config.threads)


def validate_config(config: RunConfig, mosaic: MosaicImage):
    if config.pipeline not in PIPELINES:
        raise PipelineConfigError(f"Unknown pipeline {config.pipeline!r}")
    if config.demosaicker not in DEMOSAICKERS:
        raise PipelineConfigError(f"Unknown demosaicker {config.demosaicker!r}")
    if mosaic.pattern.kind != config.pattern:
        raise PipelineConfigError(
            f"Configured for {config.pattern} but the mosaic is {mosaic.pattern.kind}"
        )
    if config.pipeline != DEMOSAICK_ONLY:
        for channel in mosaic.pattern.channels:
            try:
                config.noise.sigma_for(channel.angle, channel.color)
            except KeyError as e:
                raise PipelineConfigError(f"Noise profile incomplete: {e}") from e


def denoise_mosaic(mosaic: MosaicImage, profile: NoiseProfile, params: Bm3dParams) -> MosaicImage:
    if mosaic.pattern.kind == MPFA:
        return denoise_mpfa(mosaic, profile, params)
    return denoise_cpfa(mosaic, profile, params)


def demosaick(mosaic: MosaicImage, config: RunConfig) -> PolarizationStack:
    if config.demosaicker == BILINEAR_DEMOSAICKER:
        return demosaick_bilinear(mosaic)
    if mosaic.pattern.kind == MPFA:
        return demosaick_mpfa_igri2(mosaic, config.demosaic)
    return demosaick_cpfa(mosaic, config.demosaic)


def denoise_stack(
    stack: PolarizationStack, profile: NoiseProfile, params: Bm3dParams
) -> PolarizationStack:
    """BM3D on every plane separately at the noise level of its channel."""
    return stack.map(
        lambda channel, plane: bm3d_denoise(
            plane, profile.sigma_for(channel.angle, channel.color), params
        )
    )


def polarization_outputs(stack: PolarizationStack) -> PipelineResult:
    stokes = {color: stokes_from_stack(stack, color) for color in stack.colors}
    return PipelineResult(
        stack=stack,
        stokes=stokes,
        dop={color: compute_dop(image) for color, image in stokes.items()},
        aop={color: compute_aop(image) for color, image in stokes.items()},
    )


def run_pipeline(config: RunConfig, mosaic: MosaicImage) -> PipelineResult:
    validate_config(config, mosaic)
    params = bm3d_params_for(config)
    logger.info(f"Running {config.method} on a {mosaic.shape} {mosaic.pattern.kind} mosaic")
    if config.pipeline == DENOISE_THEN_DEMOSAICK:
        mosaic = denoise_mosaic(mosaic, config.noise, params)
        logger.info("Denoised mosaic")
    stack = demosaick(mosaic, config)
    logger.info(f"Demosaicked with {config.demosaicker}")
    if config.pipeline == DEMOSAICK_THEN_DENOISE:
        stack = denoise_stack(stack, config.noise, params)
        logger.info("Denoised demosaicked planes")
    return polarization_outputs(stack)
