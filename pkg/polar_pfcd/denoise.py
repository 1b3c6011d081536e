"""
Pseudo four-channel denoising (PFCD).

Four sub-sampled channels of a mosaic are decorrelated with a per-image
PCA, each principal component is denoised with BM3D at its propagated
noise level, and the result is transformed back.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from polar_pfcd.bm3d import bm3d_denoise
from polar_pfcd.imagecore import ANGLES, CPFA, MPFA, ContractError, MosaicImage, as_plane
from polar_pfcd.meta_types.params import MONO, Bm3dParams, NoiseProfile
from polar_pfcd.mosaic import (
    merge_bayer_phases,
    merge_bayer_to_cpfa,
    merge_quads_to_mpfa,
    split_bayer_phases,
    split_cpfa_to_bayer,
    split_mpfa_quads,
)

logger = logging.getLogger(__name__)

# eigenvalues closer than this (relative to the largest) are treated as one eigenspace
DEGENERACY_TOLERANCE = 1e-10
SIGN_TOLERANCE = 1e-12
COLOR_RANK = {"R": 0, "G": 1, "B": 2}

Denoiser = Callable[[np.ndarray, float, Bm3dParams], np.ndarray]


@dataclass(frozen=True, eq=False)
class PcaTransform:
    matrix: np.ndarray
    mean: np.ndarray

    def forward(self, samples: np.ndarray) -> np.ndarray:
        """Map (4, N) channel samples to (4, N) principal components."""
        return self.matrix @ (samples - self.mean[:, None])

    def inverse(self, components: np.ndarray) -> np.ndarray:
        return self.matrix.T @ components + self.mean[:, None]


def _fix_sign(vector: np.ndarray) -> np.ndarray:
    for value in vector:
        if abs(value) > SIGN_TOLERANCE:
            return vector if value > 0 else -vector
    return vector


def _canonical_basis(eigenvectors: np.ndarray) -> np.ndarray:
    """
    Deterministic orthonormal basis of a degenerate eigenspace: canonical
    basis vectors projected onto the space, Gram-Schmidt orthogonalized.
    """
    size, rank = eigenvectors.shape
    projector = eigenvectors @ eigenvectors.T
    basis: List[np.ndarray] = []
    for axis in range(size):
        vector = projector[:, axis].copy()
        for fixed in basis:
            vector -= (fixed @ vector) * fixed
        for fixed in basis:
            vector -= (fixed @ vector) * fixed
        norm = np.linalg.norm(vector)
        if norm > 1e-6:
            basis.append(vector / norm)
        if len(basis) == rank:
            break
    return np.stack(basis, axis=1)


def compute_pca_transform(channels: Sequence[np.ndarray]) -> PcaTransform:
    """
    PCA of the inter-channel covariance over all pixels.

    Rows of the returned matrix are unit eigenvectors ordered by descending
    eigenvalue, each with its first nonzero entry positive. Repeated
    eigenvalues (including the null space of rank-deficient data) get a
    canonical-basis eigenvector choice so that the transform is
    deterministic.
    """
    planes = [as_plane(channel) for channel in channels]
    if len({plane.shape for plane in planes}) != 1:
        raise ContractError("PCA channels must share dimensions")
    samples = np.stack([plane.ravel() for plane in planes])
    mean = samples.mean(axis=1)
    centered = samples - mean[:, None]
    covariance = centered @ centered.T / samples.shape[1]

    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    eigenvalues, eigenvectors = eigenvalues[::-1], eigenvectors[:, ::-1]
    tolerance = DEGENERACY_TOLERANCE * max(abs(eigenvalues[0]), 1e-300)

    rows = []
    start = 0
    while start < len(eigenvalues):
        stop = start + 1
        while stop < len(eigenvalues) and eigenvalues[stop - 1] - eigenvalues[stop] <= tolerance:
            stop += 1
        group = eigenvectors[:, start:stop]
        if stop - start > 1:
            group = _canonical_basis(group)
        rows.extend(_fix_sign(group[:, k]) for k in range(group.shape[1]))
        start = stop
    logger.debug(f"PCA eigenvalues {eigenvalues}")
    return PcaTransform(matrix=np.stack(rows), mean=mean)


def propagate_noise_variance(transform: PcaTransform, sigmas: Sequence[float]) -> np.ndarray:
    """Per-component noise standard deviation: sigma_i^2 = sum_j A_ij^2 sigma_j^2."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.shape != (transform.matrix.shape[1],):
        raise ContractError(
            f"Expected {transform.matrix.shape[1]} noise levels, got {sigmas.shape}"
        )
    if np.any(sigmas < 0) or not np.all(np.isfinite(sigmas)):
        raise ContractError(f"Noise levels must be finite and >= 0, got {sigmas}")
    return np.sqrt(transform.matrix**2 @ sigmas**2)


def pfcd_denoise(
    channels: Sequence[np.ndarray],
    sigmas: Sequence[float],
    params: Optional[Bm3dParams] = None,
    denoiser: Denoiser = bm3d_denoise,
) -> List[np.ndarray]:
    planes = [as_plane(channel) for channel in channels]
    if len(planes) != 4:
        raise ContractError(f"PFCD works on four channels, got {len(planes)}")
    params = params or Bm3dParams()
    transform = compute_pca_transform(planes)
    component_sigmas = propagate_noise_variance(transform, sigmas)
    if not np.any(component_sigmas):
        return planes

    shape = planes[0].shape
    components = transform.forward(np.stack([plane.ravel() for plane in planes]))
    denoised = np.stack(
        [
            denoiser(component.reshape(shape), sigma, params).ravel()
            for component, sigma in zip(components, component_sigmas)
        ]
    )
    logger.debug(f"PFCD component noise levels {component_sigmas}")
    return [plane.reshape(shape) for plane in transform.inverse(denoised)]


def denoise_mpfa(
    mosaic: MosaicImage, profile: NoiseProfile, params: Optional[Bm3dParams] = None
) -> MosaicImage:
    if mosaic.pattern.kind != MPFA:
        raise ContractError(f"Expected an {MPFA} mosaic, got {mosaic.pattern.kind}")
    quads = split_mpfa_quads(mosaic)
    sigmas = [profile.sigma_for(angle, MONO) for angle in ANGLES]
    denoised = pfcd_denoise([quads[angle] for angle in ANGLES], sigmas, params)
    return merge_quads_to_mpfa(dict(zip(ANGLES, denoised)), mosaic.pattern)


def denoise_cpfa(
    mosaic: MosaicImage, profile: NoiseProfile, params: Optional[Bm3dParams] = None
) -> MosaicImage:
    """Run PFCD on each per-angle Bayer mosaic with pseudo channels (R, G1, G2, B)."""
    if mosaic.pattern.kind != CPFA:
        raise ContractError(f"Expected a {CPFA} mosaic, got {mosaic.pattern.kind}")
    denoised_bayers = {}
    for angle, bayer in split_cpfa_to_bayer(mosaic).items():
        phases = split_bayer_phases(bayer)
        colors = {(y, x): bayer.pattern.cells[y][x].color for y, x in phases}
        # R, then the greens in raster order, then B
        order = sorted(phases, key=lambda offset: (COLOR_RANK[colors[offset]], offset))
        sigmas = [profile.sigma_for(angle, colors[offset]) for offset in order]
        denoised = pfcd_denoise([phases[offset] for offset in order], sigmas, params)
        denoised_bayers[angle] = merge_bayer_phases(dict(zip(order, denoised)), bayer.pattern)
        logger.debug(f"Denoised {angle} degree Bayer mosaic with sigmas {sigmas}")
    return merge_bayer_to_cpfa(denoised_bayers, mosaic.pattern)
