"""
Two-stage BM3D denoising of a single plane.

Stage 1 groups blocks matched on the noisy plane, shrinks the 3-D spectrum
(orthonormal 2-D DCT per block, orthonormal Haar across the group) by hard
thresholding and aggregates the estimates with Kaiser-window weights.
Stage 2 re-matches on the stage-1 estimate and applies empirical Wiener
shrinkage driven by the stage-1 group spectrum.

The 3-D DC coefficient is never shrunk in either stage, so constant planes
are fixed points and a constant offset of the input shifts the output by
the same constant.

Reference blocks are processed in bands of rows; bands are independent and
run on a dask thread pool bounded by ``Bm3dParams.workers``.
"""
import logging
from functools import lru_cache
from typing import List, Optional, Tuple

import dask
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn, idctn

from polar_pfcd.imagecore import ContractError, as_plane
from polar_pfcd.meta_types.params import Bm3dParams

logger = logging.getLogger(__name__)

BAND_ROWS = 8


@lru_cache(maxsize=None)
def haar_matrix(size: int) -> np.ndarray:
    """Orthonormal Haar matrix; row 0 is the constant (DC) vector."""
    if size == 1:
        return np.ones((1, 1))
    if size & (size - 1):
        raise ContractError(f"Haar transforms need a power-of-two size, got {size}")
    coarse = haar_matrix(size // 2)
    top = np.kron(coarse, [1.0, 1.0])
    bottom = np.kron(np.eye(size // 2), [1.0, -1.0])
    return np.vstack([top, bottom]) / np.sqrt(2.0)


def reference_positions(length: int, block: int, step: int) -> np.ndarray:
    positions = list(range(0, length - block + 1, step))
    if positions[-1] != length - block:
        positions.append(length - block)
    return np.array(positions)


def _forward_3d(groups: np.ndarray) -> np.ndarray:
    # groups: (refs, n, block, block)
    spectrum = dctn(groups, axes=(2, 3), norm="ortho")
    return np.einsum("ij,mjkl->mikl", haar_matrix(groups.shape[1]), spectrum)


def _inverse_3d(spectrum: np.ndarray) -> np.ndarray:
    groups = np.einsum("ji,mjkl->mikl", haar_matrix(spectrum.shape[1]), spectrum)
    return idctn(groups, axes=(2, 3), norm="ortho")


def match_blocks(
    image: np.ndarray,
    ref_ys: np.ndarray,
    ref_xs: np.ndarray,
    block: int,
    radius: int,
    max_blocks: int,
    tau: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Find up to ``max_blocks`` blocks similar to every reference block.

    Distances are mean squared differences over the block, computed for all
    displacements within ``radius`` with integral images of the squared
    difference between the band and its shifted copies.

    Returns
    -------
    (group_ys, group_xs, counts) where group coordinates have shape
    (len(ref_ys) * len(ref_xs), max_blocks), sorted by distance with the
    reference itself first, and counts are the usable group sizes (blocks
    within ``tau``, rounded down to a power of two).
    """
    height, width = image.shape
    offsets = np.arange(-radius, radius + 1)
    n_off = len(offsets)
    y0, y1 = ref_ys[0], ref_ys[-1] + block
    strip = image[y0:y1]
    padded = np.pad(image, radius)
    rows = ref_ys - y0
    valid_x = (ref_xs[:, None] + offsets[None, :] >= 0) & (
        ref_xs[:, None] + offsets[None, :] <= width - block
    )

    distances = np.empty((len(ref_ys), len(ref_xs), n_off, n_off))
    integral = np.zeros((y1 - y0 + 1, n_off, width + 1))
    for i, dy in enumerate(offsets):
        shifted = padded[y0 + dy + radius:y1 + dy + radius]
        # shifted_views[:, j, x] == image[y + dy, x + offsets[j]] (zero outside)
        shifted_views = sliding_window_view(shifted, width, axis=1)
        squared = (strip[:, None, :] - shifted_views) ** 2
        integral[1:, :, 1:] = squared.cumsum(axis=0).cumsum(axis=2)
        top, bottom = rows[:, None], rows[:, None] + block
        left, right = ref_xs[None, :], ref_xs[None, :] + block
        box = (
            integral[bottom, :, right]
            - integral[top, :, right]
            - integral[bottom, :, left]
            + integral[top, :, left]
        )
        valid_y = (ref_ys + dy >= 0) & (ref_ys + dy <= height - block)
        valid = valid_y[:, None, None] & valid_x[None, :, :]
        distances[:, :, i, :] = np.where(valid, box / block**2, np.inf)

    distances = distances.reshape(len(ref_ys) * len(ref_xs), n_off * n_off)
    distances[:, radius * n_off + radius] = -1.0

    keep = min(max_blocks, n_off * n_off)
    nearest = np.argpartition(distances, keep - 1, axis=1)[:, :keep]
    nearest_d = np.take_along_axis(distances, nearest, axis=1)
    order = np.argsort(nearest_d, axis=1, kind="stable")
    nearest = np.take_along_axis(nearest, order, axis=1)
    nearest_d = np.take_along_axis(nearest_d, order, axis=1)

    counts = np.sum(nearest_d <= tau, axis=1)
    counts = 2 ** np.floor(np.log2(counts)).astype(int)

    ref_y = np.repeat(ref_ys, len(ref_xs))[:, None]
    ref_x = np.tile(ref_xs, len(ref_ys))[:, None]
    group_ys = ref_y + offsets[nearest // n_off]
    group_xs = ref_x + offsets[nearest % n_off]
    return group_ys, group_xs, counts


def _filter_band(
    noisy: np.ndarray,
    pilot: np.ndarray,
    ref_ys: np.ndarray,
    ref_xs: np.ndarray,
    sigma: float,
    params: Bm3dParams,
    block: int,
    wiener: bool,
) -> Tuple[int, np.ndarray, np.ndarray]:
    height, width = noisy.shape
    max_blocks = params.max_blocks_wiener if wiener else params.max_blocks_hard
    tau = params.tau_match_wiener if wiener else params.tau_match_hard
    group_ys, group_xs, counts = match_blocks(
        pilot, ref_ys, ref_xs, block, params.search_radius, max_blocks, tau
    )

    row0 = max(0, ref_ys[0] - params.search_radius)
    row1 = min(height, ref_ys[-1] + params.search_radius + block)
    size = (row1 - row0) * width
    numerator = np.zeros(size)
    denominator = np.zeros(size)
    window = np.kaiser(block, params.kaiser_beta)
    window = np.outer(window, window)
    noisy_blocks = sliding_window_view(noisy, (block, block))
    pilot_blocks = sliding_window_view(pilot, (block, block))
    span = np.arange(block)

    for count in np.unique(counts):
        selected = counts == count
        ys = group_ys[selected, :count]
        xs = group_xs[selected, :count]
        spectrum = _forward_3d(noisy_blocks[ys, xs])
        if wiener:
            pilot_power = _forward_3d(pilot_blocks[ys, xs]) ** 2
            shrink = pilot_power / (pilot_power + sigma**2)
            shrink[:, 0, 0, 0] = 1.0
            weights = 1.0 / np.sum(shrink**2, axis=(1, 2, 3))
        else:
            shrink = (np.abs(spectrum) > params.lambda_hard * sigma).astype(float)
            shrink[:, 0, 0, 0] = 1.0
            weights = 1.0 / np.sum(shrink, axis=(1, 2, 3))
        estimates = _inverse_3d(spectrum * shrink)

        pixel_rows = (ys - row0)[:, :, None, None] + span[:, None]
        pixel_cols = xs[:, :, None, None] + span[None, :]
        index = (pixel_rows * width + pixel_cols).ravel()
        block_weights = weights[:, None, None, None] * window
        numerator += np.bincount(
            index, weights=(block_weights * estimates).ravel(), minlength=size
        )
        denominator += np.bincount(
            index, weights=np.broadcast_to(block_weights, estimates.shape).ravel(), minlength=size
        )
    return row0, numerator.reshape(-1, width), denominator.reshape(-1, width)


def _run_stage(
    noisy: np.ndarray, pilot: np.ndarray, sigma: float, params: Bm3dParams, wiener: bool
) -> np.ndarray:
    height, width = noisy.shape
    block = min(params.block_size, height, width)
    ref_ys = reference_positions(height, block, params.step)
    ref_xs = reference_positions(width, block, params.step)
    bands: List = [
        dask.delayed(_filter_band)(
            noisy, pilot, ref_ys[i:i + BAND_ROWS], ref_xs, sigma, params, block, wiener
        )
        for i in range(0, len(ref_ys), BAND_ROWS)
    ]
    logger.debug(
        f"BM3D {'wiener' if wiener else 'hard-threshold'} stage: {len(ref_ys) * len(ref_xs)} "
        f"reference blocks in {len(bands)} bands on {params.workers} workers"
    )
    results = dask.compute(*bands, scheduler="threads", num_workers=params.workers)

    numerator = np.zeros_like(noisy)
    denominator = np.zeros_like(noisy)
    # summed in band order so the output does not depend on scheduling
    for row0, band_numerator, band_denominator in results:
        numerator[row0:row0 + band_numerator.shape[0]] += band_numerator
        denominator[row0:row0 + band_denominator.shape[0]] += band_denominator
    return numerator / denominator


def bm3d_denoise(
    noisy: np.ndarray, sigma: float, params: Optional[Bm3dParams] = None
) -> np.ndarray:
    """
    Denoise a plane corrupted by white Gaussian noise of standard deviation ``sigma``.

    ``sigma == 0`` returns the input unchanged.
    """
    if not sigma >= 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    noisy = as_plane(noisy)
    if sigma == 0:
        return noisy
    params = params or Bm3dParams()
    basic = _run_stage(noisy, noisy, sigma, params, wiener=False)
    return _run_stage(noisy, basic, sigma, params, wiener=True)
