"""
Quality measures for reconstructed polarization images and the tables built from them.

All measures exclude a border of ``border`` pixels on every side. PSNR of
identical images is ``math.inf`` and is written as ``identical`` in CSV
reports.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import fsspec
import numpy as np
import pandas as pd

from polar_pfcd.imagecore import ANGLES, ContractError, PolarizationStack, as_plane
from polar_pfcd.polarimetry import compute_aop, compute_dop, stokes_from_stack
from polar_pfcd.storage import filesystem_for_path

logger = logging.getLogger(__name__)

DEFAULT_BORDER = 4
IDENTICAL = "identical"
QUANTITIES = ("I0", "I45", "I90", "I135", "S0", "S1", "S2", "DoP")
AOP_ERROR = "AoP_err"
KEY_COLUMNS = ("scene", "method", "noise_level")
REPORT_COLUMNS = KEY_COLUMNS + QUANTITIES + (AOP_ERROR,)

# published scores of denoise-then-demosaick on the High noise condition
PUBLISHED_REFERENCE = {
    "mpfa": {
        "I0": 40.01,
        "I45": 38.90,
        "I90": 40.09,
        "I135": 38.96,
        "S0": 41.18,
        "S1": 47.13,
        "S2": 43.69,
        "DoP": 34.31,
        AOP_ERROR: 30.24,
    },
    "cpfa": {
        "I0": 33.71,
        "I45": 33.33,
        "I90": 33.72,
        "I135": 33.42,
        "S0": 35.04,
        "S1": 41.12,
        "S2": 39.52,
        "DoP": 29.91,
        AOP_ERROR: 37.97,
    },
}


@dataclass
class EvalReport:
    scene: str
    method: str
    noise_level: str
    scores: Dict[str, float] = field(default_factory=dict)
    aop_error: float = math.nan

    def as_row(self) -> Dict:
        row = {"scene": self.scene, "method": self.method, "noise_level": self.noise_level}
        row.update({quantity: self.scores[quantity] for quantity in QUANTITIES})
        row[AOP_ERROR] = self.aop_error
        return row


def _crop(plane: np.ndarray, border: int) -> np.ndarray:
    if border < 0:
        raise ContractError(f"border must be >= 0, got {border}")
    height, width = plane.shape
    if height <= 2 * border or width <= 2 * border:
        raise ContractError(f"A {height}x{width} plane leaves nothing inside a {border}px border")
    return plane[border:height - border, border:width - border]


def _paired(ref, test, border: int):
    ref, test = as_plane(ref), as_plane(test)
    if ref.shape != test.shape:
        raise ContractError(f"Reference {ref.shape} and test {test.shape} differ in size")
    return _crop(ref, border), _crop(test, border)


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def psnr(
    ref: np.ndarray, test: np.ndarray, peak: float = 1.0, border: int = DEFAULT_BORDER
) -> float:
    if not peak > 0:
        raise ContractError(f"peak must be > 0, got {peak}")
    ref, test = _paired(ref, test, border)
    return _psnr_from_mse(float(np.mean((ref - test) ** 2)), peak)


def cpsnr(
    ref: Sequence[np.ndarray],
    test: Sequence[np.ndarray],
    peak: float = 1.0,
    border: int = DEFAULT_BORDER,
) -> float:
    """PSNR with the squared error pooled over the three color planes."""
    if not peak > 0:
        raise ContractError(f"peak must be > 0, got {peak}")
    if len(ref) != 3 or len(test) != 3:
        raise ContractError(f"CPSNR compares RGB triplets, got {len(ref)} and {len(test)} planes")
    errors = [np.mean((r - t) ** 2) for r, t in (_paired(r, t, border) for r, t in zip(ref, test))]
    return _psnr_from_mse(float(np.mean(errors)), peak)


def _angle_squared_errors(ref_aop, test_aop, border: int, mask=None) -> np.ndarray:
    ref, test = _paired(ref_aop, test_aop, border)
    for name, angles in (("reference", ref), ("test", test)):
        if np.any(angles < 0) or np.any(angles >= 180):
            raise ContractError(f"{name} AoP values must lie in [0, 180)")
    difference = np.abs(ref - test)
    difference = np.minimum(difference, 180.0 - difference)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != np.shape(ref_aop):
            raise ContractError(f"Mask {mask.shape} does not match AoP {np.shape(ref_aop)}")
        return difference[_crop(mask, border)] ** 2
    return difference.ravel() ** 2


def angle_rmse(
    ref_aop: np.ndarray,
    test_aop: np.ndarray,
    border: int = DEFAULT_BORDER,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Root mean square of the circular (period 180 degree) difference."""
    errors = _angle_squared_errors(ref_aop, test_aop, border, mask)
    if errors.size == 0:
        raise ContractError("No pixels left to compare angles on")
    return float(np.sqrt(np.mean(errors)))


def _quantity_planes(stack: PolarizationStack, color: str) -> Dict[str, np.ndarray]:
    stokes = stokes_from_stack(stack, color)
    planes = {f"I{angle}": stack.plane(angle, color) for angle in ANGLES}
    planes.update({"S0": stokes.s0, "S1": stokes.s1, "S2": stokes.s2, "DoP": compute_dop(stokes)})
    planes["AoP"] = compute_aop(stokes)
    return planes


def evaluate(
    gt: PolarizationStack,
    test: PolarizationStack,
    scene: str,
    method: str,
    noise_level: str,
    border: int = DEFAULT_BORDER,
    peak: float = 1.0,
    dop_threshold: Optional[float] = None,
) -> EvalReport:
    """
    Score a reconstruction against ground truth.

    Monochrome stacks get a PSNR per quantity. Color stacks get a CPSNR over
    the three colors per quantity and an AoP error pooled over the colors.
    With ``dop_threshold`` the AoP error only counts pixels whose
    ground-truth DoP exceeds it.
    """
    if gt.shape != test.shape:
        raise ContractError(f"Ground truth {gt.shape} and reconstruction {test.shape} differ")
    if gt.is_color != test.is_color:
        raise ContractError("Cannot compare a color stack with a monochrome one")
    gt_planes = {color: _quantity_planes(gt, color) for color in gt.colors}
    test_planes = {color: _quantity_planes(test, color) for color in gt.colors}

    scores = {}
    for quantity in QUANTITIES:
        refs = [gt_planes[color][quantity] for color in gt.colors]
        tests = [test_planes[color][quantity] for color in gt.colors]
        if gt.is_color:
            scores[quantity] = cpsnr(refs, tests, peak, border)
        else:
            scores[quantity] = psnr(refs[0], tests[0], peak, border)

    angle_errors = []
    for color in gt.colors:
        mask = None
        if dop_threshold is not None:
            mask = gt_planes[color]["DoP"] > dop_threshold
        angle_errors.append(
            _angle_squared_errors(gt_planes[color]["AoP"], test_planes[color]["AoP"], border, mask)
        )
    pooled = np.concatenate(angle_errors)
    if pooled.size == 0:
        raise ContractError(f"No pixels above DoP threshold {dop_threshold} in scene {scene}")
    report = EvalReport(scene, method, noise_level, scores, float(np.sqrt(np.mean(pooled))))
    logger.debug(
        f"Evaluated {method} on {scene}: S0 {scores['S0']:.2f} dB, AoP {report.aop_error:.2f}"
    )
    return report


def reports_to_frame(reports: Iterable[EvalReport]) -> pd.DataFrame:
    rows = [report.as_row() for report in reports]
    frame = pd.DataFrame(rows, columns=list(REPORT_COLUMNS))
    return frame.sort_values(list(KEY_COLUMNS), kind="stable").reset_index(drop=True)


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean of every score over scenes, per method and noise level."""
    columns = list(QUANTITIES) + [AOP_ERROR]
    frame = frame.astype({column: float for column in columns})
    summary = frame.groupby(["method", "noise_level"], sort=True)[columns].mean()
    counts = frame.groupby(["method", "noise_level"], sort=True)["scene"].count()
    summary.insert(0, "scenes", counts)
    return summary.reset_index()


def compare_to_reference(
    summary: pd.DataFrame, reference: Mapping[str, float], method: Optional[str] = None
) -> pd.DataFrame:
    """Per-quantity differences between summarized scores and published ones."""
    rows: List[Dict] = []
    selected = summary if method is None else summary[summary["method"] == method]
    for _, row in selected.iterrows():
        for quantity, published in reference.items():
            measured = float(row[quantity])
            rows.append(
                {
                    "method": row["method"],
                    "noise_level": row["noise_level"],
                    "quantity": quantity,
                    "measured": measured,
                    "published": published,
                    "delta": measured - published,
                }
            )
    return pd.DataFrame(
        rows, columns=["method", "noise_level", "quantity", "measured", "published", "delta"]
    )


def _format_score(value) -> str:
    if value == math.inf:
        return IDENTICAL
    return f"{value:.4f}"


def write_report_csv(
    frame: pd.DataFrame, path: str, fs: Optional[fsspec.AbstractFileSystem] = None
):
    """Write a report or summary table; scores get four decimals, infinite PSNR ``identical``."""
    fs = fs or filesystem_for_path(path)
    formatted = frame.copy()
    for column in formatted.columns:
        if pd.api.types.is_float_dtype(formatted[column]):
            formatted[column] = formatted[column].map(_format_score)
    with fs.open(path, "w") as handle:
        formatted.to_csv(handle, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
