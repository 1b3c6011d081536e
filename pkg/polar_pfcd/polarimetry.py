"""
Linear Stokes parameters and the polarization quantities derived from them.
"""
from dataclasses import dataclass
from typing import Dict, Mapping

import cv2
import numpy as np

from polar_pfcd.imagecore import ANGLES, ContractError, PolarizationStack, as_plane
from polar_pfcd.meta_types.params import MONO

S0_EPSILON = 1e-6
VALUE_PERCENTILE = 99


@dataclass(frozen=True, eq=False)
class StokesImage:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    def __post_init__(self):
        s0, s1, s2 = (as_plane(plane) for plane in (self.s0, self.s1, self.s2))
        if not s0.shape == s1.shape == s2.shape:
            raise ContractError("Stokes planes must share dimensions")
        # noise can push the total intensity slightly negative
        object.__setattr__(self, "s0", np.maximum(s0, 0.0))
        object.__setattr__(self, "s1", s1)
        object.__setattr__(self, "s2", s2)

    @property
    def shape(self):
        return self.s0.shape


def stokes_from_angles(angle_planes: Mapping[int, np.ndarray]) -> StokesImage:
    missing = [angle for angle in ANGLES if angle not in angle_planes]
    if missing:
        raise ContractError(f"Missing polarization angles {missing}")
    i0, i45, i90, i135 = (as_plane(angle_planes[angle]) for angle in ANGLES)
    if len({i0.shape, i45.shape, i90.shape, i135.shape}) != 1:
        raise ContractError("Angle planes must share dimensions")
    return StokesImage(s0=(i0 + i45 + i90 + i135) / 2.0, s1=i0 - i90, s2=i45 - i135)


def stokes_from_stack(stack: PolarizationStack, color: str = MONO) -> StokesImage:
    return stokes_from_angles(stack.angle_planes(color))


def angles_from_stokes(stokes: StokesImage) -> Dict[int, np.ndarray]:
    """Intensity behind an ideal linear polarizer at each angle (Malus's law)."""
    half_s0 = stokes.s0 / 2.0
    half_s1 = stokes.s1 / 2.0
    half_s2 = stokes.s2 / 2.0
    # exact cos/sin of 2*theta for the four analyzer angles
    return {
        0: half_s0 + half_s1,
        45: half_s0 + half_s2,
        90: half_s0 - half_s1,
        135: half_s0 - half_s2,
    }


def compute_dop(stokes: StokesImage) -> np.ndarray:
    """Degree of linear polarization in [0, 1]; 0 where S0 <= 1e-6."""
    polarized = np.hypot(stokes.s1, stokes.s2)
    valid = stokes.s0 > S0_EPSILON
    dop = np.divide(polarized, stokes.s0, out=np.zeros_like(polarized), where=valid)
    return np.clip(dop, 0.0, 1.0)


def compute_aop(stokes: StokesImage) -> np.ndarray:
    """Angle of linear polarization in degrees, in [0, 180)."""
    aop = np.degrees(0.5 * np.arctan2(stokes.s2, stokes.s1))
    aop = np.mod(aop, 180.0)
    # mod can round a tiny negative angle up to exactly 180
    return np.where(aop >= 180.0, 0.0, aop)


def render_aop_dop(aop: np.ndarray, dop: np.ndarray, s0: np.ndarray) -> np.ndarray:
    """
    AoP-DoP visualization as an 8-bit RGB image: hue follows the angle over
    its 180 degree period, saturation is the DoP and value is S0 scaled by
    its 99th percentile.
    """
    aop, dop, s0 = as_plane(aop), as_plane(dop), as_plane(s0)
    if not aop.shape == dop.shape == s0.shape:
        raise ContractError("AoP, DoP and S0 planes must share dimensions")
    scale = np.percentile(s0, VALUE_PERCENTILE)
    value = np.clip(s0 / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(s0)
    hsv = np.dstack(
        [np.mod(aop, 180.0) * 2.0, np.clip(dop, 0.0, 1.0), value]
    ).astype(np.float32)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
