from dataclasses import dataclass, field
from typing import Dict, Optional

MONO = "mono"
ANGLE_KEYS = ("0", "45", "90", "135")
COLOR_KEYS = ("R", "G", "B")


@dataclass
class NoiseProfile:
    """
    Noise standard deviation per channel label, in normalized intensity units.

    Keys are color names ("R", "G", "B"), angle names ("0", "45", "90", "135")
    or "mono" as a fallback for every monochrome channel.
    """

    sigma: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for label, value in self.sigma.items():
            if label not in COLOR_KEYS + ANGLE_KEYS + (MONO,):
                raise ValueError(f"Unknown noise channel label {label!r}")
            if not value >= 0 or value == float("inf"):
                raise ValueError(f"Noise level for {label!r} must be finite and >= 0, got {value}")

    @classmethod
    def mpfa(cls, sigma: float) -> "NoiseProfile":
        return cls(sigma={MONO: sigma})

    @classmethod
    def cpfa(cls, sigma_r: float, sigma_g: float, sigma_b: float) -> "NoiseProfile":
        return cls(sigma={"R": sigma_r, "G": sigma_g, "B": sigma_b})

    def sigma_for(self, angle: Optional[int], color: str = MONO) -> float:
        if color != MONO and color in self.sigma:
            return self.sigma[color]
        if angle is not None and str(angle) in self.sigma:
            return self.sigma[str(angle)]
        if MONO in self.sigma:
            return self.sigma[MONO]
        raise KeyError(f"No noise level for angle={angle} color={color}")

    def is_zero(self) -> bool:
        return all(value == 0 for value in self.sigma.values())


@dataclass
class Bm3dParams:
    block_size: int = 8
    step: int = 3
    search_radius: int = 19
    max_blocks_hard: int = 16
    max_blocks_wiener: int = 32
    lambda_hard: float = 2.7
    # mean squared block distance, normalized intensity units
    tau_match_hard: float = 3000.0 / 255.0**2
    tau_match_wiener: float = 400.0 / 255.0**2
    kaiser_beta: float = 2.0
    workers: int = 1

    def __post_init__(self):
        if self.block_size < 4:
            raise ValueError("block_size must be >= 4")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")
        for count in (self.max_blocks_hard, self.max_blocks_wiener):
            if count < 1 or count & (count - 1):
                raise ValueError(f"matched block counts must be powers of two, got {count}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class GuidedFilterParams:
    radius: int = 2
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class DemosaicParams:
    polarization: GuidedFilterParams = field(default_factory=GuidedFilterParams)
    bayer: GuidedFilterParams = field(
        default_factory=lambda: GuidedFilterParams(radius=2, epsilon=1e-5)
    )
    iterations: int = 1
    cpfa_full_resolution: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
