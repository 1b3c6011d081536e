from dataclasses import dataclass
from typing import Dict, List, Literal, Optional

from polar_pfcd.meta_types.params import NoiseProfile

GT_ROLE = "gt"
roles = Literal["gt", "noisy-low", "noisy-medium", "noisy-high"]
formats = Literal["png16", "pfi-raw"]
# plane: one (angle, color) image; stack: a multi-plane pfi-raw stack; mosaic: a raw sensor plane
entry_kinds = Literal["plane", "stack", "mosaic"]
colors = Literal["R", "G", "B", "mono"]
sample_formats = Literal["float32", "float64"]


@dataclass
class NoiseCondition:
    name: Literal["Low", "Medium", "High"]
    analog_gain_db: float
    digital_gain: float
    shutter: str
    sigma: Dict[str, float]

    def __post_init__(self):
        if any(value < 0 for value in self.sigma.values()):
            raise ValueError(f"Negative noise level in condition {self.name}")

    @property
    def role(self) -> str:
        return f"noisy-{self.name.lower()}"

    def profile(self, pattern: str) -> NoiseProfile:
        if pattern == "cpfa":
            return NoiseProfile.cpfa(self.sigma["R"], self.sigma["G"], self.sigma["B"])
        # monochrome data is built from the green channel
        return NoiseProfile.mpfa(self.sigma["G"])


@dataclass
class SidecarChannel:
    angle: Optional[int] = None
    color: colors = "mono"


@dataclass
class PfiSidecar:
    width: int
    height: int
    channels: List[SidecarChannel]
    sample_format: sample_formats = "float32"


@dataclass
class ManifestEntry:
    file: str
    scene: str
    role: roles
    angle: Optional[int] = None
    color: colors = "mono"
    format: formats = "png16"
    kind: entry_kinds = "plane"


@dataclass
class Manifest:
    root: str
    entries: List[ManifestEntry]
    pattern: Optional[Literal["mpfa", "cpfa"]] = None

    def scenes(self) -> List[str]:
        return sorted({entry.scene for entry in self.entries})

    def select(self, scene: str, role: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.scene == scene and e.role == role]
