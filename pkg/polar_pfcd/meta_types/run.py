from dataclasses import dataclass, field
from typing import List, Literal, Optional

from polar_pfcd.meta_types.params import Bm3dParams, DemosaicParams, NoiseProfile

DEMOSAICK_ONLY = "demosaick-only"
DEMOSAICK_THEN_DENOISE = "demosaick-then-denoise"
DENOISE_THEN_DEMOSAICK = "denoise-then-demosaick"
pipelines = Literal["demosaick-only", "demosaick-then-denoise", "denoise-then-demosaick"]

MPFA_PATTERN = "mpfa"
CPFA_PATTERN = "cpfa"
patterns = Literal["mpfa", "cpfa"]

IGRI2_DEMOSAICKER = "igri2"
BILINEAR_DEMOSAICKER = "bilinear"
demosaickers = Literal["igri2", "bilinear"]

FILE_PROTOCOL = "file"
S3_PROTOCOL = "s3"
ABFS_PROTOCOL = "abfs"
protocols = Literal["file", "s3", "abfs"]


@dataclass
class StorageOptions:
    # names of the secrets (environment variables) holding credentials
    key: Optional[str] = None
    secret: Optional[str] = None


@dataclass
class Endpoint:
    protocol: protocols = FILE_PROTOCOL
    storage_options: Optional[StorageOptions] = None


@dataclass
class RunConfig:
    pipeline: pipelines = DENOISE_THEN_DEMOSAICK
    pattern: patterns = MPFA_PATTERN
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    bm3d: Bm3dParams = field(default_factory=Bm3dParams)
    demosaic: DemosaicParams = field(default_factory=DemosaicParams)
    demosaicker: demosaickers = IGRI2_DEMOSAICKER
    name: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None
    seed: int = 0
    threads: Optional[int] = None
    mpfa_layout: Optional[List[List[int]]] = None

    def __post_init__(self):
        if self.input is not None and self.input == self.output:
            raise ValueError("input and output paths must be distinct")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def method(self) -> str:
        if self.name:
            return self.name
        return f"{self.pipeline}:{self.demosaicker}"


@dataclass
class BenchConfig:
    configs: List[RunConfig]
    border: int = 4
    peak: float = 1.0
    dop_threshold: Optional[float] = None
    storage: Optional[Endpoint] = None
