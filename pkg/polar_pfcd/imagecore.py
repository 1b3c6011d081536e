"""
Image containers, sensor pattern descriptors and file I/O.

Planes are plain 2-D ``float64`` numpy arrays on a normalized scale where
full scale is 1.0. Containers (MosaicImage, PolarizationStack) copy their
planes and mark them read-only, so they can be shared between workers.
"""
import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import cv2
import fsspec
import numpy as np
from dacite import DaciteError, from_dict

from polar_pfcd.meta_types.dataset import PfiSidecar, SidecarChannel
from polar_pfcd.meta_types.params import MONO
from polar_pfcd.storage import filesystem_for_path

logger = logging.getLogger(__name__)

ANGLES = (0, 45, 90, 135)
COLORS = ("R", "G", "B")

MPFA = "mpfa"
BAYER = "bayer"
CPFA = "cpfa"

# rows of the 2x2 tile, matching the commercial monochrome polarization sensor
DEFAULT_MPFA_LAYOUT = ((90, 45), (135, 0))
DEFAULT_BAYER_LAYOUT = (("R", "G"), ("G", "B"))

PNG16 = "png16"
PFI_RAW = "pfi-raw"
PNG16_FULL_SCALE = 65535.0
PFI_SIDECAR_SUFFIX = ".json"
PFI_SAMPLE_TYPES = {"float32": "<f4", "float64": "<f8"}


class ContractError(ValueError):
    pass


class ImageIOError(OSError):
    pass


class ImageFormatError(ValueError):
    pass


class Channel(NamedTuple):
    angle: Optional[int]
    color: str = MONO


MPFA_CHANNELS = frozenset(Channel(angle, MONO) for angle in ANGLES)
CPFA_CHANNELS = frozenset(Channel(angle, color) for color in COLORS for angle in ANGLES)


def as_plane(samples) -> np.ndarray:
    plane = np.array(samples, dtype=np.float64)
    if plane.ndim != 2:
        raise ContractError(f"Expected a 2-D plane, got shape {plane.shape}")
    if plane.size == 0:
        raise ContractError("Planes must contain at least one sample")
    if not np.all(np.isfinite(plane)):
        raise ContractError("Planes must only contain finite samples")
    return plane


def _frozen(plane: np.ndarray) -> np.ndarray:
    plane = as_plane(plane)
    plane.setflags(write=False)
    return plane


def _check_same_shape(planes: Sequence[np.ndarray]):
    shapes = {np.shape(plane) for plane in planes}
    if len(shapes) != 1:
        raise ContractError(f"Planes must share dimensions, got {sorted(shapes)}")


@dataclass(frozen=True)
class PatternDescriptor:
    """Periodic tile mapping a pixel position to the channel it observes."""

    kind: str
    cells: Tuple[Tuple[Channel, ...], ...]

    def __post_init__(self):
        cells = tuple(tuple(Channel(*cell) for cell in row) for row in self.cells)
        object.__setattr__(self, "cells", cells)
        if len({len(row) for row in cells}) != 1:
            raise ContractError("Pattern tiles must be rectangular")
        if self.kind == MPFA:
            self._check_angle_block(cells, MONO)
        elif self.kind == BAYER:
            if (len(cells), len(cells[0])) != (2, 2):
                raise ContractError("Bayer tiles are 2x2")
            if sorted(cell.color for row in cells for cell in row) != ["B", "G", "G", "R"]:
                raise ContractError("Bayer tiles carry one R, two G and one B cell")
            if len({cell.angle for row in cells for cell in row}) != 1:
                raise ContractError("Bayer tiles belong to a single polarization angle")
        elif self.kind == CPFA:
            if (len(cells), len(cells[0])) != (4, 4):
                raise ContractError("CPFA tiles are 4x4")
            layout = None
            block_colors = []
            for by in (0, 2):
                for bx in (0, 2):
                    block = tuple(row[bx:bx + 2] for row in cells[by:by + 2])
                    color = block[0][0].color
                    self._check_angle_block(block, color)
                    angles = tuple(tuple(cell.angle for cell in row) for row in block)
                    if layout is not None and angles != layout:
                        raise ContractError("CPFA blocks must share one angle layout")
                    layout = angles
                    block_colors.append(color)
            if sorted(block_colors) != ["B", "G", "G", "R"]:
                raise ContractError("CPFA color blocks must form a Bayer arrangement")
        else:
            raise ContractError(f"Unsupported pattern kind {self.kind!r}")

    @staticmethod
    def _check_angle_block(block, color):
        if (len(block), len(block[0])) != (2, 2):
            raise ContractError("Polarization tiles are 2x2")
        if any(cell.color != color for row in block for cell in row):
            raise ContractError("A polarization tile carries a single color")
        if sorted(cell.angle for row in block for cell in row) != list(ANGLES):
            raise ContractError(f"A polarization tile must hold each of the angles {ANGLES}")

    @classmethod
    def mpfa(cls, layout: Sequence[Sequence[int]] = DEFAULT_MPFA_LAYOUT) -> "PatternDescriptor":
        return cls(MPFA, tuple(tuple(Channel(angle, MONO) for angle in row) for row in layout))

    @classmethod
    def bayer(
        cls, angle: Optional[int] = None, layout: Sequence[Sequence[str]] = DEFAULT_BAYER_LAYOUT
    ) -> "PatternDescriptor":
        return cls(BAYER, tuple(tuple(Channel(angle, color) for color in row) for row in layout))

    @classmethod
    def cpfa(
        cls,
        angle_layout: Sequence[Sequence[int]] = DEFAULT_MPFA_LAYOUT,
        color_layout: Sequence[Sequence[str]] = DEFAULT_BAYER_LAYOUT,
    ) -> "PatternDescriptor":
        cells = tuple(
            tuple(
                Channel(angle_layout[y % 2][x % 2], color_layout[y // 2][x // 2])
                for x in range(4)
            )
            for y in range(4)
        )
        return cls(CPFA, cells)

    @property
    def tile_height(self) -> int:
        return len(self.cells)

    @property
    def tile_width(self) -> int:
        return len(self.cells[0])

    @property
    def channels(self) -> Tuple[Channel, ...]:
        seen = []
        for row in self.cells:
            for cell in row:
                if cell not in seen:
                    seen.append(cell)
        return tuple(seen)

    @property
    def angle_layout(self) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        """Angles of the top-left 2x2 polarization block."""
        if self.kind == BAYER:
            raise ContractError("Bayer tiles have no angle layout")
        return tuple(tuple(cell.angle for cell in row[:2]) for row in self.cells[:2])

    @property
    def color_layout(self) -> Tuple[Tuple[str, str], Tuple[str, str]]:
        if self.kind == BAYER:
            return tuple(tuple(cell.color for cell in row) for row in self.cells)
        if self.kind == CPFA:
            return tuple(tuple(self.cells[y][x].color for x in (0, 2)) for y in (0, 2))
        raise ContractError("Monochrome tiles have no color layout")

    def channel_at(self, y: int, x: int) -> Channel:
        return self.cells[y % self.tile_height][x % self.tile_width]

    def offsets(self, channel: Channel) -> List[Tuple[int, int]]:
        return [
            (y, x)
            for y, row in enumerate(self.cells)
            for x, cell in enumerate(row)
            if cell == channel
        ]

    def mask(self, channel: Channel, height: int, width: int) -> np.ndarray:
        mask = np.zeros((height, width), dtype=bool)
        for y, x in self.offsets(channel):
            mask[y::self.tile_height, x::self.tile_width] = True
        return mask

    def transpose(self) -> "PatternDescriptor":
        return PatternDescriptor(self.kind, tuple(zip(*self.cells)))


@dataclass(frozen=True, eq=False)
class MosaicImage:
    plane: np.ndarray
    pattern: PatternDescriptor

    def __post_init__(self):
        plane = _frozen(self.plane)
        height, width = plane.shape
        if height % self.pattern.tile_height or width % self.pattern.tile_width:
            raise ContractError(
                f"A {self.pattern.kind} mosaic needs dimensions that are multiples of "
                f"{self.pattern.tile_height}x{self.pattern.tile_width}, got {height}x{width}"
            )
        object.__setattr__(self, "plane", plane)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.plane.shape

    def with_plane(self, plane: np.ndarray) -> "MosaicImage":
        return MosaicImage(plane, self.pattern)

    def transpose(self) -> "MosaicImage":
        return MosaicImage(self.plane.T, self.pattern.transpose())


@dataclass(frozen=True, eq=False)
class PolarizationStack:
    """Full-resolution planes indexed by (angle, color): 4 monochrome or 12 color planes."""

    planes: Mapping[Channel, np.ndarray]

    def __post_init__(self):
        planes = {Channel(*key): _frozen(plane) for key, plane in self.planes.items()}
        _check_same_shape(list(planes.values()))
        if set(planes) not in (MPFA_CHANNELS, CPFA_CHANNELS):
            raise ContractError(
                f"A stack holds either {len(MPFA_CHANNELS)} monochrome or "
                f"{len(CPFA_CHANNELS)} color planes, got {sorted(planes)}"
            )
        object.__setattr__(self, "planes", planes)

    @classmethod
    def from_angles(cls, angle_planes: Mapping[int, np.ndarray]) -> "PolarizationStack":
        return cls({Channel(angle, MONO): plane for angle, plane in angle_planes.items()})

    @classmethod
    def from_colors(
        cls, color_planes: Mapping[str, Mapping[int, np.ndarray]]
    ) -> "PolarizationStack":
        return cls(
            {
                Channel(angle, color): plane
                for color, angle_planes in color_planes.items()
                for angle, plane in angle_planes.items()
            }
        )

    @property
    def is_color(self) -> bool:
        return set(self.planes) == CPFA_CHANNELS

    @property
    def colors(self) -> Tuple[str, ...]:
        return COLORS if self.is_color else (MONO,)

    @property
    def channels(self) -> Tuple[Channel, ...]:
        return tuple(Channel(angle, color) for color in self.colors for angle in ANGLES)

    @property
    def shape(self) -> Tuple[int, int]:
        return next(iter(self.planes.values())).shape

    def plane(self, angle: int, color: str = MONO) -> np.ndarray:
        try:
            return self.planes[Channel(angle, color)]
        except KeyError:
            raise ContractError(f"Stack has no plane for angle={angle} color={color}")

    def angle_planes(self, color: str = MONO) -> Dict[int, np.ndarray]:
        return {angle: self.plane(angle, color) for angle in ANGLES}

    def select_color(self, color: str) -> "PolarizationStack":
        return PolarizationStack.from_angles(self.angle_planes(color))

    def map(self, func) -> "PolarizationStack":
        return PolarizationStack({ch: func(ch, plane) for ch, plane in self.planes.items()})


def _read_bytes(path: str, fs: Optional[fsspec.AbstractFileSystem]) -> bytes:
    fs = fs or filesystem_for_path(path)
    try:
        with fs.open(path, "rb") as handle:
            return handle.read()
    except OSError as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e


def _write_bytes(path: str, data: bytes, fs: Optional[fsspec.AbstractFileSystem]):
    fs = fs or filesystem_for_path(path)
    try:
        with fs.open(path, "wb") as handle:
            handle.write(data)
    except OSError as e:
        raise ImageIOError(f"Cannot write {path}: {e}") from e


def _read_pfi(path: str, fs) -> Tuple[PfiSidecar, np.ndarray]:
    sidecar_path = path + PFI_SIDECAR_SUFFIX
    try:
        sidecar = from_dict(
            data_class=PfiSidecar, data=json.loads(_read_bytes(sidecar_path, fs))
        )
    except (ValueError, DaciteError) as e:
        raise ImageFormatError(f"Invalid sidecar {sidecar_path}: {e}") from e
    dtype = np.dtype(PFI_SAMPLE_TYPES[sidecar.sample_format])
    data = _read_bytes(path, fs)
    if len(data) % dtype.itemsize:
        raise ImageFormatError(f"{path} is not a whole number of {sidecar.sample_format} samples")
    payload = np.frombuffer(data, dtype=dtype)
    expected = sidecar.width * sidecar.height * len(sidecar.channels)
    if payload.size != expected or not sidecar.channels:
        raise ImageFormatError(
            f"{path} holds {payload.size} samples, sidecar declares {expected}"
        )
    planes = payload.astype(np.float64).reshape(
        len(sidecar.channels), sidecar.height, sidecar.width
    )
    if not np.all(np.isfinite(planes)):
        raise ImageFormatError(f"{path} contains non-finite samples")
    return sidecar, planes


def _write_pfi(path: str, planes: Sequence[np.ndarray], channels: Sequence[Channel], fs):
    height, width = planes[0].shape
    sidecar = PfiSidecar(
        width=width,
        height=height,
        channels=[SidecarChannel(angle=ch.angle, color=ch.color) for ch in channels],
    )
    samples = np.stack(planes)
    # float32 unless that would round a sample
    if not np.array_equal(samples.astype("<f4"), samples):
        sidecar.sample_format = "float64"
    payload = samples.astype(PFI_SAMPLE_TYPES[sidecar.sample_format]).tobytes()
    fields = asdict(sidecar)
    if sidecar.sample_format == "float32":
        del fields["sample_format"]
    _write_bytes(path, payload, fs)
    _write_bytes(path + PFI_SIDECAR_SUFFIX, json.dumps(fields).encode(), fs)


def load_plane(path: str, format: str = PNG16, fs=None) -> np.ndarray:
    """
    Read a single plane, normalized by the format's full scale.

    Parameters
    ----------
    path : str
        Local path or fsspec URL (``s3://``, ``abfs://``)
    format : str
        ``png16`` (single-channel 16-bit PNG) or ``pfi-raw`` (little-endian float32
        payload, float64 when the sidecar declares it, with a ``.json`` sidecar)
    """
    if format == PNG16:
        data = np.frombuffer(_read_bytes(path, fs), dtype=np.uint8)
        image = cv2.imdecode(data, cv2.IMREAD_UNCHANGED)
        if image is None:
            raise ImageFormatError(f"{path} is not a decodable PNG")
        if image.dtype != np.uint16 or image.ndim != 2:
            raise ImageFormatError(
                f"{path} must be single-channel 16-bit, got {image.dtype} {image.shape}"
            )
        return image.astype(np.float64) / PNG16_FULL_SCALE
    elif format == PFI_RAW:
        sidecar, planes = _read_pfi(path, fs)
        if len(sidecar.channels) != 1:
            raise ImageFormatError(f"{path} holds {len(sidecar.channels)} planes, expected one")
        return planes[0]
    else:
        raise ContractError(f"Unsupported plane format {format!r}")


def store_plane(
    plane: np.ndarray,
    path: str,
    format: str = PNG16,
    fs=None,
    channel: Optional[Channel] = None,
):
    """Write a plane; png16 clamps to [0, 1] before quantizing, pfi-raw is lossless."""
    plane = as_plane(plane)
    if format == PNG16:
        quantized = np.round(np.clip(plane, 0.0, 1.0) * PNG16_FULL_SCALE).astype(np.uint16)
        ok, encoded = cv2.imencode(".png", quantized)
        if not ok:
            raise ImageFormatError(f"PNG encoding failed for {path}")
        _write_bytes(path, encoded.tobytes(), fs)
    elif format == PFI_RAW:
        _write_pfi(path, [plane], [channel or Channel(None, MONO)], fs)
    else:
        raise ContractError(f"Unsupported plane format {format!r}")
    logger.debug(f"Stored {plane.shape} plane to {path} ({format})")


def load_stack(path: str, fs=None) -> PolarizationStack:
    sidecar, planes = _read_pfi(path, fs)
    channels = [Channel(ch.angle, ch.color) for ch in sidecar.channels]
    try:
        return PolarizationStack(dict(zip(channels, planes)))
    except ContractError as e:
        raise ImageFormatError(f"{path}: {e}") from e


def store_stack(stack: PolarizationStack, path: str, fs=None):
    channels = stack.channels
    _write_pfi(path, [stack.planes[ch] for ch in channels], channels, fs)


def store_rgb_png(rgb: np.ndarray, path: str, fs=None):
    """Write an 8-bit RGB image (H, W, 3) as PNG."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractError(f"Expected an (H, W, 3) image, got {rgb.shape}")
    ok, encoded = cv2.imencode(".png", cv2.cvtColor(rgb.astype(np.uint8), cv2.COLOR_RGB2BGR))
    if not ok:
        raise ImageFormatError(f"PNG encoding failed for {path}")
    _write_bytes(path, encoded.tobytes(), fs)


def load_rgb_frame(path: str, fs=None) -> np.ndarray:
    """Read a 16-bit RGB PNG (one camera frame) as a normalized (H, W, 3) array."""
    data = np.frombuffer(_read_bytes(path, fs), dtype=np.uint8)
    image = cv2.imdecode(data, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ImageFormatError(f"{path} is not a decodable PNG")
    if image.dtype != np.uint16 or image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"{path} must be 16-bit RGB, got {image.dtype} {image.shape}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float64) / PNG16_FULL_SCALE


def store_rgb_frame(rgb: np.ndarray, path: str, fs=None):
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractError(f"Expected an (H, W, 3) frame, got {rgb.shape}")
    quantized = np.round(np.clip(rgb, 0.0, 1.0) * PNG16_FULL_SCALE).astype(np.uint16)
    ok, encoded = cv2.imencode(".png", cv2.cvtColor(quantized, cv2.COLOR_RGB2BGR))
    if not ok:
        raise ImageFormatError(f"PNG encoding failed for {path}")
    _write_bytes(path, encoded.tobytes(), fs)
