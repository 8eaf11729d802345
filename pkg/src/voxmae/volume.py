"""Dense voxel grids: windowing, patch extraction, and a bit-exact file format.

Arrays are (D, H, W) float32 in C order, so the x index varies fastest.
Spacing is (sz, sy, sx) in mm. A volume holds either raw HU values or
normalized intensities in [0, 1]; the ``normalized`` flag tracks which.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import VolumeFormatError

MAGIC = b"VXMA"
FORMAT_VERSION = 1
_FLAG_NORMALIZED = 0x1


@dataclass
class Volume:
    """A dense 3D scalar grid with physical spacing."""

    values: np.ndarray  # (D, H, W) float32
    spacing: tuple[float, float, float]  # (sz, sy, sx) mm
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"volume values must be 3D, got shape {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive mm values, got {self.spacing}")
        if self.normalized:
            lo, hi = float(self.values.min()), float(self.values.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"normalized volume has values outside [0, 1]: [{lo}, {hi}]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def copy(self) -> "Volume":
        return Volume(self.values.copy(), self.spacing, self.normalized)


@dataclass
class Patch:
    """A cubic sub-volume remembering where it came from.

    ``origin`` is the (z, y, x) voxel index of the patch corner in the
    parent volume; it may be negative when the patch was clamp-padded.
    """

    origin: tuple[int, int, int]
    size: int
    volume: Volume = field(repr=False)

    def __post_init__(self):
        if self.volume.dims != (self.size, self.size, self.size):
            raise ValueError(
                f"patch volume dims {self.volume.dims} do not match size {self.size}"
            )

    @property
    def values(self) -> np.ndarray:
        return self.volume.values


@dataclass(frozen=True)
class WindowSpec:
    """HU window for intensity normalization."""

    hu_min: float = -1024.0
    hu_max: float = 3071.0

    def __post_init__(self):
        if not self.hu_min < self.hu_max:
            raise ValueError(f"hu_min must be < hu_max, got [{self.hu_min}, {self.hu_max}]")


def window_normalize(vol: Volume, window: WindowSpec) -> Volume:
    """Clamp HU values to the window and map them linearly onto [0, 1]."""
    if vol.normalized:
        raise ValueError("volume is already normalized")
    span = window.hu_max - window.hu_min
    out = np.clip((vol.values - window.hu_min) / span, 0.0, 1.0).astype(np.float32)
    return Volume(out, vol.spacing, normalized=True)


def extract_patch(vol: Volume, center: tuple[int, int, int], size: int) -> Patch:
    """Extract the cubic patch of edge ``size`` centered on a voxel index.

    The patch spans ``center - size//2`` to ``center - size//2 + size`` per
    axis. Out-of-bounds reads are clamp-padded (edge replication), which
    keeps normalized vessel patches free of artificial air-like borders.
    """
    if size < 1:
        raise ValueError(f"patch size must be >= 1, got {size}")
    dims = vol.dims
    center = tuple(int(c) for c in center)
    for c, d in zip(center, dims):
        if not 0 <= c < d:
            raise ValueError(f"patch center {center} outside volume dims {dims}")
    origin = tuple(c - size // 2 for c in center)
    idx = [np.clip(np.arange(o, o + size), 0, d - 1) for o, d in zip(origin, dims)]
    values = vol.values[np.ix_(*idx)]
    patch_vol = Volume(values.copy(), vol.spacing, vol.normalized)
    return Patch(origin=origin, size=size, volume=patch_vol)


def save_volume(vol: Volume, path) -> None:
    """Write a volume in the VXMA binary format (little-endian, f32 payload)."""
    d, h, w = vol.dims
    flags = _FLAG_NORMALIZED if vol.normalized else 0
    header = MAGIC + struct.pack(
        "<HHIIIfff", FORMAT_VERSION, flags, d, h, w, *vol.spacing
    )
    payload = np.ascontiguousarray(vol.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_volume(path) -> Volume:
    """Read a VXMA file back; inverse of :func:`save_volume`, bit-exact."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, not a VXMA volume file")
    header_size = 4 + struct.calcsize("<HHIIIfff")
    if len(data) < header_size:
        raise VolumeFormatError(f"{path}: truncated header")
    version, flags, d, h, w, sz, sy, sx = struct.unpack(
        "<HHIIIfff", data[4:header_size]
    )
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    n = d * h * w
    payload = data[header_size:]
    if len(payload) != 4 * n:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload) // 4} values, header dims "
            f"({d}, {h}, {w}) require {n}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).copy()
    return Volume(values, (sz, sy, sx), normalized=bool(flags & _FLAG_NORMALIZED))
