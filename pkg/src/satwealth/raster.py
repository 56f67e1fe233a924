"""Multi-band georeferenced tiles: compositing, upsampling and pan-sharpening.

Tiles keep every band at its native resolution. Resampling onto the common
15 m grid only happens when a tile is turned into a network input
(:func:`stack_to_tensor`), so the per-band resolution is never lost.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write as _atomic_write
from .errors import (
    DimensionMismatch,
    EmptyStack,
    IncongruentTiles,
    InvalidFactor,
    MissingInputError,
    NegativeRadiance,
    UnknownBand,
    ValidationError,
)

BASE_RESOLUTION = 15
VALID_RESOLUTIONS = (15, 30, 60)
FILL_VALUE = 0.0
BROVEY_EPS = 1e-12
STD_FLOOR = 1e-6
TILE_PIXELS = 64
TILE_EXTENT_M = TILE_PIXELS * BASE_RESOLUTION


@dataclass(frozen=True)
class BandInfo:
    band_id: int
    native_resolution: int
    description: str = ""

    def __post_init__(self):
        if self.native_resolution not in VALID_RESOLUTIONS:
            raise ValidationError(
                f"band {self.band_id}: resolution {self.native_resolution} m not in {VALID_RESOLUTIONS}"
            )

    @property
    def upsample_factor(self) -> int:
        return self.native_resolution // BASE_RESOLUTION


# Landsat 7 ETM+ layout, both thermal gains kept.
LANDSAT7_BANDS = (
    BandInfo(0, 30, "blue"),
    BandInfo(1, 30, "green"),
    BandInfo(2, 30, "red"),
    BandInfo(3, 30, "nir"),
    BandInfo(4, 30, "swir1"),
    BandInfo(5, 60, "thermal low gain"),
    BandInfo(6, 60, "thermal high gain"),
    BandInfo(7, 30, "swir2"),
    BandInfo(8, 15, "panchromatic"),
)
RED, GREEN, BLUE, PAN = 2, 1, 0, 8
RGB_BAND_IDS = (RED, GREEN, BLUE)
# Network channel order: RGB first so the first-layer weight transfer lines up.
ALL_BAND_IDS = (RED, GREEN, BLUE, 3, 4, 5, 6, 7, PAN)
BAND_SELECTIONS = {"rgb": RGB_BAND_IDS, "all": ALL_BAND_IDS}


@dataclass
class RasterTile:
    origin: tuple[float, float]
    bands: list[BandInfo]
    pixels: list[np.ndarray]
    mask: list[np.ndarray]
    extent_m: float = TILE_EXTENT_M
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.bands) == len(self.pixels) == len(self.mask)):
            raise DimensionMismatch("bands, pixels and mask lengths differ")
        for band, grid, valid in zip(self.bands, self.pixels, self.mask):
            side = self.extent_m / band.native_resolution
            if grid.ndim != 2 or grid.shape != (side, side):
                raise DimensionMismatch(
                    f"band {band.band_id}: grid {grid.shape} does not cover {self.extent_m} m "
                    f"at {band.native_resolution} m/px"
                )
            if valid.shape != grid.shape:
                raise DimensionMismatch(f"band {band.band_id}: mask shape {valid.shape} != {grid.shape}")
            if not np.all(np.isfinite(grid[valid])):
                raise ValidationError(f"band {band.band_id}: non-finite values under a valid mask")

    def band_index(self, band_id: int) -> int:
        for i, band in enumerate(self.bands):
            if band.band_id == band_id:
                return i
        raise UnknownBand(f"band {band_id} not present in tile")

    def valid_fraction(self) -> float:
        total = sum(m.size for m in self.mask)
        return sum(int(m.sum()) for m in self.mask) / total

    def congruent_with(self, other: "RasterTile") -> bool:
        return (
            tuple(self.origin) == tuple(other.origin)
            and self.extent_m == other.extent_m
            and list(self.bands) == list(other.bands)
            and all(a.shape == b.shape for a, b in zip(self.pixels, other.pixels))
        )


@dataclass
class ObservationStack:
    tiles: list[RasterTile]
    timestamps: list[str]

    def __post_init__(self):
        if len(self.tiles) != len(self.timestamps):
            raise ValidationError("one timestamp per tile required")


def median_composite(stack: ObservationStack) -> RasterTile:
    """Per-pixel median of the valid (cloud-free) observations.

    Even counts take the mean of the two central order statistics. Pixels with
    no valid observation get ``FILL_VALUE`` and a false mask.
    """
    if not stack.tiles:
        raise EmptyStack("observation stack is empty")
    first = stack.tiles[0]
    for tile in stack.tiles[1:]:
        if not first.congruent_with(tile):
            raise IncongruentTiles("tiles differ in geometry or band layout")

    pixels, masks = [], []
    for b in range(len(first.bands)):
        obs = np.stack([t.pixels[b] for t in stack.tiles]).astype(np.float64)
        valid = np.stack([t.mask[b] for t in stack.tiles])
        # NaN sorts last, so the first `count` entries are the valid values.
        ordered = np.sort(np.where(valid, obs, np.nan), axis=0)
        count = valid.sum(axis=0)
        lo = np.clip((count - 1) // 2, 0, None)
        hi = count // 2
        a = np.take_along_axis(ordered, lo[None], axis=0)[0]
        c = np.take_along_axis(ordered, np.minimum(hi, len(stack.tiles) - 1)[None], axis=0)[0]
        med = 0.5 * (a + c)
        any_valid = count > 0
        med = np.where(any_valid, med, FILL_VALUE)
        pixels.append(med.astype(first.pixels[b].dtype))
        masks.append(any_valid)
    return RasterTile(first.origin, list(first.bands), pixels, masks, first.extent_m, dict(first.meta))


def nn_upsample(grid: np.ndarray, factor: int) -> np.ndarray:
    """Replace every pixel with a ``factor`` x ``factor`` block of itself."""
    if factor not in (1, 2, 4):
        raise InvalidFactor(f"upsampling factor must be 1, 2 or 4, got {factor}")
    grid = np.asarray(grid)
    if factor == 1:
        return grid.copy()
    return np.repeat(np.repeat(grid, factor, axis=-2), factor, axis=-1)


def pan_sharpen(rgb: Sequence[np.ndarray], pan: np.ndarray) -> list[np.ndarray]:
    """Brovey transform of three 30 m colour grids against a 15 m pan grid."""
    if len(rgb) != 3:
        raise DimensionMismatch("exactly three colour grids required")
    pan = np.asarray(pan, dtype=np.float64)
    rgb = [np.asarray(c, dtype=np.float64) for c in rgb]
    for c in rgb:
        if c.shape != rgb[0].shape:
            raise DimensionMismatch("colour grids differ in shape")
    if pan.shape != (2 * rgb[0].shape[0], 2 * rgb[0].shape[1]):
        raise DimensionMismatch(f"pan grid {pan.shape} must be twice the colour grid {rgb[0].shape}")
    if (pan < 0).any() or any((c < 0).any() for c in rgb):
        raise NegativeRadiance("radiance values must be non-negative")

    up = [nn_upsample(c, 2) for c in rgb]
    intensity = (up[0] + up[1] + up[2]) / 3.0
    ratio = pan / np.maximum(intensity, BROVEY_EPS)
    return [c * ratio for c in up]


def sharpen_tile(tile: RasterTile) -> RasterTile:
    """Return a copy of ``tile`` whose RGB bands are pan-sharpened to 15 m."""
    idx = [tile.band_index(b) for b in RGB_BAND_IDS]
    p = tile.band_index(PAN)
    sharp = pan_sharpen([tile.pixels[i] for i in idx], tile.pixels[p])

    bands, pixels, mask = list(tile.bands), list(tile.pixels), list(tile.mask)
    for i, grid in zip(idx, sharp):
        old = bands[i]
        bands[i] = BandInfo(old.band_id, BASE_RESOLUTION, f"{old.description} (pan-sharpened)")
        pixels[i] = grid.astype(tile.pixels[i].dtype)
        mask[i] = nn_upsample(tile.mask[i], 2) & tile.mask[p]
    return replace(tile, bands=bands, pixels=pixels, mask=mask, meta=dict(tile.meta))


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray]) -> "ChannelStats":
        """Per-channel mean and (floored) standard deviation over ``tensors``."""
        data = np.stack([np.asarray(t, dtype=np.float64) for t in tensors])
        mean = data.mean(axis=(0, 2, 3))
        std = np.maximum(data.std(axis=(0, 2, 3)), STD_FLOOR)
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def apply(self, tensor: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=tensor.dtype)[:, None, None]
        std = np.asarray(self.std, dtype=tensor.dtype)[:, None, None]
        return (tensor - mean) / std


def band_selection_ids(selection: str) -> tuple[int, ...]:
    try:
        return BAND_SELECTIONS[selection]
    except KeyError:
        raise ValidationError(f"band selection must be one of {sorted(BAND_SELECTIONS)}") from None


def channel_dilations(tile: RasterTile, selection: str) -> list[int]:
    """Dilation rate per network channel: native resolution over 15 m."""
    return [tile.bands[tile.band_index(b)].upsample_factor for b in band_selection_ids(selection)]


def stack_to_tensor(tile: RasterTile, selection: str = "all", stats: ChannelStats | None = None,
                    dtype=np.float64) -> np.ndarray:
    """Upsample the selected bands to 15 m and stack them as ``[C, H, W]``.

    ``stats`` standardizes each channel; pass ``None`` for raw values.
    """
    channels = []
    for band_id in band_selection_ids(selection):
        i = tile.band_index(band_id)
        channels.append(nn_upsample(tile.pixels[i].astype(dtype), tile.bands[i].upsample_factor))
    tensor = np.stack(channels)
    if stats is not None:
        if len(stats.mean) != tensor.shape[0]:
            raise DimensionMismatch(f"stats cover {len(stats.mean)} channels, tensor has {tensor.shape[0]}")
        tensor = stats.apply(tensor)
    return tensor


# on-disk format ---------------------------------------------------------

def _stem(path: str | os.PathLike) -> Path:
    path = Path(path)
    for suffix in (".f32", ".hdr.json", ".mask"):
        if path.name.endswith(suffix):
            return path.with_name(path.name[: -len(suffix)])
    return path


def tile_files(path: str | os.PathLike) -> tuple[Path, Path, Path]:
    stem = _stem(path)
    return (stem.with_name(stem.name + ".f32"), stem.with_name(stem.name + ".hdr.json"),
            stem.with_name(stem.name + ".mask"))


def write_tile(path: str | os.PathLike, tile: RasterTile) -> list[Path]:
    """Write ``<stem>.f32``, ``<stem>.hdr.json`` and ``<stem>.mask``.

    Pixels are little-endian float32, band-major then row-major. The mask is
    bit-packed (MSB first) in the same order, 1 = valid.
    """
    data_path, hdr_path, mask_path = tile_files(path)
    blob = b"".join(np.ascontiguousarray(g, dtype="<f4").tobytes() for g in tile.pixels)
    bits = np.concatenate([m.astype(bool).ravel() for m in tile.mask])
    header = {
        "origin": [float(tile.origin[0]), float(tile.origin[1])],
        "extent_m": float(tile.extent_m),
        "bands": [
            {"band_id": b.band_id, "native_resolution": b.native_resolution, "description": b.description,
             "rows": int(g.shape[0]), "cols": int(g.shape[1])}
            for b, g in zip(tile.bands, tile.pixels)
        ],
        "dtype": "<f4",
        "mask_encoding": "packbits-msb",
        "mask_bits": int(bits.size),
        "meta": tile.meta,
    }
    _atomic_write(data_path, blob)
    _atomic_write(mask_path, np.packbits(bits).tobytes())
    _atomic_write(hdr_path, json.dumps(header, indent=1, sort_keys=True) + "\n")
    return [data_path, hdr_path, mask_path]


def read_tile(path: str | os.PathLike) -> RasterTile:
    data_path, hdr_path, mask_path = tile_files(path)
    for p in (data_path, hdr_path, mask_path):
        if not p.exists():
            raise MissingInputError(f"missing tile file {p}")
    header = json.loads(hdr_path.read_text())
    raw = np.frombuffer(data_path.read_bytes(), dtype="<f4")
    bits = np.unpackbits(np.frombuffer(mask_path.read_bytes(), dtype=np.uint8))[: header["mask_bits"]]
    bands, pixels, mask = [], [], []
    offset = 0
    for b in header["bands"]:
        n = b["rows"] * b["cols"]
        if offset + n > raw.size:
            raise DimensionMismatch(f"{data_path}: truncated pixel data")
        bands.append(BandInfo(b["band_id"], b["native_resolution"], b["description"]))
        pixels.append(raw[offset: offset + n].reshape(b["rows"], b["cols"]).astype(np.float32))
        mask.append(bits[offset: offset + n].reshape(b["rows"], b["cols"]).astype(bool))
        offset += n
    if offset != raw.size:
        raise DimensionMismatch(f"{data_path}: {raw.size - offset} trailing values")
    return RasterTile(tuple(header["origin"]), bands, pixels, mask, header["extent_m"], header.get("meta", {}))


def write_stack(directory: str | os.PathLike, stack: ObservationStack) -> list[Path]:
    directory = Path(directory)
    written = []
    for k, tile in enumerate(stack.tiles):
        written += write_tile(directory / f"obs_{k:03d}", tile)
    index = directory / "stack.json"
    _atomic_write(index, json.dumps({"timestamps": stack.timestamps}, indent=1) + "\n")
    return written + [index]


def read_stack(directory: str | os.PathLike) -> ObservationStack:
    directory = Path(directory)
    index = directory / "stack.json"
    if not index.exists():
        raise MissingInputError(f"no stack.json in {directory}")
    timestamps = json.loads(index.read_text())["timestamps"]
    tiles = [read_tile(directory / f"obs_{k:03d}") for k in range(len(timestamps))]
    return ObservationStack(tiles, timestamps)
