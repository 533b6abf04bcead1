"""Shared data model: image tensors, patch tiling, and seeded random streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Literal

import numpy as np


class PUQError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(PUQError, ValueError):
    pass


class DataError(PUQError):
    """Malformed or inconsistent on-disk data."""


class ConfigError(PUQError, ValueError):
    pass


@dataclass(frozen=True)
class ImageTensor:
    """Channel-last image. ``data`` is stored as an (h, w, c) float64 array."""

    height: int
    width: int
    channels: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ShapeError("image dimensions must be positive")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != self.height * self.width * self.channels:
            raise ShapeError(
                f"data has {arr.size} values, expected "
                f"{self.height}x{self.width}x{self.channels}"
            )
        arr = arr.reshape(self.height, self.width, self.channels)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def dim(self) -> int:
        return self.height * self.width * self.channels

    @classmethod
    def from_array(cls, arr) -> "ImageTensor":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeError(f"expected (h, w) or (h, w, c) array, got {arr.shape}")
        return cls(*arr.shape, data=arr)

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


def flatten(image: ImageTensor) -> np.ndarray:
    """Row-major, channel-fastest flattening to a length-d vector."""
    return image.data.reshape(-1).copy()


def unflatten(vector, shape: tuple[int, int, int]) -> ImageTensor:
    vector = np.asarray(vector, dtype=np.float64)
    h, w, c = shape
    if vector.ndim != 1 or vector.size != h * w * c:
        raise ShapeError(f"vector of length {vector.size} does not match shape {shape}")
    return ImageTensor(h, w, c, vector)


@dataclass(frozen=True)
class PatchSpec:
    patch_h: int = 1
    patch_w: int = 1
    mode: Literal["local-tiling", "global"] = "global"

    def __post_init__(self):
        if self.mode not in ("local-tiling", "global"):
            raise ConfigError(f"unknown patch mode {self.mode!r}")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ConfigError("patch sizes must be positive")

    def tile_size(self, shape: tuple[int, int, int]) -> tuple[int, int]:
        h, w, _ = shape
        if self.mode == "global":
            return h, w
        if h % self.patch_h or w % self.patch_w:
            raise ShapeError(
                f"{self.patch_h}x{self.patch_w} tiles do not divide a {h}x{w} image"
            )
        return self.patch_h, self.patch_w

    def grid_shape(self, shape: tuple[int, int, int]) -> tuple[int, int]:
        ph, pw = self.tile_size(shape)
        return shape[0] // ph, shape[1] // pw

    def n_tiles(self, shape) -> int:
        gh, gw = self.grid_shape(shape)
        return gh * gw

    def patch_dim(self, shape) -> int:
        ph, pw = self.tile_size(shape)
        return ph * pw * shape[2]


def tile_batch(arr: np.ndarray, shape: tuple[int, int, int], spec: PatchSpec) -> np.ndarray:
    """Split flattened images ``(..., d)`` into tiles ``(..., n_tiles, patch_dim)``.

    Tiles come out in row-major tile order, each flattened channel-last.
    """
    h, w, c = shape
    ph, pw = spec.tile_size(shape)
    gh, gw = h // ph, w // pw
    lead = arr.shape[:-1]
    x = arr.reshape(*lead, gh, ph, gw, pw, c)
    n = len(lead)
    axes = list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4]
    return x.transpose(axes).reshape(*lead, gh * gw, ph * pw * c)


def untile_batch(tiles: np.ndarray, shape: tuple[int, int, int], spec: PatchSpec) -> np.ndarray:
    h, w, c = shape
    ph, pw = spec.tile_size(shape)
    gh, gw = h // ph, w // pw
    lead = tiles.shape[:-2]
    x = tiles.reshape(*lead, gh, gw, ph, pw, c)
    n = len(lead)
    axes = list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4]
    return x.transpose(axes).reshape(*lead, h * w * c)


def extract_patches(image: ImageTensor, spec: PatchSpec) -> list[np.ndarray]:
    tiles = tile_batch(flatten(image), image.shape, spec)
    return [t.copy() for t in tiles]


def reassemble(patches, shape: tuple[int, int, int], spec: PatchSpec) -> ImageTensor:
    tiles = np.asarray(patches, dtype=np.float64)
    if tiles.shape != (spec.n_tiles(shape), spec.patch_dim(shape)):
        raise ShapeError(f"patch array {tiles.shape} does not match {shape} / {spec}")
    return unflatten(untile_batch(tiles, shape, spec), shape)


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def derive_stream(seed: SeedSpec | int, instance: int, tag: str) -> np.random.Generator:
    """Independent generator for the (master seed, instance, tag) triple."""
    master = seed.master_seed if isinstance(seed, SeedSpec) else int(seed)
    ss = np.random.SeedSequence(entropy=master, spawn_key=(int(instance), _tag_key(tag)))
    return np.random.Generator(np.random.PCG64(ss))
