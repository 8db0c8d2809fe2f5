"""Tiling, cleaning, normalization and serialization of 71-channel samples.

A TilePatch carries 4 optical + 3 SAR channels plus a 64-D embedding
(71 channels total when the embedding is broadcast). Conditions for the
generator are 65-channel tensors: 64 spatially constant embedding planes
plus one incidence plane normalized to [-1, 1].

Tile files: magic "HYE1", version u16, H/W u32, geo_id, valid flag, f32
little-endian payload (optical, sar, embedding), trailing CRC32. Writes
are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    TileChecksumError,
    TileMagicError,
    TileTruncatedError,
    TileVersionError,
)
from .sar_sim import EMBED_DIM, INCIDENCE_RANGE

NO_DATA = -9999.0
TILE_MAGIC = b"HYE1"
TILE_VERSION = 1
DB_WINDOW = (-25.0, 0.0)

OPTICAL_CHANNELS = 4
SAR_CHANNELS = 3
TOTAL_CHANNELS = OPTICAL_CHANNELS + SAR_CHANNELS + EMBED_DIM  # 71


def _tile_is_valid(sar: np.ndarray, embedding: np.ndarray) -> bool:
    return not np.all(sar == NO_DATA) and bool(np.all(np.isfinite(embedding)))


@dataclass
class TilePatch:
    optical: np.ndarray   # (4, H, W) float32
    sar: np.ndarray       # (3, H, W) float32: VV dB, VH dB, incidence deg
    embedding: np.ndarray  # (64,) float32
    geo_id: str
    valid: bool = field(default=None)  # derived when not supplied

    def __post_init__(self):
        if self.optical.shape[0] != OPTICAL_CHANNELS:
            raise DataError(f"expected {OPTICAL_CHANNELS} optical channels")
        if self.sar.shape[0] != SAR_CHANNELS:
            raise DataError(f"expected {SAR_CHANNELS} sar channels")
        if self.sar.shape[1:] != self.optical.shape[1:]:
            raise DataError("optical and sar spatial sizes disagree")
        if self.embedding.shape != (EMBED_DIM,):
            raise DataError(f"embedding must have {EMBED_DIM} components")
        if self.valid is None:
            self.valid = _tile_is_valid(self.sar, self.embedding)

    @property
    def size(self) -> int:
        return self.sar.shape[1]

    def channel_count(self) -> int:
        return self.optical.shape[0] + self.sar.shape[0] + self.embedding.shape[0]


@dataclass
class ConditionTensor:
    """(65, H, W): broadcast embedding planes + normalized incidence plane."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != EMBED_DIM + 1:
            raise DataError(f"condition must have {EMBED_DIM + 1} channels")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class RasterStack:
    """Scene-level rasters plus a per-tile embedding source."""

    optical: np.ndarray  # (4, H, W)
    sar: np.ndarray      # (3, H, W)
    embedding_fn: Callable[[int, int, int], np.ndarray]  # (row0, col0, size)
    geo_id: str


def sliding_window(stack: RasterStack, size: int, stride: int) -> List[TilePatch]:
    """Windows at offsets (i*stride, j*stride) fully inside the raster."""
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    h, w = stack.sar.shape[1:]
    if size > h or size > w:
        warnings.warn(f"window {size} larger than raster {h}x{w}; no tiles emitted")
        return []
    patches = []
    for i in range((h - size) // stride + 1):
        for j in range((w - size) // stride + 1):
            r0, c0 = i * stride, j * stride
            emb = np.asarray(stack.embedding_fn(r0, c0, size), dtype=np.float32)
            patches.append(TilePatch(
                optical=np.ascontiguousarray(
                    stack.optical[:, r0:r0 + size, c0:c0 + size], dtype=np.float32),
                sar=np.ascontiguousarray(
                    stack.sar[:, r0:r0 + size, c0:c0 + size], dtype=np.float32),
                embedding=emb,
                geo_id=f"{stack.geo_id}_r{r0}_c{c0}",
            ))
    return patches


def window_count(h: int, w: int, size: int, stride: int) -> int:
    if size > h or size > w:
        return 0
    return ((h - size) // stride + 1) * ((w - size) // stride + 1)


def clean(patches: Sequence[TilePatch]) -> List[TilePatch]:
    """Drop patches whose SAR payload is entirely no-data or whose embedding
    has any non-finite component; everything else is retained."""
    kept = []
    for p in patches:
        if _tile_is_valid(p.sar, p.embedding):
            p.valid = True
            kept.append(p)
    return kept


def build_condition(embedding: np.ndarray, incidence_deg_map: np.ndarray,
                    theta_min: float = INCIDENCE_RANGE[0],
                    theta_max: float = INCIDENCE_RANGE[1]) -> ConditionTensor:
    """Broadcast the embedding spatially; map incidence affinely to [-1, 1]."""
    if theta_min >= theta_max:
        raise ConfigurationError("need theta_min < theta_max")
    embedding = np.asarray(embedding, dtype=np.float32)
    if embedding.shape != (EMBED_DIM,):
        raise DataError(f"embedding must have {EMBED_DIM} components")
    theta = np.clip(np.asarray(incidence_deg_map, dtype=np.float32),
                    theta_min, theta_max)
    norm = 2.0 * (theta - theta_min) / (theta_max - theta_min) - 1.0
    h, w = norm.shape
    planes = np.broadcast_to(embedding[:, None, None], (EMBED_DIM, h, w))
    data = np.concatenate([planes, norm[None]], axis=0).astype(np.float32)
    return ConditionTensor(data=data)


def normalize_sar(sar_db: np.ndarray, db_window: Tuple[float, float] = DB_WINDOW) -> np.ndarray:
    """Clamp to the dB window then map affinely to [-1, 1]."""
    low, high = db_window
    if low >= high:
        raise ConfigurationError("degenerate dB window")
    x = np.clip(np.asarray(sar_db, dtype=np.float32), low, high)
    return (2.0 * (x - low) / (high - low) - 1.0).astype(np.float32)


def denormalize_sar(norm: np.ndarray, db_window: Tuple[float, float] = DB_WINDOW) -> np.ndarray:
    low, high = db_window
    if low >= high:
        raise ConfigurationError("degenerate dB window")
    return (low + (np.asarray(norm, dtype=np.float32) + 1.0) * 0.5 * (high - low)).astype(np.float32)


# ----------------------------------------------------------------------
# tile files
# ----------------------------------------------------------------------


def write_tile(patch: TilePatch, path) -> None:
    path = Path(path)
    h, w = patch.sar.shape[1:]
    geo = patch.geo_id.encode("utf-8")
    buf = bytearray()
    buf += TILE_MAGIC
    buf += struct.pack("<H", TILE_VERSION)
    buf += struct.pack("<II", h, w)
    buf += struct.pack("<H", len(geo)) + geo
    buf += struct.pack("<B", 1 if patch.valid else 0)
    buf += patch.optical.astype("<f4").tobytes()
    buf += patch.sar.astype("<f4").tobytes()
    buf += patch.embedding.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def read_tile(path) -> TilePatch:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != TILE_MAGIC:
        raise TileMagicError(f"{path}: not a tile file")
    if len(raw) < 16:
        raise TileTruncatedError(f"{path}: header incomplete")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != TILE_VERSION:
        raise TileVersionError(f"{path}: unsupported tile version {version}")
    h, w = struct.unpack_from("<II", raw, 6)
    (geo_len,) = struct.unpack_from("<H", raw, 14)
    off = 16
    geo_end = off + geo_len
    payload_len = 4 * (OPTICAL_CHANNELS + SAR_CHANNELS) * h * w + 4 * EMBED_DIM
    total = geo_end + 1 + payload_len + 4
    if len(raw) < total:
        raise TileTruncatedError(f"{path}: expected {total} bytes, found {len(raw)}")
    (crc_stored,) = struct.unpack_from("<I", raw, total - 4)
    if zlib.crc32(raw[: total - 4]) != crc_stored:
        raise TileChecksumError(f"{path}: CRC mismatch")
    geo_id = raw[off:geo_end].decode("utf-8")
    valid = bool(raw[geo_end])
    cursor = geo_end + 1
    n_opt = OPTICAL_CHANNELS * h * w
    n_sar = SAR_CHANNELS * h * w
    flat = np.frombuffer(raw, dtype="<f4", count=n_opt + n_sar + EMBED_DIM,
                         offset=cursor)
    optical = flat[:n_opt].reshape(OPTICAL_CHANNELS, h, w).copy()
    sar = flat[n_opt:n_opt + n_sar].reshape(SAR_CHANNELS, h, w).copy()
    embedding = flat[n_opt + n_sar:].copy()
    return TilePatch(optical=optical, sar=sar, embedding=embedding,
                     geo_id=geo_id, valid=valid)


# ----------------------------------------------------------------------
# embedding rasters and manifests
# ----------------------------------------------------------------------


def ingest_embedding_raster(path, size: int, stride: int,
                            fmt: str = "npy") -> List[Tuple[Tuple[int, int], np.ndarray]]:
    """Per-tile footprint means of a (64, H, W) embedding raster.

    Non-finite means are passed through (flagged later by clean()); a wrong
    band count is a format error.
    """
    if fmt != "npy":
        raise DataError(f"unsupported embedding raster format {fmt!r}")
    bands = np.load(path)
    if bands.ndim != 3 or bands.shape[0] != EMBED_DIM:
        raise DataError(
            f"embedding raster must have {EMBED_DIM} bands, found "
            f"{bands.shape[0] if bands.ndim == 3 else 'non-3d data'}"
        )
    h, w = bands.shape[1:]
    out = []
    for i in range((h - size) // stride + 1):
        for j in range((w - size) // stride + 1):
            r0, c0 = i * stride, j * stride
            tile = bands[:, r0:r0 + size, c0:c0 + size]
            out.append(((r0, c0), tile.mean(axis=(1, 2)).astype(np.float32)))
    return out


def write_manifest(entries: Sequence[dict], path) -> None:
    """One JSON record per line: path, geo_id, valid, class mix summary."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> List[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def manifest_entry(patch: TilePatch, path: str) -> dict:
    frac = {}
    emb = patch.embedding
    if np.all(np.isfinite(emb[:5])):
        from .sar_sim import CLASSES

        frac = {c: round(float(emb[i]), 4) for i, c in enumerate(CLASSES)}
    return {"path": str(path), "geo_id": patch.geo_id,
            "valid": bool(patch.valid), "class_mix": frac}
