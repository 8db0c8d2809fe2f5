"""Synthetic SAR ground truth: procedural terrain, land-cover-driven backscatter,
side-looking geometry (layover brightening, ray-cast shadow), multiplicative
gamma speckle, and deterministic 64-D pseudo-embeddings.

Geometry convention: the radar looks along +x (image columns) at incidence
``theta`` from vertical. All intensities are linear power; use to_db/from_db
at the boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DataError

CLASSES = ("water", "vegetation", "farmland", "urban", "bare")
INCIDENCE_RANGE = (29.0, 46.0)
EMBED_DIM = 64
PIXEL_SPACING_M = 10.0
NOISE_FLOOR_DB = -30.0

# channel ordering of the optical layer (blue, green, red, near-infrared)
_OPTICAL_REFLECTANCE = {
    "water": (0.06, 0.08, 0.05, 0.02),
    "vegetation": (0.04, 0.08, 0.05, 0.45),
    "farmland": (0.07, 0.12, 0.10, 0.35),
    "urban": (0.18, 0.18, 0.18, 0.22),
    "bare": (0.20, 0.25, 0.28, 0.30),
}


@dataclass
class BackscatterTable:
    """Mean backscatter per land-cover class, in dB. Only the ordering
    (water darkest, urban brightest) is contractual; values are plausible
    C-band figures."""

    mean_db: Dict[str, float] = field(default_factory=lambda: {
        "water": -22.0,
        "vegetation": -11.0,
        "farmland": -9.0,
        "urban": -3.0,
        "bare": -14.0,
    })

    def __post_init__(self):
        missing = set(CLASSES) - set(self.mean_db)
        if missing:
            raise ConfigurationError(f"backscatter table missing classes: {missing}")
        if not self.mean_db["water"] < self.mean_db["vegetation"]:
            raise ConfigurationError("water must be darker than vegetation")
        if max(self.mean_db, key=self.mean_db.get) != "urban":
            raise ConfigurationError("urban must be the brightest class")

    def as_array(self) -> np.ndarray:
        return np.array([self.mean_db[c] for c in CLASSES], dtype=np.float64)


@dataclass
class SceneTruth:
    dem: np.ndarray          # (H, W) float32 metres
    landcover: np.ndarray    # (H, W) int8, indices into CLASSES
    incidence_deg: float
    looks: int
    seed: int

    def __post_init__(self):
        if self.landcover.min() < 0 or self.landcover.max() >= len(CLASSES):
            raise DataError("landcover values outside the class set")
        lo, hi = INCIDENCE_RANGE
        if not (lo <= self.incidence_deg <= hi):
            raise ConfigurationError(
                f"incidence {self.incidence_deg} outside sensor range [{lo}, {hi}]"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.dem.shape


def _smooth_field(rng: np.random.Generator, size: int, exponent: float) -> np.ndarray:
    """Random field with 1/f^exponent spectrum (spectral synthesis)."""
    white = rng.standard_normal((size, size))
    spec = np.fft.fft2(white)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    radius[0, 0] = 1.0
    spec *= radius ** (-exponent)
    spec[0, 0] = 0.0
    out = np.fft.ifft2(spec).real
    out /= max(out.std(), 1e-12)
    return out


def generate_scene(seed: int, size: int, terrain_roughness: float = 1.0,
                   class_mix: Optional[Dict[str, float]] = None,
                   incidence_deg: Optional[float] = None,
                   looks: int = 1) -> SceneTruth:
    """Deterministic procedural scene: fBm-like DEM plus quantile-thresholded
    smooth land-cover honoring ``class_mix`` fractions."""
    if class_mix is None:
        class_mix = {"water": 0.2, "vegetation": 0.3, "farmland": 0.2,
                     "urban": 0.15, "bare": 0.15}
    unknown = set(class_mix) - set(CLASSES)
    if unknown:
        raise ConfigurationError(f"unknown land-cover classes: {unknown}")
    total = sum(class_mix.values())
    if abs(total - 1.0) > 1e-6:
        raise ConfigurationError(f"class_mix fractions sum to {total}, expected 1")
    if looks < 1:
        raise ConfigurationError("looks must be >= 1")

    rng = np.random.default_rng(seed)
    relief_m = 300.0 * terrain_roughness
    dem = _smooth_field(rng, size, exponent=1.8)
    dem = (dem - dem.min()) * (relief_m / max(dem.max() - dem.min(), 1e-12))

    cover_field = _smooth_field(rng, size, exponent=2.2)
    fractions = np.array([class_mix.get(c, 0.0) for c in CLASSES])
    landcover = np.zeros((size, size), dtype=np.int8)
    # quantile bins: realized fractions match requests up to pixel rounding
    order = np.argsort(cover_field.reshape(-1), kind="stable")
    counts = np.floor(fractions * size * size).astype(int)
    counts[np.argmax(fractions)] += size * size - counts.sum()
    flat = landcover.reshape(-1)
    start = 0
    for ci, cnt in enumerate(counts):
        flat[order[start:start + cnt]] = ci
        start += cnt

    if incidence_deg is None:
        incidence_deg = float(rng.uniform(*INCIDENCE_RANGE))
    return SceneTruth(dem=dem.astype(np.float32), landcover=landcover,
                      incidence_deg=incidence_deg, looks=looks, seed=seed)


def speckle(clean_intensity: np.ndarray, looks: int,
            rng: np.random.Generator) -> np.ndarray:
    """Fully developed multiplicative speckle: Gamma(L, sigma0/L) per pixel."""
    if looks < 1:
        raise ConfigurationError("looks must be >= 1")
    clean = np.asarray(clean_intensity, dtype=np.float64)
    if np.any(clean <= 0.0):
        raise DataError("speckle requires strictly positive intensity")
    return rng.gamma(shape=float(looks), scale=clean / looks).astype(np.float64)


def local_incidence_deg(dem: np.ndarray, incidence_deg: float,
                        pixel_spacing_m: float = PIXEL_SPACING_M) -> np.ndarray:
    """Local incidence from range-direction terrain slope, clipped to [0, 90]."""
    slope = np.gradient(dem.astype(np.float64), pixel_spacing_m, axis=1)
    slope_deg = np.degrees(np.arctan(slope))
    return np.clip(incidence_deg - slope_deg, 0.0, 90.0)


def shadow_mask(dem: np.ndarray, incidence_deg: float,
                pixel_spacing_m: float = PIXEL_SPACING_M) -> np.ndarray:
    """True where terrain occludes the radar ray (marching along +x)."""
    h, w = dem.shape
    drop = pixel_spacing_m / math.tan(math.radians(incidence_deg))
    mask = np.zeros((h, w), dtype=bool)
    level = dem[:, 0].astype(np.float64).copy()
    for x in range(1, w):
        level -= drop
        col = dem[:, x]
        mask[:, x] = col < level
        np.maximum(level, col, out=level)
    return mask


def render_sar(scene: SceneTruth, table: Optional[BackscatterTable] = None,
               rng: Optional[np.random.Generator] = None,
               pixel_spacing_m: float = PIXEL_SPACING_M) -> np.ndarray:
    """Linear-power VV intensity: class backscatter, slope modulation
    cos(theta_loc)/cos(theta), shadow at the noise floor, gamma speckle."""
    if table is None:
        table = BackscatterTable()
    if rng is None:
        rng = np.random.default_rng(scene.seed + 1)
    clean = _clean_intensity(scene, table, pixel_spacing_m)
    return speckle(clean, scene.looks, rng)


def _clean_intensity(scene: SceneTruth, table: BackscatterTable,
                     pixel_spacing_m: float = PIXEL_SPACING_M) -> np.ndarray:
    sigma0 = from_db(table.as_array()[scene.landcover])
    theta_loc = local_incidence_deg(scene.dem, scene.incidence_deg, pixel_spacing_m)
    factor = np.cos(np.radians(np.clip(theta_loc, 0.0, 89.0))) \
        / math.cos(math.radians(scene.incidence_deg))
    intensity = sigma0 * factor
    floor = from_db(NOISE_FLOOR_DB)
    shadowed = shadow_mask(scene.dem, scene.incidence_deg, pixel_spacing_m) \
        | (theta_loc >= 90.0)
    intensity[shadowed] = floor
    return np.maximum(intensity, floor)


def render_sar_stack(scene: SceneTruth, table: Optional[BackscatterTable] = None,
                     rng: Optional[np.random.Generator] = None,
                     vh_offset_db: float = -7.0,
                     pixel_spacing_m: float = PIXEL_SPACING_M) -> np.ndarray:
    """(3, H, W) stack: VV dB, VH dB (fixed offset, independent speckle),
    local incidence in degrees."""
    if table is None:
        table = BackscatterTable()
    if rng is None:
        rng = np.random.default_rng(scene.seed + 1)
    clean = _clean_intensity(scene, table, pixel_spacing_m)
    vv = speckle(clean, scene.looks, rng)
    vh = speckle(clean * from_db(vh_offset_db), scene.looks, rng)
    theta_loc = local_incidence_deg(scene.dem, scene.incidence_deg, pixel_spacing_m)
    return np.stack([to_db(vv), to_db(vh), theta_loc]).astype(np.float32)


def render_optical(scene: SceneTruth, rng: Optional[np.random.Generator] = None,
                   texture_sigma: float = 0.01) -> np.ndarray:
    """(4, H, W) blue/green/red/NIR reflectance stand-in; carried for
    alignment checks only, never consumed by the generator."""
    if rng is None:
        rng = np.random.default_rng(scene.seed + 2)
    base = np.array([_OPTICAL_REFLECTANCE[c] for c in CLASSES], dtype=np.float64)
    img = base[scene.landcover].transpose(2, 0, 1)
    img = img + texture_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@lru_cache(maxsize=8)
def _projection_matrix(seed: int, rows: int, cols: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((rows, cols))


def _dem_spectrum(dem_tile: np.ndarray, bands: int = 8) -> np.ndarray:
    power = np.abs(np.fft.fft2(dem_tile.astype(np.float64))) ** 2
    size = dem_tile.shape[0]
    fy = np.fft.fftfreq(dem_tile.shape[0])[:, None]
    fx = np.fft.fftfreq(dem_tile.shape[1])[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    edges = np.linspace(0.0, 0.5 * math.sqrt(2.0), bands + 1)
    out = np.empty(bands)
    for b in range(bands):
        sel = (radius >= edges[b]) & (radius < edges[b + 1])
        out[b] = power[sel].mean() if np.any(sel) else 0.0
    out = np.log1p(out / (size * size))
    return out / (1.0 + out)  # bounded [0, 1)


def synth_embedding(scene: SceneTruth, tile_coord: Tuple[int, int, int],
                    projection_seed: int = 0) -> np.ndarray:
    """Deterministic 64-vector over a (row0, col0, size) tile footprint.

    Layout: [0:5] class fractions, [5:8] DEM mean/std/range (normalized),
    [8:10] incidence encoding, [10:64] tanh of a fixed random projection of
    the class histogram and DEM power spectrum. All components in [-1, 1].
    """
    r0, c0, size = tile_coord
    h, w = scene.shape
    if not (0 <= r0 and r0 + size <= h and 0 <= c0 and c0 + size <= w):
        raise DataError(f"tile {tile_coord} outside scene of shape {scene.shape}")
    dem = scene.dem[r0:r0 + size, c0:c0 + size]
    cover = scene.landcover[r0:r0 + size, c0:c0 + size]

    emb = np.zeros(EMBED_DIM)
    frac = np.bincount(cover.reshape(-1), minlength=len(CLASSES)) / cover.size
    emb[0:5] = frac
    emb[5] = np.clip(dem.mean() / 1000.0, -1.0, 1.0)
    emb[6] = np.clip(dem.std() / 200.0, -1.0, 1.0)
    emb[7] = np.clip((dem.max() - dem.min()) / 500.0, -1.0, 1.0)
    lo, hi = INCIDENCE_RANGE
    emb[8] = 2.0 * (scene.incidence_deg - lo) / (hi - lo) - 1.0
    emb[9] = math.sin(math.radians(scene.incidence_deg))

    features = np.concatenate([frac, _dem_spectrum(dem)])
    proj = _projection_matrix(projection_seed, EMBED_DIM - 10, features.size)
    emb[10:] = np.tanh(proj @ features / math.sqrt(features.size))
    return emb.astype(np.float32)


def to_db(intensity: np.ndarray) -> np.ndarray:
    x = np.asarray(intensity)
    if np.any(x <= 0.0):
        raise DataError("to_db requires strictly positive linear intensity")
    return 10.0 * np.log10(x)


def from_db(db):
    return np.power(10.0, np.asarray(db, dtype=np.float64) / 10.0)
