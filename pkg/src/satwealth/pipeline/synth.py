"""Synthetic observation stacks, nightlights and surveys with known ground truth.

Each country is a square grid of non-overlapping tile sites. A smooth
"urbanization" field (Gaussian city bumps) is rank-transformed per country
and warped onto three separated bands, so the nightlight classes are well
defined while wealth still varies within each class:

    u = warp(rank(field))            in [0, 0.03] | [0.2, 0.5] | [0.75, 1.0]
    nightlight = clip(63 * u**1.3 + N(0, nl_noise), 0, 63)
    awi = 2 u - 1 + N(0, noise_sigma)

Imagery is a per-site ground scene whose band reflectances depend linearly
on ``u`` plus urban texture, observed several times with random cloud discs
(masked out) and sensor noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import raster
from ..geodata import SurveyRecord

COUNTRY_SPACING_M = 200_000.0

# reflectance = base + gain * u, per Landsat band id
BAND_BASE = np.array([0.08, 0.10, 0.12, 0.35, 0.20, 0.30, 0.32, 0.15, 0.11])
BAND_GAIN = np.array([0.10, 0.10, 0.12, -0.20, 0.10, 0.25, 0.22, 0.12, 0.10])
TEXTURE = np.array([0.06, 0.06, 0.07, 0.05, 0.06, 0.02, 0.02, 0.06, 0.06])


@dataclass(frozen=True)
class SynthParams:
    n_countries: int = 5
    grid_side: int = 8
    spacing_m: float = 3000.0
    n_observations: int = 3
    cloud_probability: float = 0.6
    noise_sigma: float = 0.1
    nightlight_noise: float = 1.0
    clusters_per_country: int = 30
    sensor_noise: float = 0.01
    year: int = 2010


def warp_urbanization(s):
    """Monotone map of ``s`` in [0, 1) onto three separated bands."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s < 1 / 3, 0.03 * 3 * s,
                    np.where(s < 2 / 3, 0.2 + 0.3 * (3 * s - 1), 0.75 + 0.25 * (3 * s - 2)))


def wealth_function(u):
    return 2.0 * np.asarray(u) - 1.0


def nightlight_intensity(u, rng, noise):
    return np.clip(63.0 * np.asarray(u) ** 1.3 + rng.normal(0.0, noise, np.shape(u)), 0.0, 63.0)


def country_code(c: int) -> str:
    return f"C{c}"


def site_grid(p: SynthParams):
    """Tile centres ``[n, 2]`` and country index per site."""
    centres, country = [], []
    for c in range(p.n_countries):
        for i in range(p.grid_side):
            for j in range(p.grid_side):
                centres.append((c * COUNTRY_SPACING_M + (j + 0.5) * p.spacing_m, (i + 0.5) * p.spacing_m))
                country.append(c)
    return np.array(centres), np.array(country)


def urbanization(centres, country, p: SynthParams, rng):
    u = np.empty(len(centres))
    side = p.grid_side * p.spacing_m
    for c in range(p.n_countries):
        idx = np.nonzero(country == c)[0]
        local = centres[idx] - np.array([c * COUNTRY_SPACING_M, 0.0])
        field = np.zeros(len(idx))
        for _ in range(3):
            centre = rng.uniform(0, side, 2)
            scale = rng.uniform(0.1, 0.3) * side
            field += rng.uniform(0.5, 1.0) * np.exp(-((local - centre) ** 2).sum(1) / (2 * scale ** 2))
        field += 1e-6 * rng.normal(size=len(idx))  # break exact ties before ranking
        ranks = np.argsort(np.argsort(field))
        u[idx] = warp_urbanization((ranks + rng.uniform(0.05, 0.95, len(idx))) / len(idx))
    return u


def _block_mean(grid, factor):
    if factor == 1:
        return grid
    h, w = grid.shape
    return grid.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _block_any(mask, factor):
    if factor == 1:
        return mask
    h, w = mask.shape
    return mask.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))


def ground_scene(u: float, rng) -> np.ndarray:
    """``[9, 64, 64]`` reflectance at 15 m for one site."""
    n = raster.TILE_PIXELS
    # built-up blocks: density grows with urbanization
    coarse = rng.random((n // 4, n // 4)) < (0.1 + 0.8 * u)
    built = np.repeat(np.repeat(coarse, 4, 0), 4, 1).astype(np.float64)
    texture = rng.normal(size=(n, n))
    scene = (BAND_BASE[:, None, None] + BAND_GAIN[:, None, None] * u
             + TEXTURE[:, None, None] * (built - 0.5) * u + 0.01 * texture[None])
    return np.clip(scene, 0.0, None)


def observe(scene: np.ndarray, origin, p: SynthParams, rng, tile_meta) -> raster.RasterTile:
    n = raster.TILE_PIXELS
    clouds = np.zeros((n, n), dtype=bool)
    if rng.random() < p.cloud_probability:
        yy, xx = np.mgrid[0:n, 0:n]
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, n, 2)
            r = rng.uniform(4, 14)
            clouds |= (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
    pixels, mask = [], []
    for band in raster.LANDSAT7_BANDS:
        f = band.upsample_factor
        truth = _block_mean(scene[band.band_id], f)
        obs = truth + rng.normal(0.0, p.sensor_noise, truth.shape)
        cloudy = _block_any(clouds, f)
        obs = np.where(cloudy, 0.8 + 0.1 * rng.random(truth.shape), obs)
        pixels.append(np.clip(obs, 0.0, None).astype(np.float32))
        mask.append(~cloudy)
    return raster.RasterTile(origin, list(raster.LANDSAT7_BANDS), pixels, mask, raster.TILE_EXTENT_M,
                             dict(tile_meta))


def tile_origin(centre) -> tuple[float, float]:
    """Upper-left corner (west easting, north northing) of the tile centred at ``centre``."""
    half = raster.TILE_EXTENT_M / 2
    return (float(centre[0] - half), float(centre[1] + half))


def generate(p: SynthParams, seed):
    """Build the whole bundle in memory.

    Returns ``(sites, stacks, nightlights, surveys, truth)`` where ``sites`` is
    a list of ``(tile_id, centre, country)``.
    """
    rng = np.random.default_rng(seed)
    centres, country = site_grid(p)
    u = urbanization(centres, country, p, rng)
    intensity = nightlight_intensity(u, rng, p.nightlight_noise)

    sites, stacks = [], []
    for k, (centre, c) in enumerate(zip(centres, country)):
        tile_id = f"t{k:04d}"
        scene = ground_scene(u[k], rng)
        meta = {"tile_id": tile_id, "centre": [float(centre[0]), float(centre[1])]}
        tiles = [observe(scene, tile_origin(centre), p, rng, meta) for _ in range(p.n_observations)]
        stacks.append(raster.ObservationStack(tiles, [f"{p.year}-{m * 4 + 1:02d}-15" for m in range(p.n_observations)]))
        sites.append((tile_id, (float(centre[0]), float(centre[1])), int(c)))

    surveys = []
    for c in range(p.n_countries):
        idx = np.nonzero(country == c)[0]
        chosen = np.sort(rng.choice(idx, size=min(p.clusters_per_country, len(idx)), replace=False))
        noise = rng.normal(0.0, p.noise_sigma, len(chosen)) if p.noise_sigma > 0 else np.zeros(len(chosen))
        for k, eps in zip(chosen, noise):
            surveys.append(SurveyRecord(f"{country_code(c)}-{k:04d}", country_code(c),
                                        (float(centres[k, 0]), float(centres[k, 1])),
                                        float(wealth_function(u[k]) + eps), p.year))
    truth = {
        "params": asdict(p),
        "seed": int(seed),
        "awi": "2*u - 1 + N(0, noise_sigma^2)",
        "nightlight": "clip(63*u^1.3 + N(0, nightlight_noise^2), 0, 63)",
        "urbanization": {sid: float(uk) for (sid, _, _), uk in zip(sites, u)},
    }
    return sites, stacks, (centres, intensity), surveys, truth


def idiosyncratic_design(seed, n_countries=5, per_country=60, n_signal=6, n_signature=6,
                         offset_scale=1.0, spacing_m=3000.0):
    """Feature-level bundle where the feature-to-wealth mapping differs by country.

    Each country rotates the shared signal weights and carries a random wealth
    offset. The offset is tied to the country only through a country-specific
    spectral signature (a few extra feature columns), so a pooled fit can learn
    it while an out-of-country fit has nothing to transfer.

    Returns ``(features [n, d], awi, countries, ids, locations, nightlights)``.
    """
    rng = np.random.default_rng(seed)
    base_w = rng.normal(size=n_signal)
    base_w /= np.linalg.norm(base_w)
    signatures = rng.normal(size=(n_countries, n_signature))
    offsets = offset_scale * rng.normal(size=n_countries)
    side = int(np.ceil(np.sqrt(per_country)))
    rows, awi, countries, ids, locs, nls = [], [], [], [], [], []
    for c in range(n_countries):
        q, _ = np.linalg.qr(rng.normal(size=(n_signal, n_signal)))
        w_c = 0.5 * base_w + 0.5 * q @ base_w
        z = rng.normal(size=(per_country, n_signal))
        sig = signatures[c] + 0.05 * rng.normal(size=(per_country, n_signature))
        y = z @ w_c + offsets[c] + 0.1 * rng.normal(size=per_country)
        rows.append(np.hstack([z, sig]))
        awi.append(y)
        countries += [country_code(c)] * per_country
        ids += [f"{country_code(c)}-{k:04d}" for k in range(per_country)]
        for k in range(per_country):
            locs.append((c * COUNTRY_SPACING_M + (k % side + 0.5) * spacing_m, (k // side + 0.5) * spacing_m))
        nls.append(np.clip(20 + 10 * z @ base_w + rng.normal(0, 3, per_country), 0, 63))
    return (np.vstack(rows), np.concatenate(awi), np.array(countries), np.array(ids), np.array(locs),
            np.concatenate(nls))
