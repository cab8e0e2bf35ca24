"""Synthetic swell fields and buoy samplings used as stand-in ground truth.

Each swell component is a rigid wave packet: a Gaussian envelope times a
carrier wave, translating across a periodic 32x32 domain at its phase
speed. The field at cell (r, c) and hour t is

    base + sum_k A_k * sum_images g_k(delta) * cos(kappa_k * (d_k . delta) + phi_k) + noise

where delta is the offset from the packet centre (summed over the nine
periodic images so the field stays smooth across the wrap), clipped at 0.
Buoys read the noisy field at their cell exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AlignedDataset, CSV_COLUMNS, format_timestamp, write_grid
from .errors import ConfigError, DataError

GRID = 32
START_TIME = datetime(2022, 1, 1, tzinfo=timezone.utc)
_IMAGES = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass(frozen=True)
class SwellComponent:
    amplitude: float        # metres
    wavelength: float       # grid cells
    direction: float        # radians, 0 = +column axis, pi/2 = +row axis
    phase_speed: float      # cells per hour
    center: tuple           # (row, col) at t = 0
    width: float            # envelope standard deviation, cells
    phase: float = 0.0

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ConfigError("swell amplitude must be positive")
        if not self.wavelength >= 2:
            raise ConfigError("wavelength below 2 cells is not resolvable on the grid")
        if not self.width > 0:
            raise ConfigError("envelope width must be positive")


@dataclass(frozen=True)
class SyntheticConfig:
    T: int
    components: tuple
    base_level: float
    noise_sigma: float
    land_mask: np.ndarray
    buoy_cells: tuple
    seed: int = 0
    station_ids: tuple = ()
    start: datetime = START_TIME

    def __post_init__(self):
        mask = np.asarray(self.land_mask, dtype=np.uint8)
        object.__setattr__(self, "land_mask", mask)
        object.__setattr__(self, "buoy_cells", tuple(tuple(int(v) for v in c) for c in self.buoy_cells))
        if not self.station_ids:
            object.__setattr__(self, "station_ids",
                               tuple(f"B{i + 1:02d}" for i in range(len(self.buoy_cells))))

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError("T must be at least one hour")
        if self.land_mask.shape != (GRID, GRID):
            raise ConfigError(f"land mask must be {GRID}x{GRID}")
        if not self.buoy_cells:
            raise ConfigError("at least one buoy is required")
        if len(self.station_ids) != len(self.buoy_cells):
            raise ConfigError("one station id per buoy cell")
        for r, c in self.buoy_cells:
            if not (0 <= r < GRID and 0 <= c < GRID):
                raise ConfigError(f"buoy cell {(r, c)} outside the grid")
            if self.land_mask[r, c]:
                raise ConfigError(f"buoy cell {(r, c)} lies on land")
        total = sum(comp.amplitude for comp in self.components)
        if self.components and not self.base_level > total:
            raise ConfigError("base_level must exceed the summed amplitudes")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass
class SyntheticSeries:
    times: list
    fields: np.ndarray       # (T, 32, 32) float32 metres, land = 0
    obs: np.ndarray          # (T, n) float32 metres
    land_mask: np.ndarray
    stations: tuple
    buoy_cells: tuple

    def to_dataset(self) -> AlignedDataset:
        return AlignedDataset(tuple(self.times), tuple(self.stations), self.obs.copy(),
                              self.fields[:, None].copy(), self.land_mask.copy())


def default_land_mask() -> np.ndarray:
    rr, cc = np.mgrid[0:GRID, 0:GRID]
    island = ((rr - 19) / 3.5) ** 2 + ((cc - 11) / 2.5) ** 2 <= 1.0
    islet = ((rr - 9) / 1.5) ** 2 + ((cc - 25) / 1.5) ** 2 <= 1.0
    return (island | islet).astype(np.uint8)


DEFAULT_BUOYS = ((6, 6), (5, 17), (15, 22), (26, 7), (25, 25))


def default_config(seed: int = 0, T: int = 2000, noise_sigma: float = 0.05) -> SyntheticConfig:
    """Desk-scale benchmark: 3 swell packets, 5 buoys, noise 0.05 m.

    The seed shifts packet centres and carrier phases as well as the noise,
    so different seeds give genuinely different wave climates.
    """
    rng = np.random.default_rng([seed, 7919])
    centers = rng.uniform(0, GRID, size=(3, 2))
    phases = rng.uniform(0, 2 * math.pi, size=3)
    comps = (
        SwellComponent(0.6, 32.0, 0.0, 0.5, tuple(centers[0]), 12.0, phases[0]),
        SwellComponent(0.4, 32.0, math.pi / 2, 0.8, tuple(centers[1]), 10.0, phases[1]),
        SwellComponent(0.3, 32.0 * math.sqrt(2), math.pi / 4, 0.6, tuple(centers[2]), 9.0, phases[2]),
    )
    return SyntheticConfig(T=T, components=comps, base_level=1.5, noise_sigma=noise_sigma,
                           land_mask=default_land_mask(), buoy_cells=DEFAULT_BUOYS, seed=seed)


def component_field(comp: SwellComponent, t: float, rows, cols) -> np.ndarray:
    """Noise-free contribution of one packet at hour ``t`` and (row, col) coordinates."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    dx, dy = math.cos(comp.direction), math.sin(comp.direction)
    cy = (comp.center[0] + comp.phase_speed * t * dy) % GRID
    cx = (comp.center[1] + comp.phase_speed * t * dx) % GRID
    # nearest-image offset in [-GRID/2, GRID/2), then the eight neighbours
    oy = (rows - cy + GRID / 2) % GRID - GRID / 2
    ox = (cols - cx + GRID / 2) % GRID - GRID / 2
    kappa = 2 * math.pi / comp.wavelength
    out = np.zeros(np.broadcast(oy, ox).shape)
    for iy, ix in _IMAGES:
        ddy = oy + iy * GRID
        ddx = ox + ix * GRID
        env = np.exp(-(ddx ** 2 + ddy ** 2) / (2 * comp.width ** 2))
        out += env * np.cos(kappa * (dx * ddx + dy * ddy) + comp.phase)
    return comp.amplitude * out


def clean_field(cfg: SyntheticConfig, t: float, rows=None, cols=None) -> np.ndarray:
    """Deterministic part of the field (no noise, no clipping, no land)."""
    if rows is None:
        rows, cols = np.mgrid[0:GRID, 0:GRID]
    out = np.full(np.broadcast(np.asarray(rows), np.asarray(cols)).shape, float(cfg.base_level))
    for comp in cfg.components:
        out += component_field(comp, t, rows, cols)
    return out


def _image_curvature(rho, w, kappa):
    """Per-image bound on |f_rr| + |f_cc| / A at distance ``rho`` from the packet centre."""
    return np.exp(-rho ** 2 / (2 * w ** 2)) * ((rho / w ** 2 + kappa) ** 2 + 2 / w ** 2)


def _sup_beyond(a, w, kappa):
    # the profile is smooth and decays past a few widths; a fine scan plus a
    # 1% margin covers the sampling gap
    rho = np.arange(a, a + 8 * w + 4 * GRID, w / 400)
    return 1.01 * float(_image_curvature(rho, w, kappa).max())


def curvature_bound(cfg: SyntheticConfig) -> float:
    """Upper bound on |f_rr| + |f_cc| of the clean field.

    Each periodic image contributes at most A * g(rho) * ((rho/w^2 + kappa)^2 + 2/w^2)
    at distance rho. Relative to the nearest image, the two images shifted along
    one axis lie at least GRID/2 and GRID away, the four diagonal ones at least
    GRID/sqrt(2).
    """
    half = GRID / 2
    total = 0.0
    for comp in cfg.components:
        w, kappa = comp.width, 2 * math.pi / comp.wavelength
        per = (_sup_beyond(0.0, w, kappa) + 2 * _sup_beyond(half, w, kappa)
               + 2 * _sup_beyond(GRID, w, kappa) + 4 * _sup_beyond(half * math.sqrt(2), w, kappa))
        total += comp.amplitude * per
    return total


def generate(cfg: SyntheticConfig) -> SyntheticSeries:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    rows, cols = np.mgrid[0:GRID, 0:GRID]
    land = cfg.land_mask.astype(bool)
    fields = np.empty((cfg.T, GRID, GRID), dtype=np.float32)
    for t in range(cfg.T):
        f = clean_field(cfg, t, rows, cols)
        if cfg.noise_sigma > 0:
            f = f + rng.normal(0.0, cfg.noise_sigma, size=f.shape)
        f = np.maximum(f, 0.0)
        f[land] = 0.0
        fields[t] = f
    br = [r for r, _ in cfg.buoy_cells]
    bc = [c for _, c in cfg.buoy_cells]
    obs = fields[:, br, bc].copy()
    times = [cfg.start + timedelta(hours=t) for t in range(cfg.T)]
    return SyntheticSeries(times, fields, obs, cfg.land_mask.copy(), tuple(cfg.station_ids),
                           tuple(cfg.buoy_cells))


def write_dataset(series: SyntheticSeries, out_dir) -> dict:
    """Write grid (AUWG + timestamps sidecar) and one buoy CSV with every station."""
    if len(series.times) == 0:
        raise DataError("cannot write an empty series")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid_path, times_path = write_grid(out / "grid.auwg", series.fields, series.land_mask,
                                       series.times, out / "grid.times")
    csv_path = out / "buoys.csv"
    lines = [",".join(CSV_COLUMNS)]
    for i, t in enumerate(series.times):
        stamp = format_timestamp(t)
        for j, sid in enumerate(series.stations):
            # repr of the float32 value widened to float64 round-trips exactly
            lines.append(f"{stamp},{sid},{float(series.obs[i, j])!r}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"grid": grid_path, "times": times_path, "buoys": csv_path}
