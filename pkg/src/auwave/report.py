"""RMSE diagnostics in metres, station-subset ablations and on-disk artifacts.

Artifacts written by :func:`export_artifacts` (all CSV values use 17
significant digits so floats round-trip exactly):

* ``per_sample_rmse.csv``: ``sample,time,rmse``
* ``spatial_rmse.csv``: 32 rows of 32 comma-separated values, land cells empty
* ``stats.csv``: ``statistic,value`` rows for n, mean, median, std, min, max, skew
* ``ablation.csv``: ``configuration,stations,rmse_auwave,rmse_rwr,best``
* ``spatial_rmse.ppm`` / ``worst_sample_error.ppm``: binary P6 heatmaps,
  each grid cell drawn as an 8x8 block (256x256 pixels). Ocean values are
  scaled linearly from 0 to the map maximum and coloured along
  ``RAMP`` (dark blue, blue, cyan, yellow, red); land is white.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import AlignedDataset, SplitIndices, chronological_split, format_timestamp, inverse_transform
from .errors import ConfigError, DegenerateError
from .models import AUWaveConfig, RWRConfig, build_model, desk_auwave_config, desk_rwr_config
from .train import TrainConfig, predict, train

CSV_FMT = "%.17g"
UPSCALE = 8
RAMP = np.array([[0, 0, 128], [0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], dtype=np.float64)
LAND_RGB = (255, 255, 255)


def _as_maps(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[1] != 1:
            raise ConfigError(f"expected a single field channel, got shape {a.shape}")
        a = a[:, 0]
    if a.ndim != 3:
        raise ConfigError(f"expected (V, H, W) or (V, 1, H, W) fields, got shape {a.shape}")
    return a


def _ocean(mask, shape) -> np.ndarray:
    ocean = np.asarray(mask, dtype=bool)
    if ocean.shape != shape:
        raise ConfigError(f"mask shape {ocean.shape} does not match grid {shape}")
    if not ocean.any():
        raise DegenerateError("mask has no ocean cells")
    return ocean


def rmse_per_sample(pred, truth, ocean_mask) -> np.ndarray:
    """Per time step, the root of the mean squared error over ocean cells."""
    p, t = _as_maps(pred), _as_maps(truth)
    if p.shape != t.shape:
        raise ConfigError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    ocean = _ocean(ocean_mask, p.shape[1:])
    return np.sqrt(((p - t) ** 2)[:, ocean].mean(axis=1))


def spatial_rmse_map(pred, truth, ocean_mask) -> np.ndarray:
    """Per cell, the root of the time-mean squared error; land cells are NaN."""
    p, t = _as_maps(pred), _as_maps(truth)
    if p.shape != t.shape:
        raise ConfigError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    if p.shape[0] == 0:
        raise DegenerateError("no samples to average")
    ocean = _ocean(ocean_mask, p.shape[1:])
    out = np.sqrt(((p - t) ** 2).mean(axis=0))
    out[~ocean] = np.nan
    return out


@dataclass
class HistogramStats:
    n: int
    mean: float
    median: float
    std: float
    min: float
    max: float
    skew: str            # "right" when mean > median, "left" when below, else "none"
    counts: np.ndarray
    edges: np.ndarray


def histogram_stats(values, n_bins: int = 20) -> HistogramStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DegenerateError("histogram of an empty sample")
    if n_bins < 1:
        raise ConfigError("n_bins must be positive")
    mean, median = float(v.mean()), float(np.median(v))
    skew = "right" if mean > median else "left" if mean < median else "none"
    counts, edges = np.histogram(v, bins=n_bins)
    return HistogramStats(int(v.size), mean, median, float(v.std()), float(v.min()),
                          float(v.max()), skew, counts, edges)


@dataclass
class EvalReport:
    per_sample_rmse: np.ndarray
    spatial_rmse: np.ndarray
    stats: HistogramStats
    times: tuple = ()
    worst_error_map: Optional[np.ndarray] = None

    @property
    def n_samples(self) -> int:
        return int(self.per_sample_rmse.size)

    @property
    def mean(self) -> float:
        return self.stats.mean

    @property
    def median(self) -> float:
        return self.stats.median

    @property
    def std(self) -> float:
        return self.stats.std

    @property
    def max(self) -> float:
        return self.stats.max

    @property
    def overall_rmse(self) -> float:
        """Root of the mean squared error pooled over samples and ocean cells."""
        return float(np.sqrt(np.nanmean(self.spatial_rmse ** 2)))


def build_report(pred_m, truth_m, ocean_mask, times: Sequence = (), n_bins: int = 20) -> EvalReport:
    """Assemble the report from predictions and truth already in metres."""
    per = rmse_per_sample(pred_m, truth_m, ocean_mask)
    spatial = spatial_rmse_map(pred_m, truth_m, ocean_mask)
    worst = int(np.argmax(per))
    err = np.abs(_as_maps(pred_m)[worst] - _as_maps(truth_m)[worst])
    err[~np.asarray(ocean_mask, dtype=bool)] = np.nan
    return EvalReport(per, spatial, histogram_stats(per, n_bins), tuple(times), err)


def evaluate(model, dataset: AlignedDataset, indices) -> EvalReport:
    """Predict on ``indices`` of a log-space dataset; metrics in metres."""
    if not dataset.transform_applied:
        raise ConfigError("evaluate expects the log-space dataset the model was trained on")
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size == 0:
        raise DegenerateError("no samples to evaluate")
    pred = inverse_transform(predict(model, dataset.obs[idx]).astype(np.float64))
    truth = inverse_transform(dataset.fields[idx].astype(np.float64))
    return build_report(pred, truth, dataset.ocean_mask, [dataset.times[i] for i in idx])


def climatology_rmse(dataset: AlignedDataset, splits: SplitIndices) -> float:
    """Pooled validation RMSE (metres) of the per-cell train-split mean field."""
    f = dataset.fields.astype(np.float64)
    if dataset.transform_applied:
        f = inverse_transform(f)
    clim = f[list(splits.train)].mean(axis=0)
    val = f[list(splits.val)]
    ocean = dataset.ocean_mask.astype(bool)
    return float(np.sqrt(((val - clim) ** 2)[:, :, ocean].mean()))


# ---------------------------------------------------------------- ablation
@dataclass
class AblationResult:
    label: str
    stations: tuple
    rmse_auwave: Optional[float]
    rmse_rwr: Optional[float]
    reports: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def best(self) -> str:
        vals = {k: v for k, v in (("auwave", self.rmse_auwave), ("rwr", self.rmse_rwr)) if v is not None}
        return min(vals, key=vals.get) if vals else ""


def standard_subsets(stations: Sequence[str]) -> list:
    """Full set, every leave-one-out set, then every singleton, as (label, ids)."""
    st = tuple(stations)
    out = [("all", st)]
    out += [(f"without {s}", tuple(x for x in st if x != s)) for s in st]
    out += [(f"only {s}", (s,)) for s in st]
    return out


def run_ablation(dataset: AlignedDataset, subsets: Sequence, train_cfg: TrainConfig,
                 splits: Optional[SplitIndices] = None, kinds: Sequence[str] = ("auwave", "rwr"),
                 auwave_config: Callable[[int], AUWaveConfig] = desk_auwave_config,
                 rwr_config: Callable[[int], RWRConfig] = desk_rwr_config,
                 keep_reports: bool = False) -> list:
    """Retrain fresh models per station subset; validation RMSE in metres.

    ``subsets`` holds ``(label, station_ids)`` pairs (see :func:`standard_subsets`).
    Every model is seeded with ``train_cfg.seed``.
    """
    if not dataset.transform_applied:
        raise ConfigError("run_ablation expects a log-space dataset")
    for k in kinds:
        if k not in ("auwave", "rwr"):
            raise ConfigError(f"unknown model kind {k!r}")
    known = set(dataset.stations)
    for label, ids in subsets:
        if not ids:
            raise ConfigError(f"subset {label!r} is empty")
        unknown = [s for s in ids if s not in known]
        if unknown:
            raise ConfigError(f"subset {label!r} names unknown stations {unknown}")
    splits = splits or chronological_split(dataset.n_times)
    results = []
    for label, ids in subsets:
        sub = dataset.select_stations(ids)
        n = len(sub.stations)
        scores, reports = {}, {}
        for kind in kinds:
            cfg = auwave_config(n) if kind == "auwave" else rwr_config(n)
            model = build_model(kind, cfg.to_dict(), seed=train_cfg.seed)
            train(model, sub, splits, train_cfg)
            rep = evaluate(model, sub, splits.val)
            scores[kind] = rep.overall_rmse
            if keep_reports:
                reports[kind] = rep
        results.append(AblationResult(label, tuple(sub.stations), scores.get("auwave"),
                                      scores.get("rwr"), reports))
    return results


def ablation_csv(results: Sequence[AblationResult]) -> str:
    lines = ["configuration,stations,rmse_auwave,rmse_rwr,best"]
    fmt = lambda v: "" if v is None else CSV_FMT % v
    for r in results:
        lines.append(f"{r.label},{' '.join(r.stations)},{fmt(r.rmse_auwave)},{fmt(r.rmse_rwr)},{r.best}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- artifacts
def colorize(values: np.ndarray, land: np.ndarray, vmax: Optional[float] = None) -> np.ndarray:
    """Map a 2-D array to RGB bytes along ``RAMP``; land cells become white."""
    v = np.asarray(values, dtype=np.float64)
    land = np.asarray(land, dtype=bool)
    ocean_vals = v[~land]
    top = vmax if vmax is not None else (float(np.nanmax(ocean_vals)) if ocean_vals.size else 0.0)
    scaled = np.zeros_like(v) if top <= 0 else np.clip(np.nan_to_num(v) / top, 0.0, 1.0)
    pos = scaled * (len(RAMP) - 1)
    lo = np.minimum(pos.astype(int), len(RAMP) - 2)
    frac = (pos - lo)[..., None]
    rgb = RAMP[lo] * (1 - frac) + RAMP[lo + 1] * frac
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[land] = LAND_RGB
    return rgb


def write_ppm(path, values: np.ndarray, land: np.ndarray, scale: int = UPSCALE) -> Path:
    rgb = colorize(values, land)
    big = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    h, w = big.shape[:2]
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + big.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ConfigError(f"{path}: not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def export_artifacts(report: EvalReport, out_dir, land_mask,
                     ablation: Optional[Sequence[AblationResult]] = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    land = np.asarray(land_mask, dtype=bool)
    paths = {}

    lines = ["sample,time,rmse"]
    for i, v in enumerate(report.per_sample_rmse):
        t = format_timestamp(report.times[i]) if i < len(report.times) else ""
        lines.append(f"{i},{t},{CSV_FMT % v}")
    paths["per_sample_rmse"] = _write(out / "per_sample_rmse.csv", lines)

    rows = [",".join("" if math.isnan(x) else CSV_FMT % x for x in row) for row in report.spatial_rmse]
    paths["spatial_rmse"] = _write(out / "spatial_rmse.csv", rows)

    s = report.stats
    stats = ["statistic,value", f"n,{s.n}", f"mean,{CSV_FMT % s.mean}", f"median,{CSV_FMT % s.median}",
             f"std,{CSV_FMT % s.std}", f"min,{CSV_FMT % s.min}", f"max,{CSV_FMT % s.max}", f"skew,{s.skew}"]
    paths["stats"] = _write(out / "stats.csv", stats)

    hist = ["bin_low,bin_high,count"]
    hist += [f"{CSV_FMT % a},{CSV_FMT % b},{c}" for a, b, c in zip(s.edges[:-1], s.edges[1:], s.counts)]
    paths["histogram"] = _write(out / "histogram.csv", hist)

    if ablation is not None:
        paths["ablation"] = out / "ablation.csv"
        paths["ablation"].write_text(ablation_csv(ablation), encoding="utf-8")

    paths["spatial_ppm"] = write_ppm(out / "spatial_rmse.ppm", report.spatial_rmse, land)
    if report.worst_error_map is not None:
        paths["worst_ppm"] = write_ppm(out / "worst_sample_error.ppm", report.worst_error_map, land)
    return paths


def _write(path: Path, lines: list) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_per_sample_csv(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").strip().split("\n")[1:]
    return np.array([float(r.rsplit(",", 1)[1]) for r in rows], dtype=np.float64)


def read_spatial_csv(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").strip().split("\n")
    return np.array([[float(x) if x else np.nan for x in r.split(",")] for r in rows])
