"""Buoy/grid ingestion, hourly alignment, chronological splits and log1p scaling.

File formats
------------
Buoy CSV: header ``timestamp,station_id,swh_m``; ISO-8601 timestamps (naive
means UTC); an empty, ``nan`` or ``MM`` swh cell marks a missing reading.

AUWG grid file (little endian)::

    b"AUWG" | u16 version | u16 T | u16 H | u16 W
    float32[T][H][W]   SWH in metres, NaN = missing value
    u8[H][W]           land mask, 1 = land

accompanied by a sidecar text file with one ISO-8601 timestamp per line.
"""
from __future__ import annotations

import csv
import io
import math
import struct
import zipfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import AlignmentError, DataError, FormatError, SplitError

CSV_COLUMNS = ("timestamp", "station_id", "swh_m")
MISSING_TOKENS = {"", "nan", "mm", "na", "null"}
GRID_MAGIC = b"AUWG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sHHHH")


@dataclass(frozen=True)
class BuoyRecord:
    timestamp: datetime
    station_id: str
    swh: float


@dataclass
class BuoyIngest:
    """Result of reading one station CSV."""

    records: list
    n_missing: int = 0
    diagnostics: list = field(default_factory=list)  # (line number, message)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


@dataclass
class GridSeries:
    times: list            # datetimes (UTC)
    values: np.ndarray     # (T, H, W) float32, NaN = missing
    land_mask: np.ndarray  # (H, W) uint8, 1 = land


@dataclass(frozen=True)
class AlignedDataset:
    times: tuple
    stations: tuple
    obs: np.ndarray        # (T, n) float32, metres (or log1p metres)
    fields: np.ndarray     # (T, 1, 32, 32) float32
    land_mask: np.ndarray  # (32, 32) uint8, 1 = land
    transform_applied: bool = False

    def __post_init__(self):
        T = len(self.times)
        if self.obs.shape != (T, len(self.stations)):
            raise DataError(f"obs shape {self.obs.shape} does not match {T} times x "
                            f"{len(self.stations)} stations")
        if self.fields.ndim != 4 or self.fields.shape[:2] != (T, 1):
            raise DataError(f"fields shape {self.fields.shape} is not (T, 1, H, W)")
        if self.fields.shape[2:] != self.land_mask.shape:
            raise DataError("land mask does not match the field grid")

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def ocean_mask(self) -> np.ndarray:
        return (1 - self.land_mask).astype(np.float32)

    def select_stations(self, station_ids: Sequence[str]) -> "AlignedDataset":
        missing = [s for s in station_ids if s not in self.stations]
        if missing:
            raise DataError(f"unknown station ids: {missing}")
        cols = [self.stations.index(s) for s in station_ids]
        return replace(self, stations=tuple(station_ids), obs=self.obs[:, cols].copy())

    def subset(self, indices) -> "AlignedDataset":
        idx = np.asarray(indices)
        return replace(self, times=tuple(self.times[i] for i in idx), obs=self.obs[idx],
                       fields=self.fields[idx])


@dataclass(frozen=True)
class SplitIndices:
    train: range
    test: range
    val: range


# ------------------------------------------------------------------ buoys
def parse_timestamp(text: str) -> datetime:
    t = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if t.tzinfo is None:
        return t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def format_timestamp(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def ingest_buoy_csv(path) -> BuoyIngest:
    """Read one buoy CSV, dropping rows whose SWH is missing.

    Unparseable rows are skipped and listed in ``diagnostics`` with their
    1-based line number; they never abort the read.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: missing header row") from None
    header = [h.strip().lower() for h in header]
    if header[:3] != list(CSV_COLUMNS):
        raise DataError(f"{path}: header must be {','.join(CSV_COLUMNS)}, got {','.join(header)}")

    out = BuoyIngest(records=[])
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            out.diagnostics.append((lineno, f"expected 3 fields, got {len(row)}"))
            continue
        ts, station, swh = (c.strip() for c in row[:3])
        try:
            t = parse_timestamp(ts)
        except ValueError:
            out.diagnostics.append((lineno, f"bad timestamp {ts!r}"))
            continue
        if not station:
            out.diagnostics.append((lineno, "empty station id"))
            continue
        if swh.lower() in MISSING_TOKENS:
            out.n_missing += 1
            continue
        try:
            value = float(swh)
        except ValueError:
            out.diagnostics.append((lineno, f"bad swh value {swh!r}"))
            continue
        if not math.isfinite(value) or value < 0:
            out.diagnostics.append((lineno, f"swh out of range: {swh}"))
            continue
        out.records.append(BuoyRecord(t, station, value))
    return out


def round_to_hour(t: datetime) -> datetime:
    """Nearest full hour; exactly half past rounds up."""
    floor = t.replace(minute=0, second=0, microsecond=0)
    if t - floor >= timedelta(minutes=30):
        return floor + timedelta(hours=1)
    return floor


def round_records(records: Iterable[BuoyRecord]) -> list:
    return [replace(r, timestamp=round_to_hour(r.timestamp)) for r in records]


def dedup_first(records: Iterable[BuoyRecord]) -> list:
    """Keep the first record per (timestamp, station_id), in input order."""
    seen = set()
    out = []
    for r in records:
        key = (r.timestamp, r.station_id)
        if key in seen:
            continue
        seen.add(key)
        out.append(r)
    return out


# ------------------------------------------------------------------- grids
def write_grid(path, values: np.ndarray, land_mask: np.ndarray, times: Sequence[datetime],
               times_path=None) -> tuple[Path, Path]:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 3:
        raise FormatError("grid values must be (T, H, W)")
    T, H, W = values.shape
    if T == 0:
        raise FormatError("cannot write an empty grid series")
    if len(times) != T:
        raise FormatError(f"{len(times)} timestamps for {T} grids")
    if max(T, H, W) > 0xFFFF:
        raise FormatError("grid dimensions exceed the u16 header fields")
    mask = np.asarray(land_mask, dtype=np.uint8)
    if mask.shape != (H, W):
        raise FormatError("land mask shape does not match the grid")
    path = Path(path)
    times_path = Path(times_path) if times_path else path.with_suffix(".times")
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, T, H, W))
        fh.write(np.ascontiguousarray(values).tobytes())
        fh.write(np.ascontiguousarray(mask).tobytes())
    times_path.write_text("".join(format_timestamp(t) + "\n" for t in times), encoding="utf-8")
    return path, times_path


def read_grid(path, times_path=None) -> GridSeries:
    path = Path(path)
    times_path = Path(times_path) if times_path else path.with_suffix(".times")
    try:
        blob = path.read_bytes()
        lines = [ln for ln in times_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read grid {path}: {exc}") from exc
    if len(blob) < _GRID_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, T, H, W = _GRID_HEADER.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n_vals = T * H * W
    expected = _GRID_HEADER.size + 4 * n_vals + H * W
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    off = _GRID_HEADER.size
    values = np.frombuffer(blob, dtype="<f4", count=n_vals, offset=off).reshape(T, H, W)
    mask = np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=off + 4 * n_vals).reshape(H, W)
    if len(lines) != T:
        raise FormatError(f"{times_path}: {len(lines)} timestamps for {T} grids")
    try:
        times = [parse_timestamp(ln) for ln in lines]
    except ValueError as exc:
        raise FormatError(f"{times_path}: {exc}") from exc
    return GridSeries(times, values.astype(np.float32), mask.copy())


# --------------------------------------------------------------- alignment
def align(buoys: Iterable[BuoyRecord], grids: GridSeries,
          stations: Optional[Sequence[str]] = None) -> AlignedDataset:
    """Join buoy records and gridded fields on common, fully observed hours.

    Buoy timestamps are rounded and deduplicated first. Only hours present in
    both sources with a reading from every station survive. Missing grid
    values and land cells become 0.
    """
    recs = dedup_first(round_records(buoys))
    if stations is None:
        stations = sorted({r.station_id for r in recs})
    stations = tuple(stations)
    col = {s: i for i, s in enumerate(stations)}
    rows: dict = {}
    for r in recs:
        if r.station_id in col:
            rows.setdefault(r.timestamp, {})[r.station_id] = r.swh
    complete = {t for t, v in rows.items() if len(v) == len(stations)}

    grid_index: dict = {}
    for i, t in enumerate(grids.times):
        grid_index.setdefault(round_to_hour(t), i)
    times = sorted(complete & set(grid_index))
    if not stations or not times:
        raise AlignmentError("buoy and grid sources share no fully observed hour")

    obs = np.array([[rows[t][s] for s in stations] for t in times], dtype=np.float32)
    fields = grids.values[[grid_index[t] for t in times]].astype(np.float32)
    land = grids.land_mask.astype(np.uint8)
    fields = np.where(np.isfinite(fields) & (land == 0), fields, 0.0).astype(np.float32)
    return AlignedDataset(tuple(times), stations, obs, fields[:, None], land.copy())


def dataset_to_sources(ds: AlignedDataset) -> tuple[list, GridSeries]:
    """Inverse of ``align``: buoy records and a grid series that re-align to ``ds``."""
    recs = [BuoyRecord(t, s, float(ds.obs[i, j]))
            for j, s in enumerate(ds.stations) for i, t in enumerate(ds.times)]
    return recs, GridSeries(list(ds.times), ds.fields[:, 0].copy(), ds.land_mask.copy())


# ----------------------------------------------------------------- splits
def chronological_split(T: int) -> SplitIndices:
    """First 70% train, next 15% test, remainder validation (floors, no shuffling)."""
    n_train = math.floor(0.70 * T)
    n_test = math.floor(0.15 * T)
    n_val = T - n_train - n_test
    if T < 3 or min(n_train, n_test, n_val) < 1:
        raise SplitError(f"{T} samples cannot give non-empty 70/15/15 splits")
    return SplitIndices(range(0, n_train), range(n_train, n_train + n_test),
                        range(n_train + n_test, T))


# -------------------------------------------------------------- transform
def log_transform(x):
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError("log_transform expects non-negative wave heights")
    return np.log1p(x)


def inverse_transform(x):
    # defined for any real so raw model outputs can be mapped back
    return np.expm1(np.asarray(x))


def to_log_space(ds: AlignedDataset) -> AlignedDataset:
    if ds.transform_applied:
        return ds
    return replace(ds, obs=log_transform(ds.obs).astype(np.float32),
                   fields=log_transform(ds.fields).astype(np.float32), transform_applied=True)


def to_metres(ds: AlignedDataset) -> AlignedDataset:
    if not ds.transform_applied:
        return ds
    return replace(ds, obs=inverse_transform(ds.obs).astype(np.float32),
                   fields=inverse_transform(ds.fields).astype(np.float32), transform_applied=False)


# ------------------------------------------------------------ persistence
def save_dataset(ds: AlignedDataset, path) -> Path:
    """Store an aligned dataset as a numpy ``.npz`` archive.

    Zip entries carry a fixed timestamp so identical datasets give identical bytes.
    """
    path = Path(path)
    arrays = {
        "times": np.array([int(t.timestamp()) for t in ds.times], dtype=np.int64),
        "stations": np.array(ds.stations, dtype=str),
        "obs": ds.obs, "fields": ds.fields, "land_mask": ds.land_mask,
        "transform_applied": np.array(ds.transform_applied),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())
    return path


def load_dataset(path) -> AlignedDataset:
    try:
        z = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    with z:
        times = tuple(datetime.fromtimestamp(int(s), tz=timezone.utc) for s in z["times"])
        return AlignedDataset(times, tuple(str(s) for s in z["stations"]), z["obs"], z["fields"],
                              z["land_mask"], bool(z["transform_applied"]))


def load_raw_directory(directory) -> AlignedDataset:
    """Align every ``*.csv`` buoy file with the single ``*.auwg`` grid in a directory."""
    directory = Path(directory)
    grids = sorted(directory.glob("*.auwg"))
    if len(grids) != 1:
        raise DataError(f"{directory}: expected exactly one .auwg grid file, found {len(grids)}")
    records = []
    for csv_path in sorted(directory.glob("*.csv")):
        records.extend(ingest_buoy_csv(csv_path).records)
    return align(records, read_grid(grids[0]))
