"""Trip ingestion and dataset construction.

Raw trip CSVs (2014 Citi Bike schema) become a gridded demand series: one
2 x i x j count matrix per hour, channel 0 counting trip starts (rentals)
and channel 1 trip stops (returns).  Windows of L consecutive matrices plus
the target hour label form the supervised samples.

Timestamps are naive local times interpreted as UTC; all binning and
hour-of-day labels derive from that fixed epoch, so results are independent
of the host timezone.
"""

from __future__ import annotations

import calendar
import csv
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import DataError, SchemaError, UsageError

REQUIRED_COLUMNS = (
    "starttime",
    "stoptime",
    "start station id",
    "end station id",
    "start station latitude",
    "start station longitude",
    "end station latitude",
    "end station longitude",
)

# Generous NYC bounding box; coordinates outside it mark a malformed row.
LAT_RANGE = (40.0, 41.5)
LON_RANGE = (-75.0, -73.0)

TIME_FORMATS = ("%Y-%m-%d %H:%M:%S", "%m/%d/%Y %H:%M:%S", "%m/%d/%Y %H:%M")


@dataclass(slots=True)
class TripRecord:
    start_epoch: int
    stop_epoch: int
    start_station: int
    end_station: int
    start_lat: float
    start_lon: float
    end_lat: float
    end_lon: float


@dataclass
class ParseAudit:
    rows: int = 0
    accepted: int = 0
    skipped: Counter = field(default_factory=Counter)

    def total_skipped(self):
        return sum(self.skipped.values())


def _parse_time(text):
    text = text.strip()
    # Fast path for the dominant "YYYY-MM-DD HH:MM:SS" layout.
    if len(text) == 19 and text[4] == "-" and text[10] == " ":
        try:
            return calendar.timegm((
                int(text[0:4]), int(text[5:7]), int(text[8:10]),
                int(text[11:13]), int(text[14:16]), int(text[17:19]), 0, 0, 0,
            ))
        except ValueError:
            pass
    for fmt in TIME_FORMATS:
        try:
            return calendar.timegm(datetime.strptime(text, fmt).timetuple())
        except ValueError:
            continue
    raise ValueError(f"unparsable timestamp {text!r}")


def parse_trips(stream, audit=None):
    """Parse one CSV stream into TripRecords; bad rows are counted, not fatal.

    A missing required column is fatal and names the column.  Rows are
    skipped (with a reason counter) when a field fails to parse, the stop
    precedes the start, or coordinates fall outside the NYC bounding box.
    """
    audit = audit if audit is not None else ParseAudit()
    reader = csv.DictReader(stream)
    header = [h.strip() for h in (reader.fieldnames or [])]
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise SchemaError(f"trip CSV is missing required column {col!r}")
    # Tolerate stray whitespace in header cells.
    rename = {raw: raw.strip() for raw in (reader.fieldnames or [])}

    records = []
    for row in reader:
        audit.rows += 1
        row = {rename[k]: v for k, v in row.items() if k in rename}
        try:
            start = _parse_time(row["starttime"])
            stop = _parse_time(row["stoptime"])
            rec = TripRecord(
                start_epoch=start,
                stop_epoch=stop,
                start_station=int(row["start station id"]),
                end_station=int(row["end station id"]),
                start_lat=float(row["start station latitude"]),
                start_lon=float(row["start station longitude"]),
                end_lat=float(row["end station latitude"]),
                end_lon=float(row["end station longitude"]),
            )
        except (ValueError, TypeError, KeyError):
            audit.skipped["unparsable"] += 1
            continue
        if rec.stop_epoch < rec.start_epoch:
            audit.skipped["stop_before_start"] += 1
            continue
        if not (
            LAT_RANGE[0] <= rec.start_lat <= LAT_RANGE[1]
            and LAT_RANGE[0] <= rec.end_lat <= LAT_RANGE[1]
            and LON_RANGE[0] <= rec.start_lon <= LON_RANGE[1]
            and LON_RANGE[0] <= rec.end_lon <= LON_RANGE[1]
        ):
            audit.skipped["out_of_bounds"] += 1
            continue
        audit.accepted += 1
        records.append(rec)
    return records, audit


def parse_trip_files(paths):
    """Parse several CSV files into one record list with a merged audit."""
    audit = ParseAudit()
    records = []
    for path in paths:
        with open(path, newline="", encoding="utf-8-sig") as fh:
            recs, _ = parse_trips(fh, audit=audit)
        records.extend(recs)
    return records, audit


# ---------------------------------------------------------------------------
# station selection and grid layout


def select_stations(records, n=128):
    """The n busiest stations by start+stop events; ties go to the lower id."""
    counts = Counter()
    for rec in records:
        counts[rec.start_station] += 1
        counts[rec.end_station] += 1
    if len(counts) < n:
        raise DataError(f"need at least {n} distinct stations, found {len(counts)}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [sid for sid, _ in ranked[:n]]


def station_coordinates(records):
    """Modal (lat, lon) per station across all sightings."""
    seen = {}
    for rec in records:
        seen.setdefault(rec.start_station, Counter())[(rec.start_lat, rec.start_lon)] += 1
        seen.setdefault(rec.end_station, Counter())[(rec.end_lat, rec.end_lon)] += 1
    coords = {}
    for sid, counter in seen.items():
        coords[sid] = min(counter.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return coords


@dataclass
class StationGrid:
    rows: int
    cols: int
    order: list          # station ids in row-major cell order
    position: dict       # station id -> (row, col)
    coords: dict         # station id -> (lat, lon)


def assign_grid(stations, rows, cols):
    """Place stations on a rows x cols grid by geography.

    Stations are sorted north to south, split into ``rows`` bands of ``cols``
    stations, and each band is ordered west to east.  Ties fall back to the
    station id, so the layout is a deterministic bijection.
    """
    stations = list(stations)
    if len(stations) != rows * cols:
        raise DataError(f"grid {rows}x{cols} needs {rows * cols} stations, got {len(stations)}")
    by_lat = sorted(stations, key=lambda s: (-s[1], s[0]))
    order = []
    position = {}
    coords = {}
    for r in range(rows):
        band = by_lat[r * cols:(r + 1) * cols]
        band.sort(key=lambda s: (s[2], s[0]))
        for c, (sid, lat, lon) in enumerate(band):
            order.append(sid)
            position[sid] = (r, c)
            coords[sid] = (lat, lon)
    return StationGrid(rows=rows, cols=cols, order=order, position=position, coords=coords)


# ---------------------------------------------------------------------------
# demand series


@dataclass
class DemandSeries:
    """T hourly demand matrices: values[t, 0] rentals, values[t, 1] returns."""

    start_epoch: int
    interval_seconds: int
    values: np.ndarray     # (T, 2, rows, cols) float32, nonnegative integers

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def rows(self):
        return self.values.shape[2]

    @property
    def cols(self):
        return self.values.shape[3]

    @property
    def end_epoch(self):
        return self.start_epoch + self.length * self.interval_seconds

    def hour_of(self, index):
        """Hour of day (0..23) at which interval ``index`` starts."""
        return ((self.start_epoch + index * self.interval_seconds) // 3600) % 24


def derive_time_range(records, interval=3600):
    """[t0, t1) covering every trip start, aligned to interval boundaries."""
    if not records:
        raise DataError("no records to derive a time range from")
    starts = [r.start_epoch for r in records]
    t0 = (min(starts) // interval) * interval
    t1 = (max(starts) // interval) * interval + interval
    return t0, t1


def build_demand_series(records, grid, t0, t1, interval=3600):
    """Count starts and stops per (interval, station) into a DemandSeries.

    A trip's start and stop are binned independently by their own timestamps;
    events outside [t0, t1) or at unselected stations are excluded and show
    up in the audit counters.
    """
    if t0 % interval or t1 % interval or t0 >= t1:
        raise UsageError(f"[{t0}, {t1}) must be aligned to the {interval}s interval")
    length = (t1 - t0) // interval
    values = np.zeros((length, 2, grid.rows, grid.cols), dtype=np.float32)
    audit = Counter()
    position = grid.position
    for rec in records:
        for channel, epoch, sid in (
            (0, rec.start_epoch, rec.start_station),
            (1, rec.stop_epoch, rec.end_station),
        ):
            kind = "starts" if channel == 0 else "stops"
            if not t0 <= epoch < t1:
                audit[f"out_of_range_{kind}"] += 1
                continue
            pos = position.get(sid)
            if pos is None:
                audit[f"unselected_station_{kind}"] += 1
                continue
            values[(epoch - t0) // interval, channel, pos[0], pos[1]] += 1.0
            audit[f"accepted_{kind}"] += 1
    return DemandSeries(start_epoch=t0, interval_seconds=interval, values=values), audit


# ---------------------------------------------------------------------------
# windows and splits


@dataclass
class SampleWindow:
    inputs: np.ndarray    # (L, 2, rows, cols), the L intervals before the target
    target: np.ndarray    # (2, rows, cols)
    hour: int             # hour of day of the target interval
    target_index: int
    target_epoch: int
    interval_seconds: int


def make_windows(series, seq_len=3):
    """One window per target index t in [L, T)."""
    if series.length <= seq_len:
        raise DataError(f"series of {series.length} intervals cannot fill windows of length {seq_len}")
    windows = []
    for t in range(seq_len, series.length):
        windows.append(SampleWindow(
            inputs=series.values[t - seq_len:t],
            target=series.values[t],
            hour=int(series.hour_of(t)),
            target_index=t,
            target_epoch=series.start_epoch + t * series.interval_seconds,
            interval_seconds=series.interval_seconds,
        ))
    return windows


def split_dataset(windows, test_days=10, val_frac=0.1):
    """Chronological split: last ``test_days`` of targets are the test set,
    the latest ``val_frac`` of the remainder is validation, the rest trains.

    Test windows may consume input intervals from before the boundary; only
    the target's timestamp decides membership.
    """
    if not windows:
        raise DataError("no windows to split")
    end_epoch = max(w.target_epoch for w in windows) + windows[0].interval_seconds
    boundary = end_epoch - test_days * 86400
    ordered = sorted(windows, key=lambda w: w.target_epoch)
    test = [w for w in ordered if w.target_epoch >= boundary]
    rest = [w for w in ordered if w.target_epoch < boundary]
    n_val = int(len(rest) * val_frac)
    val = rest[len(rest) - n_val:]
    train = rest[:len(rest) - n_val]
    if not train or not val or not test:
        raise DataError(
            f"empty split: train={len(train)}, val={len(val)}, test={len(test)}"
        )
    return train, val, test


def windows_to_arrays(windows):
    """Stack windows into (inputs, hours, targets) numpy batches."""
    inputs = np.stack([w.inputs for w in windows]).astype(np.float32)
    hours = np.array([w.hour for w in windows], dtype=np.int64)
    targets = np.stack([w.target for w in windows]).astype(np.float32)
    return inputs, hours, targets


# ---------------------------------------------------------------------------
# hour embeddings


def load_hour_embeddings(path, dim):
    """Read a 24 x dim table from a text embedding file.

    Each line is a token followed by ``dim`` floats; the tokens "0".."23"
    must all be present (other tokens are ignored).
    """
    table = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            token = parts[0]
            if token.isdigit() and 0 <= int(token) <= 23:
                vec = [float(x) for x in parts[1:]]
                if len(vec) != dim:
                    raise DataError(
                        f"{path}: token {token!r} has {len(vec)} values, expected {dim}"
                    )
                table[int(token)] = vec
    missing = sorted(set(range(24)) - set(table))
    if missing:
        raise DataError(f"{path}: missing hour tokens: {', '.join(str(m) for m in missing)}")
    return np.array([table[h] for h in range(24)], dtype=np.float64)


def generate_hour_embeddings(dim, seed=0):
    """Deterministic fallback table: 24 seeded unit-variance gaussian rows."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(24,)))
    return rng.standard_normal((24, dim))


# ---------------------------------------------------------------------------
# series file format


SERIES_MAGIC = b"STDM"
SERIES_VERSION = 1
_HEADER = struct.Struct("<4sIIIIqI")


def write_demand_series(path, series):
    """Binary layout: magic, version, i, j, T, start epoch, interval, floats."""
    values = np.ascontiguousarray(series.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(
            SERIES_MAGIC, SERIES_VERSION, series.rows, series.cols,
            series.length, series.start_epoch, series.interval_seconds,
        ))
        fh.write(values.tobytes())


def read_demand_series(path):
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise DataError(f"{path}: truncated series file")
        magic, version, rows, cols, length, start_epoch, interval = _HEADER.unpack(header)
        if magic != SERIES_MAGIC:
            raise DataError(f"{path}: not a demand series file (magic {magic!r})")
        if version != SERIES_VERSION:
            raise DataError(f"{path}: unsupported series version {version}")
        blob = fh.read()
    expected = length * 2 * rows * cols * 4
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} data bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4").reshape(length, 2, rows, cols).copy()
    return DemandSeries(start_epoch=start_epoch, interval_seconds=interval, values=values)


def write_station_map(path, grid):
    payload = {
        str(sid): [grid.position[sid][0], grid.position[sid][1],
                   grid.coords[sid][0], grid.coords[sid][1]]
        for sid in grid.order
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic data


def random_demand_series(length, rows=2, cols=2, seed=0, max_count=5, start_epoch=0):
    """Uniform random integer counts; handy for smoke tests."""
    rng = np.random.default_rng(seed)
    values = rng.integers(0, max_count, size=(length, 2, rows, cols)).astype(np.float32)
    return DemandSeries(start_epoch=start_epoch, interval_seconds=3600, values=values)


def regime_demand_series(length, rows=2, cols=2, seed=0, noise=0.5, start_epoch=0,
                         return_maps=False):
    """A series whose hour-to-hour map switches among 4 hour-indexed regimes.

    Frame t is a regime-specific linear map of frame t-1: the regime
    (hour mod 4) picks a scaled permutation and a bias, plus gaussian noise,
    rounded to nonnegative integer counts.  A predictor that knows the hour
    can pick the right map; an hour-blind predictor has to average regimes.
    """
    rng = np.random.default_rng(seed)
    k = 2 * rows * cols
    maps = []
    biases = []
    scales = (0.9, 0.6, 0.8, 0.7)
    for r in range(4):
        perm = rng.permutation(k)
        mat = np.zeros((k, k))
        mat[np.arange(k), perm] = scales[r]
        maps.append(mat)
        biases.append(rng.uniform(1.0, 4.0, size=k))
    values = np.zeros((length, k))
    values[0] = rng.integers(0, 10, size=k)
    start_hour = (start_epoch // 3600) % 24
    for t in range(1, length):
        hour = (start_hour + t) % 24
        r = hour % 4
        nxt = maps[r] @ values[t - 1] + biases[r] + rng.normal(0.0, noise, size=k)
        values[t] = np.maximum(np.round(nxt), 0.0)
    shaped = values.reshape(length, 2, rows, cols).astype(np.float32)
    series = DemandSeries(start_epoch=start_epoch, interval_seconds=3600, values=shaped)
    if return_maps:
        return series, maps, biases
    return series
