"""The whole pipeline in one sitting: trips CSV to benchmark table.

Generates a synthetic city (128 stations, two weeks of trips), then runs
the same steps the CLI exposes: ingest to a gridded demand series, train a
model, evaluate the held-out days, and compare methods side by side.
Every step here is also reachable as `stdinet ingest/train/eval/bench`.
"""

import tempfile
from pathlib import Path

import numpy as np

from stdinet import (
    BenchConfig,
    ModelDims,
    TrainConfig,
    assign_grid,
    build_demand_series,
    make_windows,
    run_benchmark,
    select_stations,
    split_dataset,
)
from stdinet.bench import render_table
from stdinet.data import derive_time_range, parse_trip_files, station_coordinates, write_demand_series

work = Path(tempfile.mkdtemp(prefix="stdinet_demo_"))

# --- synthesize a trips file in the 2014 schema -------------------------
rng = np.random.default_rng(11)
n_stations, days = 128, 14
lats = rng.uniform(40.65, 40.85, size=n_stations)
lons = rng.uniform(-74.05, -73.90, size=n_stations)
header = ",".join(f'"{c}"' for c in (
    "tripduration", "starttime", "stoptime", "start station id",
    "start station name", "start station latitude", "start station longitude",
    "end station id", "end station name", "end station latitude",
    "end station longitude", "bikeid", "usertype", "birth year", "gender"))
rows = []
for day in range(days):
    for hour in range(24):
        # morning and evening peaks
        load = 12 + int(10 * np.exp(-((hour - 8) ** 2) / 8) + 10 * np.exp(-((hour - 18) ** 2) / 8))
        for _ in range(load):
            s, e = rng.integers(0, n_stations, size=2)
            minute = int(rng.integers(0, 50))
            start = f"2014-04-{day + 1:02d} {hour:02d}:{minute:02d}:00"
            stop = f"2014-04-{day + 1:02d} {hour:02d}:{minute + 9:02d}:00"
            rows.append(f'"540","{start}","{stop}","{s + 100}","a","{lats[s]:.6f}","{lons[s]:.6f}",'
                        f'"{e + 100}","b","{lats[e]:.6f}","{lons[e]:.6f}","1","Subscriber","1980","1"')
trips_csv = work / "trips.csv"
trips_csv.write_text(header + "\n" + "\n".join(rows) + "\n")
print(f"wrote {len(rows)} trips to {trips_csv}")

# --- ingest: stations -> grid -> hourly demand matrices ------------------
records, audit = parse_trip_files([trips_csv])
stations = select_stations(records, n=128)
coords = station_coordinates(records)
grid = assign_grid([(sid, *coords[sid]) for sid in stations], 8, 16)
t0, t1 = derive_time_range(records)
series, counters = build_demand_series(records, grid, t0, t1)
write_demand_series(work / "demand.stdm", series)
print(f"series: {series.length} intervals on an 8x16 grid "
      f"({counters['accepted_starts']} starts, {counters['accepted_stops']} stops)")

# --- benchmark a few methods on the held-out final days ------------------
dims = ModelDims(rows=8, cols=16, seq_len=3, channels=8, lstm_hidden=64,
                 rank=8, embed_dim=10)
config = BenchConfig(
    dims=dims,
    train=TrainConfig(epochs=3, patience=3, batch_size=32, seed=0),
    test_days=2,
)
report = run_benchmark(series, ["HA", "Ridge", "MLP", "STDI"], config)
print()
print(render_table(report))
print(f"\nartifacts in {work}")
