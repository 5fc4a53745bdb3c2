"""Data pipeline tests: parsing, grids, series, windows, splits, embeddings."""

import io
from pathlib import Path

import numpy as np
import pytest

from stdinet import DataError, SchemaError, UsageError
from stdinet.data import (
    DemandSeries,
    TripRecord,
    assign_grid,
    build_demand_series,
    derive_time_range,
    generate_hour_embeddings,
    load_hour_embeddings,
    make_windows,
    parse_trips,
    random_demand_series,
    read_demand_series,
    regime_demand_series,
    select_stations,
    split_dataset,
    station_coordinates,
    windows_to_arrays,
    write_demand_series,
    write_station_map,
)

FIXTURE = Path(__file__).parent / "data" / "trips_small.csv"
APRIL_1_2014 = 1396310400  # 2014-04-01 00:00:00 UTC


def trip(start_epoch, stop_epoch, s=1, e=2, lat=40.7, lon=-74.0):
    return TripRecord(start_epoch, stop_epoch, s, e, lat, lon, lat, lon)


class TestParseTrips:
    def test_fixture_yields_two_valid_records_in_order(self):
        with open(FIXTURE) as fh:
            records, audit = parse_trips(fh)
        assert len(records) == 2
        assert audit.rows == 3
        assert audit.skipped["stop_before_start"] == 1
        # First record starts 2014-04-01 00:12:00, hour of day 0.
        assert (records[0].start_epoch // 3600) % 24 == 0
        assert records[0].start_station == 72
        assert records[1].start_station == 72

    def test_missing_column_is_fatal_and_named(self):
        stream = io.StringIO("starttime,stoptime,start station id\n")
        with pytest.raises(SchemaError, match="end station id"):
            parse_trips(stream)

    def test_malformed_rows_counted_not_fatal(self):
        header = ",".join(f'"{c}"' for c in (
            "starttime", "stoptime", "start station id", "end station id",
            "start station latitude", "start station longitude",
            "end station latitude", "end station longitude"))
        rows = [
            '"2014-04-01 10:00:00","2014-04-01 10:10:00","1","2","40.7","-74.0","40.7","-74.0"',
            '"not a time","2014-04-01 10:10:00","1","2","40.7","-74.0","40.7","-74.0"',
            '"2014-04-01 10:00:00","2014-04-01 10:10:00","1","2","0.0","0.0","40.7","-74.0"',
        ]
        records, audit = parse_trips(io.StringIO("\n".join([header] + rows)))
        assert len(records) == 1
        assert audit.skipped["unparsable"] == 1
        assert audit.skipped["out_of_bounds"] == 1

    def test_slash_format_timestamps_accepted(self):
        header = ",".join((
            "starttime", "stoptime", "start station id", "end station id",
            "start station latitude", "start station longitude",
            "end station latitude", "end station longitude"))
        row = '9/1/2014 00:00:25,9/1/2014 00:10:25,1,2,40.7,-74.0,40.7,-74.0'
        records, audit = parse_trips(io.StringIO(header + "\n" + row))
        assert len(records) == 1 and audit.accepted == 1


class TestSelectStations:
    def test_top_two_by_volume(self):
        records = []
        for sid, count in ((10, 10), (20, 5), (30, 1)):
            records += [trip(0, 0, s=sid, e=sid)] * count  # 2 events per trip
        assert select_stations(records, n=2) == [10, 20]

    def test_tie_goes_to_lower_id(self):
        records = [trip(0, 0, s=5, e=5), trip(0, 0, s=3, e=3), trip(0, 0, s=9, e=9)]
        assert select_stations(records, n=2) == [3, 5]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(0)
        records = []
        for sid in range(200):
            for _ in range(int(rng.integers(1, 30))):
                records.append(trip(0, 0, s=sid, e=int(rng.integers(0, 200))))
        got = select_stations(records, n=128)
        counts = {}
        for r in records:
            counts[r.start_station] = counts.get(r.start_station, 0) + 1
            counts[r.end_station] = counts.get(r.end_station, 0) + 1
        oracle = [sid for sid, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:128]
        assert got == oracle

    def test_too_few_stations_fatal(self):
        with pytest.raises(DataError, match="2"):
            select_stations([trip(0, 0, s=1, e=2)], n=5)


class TestAssignGrid:
    def test_square_corners(self):
        # NW, NE on the top row; SW, SE on the bottom row.
        stations = [
            (1, 41.0, -74.2),  # NW
            (2, 41.0, -73.8),  # NE
            (3, 40.5, -74.2),  # SW
            (4, 40.5, -73.8),  # SE
        ]
        grid = assign_grid(stations, 2, 2)
        assert grid.position[1] == (0, 0)
        assert grid.position[2] == (0, 1)
        assert grid.position[3] == (1, 0)
        assert grid.position[4] == (1, 1)

    def test_collinear_stations_still_bijective(self):
        stations = [(sid, 40.7, -74.0) for sid in (4, 2, 9, 1)]
        grid = assign_grid(stations, 2, 2)
        assert sorted(grid.position.values()) == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert len(set(grid.order)) == 4

    def test_random_points_bijective_and_rows_lon_sorted(self):
        rng = np.random.default_rng(1)
        stations = [(sid, float(rng.uniform(40.4, 41.0)), float(rng.uniform(-74.2, -73.6)))
                    for sid in range(128)]
        grid = assign_grid(stations, 8, 16)
        assert len(set(grid.order)) == 128
        assert sorted(grid.position.values()) == [(r, c) for r in range(8) for c in range(16)]
        for r in range(8):
            lons = [grid.coords[grid.order[r * 16 + c]][1] for c in range(16)]
            assert lons == sorted(lons)

    def test_wrong_count_fatal(self):
        with pytest.raises(DataError):
            assign_grid([(1, 40.7, -74.0)], 2, 2)

    def test_modal_coordinates(self):
        records = [trip(0, 0, s=1, e=1, lat=40.7, lon=-74.0)] * 3
        records.append(trip(0, 0, s=1, e=1, lat=40.8, lon=-73.9))
        coords = station_coordinates(records)
        assert coords[1] == (40.7, -74.0)


class TestBuildSeries:
    def grid2(self):
        return assign_grid([(1, 41.0, -74.2), (2, 41.0, -73.8),
                            (3, 40.5, -74.2), (4, 40.5, -73.8)], 2, 2)

    def test_counts_three_starts_in_one_hour(self):
        t0 = APRIL_1_2014
        records = [trip(t0 + 7 * 3600 + k * 60, t0 + 8 * 3600, s=1, e=2) for k in range(3)]
        series, audit = build_demand_series(records, self.grid2(), t0, t0 + 24 * 3600)
        assert series.values[7, 0, 0, 0] == 3.0
        assert audit["accepted_starts"] == 3

    def test_start_and_stop_binned_independently(self):
        t0 = APRIL_1_2014
        rec = trip(t0 + 9 * 3600 + 59 * 60, t0 + 10 * 3600 + 60, s=1, e=1)
        series, _ = build_demand_series([rec], self.grid2(), t0, t0 + 24 * 3600)
        assert series.values[9, 0, 0, 0] == 1.0   # start in hour 9
        assert series.values[10, 1, 0, 0] == 1.0  # stop in hour 10

    def test_out_of_range_and_unknown_station_audited(self):
        t0 = APRIL_1_2014
        records = [
            trip(t0 - 10, t0 + 30, s=1, e=1),          # start before range
            trip(t0 + 30, t0 + 60, s=999, e=1),        # unknown start station
        ]
        series, audit = build_demand_series(records, self.grid2(), t0, t0 + 3600)
        assert audit["out_of_range_starts"] == 1
        assert audit["unselected_station_starts"] == 1
        assert audit["accepted_stops"] == 2
        assert series.values[:, 0].sum() == audit["accepted_starts"] == 0

    def test_conservation_channel_sums(self):
        rng = np.random.default_rng(2)
        t0 = APRIL_1_2014
        grid = self.grid2()
        records = []
        for _ in range(500):
            start = t0 + int(rng.integers(0, 48 * 3600))
            records.append(trip(start, start + int(rng.integers(0, 7200)),
                                s=int(rng.choice([1, 2, 3, 4])),
                                e=int(rng.choice([1, 2, 3, 4]))))
        series, audit = build_demand_series(records, grid, t0, t0 + 48 * 3600)
        assert series.values[:, 0].sum() == audit["accepted_starts"]
        assert series.values[:, 1].sum() == audit["accepted_stops"]
        assert audit["accepted_starts"] == 500  # all starts inside the range

    def test_unaligned_range_rejected(self):
        with pytest.raises(UsageError):
            build_demand_series([], self.grid2(), 10, 7210)

    def test_derive_time_range_covers_starts(self):
        records = [trip(APRIL_1_2014 + 100, APRIL_1_2014 + 200),
                   trip(APRIL_1_2014 + 5 * 3600, APRIL_1_2014 + 6 * 3600)]
        t0, t1 = derive_time_range(records)
        assert t0 == APRIL_1_2014
        assert t1 == APRIL_1_2014 + 6 * 3600


class TestWindows:
    def test_count_and_target_indices(self):
        series = random_demand_series(5, seed=3)
        windows = make_windows(series, seq_len=3)
        assert len(windows) == 2
        assert [w.target_index for w in windows] == [3, 4]
        np.testing.assert_array_equal(windows[0].inputs, series.values[0:3])
        np.testing.assert_array_equal(windows[0].target, series.values[3])

    def test_hour_label_midnight_start(self):
        series = random_demand_series(30, seed=4, start_epoch=0)
        windows = make_windows(series, seq_len=3)
        by_index = {w.target_index: w for w in windows}
        assert by_index[27].hour == 3

    def test_matches_slicing_oracle(self):
        series = random_demand_series(12, seed=5)
        windows = make_windows(series, seq_len=3)
        for w in windows:
            t = w.target_index
            np.testing.assert_array_equal(w.inputs, series.values[t - 3:t])
            np.testing.assert_array_equal(w.target, series.values[t])
            assert w.hour == ((series.start_epoch + t * 3600) // 3600) % 24

    def test_too_short_series_fatal(self):
        with pytest.raises(DataError):
            make_windows(random_demand_series(3, seed=6), seq_len=3)


class TestSplit:
    def test_full_scale_test_count_matches_timestamp_oracle(self):
        series = random_demand_series(4392, seed=7, start_epoch=APRIL_1_2014)
        windows = make_windows(series, seq_len=3)
        train, val, test = split_dataset(windows, test_days=10, val_frac=0.1)
        boundary = series.end_epoch - 10 * 86400
        oracle = sum(1 for w in windows if w.target_epoch >= boundary)
        assert len(test) == oracle == 240
        assert len(train) + len(val) + len(test) == len(windows) == 4389

    def test_partition_disjoint_by_target_index(self):
        series = random_demand_series(400, seed=8)
        windows = make_windows(series, seq_len=3)
        train, val, test = split_dataset(windows, test_days=2, val_frac=0.1)
        ids = [w.target_index for w in train + val + test]
        assert len(ids) == len(set(ids)) == len(windows)

    def test_val_is_latest_slice_of_non_test(self):
        series = random_demand_series(400, seed=9)
        windows = make_windows(series, seq_len=3)
        train, val, test = split_dataset(windows, test_days=2, val_frac=0.1)
        assert max(w.target_epoch for w in train) < min(w.target_epoch for w in val)
        assert max(w.target_epoch for w in val) < min(w.target_epoch for w in test)

    def test_empty_split_fatal(self):
        series = random_demand_series(30, seed=10)
        windows = make_windows(series, seq_len=3)
        with pytest.raises(DataError, match="empty split"):
            split_dataset(windows, test_days=10, val_frac=0.1)

    def test_windows_to_arrays_shapes(self):
        series = random_demand_series(30, seed=11)
        windows = make_windows(series, seq_len=3)
        inputs, hours, targets = windows_to_arrays(windows)
        assert inputs.shape == (27, 3, 2, 2, 2)
        assert hours.shape == (27,)
        assert targets.shape == (27, 2, 2, 2)


class TestEmbeddings:
    def write_table(self, path, hours=range(24), dim=4, shuffle=False):
        rng = np.random.default_rng(12)
        lines = [f"{h} " + " ".join(f"{v:.6f}" for v in rng.normal(size=dim)) for h in hours]
        if shuffle:
            lines = lines[::-1]
        path.write_text("\n".join(lines) + "\n")

    def test_round_trip(self, tmp_path):
        path = tmp_path / "emb.txt"
        self.write_table(path, dim=4, shuffle=True)
        table = load_hour_embeddings(path, dim=4)
        assert table.shape == (24, 4)
        first_line = path.read_text().splitlines()[0].split()
        np.testing.assert_allclose(table[int(first_line[0])],
                                   [float(x) for x in first_line[1:]])

    def test_missing_hour_is_named(self, tmp_path):
        path = tmp_path / "emb.txt"
        self.write_table(path, hours=[h for h in range(24) if h != 17])
        with pytest.raises(DataError, match="17"):
            load_hour_embeddings(path, dim=4)

    def test_dimension_mismatch_fatal(self, tmp_path):
        path = tmp_path / "emb.txt"
        self.write_table(path, dim=4)
        with pytest.raises(DataError, match="expected 6"):
            load_hour_embeddings(path, dim=6)

    def test_extra_tokens_ignored(self, tmp_path):
        path = tmp_path / "emb.txt"
        self.write_table(path, dim=3)
        with open(path, "a") as fh:
            fh.write("the 0.1 0.2 0.3\n48 1.0 2.0\n")  # words and non-hours skipped
        table = load_hour_embeddings(path, dim=3)
        assert table.shape == (24, 3)

    def test_generated_table_deterministic_and_unit_variance(self):
        a = generate_hour_embeddings(50, seed=13)
        b = generate_hour_embeddings(50, seed=13)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (24, 50)
        assert abs(a.std() - 1.0) < 0.1
        assert not np.array_equal(a, generate_hour_embeddings(50, seed=14))


class TestSeriesFile:
    def test_round_trip_and_header(self, tmp_path):
        series = random_demand_series(10, rows=2, cols=3, seed=15, start_epoch=APRIL_1_2014)
        path = tmp_path / "demand.stdm"
        write_demand_series(path, series)
        with open(path, "rb") as fh:
            assert fh.read(4) == b"STDM"
        loaded = read_demand_series(path)
        assert loaded.start_epoch == APRIL_1_2014
        assert loaded.interval_seconds == 3600
        np.testing.assert_array_equal(loaded.values, series.values)

    def test_byte_identical_rewrites(self, tmp_path):
        series = random_demand_series(6, seed=16)
        p1, p2 = tmp_path / "a.stdm", tmp_path / "b.stdm"
        write_demand_series(p1, series)
        write_demand_series(p2, series)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.stdm"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataError, match="magic"):
            read_demand_series(path)

    def test_station_map_sidecar(self, tmp_path):
        grid = assign_grid([(1, 41.0, -74.2), (2, 41.0, -73.8),
                            (3, 40.5, -74.2), (4, 40.5, -73.8)], 2, 2)
        path = tmp_path / "map.json"
        write_station_map(path, grid)
        import json
        payload = json.loads(path.read_text())
        assert payload["1"] == [0, 0, 41.0, -74.2]
        assert len(payload) == 4


class TestSynthetic:
    def test_regime_series_is_integral_and_nonnegative(self):
        series = regime_demand_series(200, seed=17)
        assert series.values.min() >= 0
        np.testing.assert_array_equal(series.values, np.round(series.values))

    def test_regime_series_follows_declared_maps(self):
        series, maps, biases = regime_demand_series(400, seed=18, noise=0.0,
                                                    return_maps=True)
        flat = series.values.reshape(400, -1).astype(np.float64)
        for t in range(1, 400):
            r = (t % 24) % 4
            expected = np.maximum(np.round(maps[r] @ flat[t - 1] + biases[r]), 0.0)
            np.testing.assert_array_equal(flat[t], expected)
