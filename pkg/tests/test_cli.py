"""End-to-end CLI tests driving main() in process."""

import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from stdinet.cli import main, parse_overrides, resolve_path
from stdinet.data import random_demand_series, read_demand_series, write_demand_series

HEADER = ",".join(f'"{c}"' for c in (
    "tripduration", "starttime", "stoptime",
    "start station id", "start station name",
    "start station latitude", "start station longitude",
    "end station id", "end station name",
    "end station latitude", "end station longitude",
    "bikeid", "usertype", "birth year", "gender"))


def synth_trips_csv(path, n_stations=128, days=3, per_hour=40, seed=0):
    """Deterministic citywide trip file covering n_stations."""
    rng = np.random.default_rng(seed)
    lats = rng.uniform(40.65, 40.85, size=n_stations)
    lons = rng.uniform(-74.05, -73.90, size=n_stations)
    rows = []
    for day in range(days):
        for hour in range(24):
            for k in range(per_hour):
                s = int(rng.integers(0, n_stations))
                e = int(rng.integers(0, n_stations))
                minute = int(rng.integers(0, 50))
                start = f"2014-04-{day + 1:02d} {hour:02d}:{minute:02d}:00"
                stop = f"2014-04-{day + 1:02d} {hour:02d}:{minute + 9:02d}:00"
                rows.append(
                    f'"540","{start}","{stop}","{s + 100}","s{s}","{lats[s]:.6f}","{lons[s]:.6f}",'
                    f'"{e + 100}","s{e}","{lats[e]:.6f}","{lons[e]:.6f}","1","Subscriber","1980","1"'
                )
    path.write_text(HEADER + "\n" + "\n".join(rows) + "\n")
    return len(rows)


@pytest.fixture()
def toy_series_path(tmp_path):
    series = random_demand_series(250, seed=0, start_epoch=1396310400)
    path = tmp_path / "toy.stdm"
    write_demand_series(path, series)
    return path


FAST = "epochs=2,patience=2,batch_size=32,test_days=2"


class TestIngest:
    def test_round_trip_header(self, tmp_path):
        trips = tmp_path / "trips.csv"
        synth_trips_csv(trips)
        out = tmp_path / "series.stdm"
        assert main(["ingest", "--trips", str(trips), "--out", str(out),
                     "--stations", "128", "--grid", "8x16", "--interval", "3600"]) == 0
        series = read_demand_series(out)
        assert (series.rows, series.cols) == (8, 16)
        assert series.interval_seconds == 3600
        assert (tmp_path / "series.stdm.stations.json").exists()
        assert (tmp_path / "series.stdm.manifest.json").exists()

    def test_two_runs_byte_identical(self, tmp_path):
        trips = tmp_path / "trips.csv"
        synth_trips_csv(trips)
        outs = []
        for name in ("a.stdm", "b.stdm"):
            out = tmp_path / name
            assert main(["ingest", "--trips", str(trips), "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_conservation_against_row_count(self, tmp_path):
        trips = tmp_path / "trips.csv"
        n_rows = synth_trips_csv(trips, per_hour=10)
        out = tmp_path / "series.stdm"
        assert main(["ingest", "--trips", str(trips), "--out", str(out)]) == 0
        series = read_demand_series(out)
        # every synthetic trip starts and stops inside the range at selected stations
        assert int(series.values[:, 0].sum()) == n_rows
        assert int(series.values[:, 1].sum()) == n_rows

    def test_schema_error_exit_code(self, tmp_path):
        trips = tmp_path / "bad.csv"
        trips.write_text("starttime,stoptime\n")
        out = tmp_path / "series.stdm"
        assert main(["ingest", "--trips", str(trips), "--out", str(out)]) == 3


class TestTrain:
    def test_checkpoint_round_trip_eval(self, toy_series_path, tmp_path, capsys):
        ckpt = tmp_path / "model.ckpt"
        rc = main(["train", "--data", str(toy_series_path), "--model", "TemporalFC",
                   "--config", FAST, "--seed", "1", "--out", str(ckpt)])
        assert rc == 0
        assert ckpt.exists()
        assert (tmp_path / "model.ckpt.log.jsonl").exists()
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(toy_series_path)]) == 0
        first = capsys.readouterr().out
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(toy_series_path)]) == 0
        second = capsys.readouterr().out
        assert first == second
        assert "rmse=" in first

    def test_unified_spatial_kind_accepted(self, toy_series_path, tmp_path):
        ckpt = tmp_path / "us.ckpt"
        rc = main(["train", "--data", str(toy_series_path), "--model", "UnifiedSpatial",
                   "--config", FAST + ",channels=4,lstm_hidden=8,rank=4,embed_dim=6",
                   "--seed", "0", "--out", str(ckpt)])
        assert rc == 0

    def test_unknown_kind_rejected_with_list(self, toy_series_path, tmp_path, caplog):
        rc = main(["train", "--data", str(toy_series_path), "--model", "NotAModel",
                   "--out", str(tmp_path / "x.ckpt")])
        assert rc == 2
        assert "UnifiedSpatial" in caplog.text

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_divergence_exit_code(self, toy_series_path, tmp_path):
        rc = main(["train", "--data", str(toy_series_path), "--model", "TemporalFC",
                   "--config", FAST + ",lr=1e30", "--seed", "0",
                   "--out", str(tmp_path / "d.ckpt")])
        assert rc == 1


class TestEval:
    def test_zero_model_rmse_equals_target_rms(self, toy_series_path, tmp_path, capsys):
        from stdinet.model import TOY_DIMS, build_model, save_checkpoint
        from stdinet.data import make_windows, read_demand_series, split_dataset, windows_to_arrays

        model = build_model("SpatialTemporalFC", TOY_DIMS, seed=0, dtype=np.float32)
        for _, p in model.named_tensors():
            p.data[...] = 0.0
        ckpt = tmp_path / "zero.ckpt"
        save_checkpoint(ckpt, model, extra={"test_days": 2})
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(toy_series_path)]) == 0
        out = capsys.readouterr().out
        payload = json.loads(out.splitlines()[-1])
        series = read_demand_series(toy_series_path)
        _, _, test = split_dataset(make_windows(series, 3), test_days=2, val_frac=0.1)
        _, _, targets = windows_to_arrays(test)
        assert payload["rmse"] == pytest.approx(float(np.sqrt(np.mean(targets ** 2))), rel=1e-6)

    def test_dim_mismatch_diagnostic(self, tmp_path, caplog):
        from stdinet.model import TOY_DIMS, build_model, save_checkpoint

        model = build_model("TemporalFC", TOY_DIMS, seed=0, dtype=np.float32)
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, model)
        series = random_demand_series(250, rows=4, cols=4, seed=1)
        data = tmp_path / "wide.stdm"
        write_demand_series(data, series)
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(data)]) == 3
        assert "4x4" in caplog.text and "2x2" in caplog.text


class TestGradcheck:
    def test_fast_pass_under_budget(self, capsys, tmp_path):
        import time
        started = time.time()
        assert main(["gradcheck", "--dims", "toy", "--seeds", "1",
                     "--out", str(tmp_path)]) == 0
        assert time.time() - started < 30
        out = capsys.readouterr().out
        assert "gradcheck: pass" in out
        assert "conv2d" in out
        assert (tmp_path / "gradcheck.json").exists()
        assert (tmp_path / "gradcheck.manifest.json").exists()

    def test_corrupted_backward_detected(self, capsys, monkeypatch, tmp_path):
        import stdinet.tensor as T

        original = T.tanh

        def broken_tanh(x):
            out = np.tanh(x.data)
            # wrong derivative: drops the 1 - tanh^2 factor
            return T._record("tanh", (x,), out, lambda g: (g,))

        monkeypatch.setattr(T, "tanh", broken_tanh)
        import stdinet.gradcheck
        import stdinet.layers
        monkeypatch.setattr(stdinet.layers.T, "tanh", broken_tanh)
        assert main(["gradcheck", "--dims", "toy", "--seeds", "1",
                     "--out", str(tmp_path)]) == 1
        assert "FAIL" in capsys.readouterr().out
        monkeypatch.setattr(T, "tanh", original)


class TestBench:
    def test_table2_has_six_rows(self, toy_series_path, tmp_path, capsys):
        rc = main(["bench", "--data", str(toy_series_path), "--suite", "table2",
                   "--seed", "0", "--out", str(tmp_path),
                   "--config", FAST + ",epochs=1,patience=1"])
        assert rc == 0
        rows = list(csv.DictReader((tmp_path / "bench_table2.csv").open()))
        assert len(rows) == 6
        assert {r["method"] for r in rows} == {
            "SpatialFC", "TemporalFC", "SpatialTemporalFC", "SpatialDI", "TemporalDI", "STDI"}

    def test_table3_includes_fusion_variant(self, toy_series_path, tmp_path):
        rc = main(["bench", "--data", str(toy_series_path), "--suite", "table3",
                   "--seed", "0", "--out", str(tmp_path),
                   "--config", FAST + ",epochs=1,patience=1"])
        assert rc == 0
        rows = list(csv.DictReader((tmp_path / "bench_table3.csv").open()))
        assert "STDIFusion" in {r["method"] for r in rows}

    def test_same_seed_identical_csv(self, toy_series_path, tmp_path):
        blobs = []
        for sub in ("r1", "r2"):
            out = tmp_path / sub
            rc = main(["bench", "--data", str(toy_series_path), "--suite", "table1",
                       "--seed", "7", "--out", str(out),
                       "--config", FAST + ",epochs=1,patience=1"])
            assert rc == 0
            blobs.append((out / "bench_table1.csv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_parallel_matches_sequential(self, toy_series_path, tmp_path):
        blobs = []
        for sub, extra in (("seq", []), ("par", ["--parallel"])):
            out = tmp_path / sub
            rc = main(["bench", "--data", str(toy_series_path), "--suite", "table1",
                       "--seed", "2", "--out", str(out),
                       "--config", FAST + ",epochs=1,patience=1"] + extra)
            assert rc == 0
            blobs.append((out / "bench_table1.csv").read_bytes())
        assert blobs[0] == blobs[1]


class TestPlumbing:
    def test_parse_overrides(self):
        assert parse_overrides("lr=0.01, epochs=5") == {"lr": "0.01", "epochs": "5"}
        from stdinet.errors import UsageError
        with pytest.raises(UsageError):
            parse_overrides("nonsense")

    def test_env_data_dir_resolution(self, tmp_path, monkeypatch):
        (tmp_path / "inner").mkdir()
        target = tmp_path / "inner" / "f.stdm"
        target.write_bytes(b"x")
        monkeypatch.setenv("STDI_DATA_DIR", str(tmp_path))
        assert resolve_path("inner/f.stdm") == target
        monkeypatch.delenv("STDI_DATA_DIR")
        assert resolve_path("inner/f.stdm") == Path("inner/f.stdm")

    def test_usage_error_exit_code(self):
        assert main(["bench", "--data", "/nonexistent.stdm", "--suite", "table1"]) == 3
