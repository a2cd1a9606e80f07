import json

import numpy as np
import pandas as pd
import pytest

from mfgp.cli import main
from mfgp.data import FidelityDataset
from mfgp.ingest import ColumnMapping, nearest_lf_selection, read_station_csv


@pytest.fixture()
def station_csv(tmp_path):
    path = tmp_path / "stations.csv"
    pd.DataFrame(
        {
            "station_id": ["a1", "a1", "b2", "b2", "c3", "c3"],
            "lon": [9.8, 9.8, 10.0, 10.0, 9.9, 9.9],
            "lat": [53.5, 53.5, 53.6, 53.6, 53.55, 53.55],
            "timestamp": ["2021-01-01", "2021-01-02"] * 3,
            "value": [4.5, 5.5, 10.0, 12.0, 7.0, 8.0],
            "fidelity": ["LF", "LF", "HF", "HF", "LF", "LF"],
        }
    ).to_csv(path, index=False)
    return path


class TestReadStationCsv:
    def test_well_formed_file(self, station_csv):
        result = read_station_csv(station_csv)
        assert result.quality.n_skipped == 0
        assert result.dataset.n_lf == 4
        assert result.dataset.n_hf == 2
        # ISO dates normalised to a day index starting at zero
        assert set(result.dataset.lf_times) == {0.0, 1.0}
        assert result.dataset.station_labels[result.dataset.hf_station[0]] == "b2"

    def test_malformed_value_skipped(self, tmp_path):
        path = tmp_path / "bad.csv"
        pd.DataFrame(
            {
                "station_id": ["a", "a", "b", "b"],
                "lon": [1.0, 1.0, 2.0, 2.0],
                "lat": [1.0, 1.0, 2.0, 2.0],
                "timestamp": [0, 1, 0, 1],
                "value": ["NaN", "3.0", "4.0", "5.0"],
                "fidelity": ["LF", "LF", "HF", "HF"],
            }
        ).to_csv(path, index=False)
        result = read_station_csv(path)
        assert result.quality.n_skipped == 1
        assert result.dataset.n_lf == 1

    def test_sentinel_extreme_kept_and_flagged(self, tmp_path):
        path = tmp_path / "sentinel.csv"
        pd.DataFrame(
            {
                "station_id": ["a", "a", "b"],
                "lon": [1.0, 1.0, 2.0],
                "lat": [1.0, 1.0, 2.0],
                "timestamp": [0, 1, 0],
                "value": [999.900, 3.0, 4.0],
                "fidelity": ["LF", "LF", "HF"],
            }
        ).to_csv(path, index=False)
        result = read_station_csv(path)
        assert result.quality.n_sentinel == 1
        assert 999.9 in result.dataset.lf_values
        filtered = read_station_csv(path, prefilter_max=500.0)
        assert 999.9 not in filtered.dataset.lf_values

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "missing.csv"
        pd.DataFrame({"station_id": ["a"], "value": [1.0]}).to_csv(path, index=False)
        with pytest.raises(ValueError, match="missing required columns"):
            read_station_csv(path)

    def test_zero_valid_rows_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        pd.DataFrame(
            {
                "station_id": ["a"],
                "lon": [1.0],
                "lat": [1.0],
                "timestamp": [0],
                "value": ["junk"],
                "fidelity": ["LF"],
            }
        ).to_csv(path, index=False)
        with pytest.raises(ValueError, match="no valid rows"):
            read_station_csv(path)

    def test_column_mapping(self, tmp_path):
        path = tmp_path / "mapped.csv"
        pd.DataFrame(
            {
                "sid": ["a", "b"],
                "x": [1.0, 2.0],
                "y": [1.0, 2.0],
                "day": [0, 0],
                "pm25": [3.0, 4.0],
                "tier": ["low", "high"],
            }
        ).to_csv(path, index=False)
        mapping = ColumnMapping(
            station_id="sid", lon="x", lat="y", timestamp="day", value="pm25",
            fidelity="tier", hf_marker="high", lf_marker="low",
        )
        result = read_station_csv(path, mapping=mapping)
        assert result.dataset.n_lf == 1 and result.dataset.n_hf == 1

    def test_bbox_filter(self, station_csv):
        # station a1 (lon 9.8) falls outside the box and is dropped
        result = read_station_csv(station_csv, bbox=(9.85, 10.05, 53.4, 53.7))
        assert result.dataset.n_lf == 2
        assert "a1" not in result.dataset.station_labels.values()
        assert result.quality.n_skipped == 2

    def test_daily_mean_aggregation(self, tmp_path):
        path = tmp_path / "hourly.csv"
        pd.DataFrame(
            {
                "station_id": ["a"] * 4 + ["b"] * 2,
                "lon": [1.0] * 4 + [2.0] * 2,
                "lat": [1.0] * 4 + [2.0] * 2,
                "timestamp": [0.1, 0.6, 1.2, 1.9, 0.5, 1.5],
                "value": [1.0, 3.0, 5.0, 7.0, 2.0, 4.0],
                "fidelity": ["LF"] * 4 + ["HF"] * 2,
            }
        ).to_csv(path, index=False)
        result = read_station_csv(path, daily_mean=True)
        assert result.dataset.n_lf == 2
        assert sorted(result.dataset.lf_values.tolist()) == [2.0, 6.0]

    def test_round_trip_lossless(self, station_csv, tmp_path):
        result = read_station_csv(station_csv)
        out = tmp_path / "roundtrip.csv"
        result.dataset.to_frame().to_csv(out, index=False)
        back = FidelityDataset.from_frame(pd.read_csv(out))
        assert np.array_equal(back.lf_values, result.dataset.lf_values)
        assert np.array_equal(back.hf_points, result.dataset.hf_points)


class TestNearestLfSelection:
    def test_basic_k_nearest(self):
        hf = [("H", 0.0, 0.0)]
        lf = [("a", 0.1, 0.0), ("b", 5.0, 0.0), ("c", 0.0, 0.2)]
        assert nearest_lf_selection(hf, lf, k=2) == ["a", "c"]

    def test_union_deduplicates(self):
        hf = [("H1", 0.0, 0.0), ("H2", 0.2, 0.0)]
        lf = [("a", 0.1, 0.0), ("b", 0.15, 0.0), ("c", 9.0, 9.0)]
        selected = nearest_lf_selection(hf, lf, k=2)
        assert selected == ["a", "b"]

    def test_input_order_invariance_with_ties(self):
        hf = [("H", 0.0, 0.0)]
        lf = [("b", 1.0, 0.0), ("a", -1.0, 0.0), ("c", 0.0, 1.0)]
        first = nearest_lf_selection(hf, lf, k=2)
        second = nearest_lf_selection(hf, list(reversed(lf)), k=2)
        assert first == second == ["a", "b"]  # tie at distance 1 broken by id

    def test_k_larger_than_pool(self):
        hf = [("H", 0.0, 0.0)]
        lf = [("a", 1.0, 0.0)]
        assert nearest_lf_selection(hf, lf, k=15) == ["a"]

    def test_selection_bounded_by_pool(self, rng):
        hf = [(f"H{i}", x, y) for i, (x, y) in enumerate(rng.uniform(0, 1, (4, 2)))]
        lf = [(f"L{i:02d}", x, y) for i, (x, y) in enumerate(rng.uniform(0, 1, (40, 2)))]
        selected = nearest_lf_selection(hf, lf, k=15)
        assert len(selected) <= min(40, 15 * 4)
        assert len(set(selected)) == len(selected)

    def test_validation(self):
        with pytest.raises(ValueError):
            nearest_lf_selection([], [("a", 0, 0)], k=1)
        with pytest.raises(ValueError):
            nearest_lf_selection([("H", 0, 0)], [("a", 0, 0)], k=0)


@pytest.fixture()
def sim_csv(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"dgp": {"grid_side": 3, "n_times": 5}}))
    out = tmp_path / "sim"
    assert main(["simulate", "--seed", "3", "--config", str(config), "--out", str(out)]) == 0
    return out / "dataset.csv", config


class TestCli:
    def test_simulate_deterministic(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"dgp": {"grid_side": 3, "n_times": 5}}))
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--seed", "7", "--config", str(config), "--out", str(out1)]) == 0
        assert main(["simulate", "--seed", "7", "--config", str(config), "--out", str(out2)]) == 0
        assert (out1 / "dataset.csv").read_bytes() == (out2 / "dataset.csv").read_bytes()
        manifest = json.loads((out1 / "simulate_manifest.json").read_text())
        assert manifest["seed"] == 7
        assert "config_sha256" in manifest

    def test_contaminate_and_mask(self, sim_csv, tmp_path):
        data, _ = sim_csv
        out = tmp_path / "contam"
        code = main(
            ["contaminate", "--data", str(data), "--kind", "outlier", "--magnitude", "5",
             "--eta", "0.3", "--seed", "1", "--out", str(out)]
        )
        assert code == 0
        mask = pd.read_csv(out / "mask.csv")
        assert mask["contaminated"].sum() > 0
        contaminated = pd.read_csv(out / "contaminated.csv")
        original = pd.read_csv(data)
        assert len(contaminated) == len(original)

    def test_fit_predict_cycle(self, sim_csv, tmp_path):
        data, _ = sim_csv
        fit_out = tmp_path / "fit"
        code = main(
            ["fit", "--data", str(data), "--loss", "huber", "--max-iter", "40",
             "--seed", "2", "--out", str(fit_out)]
        )
        assert code == 0
        payload = json.loads((fit_out / "fit.json").read_text())
        assert payload["loss"] == "huber"
        assert np.isfinite(payload["objective"])
        assert payload["delta_used"] > 0

        points = tmp_path / "query.csv"
        pd.DataFrame({"s1": [1.0, 2.0], "s2": [1.0, 2.0], "t": [0.5, 0.5]}).to_csv(points, index=False)
        pred_out = tmp_path / "pred"
        code = main(
            ["predict", "--data", str(data), "--theta", str(fit_out / "fit.json"),
             "--points", str(points), "--out", str(pred_out)]
        )
        assert code == 0
        pred = pd.read_csv(pred_out / "predictions.csv")
        assert list(pred.columns) == ["s1", "s2", "t", "mean", "sd"]
        assert np.all(np.isfinite(pred["mean"]))

    def test_predict_grid(self, sim_csv, tmp_path):
        data, _ = sim_csv
        fit_out = tmp_path / "fit"
        main(["fit", "--data", str(data), "--loss", "gaussian", "--max-iter", "30",
              "--seed", "2", "--out", str(fit_out)])
        grid_out = tmp_path / "grid"
        code = main(
            ["predict", "--data", str(data), "--theta", str(fit_out / "fit.json"),
             "--grid", "4x3", "--bbox", "1,3,1,3", "--times", "0.25,0.75",
             "--out", str(grid_out)]
        )
        assert code == 0
        grid = pd.read_csv(grid_out / "grid.csv")
        assert len(grid) == 4 * 3 * 2
        assert list(grid.columns) == ["lon", "lat", "t", "mean", "sd"]

    def test_mc_smoke(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(
            json.dumps({"dgp": {"grid_side": 3, "n_times": 5, "train_fraction": 0.7}})
        )
        out = tmp_path / "mc"
        code = main(
            ["mc", "--grid", "m=2", "eta=0.1", "--runs", "2", "--config", str(config),
             "--max-iter", "25", "--jobs", "1", "--seed", "5", "--out", str(out)]
        )
        assert code == 0
        cells = pd.read_csv(out / "mc_cells.csv")
        assert len(cells) == 2
        ledger = pd.read_csv(out / "mc_ledger.csv")
        assert set(ledger["estimator"]) == {"gaussian", "huber"}

    def test_stats_by_type(self, sim_csv, tmp_path):
        data, _ = sim_csv
        out = tmp_path / "stats"
        assert main(["stats", "--data", str(data), "--by", "type", "--out", str(out)]) == 0
        table = pd.read_csv(out / "stats.csv")
        assert set(table["group"]) == {"LF", "HF"}

    def test_k_nearest_filters_lf_stations(self, tmp_path):
        rng = np.random.default_rng(1)
        rows = []
        for i, (x, y) in enumerate(rng.uniform(0.0, 1.0, size=(6, 2))):
            for day in (0, 1):
                rows.append((f"L{i}", x, y, day, 5.0 + i, "LF"))
        rows += [("H0", 0.5, 0.5, 0, 7.0, "HF"), ("H0", 0.5, 0.5, 1, 7.5, "HF")]
        path = tmp_path / "sites.csv"
        pd.DataFrame(rows, columns=["station_id", "lon", "lat", "timestamp", "value", "fidelity"]).to_csv(
            path, index=False
        )
        fit_out = tmp_path / "fitk"
        code = main(
            ["fit", "--data", str(path), "--ingest", "--k-nearest", "2",
             "--loss", "gaussian", "--max-iter", "10", "--out", str(fit_out)]
        )
        assert code == 0

    def test_fit_then_predict_at_training_points_self_consistent(self, sim_csv, tmp_path):
        # clean data: huber fit + prediction at training HF points sits near
        # the noise floor
        data, _ = sim_csv
        fit_out = tmp_path / "fit_sc"
        assert main(["fit", "--data", str(data), "--loss", "huber", "--max-iter", "60",
                     "--seed", "4", "--out", str(fit_out)]) == 0
        frame = pd.read_csv(data)
        hf = frame[frame["fidelity"] == "HF"]
        points = tmp_path / "train_points.csv"
        hf[["s1", "s2", "t"]].to_csv(points, index=False)
        pred_out = tmp_path / "pred_sc"
        assert main(["predict", "--data", str(data), "--theta", str(fit_out / "fit.json"),
                     "--points", str(points), "--out", str(pred_out)]) == 0
        pred = pd.read_csv(pred_out / "predictions.csv")
        mae = np.mean(np.abs(pred["mean"].to_numpy() - hf["value"].to_numpy()))
        # noise sd is sqrt(0.3) = 0.55; interpolation at observed points
        # should sit well inside one noise sd
        assert mae < 0.55

    def test_theory_command(self, tmp_path):
        out = tmp_path / "theory"
        assert main(["theory", "--magnitude", "5", "--eta", "0.1", "--seed", "0",
                     "--out", str(out)]) == 0
        att = pd.read_csv(out / "attenuation.csv")
        assert 0.0 < att["kappa"].iloc[0] <= 1.0
        curves = pd.read_csv(out / "influence_curves.csv")
        assert set(curves["estimator"]) == {"gaussian", "huber"}
        bounds = pd.read_csv(out / "bound_report.csv")
        assert set(bounds["regime"]) == {"general_whitening", "fixed_whitening"}
        assert (bounds["C_delta"] > 0).all()

    def test_error_is_machine_readable(self, tmp_path, capsys):
        code = main(["fit", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
        assert code == 1
        err = capsys.readouterr().err
        payload = json.loads(err.strip().splitlines()[-1])
        assert "error" in payload

    def test_cv_smoke(self, tmp_path):
        # small synthetic CV dataset written through the dataset CSV schema
        from mfgp.covariance import ModelParams
        from mfgp.kernels import KernelParams
        from mfgp.simulation import simulate_at_sites

        theta = ModelParams(
            rho=0.6,
            kernel_L=KernelParams(2.0, 0.8, 0.8, 2.0),
            kernel_delta=KernelParams(0.8, 1.2, 1.2, 2.0),
            tau_L_sq=0.3,
            tau_H_sq=0.3,
        )
        rng = np.random.default_rng(0)
        sim = simulate_at_sites(
            rng.uniform(0, 3, (4, 2)), rng.uniform(0.5, 2.5, (2, 2)), np.arange(30.0), theta, seed=1
        )
        data = tmp_path / "cv_data.csv"
        sim.dataset.to_frame().to_csv(data, index=False)
        out = tmp_path / "cv"
        code = main(
            ["cv", "--data", str(data), "--window-len", "30", "--models", "gaussian",
             "--max-iter", "25", "--out", str(out)]
        )
        assert code == 0
        report = pd.read_csv(out / "cv_report.csv")
        assert len(report) == 2
        summary = json.loads((out / "cv_summary.json").read_text())
        assert summary["n_folds"] == 2
