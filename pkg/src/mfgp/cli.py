"""Command-line surface: simulate, contaminate, fit, predict, cv, mc, theory, stats."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .covariance import ModelParams, WhiteningMode
from .data import FidelityDataset
from .estimation import (
    HuberConfig,
    OptimizerOptions,
    empirical_center,
    fit,
    heuristic_init,
)
from .evaluation import EstimatorSpec, descriptive_stats, st_block_cv
from .ingest import ColumnMapping, read_station_csv
from .kernels import KernelParams
from .prediction import krige_grid, predict_hf
from .simulation import (
    ContaminationSpec,
    DgpConfig,
    apply_contamination,
    dgp_model_params,
    run_mc_study,
    simulate_mf,
)
from .theory import huber_influence_bound, influence_curve, pseudo_true_rho

__all__ = ["main"]


# ---------------------------------------------------------------------------
# small serialization helpers
# ---------------------------------------------------------------------------

def _theta_to_dict(theta: ModelParams) -> dict:
    return {
        "rho": theta.rho,
        "kernel_L": asdict(theta.kernel_L),
        "kernel_delta": asdict(theta.kernel_delta),
        "tau_L_sq": theta.tau_L_sq,
        "tau_H_sq": theta.tau_H_sq,
    }


def _theta_from_dict(d: dict) -> ModelParams:
    return ModelParams(
        rho=float(d["rho"]),
        kernel_L=KernelParams(**d["kernel_L"]),
        kernel_delta=KernelParams(**d["kernel_delta"]),
        tau_L_sq=float(d["tau_L_sq"]),
        tau_H_sq=float(d["tau_H_sq"]),
    )


def _parse_whitening(text: str) -> WhiteningMode:
    if text in ("diag", "diagonal"):
        return WhiteningMode("diagonal")
    if text == "full":
        return WhiteningMode("full")
    if text.startswith("reg:"):
        return WhiteningMode("regularized", lam=float(text.split(":", 1)[1]))
    raise argparse.ArgumentTypeError(f"unknown whitening {text!r} (use diag|full|reg:LAMBDA)")


def _parse_grid_spec(items):
    """['m=2,5,10', 'eta=0.1,0.3'] -> list of (m, eta) scenario pairs."""
    values = {}
    for item in items:
        key, _, rest = item.partition("=")
        values[key.strip()] = [float(x) for x in rest.split(",") if x]
    if "m" not in values or "eta" not in values:
        raise argparse.ArgumentTypeError("mc grid needs m=... and eta=...")
    return [(m, eta) for m in values["m"] for eta in values["eta"]]


def _load_config(path):
    if path is None:
        return {}
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def _load_dataset(args) -> FidelityDataset:
    if getattr(args, "ingest", False):
        overrides = dict(kv.split("=", 1) for kv in (args.col_map or []))
        mapping = ColumnMapping(**overrides)
        result = read_station_csv(
            args.data,
            mapping=mapping,
            bbox=args.bbox if getattr(args, "bbox", None) else None,
            daily_mean=getattr(args, "daily_mean", False),
            prefilter_max=getattr(args, "prefilter", None),
        )
        dataset = result.dataset
        k = getattr(args, "k_nearest", None)
        if k:
            from .ingest import nearest_lf_selection

            stations = result.stations
            hf = stations[stations["fidelity"] == "HF"]
            lf = stations[stations["fidelity"] == "LF"]
            keep = nearest_lf_selection(
                list(hf[["station", "lon", "lat"]].itertuples(index=False, name=None)),
                list(lf[["station", "lon", "lat"]].itertuples(index=False, name=None)),
                k=k,
            )
            dataset = dataset.select(lf_mask=np.isin(dataset.lf_station, list(keep)))
        return dataset
    return FidelityDataset.from_frame(pd.read_csv(args.data))


def _write_manifest(out_dir: Path, command: str, config: dict, seed) -> None:
    payload = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(payload.encode()).hexdigest(),
        "seed": seed,
        "versions": {
            "mfgp": __version__,
            "numpy": np.__version__,
            "pandas": pd.__version__,
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "argv": sys.argv[1:],
    }
    (out_dir / f"{command}_manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    overrides = _load_config(args.config).get("dgp", {})
    cfg = DgpConfig(**{**overrides, "seed": args.seed})
    sim = simulate_mf(cfg)
    out = _out_dir(args)
    sim.dataset.to_frame().to_csv(out / "dataset.csv", index=False)
    np.savez(
        out / "latents.npz",
        latent_lf=sim.latent_lf,
        latent_delta=sim.latent_delta,
        noise_lf=sim.noise_lf,
        noise_delta=sim.noise_delta,
        station_coords=sim.station_coords,
    )
    _write_manifest(out, "simulate", asdict(cfg), args.seed)
    print(f"wrote {out / 'dataset.csv'} ({sim.dataset.n_lf} LF + {sim.dataset.n_hf} HF rows)")
    return 0


def _cmd_contaminate(args) -> int:
    dataset = _load_dataset(args)
    spec = ContaminationSpec(
        kind=args.kind,
        magnitude=args.magnitude,
        frequency=args.eta,
        changepoint=args.tau,
        stations=tuple(args.stations) if args.stations else None,
        seed=args.seed,
    )
    contaminated, mask = apply_contamination(dataset, spec)
    out = _out_dir(args)
    contaminated.to_frame().to_csv(out / "contaminated.csv", index=False)
    pd.DataFrame({"row": np.arange(mask.size), "contaminated": mask.astype(int)}).to_csv(
        out / "mask.csv", index=False
    )
    _write_manifest(out, "contaminate", asdict(spec), args.seed)
    print(f"contaminated {int(mask.sum())} of {mask.size} LF rows")
    return 0


def _huber_config(args) -> HuberConfig:
    return HuberConfig(c_multiplier=args.c_mult, whitening=_parse_whitening(args.whitening))


def _cmd_fit(args) -> int:
    dataset = _load_dataset(args)
    if args.center:
        dataset, _ = empirical_center(dataset)
    init = heuristic_init(dataset, args.seed)
    result = fit(
        dataset,
        init,
        loss=args.loss,
        config=_huber_config(args),
        opts=OptimizerOptions(max_iter=args.max_iter),
    )
    out = _out_dir(args)
    payload = {
        "theta_hat": _theta_to_dict(result.theta_hat),
        "objective": result.objective,
        "n_iter": result.n_iter,
        "converged": result.converged,
        "loss": result.loss,
        "delta_used": result.delta_used,
        "jitter_used": result.jitter_used,
    }
    (out / "fit.json").write_text(json.dumps(payload, indent=2))
    _write_manifest(out, "fit", {"loss": args.loss, "c_mult": args.c_mult, "whitening": args.whitening,
                                 "max_iter": args.max_iter, "center": args.center, "data": str(args.data)},
                    args.seed)
    print(f"fit ({args.loss}) converged={result.converged} objective={result.objective:.4f}")
    return 0


def _cmd_predict(args) -> int:
    dataset = _load_dataset(args)
    theta = _theta_from_dict(json.loads(Path(args.theta).read_text())["theta_hat"])
    out = _out_dir(args)
    if args.grid:
        n_lon, n_lat = (int(x) for x in args.grid.split("x"))
        times = [float(t) for t in args.times.split(",")]
        summary = krige_grid(dataset, theta, args.bbox, (n_lon, n_lat), times)
        summary.to_frame().to_csv(out / "grid.csv", index=False)
        print(f"wrote {out / 'grid.csv'} ({n_lon}x{n_lat} cells, {len(times)} times)")
    else:
        points = pd.read_csv(args.points)[["s1", "s2", "t"]].to_numpy(float)
        pred = predict_hf(dataset, theta, points)
        pd.DataFrame(
            {
                "s1": points[:, 0],
                "s2": points[:, 1],
                "t": points[:, 2],
                "mean": pred.mean,
                "sd": np.sqrt(pred.variance),
            }
        ).to_csv(out / "predictions.csv", index=False)
        print(f"wrote {out / 'predictions.csv'} ({points.shape[0]} points)")
    _write_manifest(out, "predict", {"theta": str(args.theta), "grid": args.grid,
                                     "bbox": args.bbox, "data": str(args.data)}, None)
    return 0


def _cmd_cv(args) -> int:
    dataset = _load_dataset(args)
    huber = _huber_config(args)
    opts = OptimizerOptions(max_iter=args.max_iter)
    models = []
    for name in args.models.split(","):
        name = name.strip()
        models.append(EstimatorSpec(name=name, loss=name, huber=huber if name == "huber" else None, opts=opts))
    report = st_block_cv(dataset, window_len=args.window_len, models=models,
                         base_seed=args.seed or 0, n_jobs=args.jobs)
    out = _out_dir(args)
    report.to_frame().to_csv(out / "cv_report.csv", index=False)
    (out / "cv_summary.json").write_text(json.dumps(report.summary(), indent=2))
    _write_manifest(out, "cv", {"window_len": args.window_len, "models": args.models,
                                "data": str(args.data)}, args.seed)
    print(json.dumps(report.summary(), indent=2))
    return 0


def _cmd_mc(args) -> int:
    scenarios = _parse_grid_spec(args.grid)
    overrides = _load_config(args.config).get("dgp", {})
    cfg = DgpConfig(**{**overrides, "train_fraction": overrides.get("train_fraction", 0.8)})
    report = run_mc_study(
        scenarios,
        n_runs=args.runs,
        config=cfg,
        base_seed=args.seed,
        huber_config=_huber_config(args),
        opts=OptimizerOptions(max_iter=args.max_iter),
        n_jobs=args.jobs,
    )
    out = _out_dir(args)
    report.to_frame().to_csv(out / "mc_ledger.csv", index=False)
    report.cells_frame().to_csv(out / "mc_cells.csv", index=False)
    _write_manifest(out, "mc", {"scenarios": scenarios, "runs": args.runs, "dgp": asdict(cfg)}, args.seed)
    print(report.cells_frame().to_string(index=False))
    return 0


def _cmd_theory(args) -> int:
    cfg = DgpConfig(seed=args.seed)
    sim = simulate_mf(cfg)
    theta = dgp_model_params(cfg)
    out = _out_dir(args)

    # attenuation factor with the latent LF covariance and a known contamination
    from .covariance import assemble_joint
    from .kernels import separable_gram

    blocks = assemble_joint(sim.dataset, theta, with_b=True)
    C_L = separable_gram(sim.dataset.lf_points, sim.dataset.lf_points, theta.kernel_L)
    C_L[np.diag_indices_from(C_L)] += theta.tau_L_sq
    sd = float(np.std(sim.lf_signal))
    sigma_u = (args.magnitude * sd) ** 2 * args.eta * np.eye(sim.dataset.n_lf)
    rho_star, kappa = pseudo_true_rho(C_L, sigma_u, blocks.B, blocks.Omega, theta.rho)

    spec = ContaminationSpec(kind="outlier", frequency=args.eta, seed=args.seed + 1)
    mags = [args.magnitude, 10 * args.magnitude, 100 * args.magnitude]
    curves = {
        kind: influence_curve(sim.dataset, theta, spec, mags, estimator_kind=kind, measure="score")
        for kind in ("gaussian", "huber")
    }
    rows = []
    for kind, curve in curves.items():
        for m, v in zip(curve.magnitudes, curve.estimator_deltas):
            rows.append({"estimator": kind, "measure": curve.measure, "magnitude": m, "value": v})
    pd.DataFrame(rows).to_csv(out / "influence_curves.csv", index=False)

    reports = [huber_influence_bound(sim.dataset, theta, regime=r)
               for r in ("general_whitening", "fixed_whitening")]
    pd.DataFrame(
        [
            {"regime": r.regime, "C_delta": r.C_delta, "J_inv_norm": r.J_inv_norm,
             "sum_g_norms": r.sum_g_norms, "delta": r.delta}
            for r in reports
        ]
    ).to_csv(out / "bound_report.csv", index=False)
    pd.DataFrame([{"kappa": kappa, "rho_star": rho_star, "rho": theta.rho}]).to_csv(
        out / "attenuation.csv", index=False
    )
    _write_manifest(out, "theory", {"magnitude": args.magnitude, "eta": args.eta}, args.seed)
    print(f"kappa={kappa:.4f} rho_star={rho_star:.4f}; reports in {out}")
    return 0


def _cmd_stats(args) -> int:
    if args.ingest:
        overrides = dict(kv.split("=", 1) for kv in (args.col_map or []))
        result = read_station_csv(args.data, mapping=ColumnMapping(**overrides))
        frame = result.dataset.to_frame()
        frame["label"] = frame["station"].map(result.dataset.station_labels)
        quality = asdict(result.quality)
    else:
        frame = pd.read_csv(args.data)
        frame["label"] = frame.get("label", frame["station"].astype(str))
        quality = None
    key = "fidelity" if args.by == "type" else "label"
    groups = {name: part["value"].to_numpy() for name, part in frame.groupby(key)}
    table = descriptive_stats(groups)
    out = _out_dir(args)
    table.to_csv(out / "stats.csv", index=False)
    _write_manifest(out, "stats", {"by": args.by, "data": str(args.data), "quality": quality}, None)
    print(table.to_string(index=False))
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _bbox(text: str):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("bbox must be lon_min,lon_max,lat_min,lat_max")
    return parts


def _add_data_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset CSV (long format or raw station export)")
    p.add_argument("--ingest", action="store_true", help="parse as a raw station export")
    p.add_argument("--col-map", nargs="*", help="column overrides, e.g. value=pm25")
    p.add_argument("--daily-mean", action="store_true", help="aggregate to station-day means")
    p.add_argument("--prefilter", type=float, default=None, help="drop values above this cutoff")
    p.add_argument("--bbox", type=_bbox, default=None)
    p.add_argument(
        "--k-nearest", type=int, default=None,
        help="keep only the union of the k nearest LF stations around each HF station",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfgp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a lattice-design dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("contaminate", help="apply outliers or a level shift to the LF channel")
    _add_data_arguments(p)
    p.add_argument("--kind", choices=["outlier", "level_shift"], default="outlier")
    p.add_argument("--magnitude", type=float, required=True)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--stations", type=int, nargs="*", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(handler=_cmd_contaminate)

    p = sub.add_parser("fit", help="fit the multi-fidelity model")
    _add_data_arguments(p)
    p.add_argument("--loss", choices=["gaussian", "huber"], default="gaussian")
    p.add_argument("--whitening", default="diag")
    p.add_argument("--c-mult", type=float, default=1.345)
    p.add_argument("--center", action="store_true")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(handler=_cmd_fit)

    p = sub.add_parser("predict", help="predict at points or on a grid")
    _add_data_arguments(p)
    p.add_argument("--theta", required=True, help="fit.json from the fit command")
    p.add_argument("--points", default=None, help="CSV with s1,s2,t columns")
    p.add_argument("--grid", default=None, help="resolution as NxM")
    p.add_argument("--times", default=None, help="comma-separated times for grid mode")
    p.add_argument("--out", default="out")
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("cv", help="spatiotemporal block cross-validation")
    _add_data_arguments(p)
    p.add_argument("--window-len", type=float, default=30.0)
    p.add_argument("--models", default="gaussian,huber")
    p.add_argument("--whitening", default="diag")
    p.add_argument("--c-mult", type=float, default=1.345)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(handler=_cmd_cv)

    p = sub.add_parser("mc", help="contamination Monte Carlo study")
    p.add_argument("--grid", nargs="+", required=True, help="m=2,5,10 eta=0.1,0.3,0.5")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--config", default=None)
    p.add_argument("--whitening", default="diag")
    p.add_argument("--c-mult", type=float, default=1.345)
    p.add_argument("--max-iter", type=int, default=150)
    p.add_argument("--jobs", type=int, default=-1)
    p.add_argument("--seed", type=int, default=20240)
    p.add_argument("--out", default="out")
    p.set_defaults(handler=_cmd_mc)

    p = sub.add_parser("theory", help="attenuation factor, influence curves, bound report")
    p.add_argument("--magnitude", type=float, default=5.0)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(handler=_cmd_theory)

    p = sub.add_parser("stats", help="descriptive statistics tables")
    _add_data_arguments(p)
    p.add_argument("--by", choices=["station", "type"], default="type")
    p.add_argument("--out", default="out")
    p.set_defaults(handler=_cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
