"""Command-line interface.

Commands
--------
synth         generate a synthetic hourly price CSV
fit-forecast  fit the forecasting pipeline, write model.json + fit report
simulate      closed-loop policy comparison over the test window
prescient     optimal-with-hindsight bound over the test window
compare       merge policy tables from existing simulate runs

Exit codes: 0 success, 2 config error, 3 data error, 4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import forecast as fc
from . import plots
from .config import RunConfig
from .errors import ConfigError, DataError, PolicyFailure, SolverFailure
from .policies import prescient_bound
from .prices import PriceSeries, load_prices, save_prices, split, winsorize_low
from .simulate import SimContext, compare, write_outputs
from .synth import SynthParams, generate_prices


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.default()
    return cfg.override(
        seed=getattr(args, "seed", None),
        out_dir=getattr(args, "out", None),
        figures=False if getattr(args, "no_figures", False) else None,
    )


def _prepared_series(cfg: RunConfig) -> tuple[PriceSeries, int, int]:
    """Load, winsorize, and resolve the train/test window lengths."""
    path = cfg.data["prices_csv"]
    if not path:
        raise ConfigError("data.prices_csv is required for this command")
    series = winsorize_low(load_prices(path), float(cfg.data["winsorize_pct"]))
    test_len = int(cfg.data["test_hours"])
    train_len = cfg.data["train_hours"]
    train_len = len(series) - test_len if train_len is None else int(train_len)
    if train_len < 1:
        raise DataError(f"series of {len(series)} hours leaves no training window "
                        f"before the {test_len}-hour test window")
    train, test = split(series, train_len, test_len)
    full = series.slice(0, train_len + test_len)
    del train, test  # split validates the windows; the simulator slices itself
    return full, train_len, test_len


def _get_model(cfg: RunConfig, series: PriceSeries, train_len: int) -> fc.ForecastModel:
    model_path = cfg.forecast["model_json"]
    if model_path:
        model = fc.load_model(model_path)
        if model.n_train != train_len:
            raise DataError(
                f"model {model_path} was fit on {model.n_train} hours but the "
                f"configured training window has {train_len}"
            )
        return model
    train = series.slice(0, train_len)
    return fc.fit_forecast_model(
        train,
        ridge_baseline=cfg.forecast["ridge_baseline"],
        ridge_ar=cfg.forecast["ridge_ar"],
        smoothing=float(cfg.forecast["smoothing"]),
    )


def cmd_synth(args) -> int:
    params = SynthParams(
        weeks=args.weeks,
        ar_coeff=args.ar_coeff,
        noise_base=args.noise_base,
        ridge_amp=args.ridge_amp,
        ridge_noise=args.ridge_noise,
        dip_amp=args.dip_amp,
        spike_prob=args.spike_prob,
        spike_scale=args.spike_scale,
    )
    series = generate_prices(params, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prices(series, out)
    print(f"wrote {len(series)} hours ({args.weeks} weeks) to {out}")
    print(f"price range [{series.prices.min():.2f}, {series.prices.max():.2f}], "
          f"mean {series.prices.mean():.2f}, median {np.median(series.prices):.2f}")
    return 0


def cmd_fit_forecast(args) -> int:
    cfg = _load_config(args)
    if args.train:
        cfg = RunConfig.from_dict({**cfg.raw, "data": {**cfg.data, "prices_csv": args.train}})
    ridge_b = args.ridge_baseline if args.ridge_baseline is not None else args.ridge
    ridge_a = args.ridge_ar if args.ridge_ar is not None else args.ridge
    smoothing = args.smoothing if args.smoothing is not None else float(cfg.forecast["smoothing"])
    pct = args.winsorize_pct if args.winsorize_pct is not None else float(cfg.data["winsorize_pct"])

    path = cfg.data["prices_csv"]
    if not path:
        raise ConfigError("pass --train or set data.prices_csv in the config")
    train = winsorize_low(load_prices(path), pct)

    model = fc.fit_forecast_model(train, ridge_baseline=ridge_b, ridge_ar=ridge_a,
                                  smoothing=smoothing)
    out = Path(args.model_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fc.save_model(model, out)

    report = fc.fit_report(model, train)
    report_dir = Path(args.report_dir) if args.report_dir else out.parent / f"{out.stem}_report"
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True),
                                            encoding="utf-8")
    with open(report_dir / "rms_per_lead.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lead_hours", "rms_log_error"])
        for lead, rms in enumerate(report["rms_log_by_lead"], start=1):
            w.writerow([lead, repr(rms)])
    if not args.no_figures:
        plots.save_rms_per_lead(report["rms_log_by_lead"], report_dir / "figures" / "rms_per_lead.png")

    print(f"fit on {report['n_train']} hours: baseline RMS log-price error "
          f"{report['baseline_rms_log']:.3f}, forecast {report['forecast_rms_log']:.3f}")
    print(f"model -> {out}")
    print(f"report -> {report_dir}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    series, train_len, test_len = _prepared_series(cfg)
    model = _get_model(cfg, series, train_len)

    ctx = SimContext(
        model=model,
        series=series,
        test_start=train_len,
        test_len=test_len,
        spec=cfg.storage_spec(),
        q_init=cfg.q_init(),
        scenario_pool=int(cfg.simulation["scenario_pool"]),
        base_seed=int(cfg.simulation["base_seed"]),
    )
    policies = cfg.policy_specs()
    comp = compare(ctx, policies, int(cfg.simulation["trials"]), threads=args.threads)

    run_id = cfg.run_id()
    root = write_outputs(cfg.output["dir"], run_id, comp, ctx, cfg.fingerprint_dict())
    if cfg.output["figures"]:
        plots.save_cost_per_policy(comp.rows(), comp.prescient.cost_per_hour,
                                   root / "figures" / "cost_per_policy.png")

    print(f"run {run_id}: {test_len} hours x {cfg.simulation['trials']} trials")
    width = max(len(r["label"]) for r in comp.rows())
    for row in comp.rows():
        print(f"  {row['label']:<{width}}  mean cost/hour {row['mean_cost_per_hour']:10.3f}"
              f"  (std {row['std_cost_per_hour']:.3f})")
    print(f"  {'prescient':<{width}}  mean cost/hour {comp.prescient.cost_per_hour:10.3f}")
    print(f"results -> {root}")
    return 0


def cmd_prescient(args) -> int:
    cfg = _load_config(args)
    series, train_len, test_len = _prepared_series(cfg)
    window = series.prices[train_len : train_len + test_len]
    result = prescient_bound(cfg.storage_spec(), cfg.q_init(), window)

    run_id = cfg.run_id()
    root = Path(cfg.output["dir"]) / f"prescient_{run_id}"
    root.mkdir(parents=True, exist_ok=True)
    (root / "bound.json").write_text(
        json.dumps(
            {
                "cost_per_hour": result.cost_per_hour,
                "objective": result.objective,
                "hours": test_len,
                "q_init": cfg.q_init(),
            },
            indent=1,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    with open(root / "schedule.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", "price", "u", "q_after"])
        for s in range(test_len):
            w.writerow([train_len + s, repr(float(window[s])), repr(float(result.u[s])),
                        repr(float(result.q[s]))])
    if cfg.output["figures"]:
        plots.save_prescient_schedule(window, result.u, result.q,
                                      root / "figures" / "schedule.png")
    print(f"prescient bound: {result.cost_per_hour:.3f} per hour over {test_len} hours")
    print(f"report -> {root}")
    return 0


def cmd_compare(args) -> int:
    merged = []
    prescient_rows = []
    for path in args.inputs:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read summary {path}: {exc}") from None
        source = Path(path).parent.name or Path(path).stem
        for row in doc.get("policies", []):
            merged.append({**row, "source": source})
        prescient_rows.append({"source": source,
                               "cost_per_hour": doc["prescient"]["cost_per_hour"]})

    out = Path(args.out or "comparison")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cost_per_policy.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "label", "kind", "samples", "mean_cost_per_hour",
                    "std_cost_per_hour", "trials"])
        for row in merged:
            w.writerow([row["source"], row["label"], row["kind"], row["samples"],
                        repr(row["mean_cost_per_hour"]), repr(row["std_cost_per_hour"]),
                        row["trials"]])
        for row in prescient_rows:
            w.writerow([row["source"], "prescient", "prescient", "",
                        repr(row["cost_per_hour"]), "", ""])
    (out / "comparison.json").write_text(
        json.dumps({"policies": merged, "prescient": prescient_rows}, indent=1, sort_keys=True),
        encoding="utf-8",
    )
    if not args.no_figures and merged:
        rows = [
            {**row, "label": f"{row['source']}:{row['label']}" if len(args.inputs) > 1 else row["label"]}
            for row in merged
        ]
        plots.save_cost_per_policy(rows, prescient_rows[0]["cost_per_hour"],
                                   out / "figures" / "cost_per_policy.png")
    print(f"merged {len(merged)} policy rows from {len(args.inputs)} run(s) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxmpc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic hourly prices")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--weeks", type=int, default=SynthParams.weeks)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ar-coeff", type=float, default=SynthParams.ar_coeff)
    p.add_argument("--noise-base", type=float, default=SynthParams.noise_base)
    p.add_argument("--ridge-amp", type=float, default=SynthParams.ridge_amp)
    p.add_argument("--ridge-noise", type=float, default=SynthParams.ridge_noise)
    p.add_argument("--dip-amp", type=float, default=SynthParams.dip_amp)
    p.add_argument("--spike-prob", type=float, default=SynthParams.spike_prob)
    p.add_argument("--spike-scale", type=float, default=SynthParams.spike_scale)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-forecast", help="fit the forecasting model")
    p.add_argument("--train", help="training CSV (overrides config data.prices_csv)")
    p.add_argument("--out", dest="model_out", required=True, help="output model.json path")
    p.add_argument("--config")
    p.add_argument("--ridge", type=float, help="ridge penalty for both fits")
    p.add_argument("--ridge-baseline", type=float)
    p.add_argument("--ridge-ar", type=float)
    p.add_argument("--smoothing", type=float)
    p.add_argument("--winsorize-pct", type=float)
    p.add_argument("--report-dir")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_fit_forecast)

    p = sub.add_parser("simulate", help="closed-loop policy comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override simulation.base_seed")
    p.add_argument("--out", help="override output.dir")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("prescient", help="optimal bound with all prices known")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override output.dir")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_prescient)

    p = sub.add_parser("compare", help="merge tables from existing simulate runs")
    p.add_argument("--inputs", nargs="+", required=True, help="summary.json paths")
    p.add_argument("--out", help="output directory (default: comparison/)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (SolverFailure, PolicyFailure) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
