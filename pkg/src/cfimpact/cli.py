"""Command-line interface.

Every subcommand writes its outputs under ``--out`` (a directory) together
with ``manifest.json`` holding the resolved options, seeds and library
versions. ``generate`` also accepts a ``.csv`` path for ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import math
import os
import platform
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .controls import SelectionConfig, apply_sparse_rule, read_exclusions, select_by_correlation, write_selection_report
from .evaluation import (
    length_sweep,
    predict_counterfactual,
    run_backtest,
    sample_periods,
    write_metrics,
    write_plot_data,
    write_sweep,
    write_unit_metrics,
)
from .linear import fit_cr
from .panel import PanelMatrix, aggregate_treated, block_views, load_panel, save_panel
from .simulation import cr_prediction_interval, estimate_impact, inject_treatment, write_impact_table
from .synth import GeneratorConfig, generate, write_ground_truth

SUBCOMMANDS = ("generate", "select-controls", "fit", "backtest", "sweep-length", "simulate-impact")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _csv_list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _float_list(s: str) -> list[float]:
    return [float(x) for x in _csv_list(s)]


def _int_list(s: str) -> list[int]:
    return [int(x) for x in _csv_list(s)]


def _date(s: str) -> dt.date:
    return dt.date.fromisoformat(s)


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _add_common(sp: argparse.ArgumentParser, panel: bool = True):
    sp.add_argument("--config", help="key=value file; command-line flags take precedence")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, default=0, help="master seed")
    sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    if panel:
        sp.add_argument("--panel", help="long-format CSV (unit_id,date,revenue); omit to use a generated panel")
        sp.add_argument("--treated", default="5", help="number of treated units (first in file) or comma-separated ids")
        sp.add_argument("--treatment-start", type=_date, help="first treated day (YYYY-MM-DD); required with --panel")


def _add_generator(sp: argparse.ArgumentParser):
    d = GeneratorConfig()
    sp.add_argument("--n-treated", type=int, default=d.n_treated)
    sp.add_argument("--n-control", type=int, default=d.n_control)
    sp.add_argument("--n-periods", type=int, default=d.n_periods)
    sp.add_argument("--t0", type=int, default=None, help="pre-treatment days (default: all but 181)")
    sp.add_argument("--rank", type=int, default=d.rank)
    sp.add_argument("--noise-scale", type=float, default=d.noise_scale)
    sp.add_argument("--noise", choices=["multiplicative", "additive"], default=d.noise)
    sp.add_argument("--weekly-amplitude", type=float, default=d.weekly_amplitude)
    sp.add_argument("--annual-amplitude", type=float, default=d.annual_amplitude)
    sp.add_argument("--drift-scale", type=float, default=d.drift_scale)
    sp.add_argument("--sparse-fraction", type=float, default=d.sparse_fraction)
    sp.add_argument("--treated-as-combination", type=_bool, default=d.treated_as_combination)
    sp.add_argument("--base-revenue", type=float, default=d.base_revenue)
    sp.add_argument("--start-date", type=_date, default=d.start_date)


def _add_method_options(sp: argparse.ArgumentParser):
    sp.add_argument("--scenario", type=str.upper, choices=["S1", "S2"], default="S1")
    sp.add_argument("--mcnnm-folds", type=int, default=5)
    sp.add_argument("--ffnn-trials", type=int, default=60)
    sp.add_argument("--ffnn-members", type=int, default=15)
    sp.add_argument("--ffnn-max-epochs", type=int, default=500)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfimpact", description="Counterfactual prediction for panel data.")
    parser.add_argument("--version", action="version", version=f"cfimpact {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", help="write a seeded synthetic panel")
    _add_common(sp, panel=False)
    _add_generator(sp)

    sp = sub.add_parser("select-controls", help="sparse-unit filter and correlation ranking")
    _add_common(sp)
    _add_generator(sp)
    sp.add_argument("--threshold", type=float, default=0.85)
    sp.add_argument("--top-k", type=int, default=40)
    sp.add_argument("--exclusions", help="file with one excluded unit id per line")

    sp = sub.add_parser("fit", help="fit one method and predict the treatment window")
    _add_common(sp)
    _add_generator(sp)
    _add_method_options(sp)
    sp.add_argument("--method", default="CR")
    sp.add_argument("--level", type=float, default=0.99, help="prediction-interval level (CR, S1)")

    sp = sub.add_parser("backtest", help="score methods on pseudo-treatment periods")
    _add_common(sp)
    _add_generator(sp)
    _add_method_options(sp)
    sp.add_argument("--methods", type=_csv_list, default=["CR", "RSC"])
    sp.add_argument("--periods", type=int, default=5)
    sp.add_argument("--length", type=int, default=181)
    sp.add_argument("--earliest", type=_date, default=None, help="earliest pseudo-period start (default: one year in)")

    sp = sub.add_parser("sweep-length", help="tAPE against treatment-window length")
    _add_common(sp)
    _add_generator(sp)
    _add_method_options(sp)
    sp.add_argument("--methods", type=_csv_list, default=["CR", "RSC"])
    sp.add_argument("--length", type=int, default=181)
    sp.add_argument("--lengths", type=_int_list, default=[7, 14, 30, 60, 90, 120, 150, 181])
    sp.add_argument("--earliest", type=_date, default=None)

    sp = sub.add_parser("simulate-impact", help="inject a lognormal treatment and estimate it")
    _add_common(sp)
    _add_generator(sp)
    _add_method_options(sp)
    sp.add_argument("--method", type=_csv_list, default=["CR"], help="one or more comma-separated methods")
    sp.add_argument("--mu", type=_float_list, default=[0.01, 0.02, 0.03, 0.05])
    sp.add_argument("--sigma2", type=float, default=0.0005)
    sp.add_argument("--level", type=float, default=0.99)
    return parser


def read_config(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag names without dashes."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().lstrip("-").replace("-", "_")] = v.strip()
    return out


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        values = read_config(known.config)
        sp = parser._subparsers._group_actions[0].choices[command]  # noqa: SLF001
        actions = {a.dest: a for a in sp._actions}  # noqa: SLF001
        defaults = {}
        for k, v in values.items():
            if k not in actions or k in ("config", "help"):
                raise CliError(f"unknown config key {k!r} for {command}")
            a = actions[k]
            defaults[k] = a.type(v) if a.type else v
            if a.choices is not None and defaults[k] not in a.choices:
                raise CliError(f"invalid value {v!r} for config key {k!r}")
            # Satisfied by the config file; the command line can still override.
            a.required = False
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _generator_config(args) -> GeneratorConfig:
    names = {f.name for f in fields(GeneratorConfig)}
    kw = {k: v for k, v in vars(args).items() if k in names}
    return GeneratorConfig(**kw)


def _panel(args) -> PanelMatrix:
    if args.panel:
        if args.treatment_start is None:
            raise CliError("--treatment-start is required with --panel")
        treated = int(args.treated) if args.treated.strip().isdigit() else _csv_list(args.treated)
        try:
            return load_panel(args.panel, treated, args.treatment_start)
        except OSError as exc:
            raise CliError(f"cannot read panel: {exc}") from exc
    return generate(_generator_config(args))[0]


def _method_options(args) -> dict:
    return {
        "seed": args.seed,
        "mcnnm_folds": args.mcnnm_folds,
        "ffnn_trials": args.ffnn_trials,
        "ffnn_members": args.ffnn_members,
        "ffnn_max_epochs": args.ffnn_max_epochs,
    }


def _jsonable(v):
    if isinstance(v, (dt.date, Path)):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _versions() -> dict:
    import scipy
    import sklearn

    return {
        "cfimpact": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }


def _write_manifest(out: Path, args, outputs: list[str], extra: dict | None = None) -> None:
    resolved = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("config", "out")}
    manifest = {
        "command": args.command,
        "resolved": resolved,
        "seeds": {"master": args.seed},
        "versions": _versions(),
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    path = out if out.suffix == ".json" else out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _panel_meta(p: PanelMatrix) -> dict:
    return {
        "panel": {
            "n_units": p.n_units,
            "n_treated": p.n_treated,
            "n_periods": p.n_periods,
            "treatment_start": p.dates[p.t0].isoformat(),
            "first_date": p.dates[0].isoformat(),
        }
    }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> None:
    cfg = _generator_config(args)
    p, latent = generate(cfg)
    target = Path(args.out)
    if target.suffix.lower() == ".csv":
        target.parent.mkdir(parents=True, exist_ok=True)
        panel_path = target
        latent_path = target.with_name(target.stem + "_latent.csv")
        out = target.parent
        manifest_path = target.with_name(target.stem + "_manifest.json")
    else:
        out = _outdir(args)
        panel_path, latent_path, manifest_path = out / "panel.csv", out / "latent.csv", out / "manifest.json"
    save_panel(p, panel_path)
    write_ground_truth(p, latent, latent_path)
    cfg_dict = {k: _jsonable(v) for k, v in asdict(cfg).items()}
    _write_manifest(manifest_path, args, [panel_path.name, latent_path.name], {"generator": cfg_dict, **_panel_meta(p)})


def cmd_select_controls(args) -> None:
    p = _panel(args)
    out = _outdir(args)
    exclusions = read_exclusions(args.exclusions) if args.exclusions else frozenset()
    cfg = SelectionConfig(args.threshold, args.top_k, exclusions)
    candidates = apply_sparse_rule(p, cfg.sparsity_threshold, cfg.exclusions)
    sel = select_by_correlation(p, cfg, candidates)
    write_selection_report(sel, out / "selection.csv")
    (out / "selected_controls.txt").write_text("".join(f"{u}\n" for u in sel.control_ids))
    extra = {"n_candidates": len(candidates), "n_selected": len(sel.control_ids), **_panel_meta(p)}
    _write_manifest(out, args, ["selection.csv", "selected_controls.txt"], extra)


def _write_counterfactual(p: PanelMatrix, cf, path: Path) -> None:
    obs = p.outcomes[: p.n_treated, p.t0 :]
    ids = list(p.treated_ids)
    if cf.values.shape[0] == 1 and p.n_treated > 1:
        obs = obs.sum(axis=0, keepdims=True)
        ids = ["treated_aggregate"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "date", "counterfactual", "observed"])
        for i, uid in enumerate(ids):
            for k, d in enumerate(p.dates[p.t0 :]):
                w.writerow([uid, d.isoformat(), repr(float(cf.values[i, k])), repr(float(obs[i, k]))])


def _cr_interval(p: PanelMatrix, level: float):
    agg = aggregate_treated(p)
    pre_t, pre_c, post_c, _ = block_views(agg)
    fit = fit_cr(pre_t[0], pre_c)
    return fit, cr_prediction_interval(fit, pre_c, post_c, level)


def cmd_fit(args) -> None:
    p = _panel(args)
    out = _outdir(args)
    cf = predict_counterfactual(p, args.method, args.scenario, **_method_options(args))
    _write_counterfactual(p, cf, out / "counterfactual.csv")
    interval, fit_info = None, {"method": cf.method, "scenario": cf.scenario}
    if cf.method == "CR" and cf.scenario == "S1":
        fit, interval = _cr_interval(p, args.level)
        fit_info.update(fit.to_dict())
        fit_info["interval"] = {"level": args.level, "lower": interval[0], "upper": interval[1]}
    (out / "fit.json").write_text(json.dumps(fit_info, indent=2, sort_keys=True) + "\n")
    report = estimate_impact(p, cf, interval)
    with open(out / "impact.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "scenario", "observed_total", "counterfactual_total", "tau_hat", "relative_impact", "lower", "upper"])
        w.writerow(
            [
                cf.method,
                cf.scenario,
                repr(report.observed_total),
                repr(report.counterfactual_total),
                repr(report.tau_hat),
                repr(report.relative_impact),
                "" if report.lower is None else repr(report.lower),
                "" if report.upper is None else repr(report.upper),
            ]
        )
    _write_manifest(out, args, ["counterfactual.csv", "fit.json", "impact.csv"], _panel_meta(p))


def _earliest(args, p: PanelMatrix):
    return args.earliest if args.earliest is not None else min(365, p.t0 - args.length)


def cmd_backtest(args) -> None:
    p = _panel(args)
    out = _outdir(args)
    periods = sample_periods(p, args.periods, args.length, _earliest(args, p), args.seed)
    report = run_backtest(p, periods, args.methods, args.scenario, args.workers, **_method_options(args))
    write_metrics(report, out / "metrics.csv")
    outputs = ["metrics.csv", "summary.csv"]
    if args.scenario == "S2":
        write_unit_metrics(report, out / "unit_metrics.csv")
        outputs.append("unit_metrics.csv")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["mape", "rmse_s", "tpe", "tape", "mape_od", "n_periods"]
        w.writerow(["method"] + cols)
        for m, agg in report.aggregates().items():
            w.writerow([m] + ["" if isinstance(agg[c], float) and math.isnan(agg[c]) else repr(agg[c]) for c in cols])
    extra = {
        "periods": [{"index": q.index, "start_date": q.start_date.isoformat(), "length": q.length} for q in periods],
        "rmse_scaling_factor": report.scale,
        **_panel_meta(p),
    }
    _write_manifest(out, args, outputs, extra)


def cmd_sweep_length(args) -> None:
    p = _panel(args)
    out = _outdir(args)
    period = sample_periods(p, 1, args.length, _earliest(args, p), args.seed)[0]
    rows = length_sweep(p, period, args.methods, args.lengths, args.scenario, args.workers, **_method_options(args))
    write_sweep(rows, out / "sweep.csv")
    write_plot_data(rows, out / "plot_data.json")
    extra = {"period": {"start_date": period.start_date.isoformat(), "length": period.length}, **_panel_meta(p)}
    _write_manifest(out, args, ["sweep.csv", "plot_data.json"], extra)


def cmd_simulate_impact(args) -> None:
    p = _panel(args)
    out = _outdir(args)
    rows = []
    seeds = np.random.SeedSequence(args.seed).generate_state(len(args.mu))
    for mu, s in zip(args.mu, seeds):
        treated, sim = inject_treatment(p, mu, args.sigma2, int(s))
        for method in args.method:
            cf = predict_counterfactual(treated, method, args.scenario, **_method_options(args))
            interval = None
            if cf.method == "CR" and cf.scenario == "S1":
                interval = _cr_interval(treated, args.level)[1]
            rows.append((estimate_impact(treated, cf, interval), sim))
    write_impact_table(rows, out / "impact.csv")
    _write_manifest(out, args, ["impact.csv"], _panel_meta(p))


COMMANDS = {
    "generate": cmd_generate,
    "select-controls": cmd_select_controls,
    "fit": cmd_fit,
    "backtest": cmd_backtest,
    "sweep-length": cmd_sweep_length,
    "simulate-impact": cmd_simulate_impact,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, OSError, ValueError) as exc:
        print(f"cfimpact: error: {exc}", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            COMMANDS[args.command](args)
    except (CliError, OSError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"cfimpact {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
