"""Command-line interface: simulate, study, fit, compare, forecast, validate.

Exit codes: 0 success, 2 input/validation error, 3 numerical/estimation
failure.  Every output file starts with comment lines recording the
resolved settings and seed, so a run can be reproduced after the fact;
performance-only knobs (--threads) are deliberately not recorded because
results do not depend on them.
"""
from __future__ import annotations

import argparse
import csv
import os
import secrets
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import estimate as est
from . import io as pio
from .dist import DomainError, OracleError
from .filtering import Observation, forecast_mean, run_filter
from .metrics import ForecastPair, mae, pdl, rmse
from .regimes import RegimeKind, RegimeSpec
from .regression import EstimationError
from .simulate import SimStudyConfig, run_study

__all__ = ["main"]

CANONICAL_ORDER = tuple(k.value for k in RegimeKind)


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("COUNT_SSM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise pio.ParseError(f"COUNT_SSM_THREADS={env!r} is not an integer") from None
    return max(1, os.cpu_count() or 1)


def _resolve_seed(args, config: pio.RunConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if config.seed is not None:
        return config.seed
    return secrets.randbits(31)


def _load_config(args) -> pio.RunConfig:
    config = pio.parse_config(args.config) if getattr(args, "config", None) else pio.RunConfig()
    updates = {}
    for ref in getattr(args, "reference", None) or []:
        col, _, level = ref.partition("=")
        if not level:
            raise pio.ParseError(f"--reference wants col=level, got {ref!r}")
        updates.setdefault("references", dict(config.references))[col] = level
    if getattr(args, "split", None) is not None:
        updates["split"] = args.split
    if getattr(args, "bic_n", None) is not None:
        updates["bic_n"] = args.bic_n
    if getattr(args, "pooled_beta", False):
        updates["pooled_constant"] = True
    if getattr(args, "regimes", None):
        updates["regimes"] = tuple(args.regimes.split(","))
    return replace(config, **updates) if updates else config


def _regime_from_args(args) -> RegimeSpec:
    return RegimeSpec(kind=args.regime, beta0=args.beta0, p=args.p, q=args.q)


def _fit_options(config: pio.RunConfig) -> est.FitOptions:
    return est.FitOptions(
        bic_n=config.bic_n,
        pooled_constant=config.pooled_constant,
        beta0_grid=config.beta0_grid,
        p_grid=config.p_grid,
        q_grid=config.q_grid,
    )


def _split_rule(config: pio.RunConfig, allow_none: bool = True) -> str | int | None:
    if config.split == "none":
        if allow_none:
            return None
        raise pio.ParseError("this command needs --split last or --split period:<label>")
    return config.split_rule()


def _prepare_panel(args, config: pio.RunConfig):
    panel = pio.load_panel(args.panel, config.schema())
    rule = _split_rule(config)
    if rule is None:
        train = panel
        holdout = ()
        notes = ()
    else:
        split = pio.split_panel(panel, rule)
        train, holdout, notes = split.train, split.holdout, split.notes
    for note in notes:
        print(f"note: {note}", file=sys.stderr)
    return panel, train, holdout


def _model_from_fit(fit: est.DynamicsFit, glm, seed: int) -> pio.ModelFile:
    spec = fit.regime
    return pio.ModelFile(
        kind=spec.kind.value,
        beta0=spec.beta0,
        p=spec.p,
        q=spec.q,
        eta=tuple(float(v) for v in glm.eta),
        eta_names=tuple(glm.names or ()),
        dispersion=float(glm.dispersion),
        loglik=fit.loglik,
        k=fit.k,
        n_obs=fit.n_obs,
        seed=seed,
        boundary_flags=fit.boundary_flags,
        pooled_constant=fit.pooled_constant,
    )


def _common_header(cmd: str, config: pio.RunConfig, seed: int, panel_path: str) -> list[str]:
    return [
        f"# countssm {cmd}",
        f"# schema_version={pio.MODEL_SCHEMA_VERSION}",
        f"# panel={panel_path}",
        f"# split={config.split}",
        f"# bic_n={config.bic_n} pooled_constant={str(config.pooled_constant).lower()}",
        f"# seed={seed}",
    ]


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


# ---------------------------------------------------------------------------
# simulate / study
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    regime = _regime_from_args(args)
    config = SimStudyConfig(
        regime=regime,
        horizon=args.horizon,
        n_paths=args.paths,
        intensity=args.intensity,
        seed=args.seed if args.seed is not None else secrets.randbits(31),
        density_times=tuple(int(v) for v in args.density_times.split(",")),
        trajectory_paths=args.trajectories,
    )
    result = run_study(config, out_dir=args.out)
    print(f"wrote study CSVs to {args.out} (seed={config.seed})")
    drift = float(np.max(np.abs(result.mean - 1.0)))
    print(f"max |mean(theta_t) - 1| over t: {drift:.4f}")
    return 0


STUDY_SETTINGS = (
    ("increasing", dict(kind="increasing", q=0.8)),
    ("decreasing", dict(kind="decreasing", p=0.8)),
    ("converging", dict(kind="converging", p=0.8 / 0.9, q=0.9)),
    ("constant_variance", dict(kind="constant_variance", p=0.9)),
)


def cmd_study(args) -> int:
    seed = args.seed if args.seed is not None else secrets.randbits(31)
    out = Path(args.out)
    for name, params in STUDY_SETTINGS:
        regime = RegimeSpec(beta0=args.beta0, **params)
        config = SimStudyConfig(
            regime=regime,
            horizon=args.horizon,
            n_paths=args.paths,
            intensity=1.0,
            seed=seed,
            trajectory_paths=args.trajectories,
        )
        run_study(config, out_dir=out / name)
        print(f"{name}: wrote {out / name}")
    return 0


# ---------------------------------------------------------------------------
# fit / compare
# ---------------------------------------------------------------------------


def _run_two_step(args, config: pio.RunConfig, kinds):
    panel, train, _ = _prepare_panel(args, config)
    coding = pio.build_coding(train, config.schema())
    encoded = pio.encode_panel(train, coding)
    options = _fit_options(config)
    result = est.two_step(train, encoded, kinds, options, glm_tol=config.tol, glm_max_iter=config.max_iter)
    return panel, train, coding, result


def cmd_fit(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    kind = RegimeKind(args.regime)
    panel, train, coding, result = _run_two_step(args, config, [kind])
    fit = result.fits[0]
    if args.joint:
        eta, fit = est.joint_refit(train, pio.encode_panel(train, coding), result, kind, _fit_options(config))
        glm = replace(result.glm, eta=eta)
    else:
        glm = result.glm
    model = _model_from_fit(fit, glm, seed)
    pio.save_model(model, args.out)
    flags = ",".join(fit.boundary_flags) or "none"
    print(
        f"{kind.value}: loglik={fit.loglik:.6f} aic={fit.aic:.6f} bic={fit.bic:.6f} "
        f"k={fit.k} n_obs={fit.n_obs} boundary_flags={flags}"
    )
    print(f"wrote model to {args.out}")
    return 0


def _write_comparison(path, header, kinds, fits, threads_loglik):
    rows = [
        ("beta0", lambda f: _fmt(f.regime.beta0)),
        ("p", lambda f: _fmt(f.regime.display_p)),
        ("q", lambda f: _fmt(f.regime.display_q)),
        ("loglik", lambda f: _fmt(threads_loglik[f.regime.kind.value])),
        ("aic", lambda f: _fmt(f.aic)),
        ("bic", lambda f: _fmt(f.bic)),
        ("k", lambda f: _fmt(f.k)),
        ("n_obs", lambda f: _fmt(f.n_obs)),
        ("boundary_flags", lambda f: ";".join(f.boundary_flags)),
    ]
    by_kind = {f.regime.kind.value: f for f in fits}
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["quantity", *kinds])
        for label, getter in rows:
            writer.writerow([label, *[getter(by_kind[k]) for k in kinds]])


def cmd_compare(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    threads = _resolve_threads(args.threads)
    kinds = [RegimeKind(k) for k in config.regimes]
    panel, train, coding, result = _run_two_step(args, config, kinds)

    # Reference-path logliks honor --threads; bitwise equal to the fits'.
    threads_loglik = {}
    for fit in result.fits:
        threads_loglik[fit.regime.kind.value] = est.panel_loglik(
            train,
            result.intensities,
            fit.regime,
            pooled_constant=fit.pooled_constant,
            threads=threads,
        )

    ranked = sorted(result.fits, key=lambda f: f.aic)
    header = _common_header("compare", config, seed, args.panel)
    header.append("# regimes=" + ",".join(k.value for k in kinds))
    header.append("# aic_ranking=" + ",".join(f.regime.kind.value for f in ranked))
    _write_comparison(args.out, header, [k.value for k in kinds], result.fits, threads_loglik)
    print(f"wrote comparison to {args.out}")
    for fit in ranked:
        flags = f" [{','.join(fit.boundary_flags)}]" if fit.boundary_flags else ""
        print(
            f"  {fit.regime.kind.value:>18}: loglik={fit.loglik:.4f} aic={fit.aic:.4f} "
            f"bic={fit.bic:.4f}{flags}"
        )
    if args.models_dir:
        models_dir = Path(args.models_dir)
        models_dir.mkdir(parents=True, exist_ok=True)
        for fit in result.fits:
            model = _model_from_fit(fit, result.glm, seed)
            pio.save_model(model, models_dir / f"{fit.regime.kind.value}.model")
        print(f"wrote model files to {models_dir}")
    return 0


# ---------------------------------------------------------------------------
# forecast / validate
# ---------------------------------------------------------------------------


def _holdout_forecasts(model: pio.ModelFile, panel, train, holdout, config: pio.RunConfig):
    """(series_id, period, actual, predicted) for every holdout record."""
    regime = model.regime_spec()
    coding = pio.build_coding(train, config.schema())
    if model.eta_names and tuple(coding.names) != model.eta_names:
        raise pio.ParseError(
            f"design columns {list(coding.names)} do not match the model's {list(model.eta_names)}; "
            "check categorical reference levels"
        )
    encoded = pio.encode_panel(train, coding)
    eta = np.asarray(model.eta, dtype=float)
    lam = est.intensities_from_eta(train, encoded, eta)
    pairs_schedule = None
    if model.pooled_constant and regime.kind is RegimeKind.CONSTANT_VARIANCE:
        pairs_schedule = est.pooled_schedule(train, lam, regime)
    by_id = {s.id: s for s in train.series}
    out = []
    for hold in holdout:
        series = by_id.get(hold.series_id)
        if series is None:
            continue
        obs = [
            Observation(count=rec.count, intensity=float(lam[series.id][t]))
            for t, rec in enumerate(series.records)
        ]
        trace = run_filter(obs, regime, schedule=pairs_schedule)
        hold_panel = pio.Panel(
            series=(pio.PanelSeries(id=hold.series_id, records=(hold.record,)),),
            columns=panel.columns,
        )
        hx = pio.encode_panel(hold_panel, coding)
        lam_next = float(
            est.intensities_from_eta(hold_panel, hx, eta)[hold.series_id][0]
        )
        pair = None
        if pairs_schedule is not None:
            pair = pairs_schedule[min(len(series.records) - 1, len(pairs_schedule) - 1)]
        predicted = forecast_mean(trace, regime, lam_next, pair=pair)
        out.append((hold.series_id, hold.record.period, hold.record.count, predicted))
    return out


def cmd_forecast(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    model = pio.load_model(args.model)
    panel = pio.load_panel(args.panel, config.schema())
    rule = _split_rule(config, allow_none=False)
    split = pio.split_panel(panel, rule)
    if not split.holdout:
        raise pio.ParseError(f"no holdout records under split rule {config.split!r}")
    rows = _holdout_forecasts(model, panel, split.train, split.holdout, config)
    header = _common_header("forecast", config, seed, args.panel)
    header.append(f"# model={args.model} kind={model.kind}")
    with open(args.out, "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "period", "actual", "predicted"])
        for sid, period, actual, predicted in rows:
            writer.writerow([sid, period, "" if actual is None else actual, repr(predicted)])
    print(f"wrote {len(rows)} forecasts to {args.out}")
    return 0


def cmd_validate(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    models = [pio.load_model(path) for path in args.model]
    panel = pio.load_panel(args.panel, config.schema())
    rule = _split_rule(config, allow_none=False)
    split = pio.split_panel(panel, rule)
    scored = [h for h in split.holdout if h.record.count is not None]
    if not scored:
        raise pio.ParseError(f"empty holdout under split rule {config.split!r}; nothing to validate")

    names = []
    results = {}
    for i, (path, model) in enumerate(zip(args.model, models)):
        name = model.kind if model.kind not in names else f"{model.kind}#{i}"
        names.append(name)
        rows = _holdout_forecasts(model, panel, split.train, scored, config)
        pairs = [ForecastPair(actual=a, predicted=p) for _, _, a, p in rows]
        results[name] = {
            "rmse": rmse(pairs),
            "mae": mae(pairs),
            "pdl": pdl(pairs),
            "n": len(pairs),
        }

    header = _common_header("validate", config, seed, args.panel)
    header.append("# models=" + ",".join(args.model))
    with open(args.out, "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", *names])
        for metric in ("rmse", "mae", "pdl", "n"):
            writer.writerow([metric, *[_fmt(results[n][metric]) for n in names]])

    width = max(len(n) for n in names)
    print(f"{'metric':<8}" + "".join(f"{n:>{width + 2}}" for n in names))
    for metric in ("rmse", "mae", "pdl"):
        print(f"{metric:<8}" + "".join(f"{results[n][metric]:>{width + 2}.4f}" for n in names))
    print(f"(n={len(scored)} holdout records; table written to {args.out})")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_regime_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--regime", required=True, choices=CANONICAL_ORDER, help="variance regime")
    p.add_argument("--beta0", type=float, required=True, help="prior shape/rate (prior mean 1)")
    p.add_argument("--p", type=float, default=None, help="persistence fraction, in [0,1] where used")
    p.add_argument("--q", type=float, default=None, help="rate discount, in (0,1] where used")


def _add_panel_args(p: argparse.ArgumentParser, split_default: str) -> None:
    p.add_argument("--panel", required=True, help="panel CSV: id,period,count[,exposure],covariates...")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="recorded in the output header")
    p.add_argument(
        "--split",
        default=split_default,
        help="'none' (use all records), 'last' (hold out each series' final record), or 'period:<label>'",
    )
    p.add_argument(
        "--reference",
        action="append",
        metavar="COL=LEVEL",
        help="reference level for a categorical column (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="countssm",
        description=(
            "Observation-driven Poisson-gamma state-space models for panel counts: "
            "simulation, two-step fitting, comparison, and out-of-sample validation."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "simulate",
        help="simulate one regime and write study CSVs",
        epilog=(
            "Outputs (comment header, then CSV): trajectories.csv (path_id,t,theta,y), "
            "moments.csv (t,mean,var,se; se is the standard error of the mean), "
            "density.csv (t,grid,density; Gaussian kernel, Silverman bandwidth). "
            "Time t is 1-based; intensities are per-period expected counts at latent level 1."
        ),
    )
    _add_regime_args(p)
    p.add_argument("--T", "--horizon", dest="horizon", type=int, default=50, help="periods per path")
    p.add_argument("--paths", type=int, default=5000, help="number of independent paths")
    p.add_argument("--intensity", type=float, default=1.0, help="constant per-period intensity")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--density-times", default="1,5,20,50", help="times for density summaries")
    p.add_argument("--trajectories", type=int, default=4, help="paths written to trajectories.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="run the four-regime long-run comparison study")
    p.add_argument("--beta0", type=float, default=3.0)
    p.add_argument("--T", "--horizon", dest="horizon", type=int, default=50)
    p.add_argument("--paths", type=int, default=5000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory (one subdir per regime)")
    p.add_argument("--trajectories", type=int, default=4)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser(
        "fit",
        help="two-step fit of one regime; writes a model file",
        epilog=(
            "Panel CSV schema (fixed names): id,period,count[,exposure],<covariates...>. "
            "period is an integer label, an empty count cell means missing, exposure "
            "defaults to 1 and must lie in (0,1] unless overridden in the config. "
            "Step 1 fits a marginal NB regression (log link, exposure offset); step 2 "
            "maximizes the panel likelihood over the regime's dynamics parameters."
        ),
    )
    _add_panel_args(p, split_default="none")
    p.add_argument("--regime", required=True, choices=CANONICAL_ORDER)
    p.add_argument("--out", required=True, help="model file path")
    p.add_argument("--bic-n", dest="bic_n", choices=("observations", "series"), default=None)
    p.add_argument("--pooled-beta", action="store_true", help="pool the constant-variance rate across series")
    p.add_argument("--joint", action="store_true", help="refine with joint (eta, dynamics) MLE")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser(
        "compare",
        help="fit several regimes and write a comparison table",
        epilog=(
            "The comparison CSV has one column per regime and rows beta0, p, q, "
            "loglik, aic, bic, k, n_obs, boundary_flags; the header comments record "
            "the resolved settings, seed, and AIC ranking."
        ),
    )
    _add_panel_args(p, split_default="none")
    p.add_argument("--regimes", default=None, help="comma list (default: the five standard regimes)")
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.add_argument("--models-dir", default=None, help="also write one model file per regime")
    p.add_argument("--bic-n", dest="bic_n", choices=("observations", "series"), default=None)
    p.add_argument("--pooled-beta", action="store_true")
    p.add_argument("--threads", type=int, default=None, help="series-parallel likelihood threads")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("forecast", help="one-step-ahead forecasts for the holdout records")
    _add_panel_args(p, split_default="last")
    p.add_argument("--model", required=True, help="model file from fit/compare")
    p.add_argument("--out", required=True, help="forecast CSV path")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser(
        "validate",
        help="score holdout forecasts (RMSE, MAE, Poisson deviance)",
        epilog=(
            "Scores one-step-ahead predictive means on the holdout records. "
            "PDL is the mean Poisson deviance 2*(pred - actual - actual*log(pred/actual)); "
            "a zero actual contributes 2*pred (the y*log(y) -> 0 limit). "
            "The CSV twin has one column per model and rows rmse, mae, pdl, n."
        ),
    )
    _add_panel_args(p, split_default="last")
    p.add_argument("--model", action="append", required=True, help="model file (repeatable)")
    p.add_argument("--out", required=True, help="validation CSV path")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (pio.ParseError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EstimationError, OracleError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
