"""Command line interface: ``damlab fit | simulate | code-effects | report | synth-data``.

Every command that writes to an output directory also writes
``manifest.json`` recording the command, resolved configuration, seed,
package versions, SHA-256 digests of input files and timestamps.

Exit codes: 0 success (warnings are listed in the manifest), 2 invalid
input, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .design import FAMILIES, DesignError, ModelSpec
from .effect_coding import coding_integer_enactment, coding_partial_year
from .inference import McmcOptions, Priors, fit_bayes, fit_mle, format_rr, summarize_rr
from .panel import PanelError, PanelSchema, load_panel, reduce_panel_covariates, save_panel
from .results import ConvergenceError
from .simharness import (
    PRESETS,
    BaseConfig,
    CalibrationError,
    StudyConfig,
    assign_treatment,
    figure_data,
    inject_effect,
    pooled_autocorr,
    run_study,
    synth_base_panel,
    worker_count,
    write_outputs,
)

log = logging.getLogger("damlab")

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE = 0, 2, 3


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


# --------------------------------------------------------------------------- manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    return {
        "damlab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    inputs: dict = field(default_factory=dict)
    versions: dict = field(default_factory=_versions)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: Optional[str] = None
    warnings: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def add_input(self, path) -> None:
        self.inputs[os.path.basename(path)] = {"path": str(path), "sha256": file_digest(path)}

    def write(self, outdir) -> str:
        self.finished = datetime.now(timezone.utc).isoformat()
        path = os.path.join(outdir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


class _WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


# --------------------------------------------------------------------------- helpers


def _csv_list(text, cast=str):
    if text is None:
        return None
    items = [s.strip() for s in str(text).split(",") if s.strip()]
    try:
        return [cast(s) for s in items]
    except ValueError as exc:
        raise InputError(f"cannot parse list {text!r}: {exc}") from None


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            out = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(out, dict):
        raise InputError(f"config file {path} must hold a JSON object")
    return out


def _apply_config(args, parser, section=None):
    """Fill unset flags from ``--config``; flags given on the command line win."""
    if not getattr(args, "config", None):
        return {}
    cfg = _read_json(args.config)
    if section and section in cfg and isinstance(cfg[section], dict):
        cfg = cfg[section]
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if hasattr(args, dest) and getattr(args, dest) == parser.get_default(dest):
            setattr(args, dest, val)
    return cfg


def _load_panel(args, manifest: RunManifest):
    if not os.path.exists(args.panel):
        raise InputError(f"panel file not found: {args.panel}")
    schema = PanelSchema(
        unit=args.unit_col,
        time=args.time_col,
        count=args.count_col,
        exposure=args.exposure_col,
        policy_date=args.policy_col,
    )
    manifest.add_input(args.panel)
    return load_panel(args.panel, schema)


def _outdir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# --------------------------------------------------------------------------- fit


def cmd_fit(args, parser) -> int:
    _apply_config(args, parser, "fit")
    manifest = RunManifest(command="fit", config={}, seed=args.seed)
    if args.config:
        manifest.add_input(args.config)
    panel = _load_panel(args, manifest)
    x1 = _csv_list(args.x1) or []
    x2 = _csv_list(args.x2)
    if x2 is None:
        x2 = [c for c in panel.covariate_names if c not in x1]
    reduction = None
    if args.pca is not None and x2:
        panel, reduction = reduce_panel_covariates(panel, x2, args.pca)
        x2 = [c for c in panel.covariate_names if c not in x1]
        log.info("reduced %d covariates to %d components", len(reduction.columns), reduction.k)
    spec = ModelSpec(
        family=args.family,
        p=args.p,
        b=args.b,
        x1=tuple(x1),
        x2=tuple(x2),
        year_effects=not args.no_year_effects,
        unit_effects=args.unit_effects,
    )
    if not spec.count_model:
        raise InputError("the fit command fits the count families; use the library for linear models")
    manifest.config = {"spec": spec.to_dict(), "bayes": args.bayes, "level": args.level, "pca": args.pca}
    out = _outdir(args.out)
    args._manifest = manifest

    status = EXIT_OK
    mle = fit_mle(panel, spec)
    result = mle
    with open(os.path.join(out, "fit.json"), "w") as fh:
        fh.write(mle.to_json())
    manifest.outputs.append("fit.json")
    if args.bayes:
        opts = McmcOptions(
            chains=args.chains,
            iter=args.iter,
            warmup=args.warmup,
            seed=args.seed,
            workers=worker_count(args.workers),
        )
        manifest.config["mcmc"] = asdict(opts)
        manifest.config["priors"] = asdict(Priors())
        post = fit_bayes(panel, spec, Priors(), opts, mle=mle)
        result = post
        with open(os.path.join(out, "posterior.json"), "w") as fh:
            json.dump(post.to_dict(), fh, indent=2, default=_json_default)
        manifest.outputs.append("posterior.json")
        if args.dump_draws:
            n_chain, n_iter, _ = post.draws.shape
            df = pd.DataFrame(post.flat(), columns=list(post.names))
            df.insert(0, "iteration", np.tile(np.arange(n_iter), n_chain))
            df.insert(0, "chain", np.repeat(np.arange(n_chain), n_iter))
            df.to_csv(os.path.join(out, "draws.csv"), index=False, float_format="%.10g")
            manifest.outputs.append("draws.csv")
        if not post.converged:
            status = EXIT_CONVERGENCE
    if reduction is not None:
        with open(os.path.join(out, "pca.json"), "w") as fh:
            fh.write(reduction.to_json())
        manifest.outputs.append("pca.json")

    coding = coding_integer_enactment(spec.b, spec.b + 1)
    pct = int(round(100 * args.level))
    rows = []
    for t in range(spec.b + 1):
        est, lo, hi = summarize_rr(result, coding, t, args.level)
        rows.append({"t": t, "rr": est, f"lo{pct}": lo, f"hi{pct}": hi})
    pd.DataFrame(rows).to_csv(os.path.join(out, "rr.csv"), index=False, float_format="%.10g")
    manifest.outputs.append("rr.csv")
    for r in rows:
        print(f"t={r['t']}: {format_rr(r['rr'], r[f'lo{pct}'], r[f'hi{pct}'])}")
    return status


# --------------------------------------------------------------------------- simulate


def _study_config(args, parser) -> StudyConfig:
    base = dict(PRESETS["desk"])
    if args.preset:
        if args.preset not in PRESETS:
            raise InputError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        base = dict(PRESETS[args.preset])
    if args.config:
        cfg = _read_json(args.config)
        cfg = cfg.get("simulate", cfg)
        base.update(cfg)
    if args.grid is not None:
        grid = tuple(_csv_list(args.grid, float))
        base.update(grid_beta0=grid, grid_beta1=grid, cells=None)
    if args.reps is not None:
        base["replications"] = args.reps
    if args.seed is not None:
        base["seed"] = args.seed
    if args.workers is not None:
        base["workers"] = args.workers
    if args.base_panel is not None:
        base["base_panel"] = args.base_panel
    try:
        return StudyConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid study configuration: {exc}") from None


def cmd_simulate(args, parser) -> int:
    config = _study_config(args, parser)
    manifest = RunManifest(command="simulate", config=config.to_dict(), seed=config.seed)
    if args.config:
        manifest.add_input(args.config)
    if config.base_panel:
        if not os.path.exists(config.base_panel):
            raise InputError(f"base panel not found: {config.base_panel}")
        manifest.add_input(config.base_panel)
    out = _outdir(args.out)
    cells = config.grid()

    def progress(ci, cell):
        print(f"[{ci + 1}/{len(cells)}] e^beta0={cell[0]:g} e^beta1={cell[1]:g} done", file=sys.stderr)

    result = run_study(config, progress=progress)
    write_outputs(result, out)
    manifest.config["base_autocorr"] = result.base_autocorr
    manifest.outputs += ["metrics.csv", "estimates.csv", "figure_data/"]
    n_failed = int(result.metrics["n_failed"].max()) if len(result.metrics) else 0
    if n_failed:
        manifest.warnings.append(f"up to {n_failed} failed fits per metrics row")
    args._manifest = manifest
    return EXIT_OK


# --------------------------------------------------------------------------- code-effects


def cmd_code_effects(args, parser) -> int:
    _apply_config(args, parser, "code-effects")
    horizon = args.horizon if args.horizon is not None else args.b + 2
    if horizon < 0:
        raise InputError("horizon must be nonnegative")
    if not 0.0 <= args.te < 1.0:
        raise InputError("--te must lie in [0, 1)")
    coding = coding_partial_year(args.te, args.b, horizon)
    df = pd.DataFrame({"t": np.arange(horizon + 1), "w0": coding.w0, "w1": coding.w1})
    text = df.to_csv(index=False, float_format="%.17g")
    if args.out:
        out = _outdir(args.out)
        with open(os.path.join(out, "effect_coding.csv"), "w") as fh:
            fh.write(text)
        manifest = RunManifest(command="code-effects", config={"b": args.b, "te": args.te, "horizon": horizon},
                               seed=None, outputs=["effect_coding.csv"])
        args._manifest = manifest
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- report


def _report_metrics(path, horizon) -> None:
    try:
        metrics = pd.read_csv(os.path.join(path, "metrics.csv"))
    except pd.errors.EmptyDataError:
        raise InputError("metrics.csv is empty") from None
    if metrics.empty:
        raise InputError("metrics.csv has no rows")
    est_path = os.path.join(path, "estimates.csv")
    if os.path.exists(est_path):
        try:
            est = pd.read_csv(est_path)
        except pd.errors.EmptyDataError:
            raise InputError("estimates.csv is empty") from None
        if est.empty:
            raise InputError("estimates.csv has no rows")
    if horizon is None:
        horizon = int(metrics["horizon"].max())
    at = metrics[metrics["horizon"] == horizon]
    if at.empty:
        raise InputError(f"no metrics at horizon {horizon}")
    cols = ["estimator", "bias", "sd", "mse", "rejection", "n_ok", "n_failed"]
    for (b0, b1), g in at.groupby(["exp_beta0", "exp_beta1"], sort=True):
        label = "Type I" if np.isclose(g["true_rr"].iloc[0], 1.0) else "Power"
        print(f"e^beta0={b0:g}  e^beta1={b1:g}  horizon={horizon}  true RR={g['true_rr'].iloc[0]:.4f}")
        table = g[cols].rename(columns={"rejection": label})
        print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        print()
    figdir = os.path.join(path, "figure_data")
    if not os.path.isdir(figdir):
        os.makedirs(figdir)
        for name, df in figure_data(metrics, horizon).items():
            df.to_csv(os.path.join(figdir, name), index=False, float_format="%.10g")
        print(f"wrote figure data to {figdir}")


def _report_fit(path) -> None:
    with open(os.path.join(path, "fit.json")) as fh:
        fit = json.load(fh)
    post_path = os.path.join(path, "posterior.json")
    post = None
    if os.path.exists(post_path):
        with open(post_path) as fh:
            post = json.load(fh)
    names = fit["names"]
    se = fit.get("std_errors") or [None] * len(names)
    print(f"family {fit['family']}  n={fit['n_obs']}  loglik={fit['loglik']:.3f}")
    shown = [j for j, n in enumerate(names) if not n.startswith(("year_", "unit_"))]
    for j in shown:
        s = "" if se[j] is None or not np.isfinite(se[j]) else f"  se {se[j]:.4f}"
        line = f"  {names[j]:<12} {fit['estimates'][j]: .5f}{s}"
        if post is not None:
            line += f"  median {post['median'][j]: .5f}  rhat {post['rhat'][j]:.3f}"
        print(line)
    rr_path = os.path.join(path, "rr.csv")
    if os.path.exists(rr_path):
        rr = pd.read_csv(rr_path)
        if rr.empty:
            raise InputError("rr.csv has no rows")
        lo, hi = rr.columns[2], rr.columns[3]
        kind = "posterior median" if post is not None else "MLE"
        print(f"risk ratio by years since enactment ({kind}, interval {lo[2:]}%)")
        for _, r in rr.iterrows():
            print(f"  t={int(r['t'])}: {format_rr(r['rr'], r[lo], r[hi])}")


def cmd_report(args, parser) -> int:
    path = args.path
    if not os.path.isdir(path):
        raise InputError(f"not a directory: {path}")
    if os.path.exists(os.path.join(path, "metrics.csv")):
        _report_metrics(path, args.horizon)
    elif os.path.exists(os.path.join(path, "fit.json")):
        _report_fit(path)
    else:
        raise InputError(f"{path} holds neither metrics.csv nor fit.json")
    return EXIT_OK


# --------------------------------------------------------------------------- synth-data


def cmd_synth_data(args, parser) -> int:
    fields = {}
    if args.config:
        cfg = _read_json(args.config)
        fields.update(cfg.get("base", cfg))
    for key, val in (("n_units", args.units), ("n_periods", args.periods),
                     ("target_autocorr", args.autocorr), ("seed", args.seed)):
        if val is not None:
            fields[key] = val
    try:
        cfg = BaseConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in fields.items()})
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid generator configuration: {exc}") from None
    panel = synth_base_panel(cfg)
    config = {"base": asdict(cfg), "treated": args.treated, "rr": args.rr, "b": args.b}
    if args.treated:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729]))
        schedules = assign_treatment(rng, panel, args.treated)
        rr = _csv_list(args.rr, float) if args.rr else [1.0, 1.0]
        if len(rr) != 2 or min(rr) <= 0:
            raise InputError("--rr takes two positive values: e^beta0,e^beta1")
        panel = inject_effect(panel, schedules, float(np.log(rr[0])), float(np.log(rr[1])), args.b)
    out = _outdir(args.out)
    save_panel(panel, os.path.join(out, "panel.csv"))
    manifest = RunManifest(command="synth-data", config=config, seed=cfg.seed, outputs=["panel.csv"])
    manifest.config["pooled_autocorr"] = pooled_autocorr(panel)
    args._manifest = manifest
    print(f"wrote {panel.n_units}x{panel.n_periods} panel to {os.path.join(out, 'panel.csv')}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _panel_columns(p):
    p.add_argument("--unit-col", default="unit")
    p.add_argument("--time-col", default="time")
    p.add_argument("--count-col", default="count")
    p.add_argument("--exposure-col", default="exposure")
    p.add_argument("--policy-col", default="policy_date")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"damlab {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a count model to a panel CSV")
    p.add_argument("panel")
    p.add_argument("--family", default="nb-dam", choices=[f for f in FAMILIES if f.startswith("nb-")])
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--b", type=int, default=5)
    p.add_argument("--x1", default=None, help="comma-separated covariates entering the debiased block")
    p.add_argument("--x2", default=None, help="comma-separated covariates (default: all not in --x1)")
    p.add_argument("--pca", type=float, default=None, help="replace X2 covariates by PCs at this variance share")
    p.add_argument("--no-year-effects", action="store_true")
    p.add_argument("--unit-effects", action="store_true")
    p.add_argument("--bayes", action="store_true")
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iter", type=int, default=2000)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dump-draws", action="store_true", help="write post-warmup draws to draws.csv")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="fit_out")
    _panel_columns(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run the effect-injection simulation study")
    p.add_argument("--preset", default=None, help=f"one of {', '.join(sorted(PRESETS))}")
    p.add_argument("--grid", default=None, help="comma-separated e^beta values used for both coefficients")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--base-panel", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="sim_out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("code-effects", help="print instant and phase-in weights")
    p.add_argument("--b", type=int, default=5)
    p.add_argument("--te", type=float, default=0.0, help="fraction of the enactment period already elapsed")
    p.add_argument("--horizon", type=int, default=None, help="last event time (default b + 2)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_code_effects)

    p = sub.add_parser("report", help="summarize a fit or simulation output directory")
    p.add_argument("path")
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth-data", help="write a synthetic panel CSV")
    p.add_argument("--units", type=int, default=None)
    p.add_argument("--periods", type=int, default=None)
    p.add_argument("--autocorr", type=float, default=None)
    p.add_argument("--treated", type=int, default=0)
    p.add_argument("--rr", default=None, help="e^beta0,e^beta1 injected into treated units")
    p.add_argument("--b", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="synth_out")
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    collector = _WarningCollector()
    logging.getLogger("damlab").addHandler(collector)
    try:
        code = args.func(args, parser)
    except (InputError, PanelError, DesignError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        collector.messages.append(str(exc))
        code = EXIT_CONVERGENCE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        logging.getLogger("damlab").removeHandler(collector)
    manifest = getattr(args, "_manifest", None)
    if manifest is not None:
        manifest.warnings += collector.messages
        manifest.write(args.out)
    for msg in collector.messages:
        print(f"warning: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
