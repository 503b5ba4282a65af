"""Command-line entry point: ``python -m nsl <command>``.

Commands: simulate, fit, pca, spark and report. Exit status is 0 on
success, 1 for usage errors, 2 for bad input data and 3 for numerical
failures (including a simulation with failed replications).
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import __version__
from .errors import InputError, NSLError
from .penalized import FAMILIES, PenaltySpec
from .pipeline import NslConfig, fit, prepare_covariates, robust_spark
from .simulation import METHODS, MODELS, ExampleSpec, run_study, summarize
from .spiked_pca import principal_scores, score_angle, subspace_angle, top_components

DEFAULT_SEED = 12345


# ---- I/O helpers ----------------------------------------------------------

def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_matrix(path, label: str):
    """Read a headed numeric CSV; returns ``(header, array)``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {label} file {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise InputError(f"{label} file {path} is not UTF-8") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise InputError(f"{label} file {path} is empty")
    header = [h.strip() for h in rows[0]]
    if all(_is_number(h) for h in header):
        raise InputError(f"{label} file {path} needs a header row")
    if len(rows) < 2:
        raise InputError(f"{label} file {path} has no data rows")
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"{label} file {path}, line {i}: expected {len(header)} fields, got {len(row)}")
        for j, field in enumerate(row):
            field = field.strip()
            if not field:
                raise InputError(f"{label} file {path}, line {i}: blank field in column {header[j]!r}")
            try:
                data[i - 2, j] = float(field)
            except ValueError:
                raise InputError(f"{label} file {path}, line {i}: {field!r} is not a number") from None
    if not np.all(np.isfinite(data)):
        raise InputError(f"{label} file {path} contains non-finite values")
    return header, data


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, default=_jsonable, allow_nan=False) + "\n"


def _emit(text: str, out) -> None:
    if out is None:
        click.echo(text, nl=False)
    else:
        atomic_write(out, text)


def load_schema() -> dict:
    return json.loads(resources.files("nsl").joinpath("report_schema.json").read_text(encoding="utf-8"))


# ---- config files ---------------------------------------------------------

def _load_config(ctx, param, value):
    if value is None:
        return value
    try:
        with open(value, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.BadParameter(f"cannot load config: {exc}", ctx=ctx, param=param)
    if not isinstance(data, dict):
        raise click.BadParameter("config file must hold a JSON object", ctx=ctx, param=param)
    data = {k.replace("-", "_"): v for k, v in data.items()}
    known = {p.name for p in ctx.command.params if p.name != "config"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise click.BadParameter(f"unknown config keys: {', '.join(unknown)}", ctx=ctx, param=param)
    ctx.default_map = {**(ctx.default_map or {}), **data}
    return value


config_option = click.option("--config", type=click.Path(dir_okay=False), callback=_load_config,
                             is_eager=True, expose_value=False,
                             help="JSON file of option values; command-line flags take precedence.")


# ---- commands -------------------------------------------------------------

@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="nsl")
def cli():
    """Sparse regression with latent factors estimated by principal components."""


@cli.command()
@config_option
@click.option("--example", type=click.IntRange(1, 2), default=1, show_default=True)
@click.option("--reps", type=click.IntRange(min=2), default=50, show_default=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--n", "n", type=click.IntRange(min=5), default=100, show_default=True)
@click.option("--p", "p", type=click.IntRange(min=6), default=1000, show_default=True)
@click.option("--q", "q", type=click.IntRange(min=1), default=None, help="Covariate count (example 2).")
@click.option("--factors", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--penalty", "methods", type=click.Choice(METHODS), multiple=True,
              help="Repeatable; default all of lasso, scad, hard.")
@click.option("--models", type=click.Choice(MODELS), multiple=True, help="Repeatable; default M1, M2, oracle.")
@click.option("--n-lambda", type=click.IntRange(min=2), default=100, show_default=True)
@click.option("--n-starts", type=click.IntRange(min=0), default=5, show_default=True)
@click.option("--test-size", type=click.IntRange(min=1), default=10_000, show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Defaults to NSL_THREADS or 1.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report JSON (default stdout).")
@click.option("--records-csv", type=click.Path(dir_okay=False), default=None)
def simulate(example, reps, seed, n, p, q, factors, methods, models, n_lambda, n_starts, test_size,
             workers, out, records_csv):
    """Run a Monte Carlo study and write a JSON report."""
    spec = ExampleSpec(example_id=example, n=n, p=p, q=q, K=factors, reps=reps, seed=seed,
                       n_lambda=n_lambda, n_starts=n_starts, test_size=test_size)
    res = run_study(spec, methods or METHODS, models or MODELS, workers=workers)
    config = asdict(spec)
    config.update(methods=list(methods or METHODS), models=list(models or MODELS))
    report = {
        "metadata": {"tool": "nsl", "version": __version__, "command": "simulate", "seed": seed,
                     "config": config},
        "summary": res.summary,
        "records": res.records,
        "failures": res.failures,
    }
    _emit(_dump(report), out)
    if records_csv:
        lead = ["rep", "method", "model"]
        cols = lead + sorted({k for r in res.records for k in r} - set(lead))
        rows = [[_cell(r.get(c)) for c in cols] for r in res.records]
        atomic_write(records_csv, _csv_text(cols, rows))
    if res.failures:
        click.echo(f"{len(res.failures)} of {reps} replications failed", err=True)
        return 3
    return 0


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else v


@cli.command("fit")
@config_option
@click.option("--response", type=click.Path(dir_okay=False), required=True)
@click.option("--predictors", type=click.Path(dir_okay=False), required=True)
@click.option("--covariates", type=click.Path(dir_okay=False), default=None)
@click.option("--factors", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--penalty", type=click.Choice(FAMILIES), default="hard", show_default=True)
@click.option("--n-lambda", type=click.IntRange(min=2), default=100, show_default=True)
@click.option("--n-starts", type=click.IntRange(min=0), default=5, show_default=True)
@click.option("--validation-fraction", type=click.FloatRange(0, 1, min_open=True, max_open=True),
              default=0.4, show_default=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--clr/--no-clr", default=False, help="Centered log-ratio transform of the covariates.")
@click.option("--center/--no-center", default=True, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="coefficients.csv", show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="Fit summary JSON.")
def fit_command(response, predictors, covariates, factors, penalty, n_lambda, n_starts,
                validation_fraction, seed, clr, center, out, report):
    """Fit on CSV data and write the coefficient table."""
    _, y = read_matrix(response, "response")
    xnames, X = read_matrix(predictors, "predictors")
    W = None
    if covariates is not None:
        _, W = read_matrix(covariates, "covariates")
    if y.shape[1] != 1:
        raise InputError("response file must have exactly one column")
    counts = {"response": y.shape[0], "predictors": X.shape[0]}
    if W is not None:
        counts["covariates"] = W.shape[0]
    if len(set(counts.values())) > 1:
        raise InputError(f"row counts differ: {counts}")
    if W is None:
        factors = 0
    cfg = NslConfig(num_factors=factors, penalty=PenaltySpec(penalty), center_W=center, clr_W=clr,
                    validation_fraction=validation_fraction, seed=seed, n_lambda=n_lambda, n_starts=n_starts)
    res = fit(y[:, 0], X, W, cfg)
    est = res.estimate
    norms = np.linalg.norm(X[res.train_index], axis=0) / math.sqrt(res.train_index.size)
    rows = [[name, repr(float(b)), repr(float(b * s)), int(b != 0)]
            for name, b, s in zip(xnames, est.beta, norms)]
    for k, (g_raw, g) in enumerate(zip(res.gamma_original, est.gamma), start=1):
        rows.append([f"factor_{k}", repr(float(g_raw)), repr(float(g)), int(g != 0)])
    atomic_write(out, _csv_text(["name", "value", "standardized_value", "in_support"], rows))
    if report:
        summary = {
            "metadata": {"tool": "nsl", "version": __version__, "command": "fit", "seed": seed,
                         "config": asdict(cfg)},
            "lambda_selected": res.lambda_selected,
            "sigma_hat": res.sigma_hat,
            "objective": est.objective_value,
            "support": [rows[i][0] for i in est.support],
            "eigenvalues": res.eigenvalues,
            "diagnostics": res.diagnostics,
        }
        atomic_write(report, _dump(summary))
    return 0


@cli.command()
@config_option
@click.option("--covariates", type=click.Path(dir_okay=False), required=True)
@click.option("--factors", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--directions", type=click.Path(dir_okay=False), default=None,
              help="Reference eigenvectors (q rows, one column per factor) for angle diagnostics.")
@click.option("--clr/--no-clr", default=False)
@click.option("--center/--no-center", default=True, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV output (default stdout).")
def pca(covariates, factors, directions, clr, center, out):
    """Leading sample eigenvalues, score scalars and optional angle diagnostics."""
    _, W = read_matrix(covariates, "covariates")
    cfg = NslConfig(num_factors=factors, center_W=center, clr_W=clr)
    Wp, _ = prepare_covariates(W, cfg)
    if factors >= W.shape[0]:
        raise InputError(f"number of factors {factors} must be below the row count {W.shape[0]}")
    eig = top_components(Wp, factors)
    scores = principal_scores(Wp, eig, factors)
    header = ["component", "eigenvalue", "raw_norm", "back_scalar"]
    U = None
    if directions is not None:
        _, U = read_matrix(directions, "directions")
        if U.shape != (W.shape[1], factors):
            raise InputError(f"directions must be {W.shape[1]} x {factors}, got {U.shape[0]} x {U.shape[1]}")
        U = U / np.linalg.norm(U, axis=0)
        header += ["theta", "omega"]
    rows = []
    for i in range(factors):
        row = [i + 1, repr(float(eig.eigenvalues[i])), repr(float(scores.raw_norms[i])),
               repr(float(scores.back_scalars[i]))]
        if U is not None:
            uh = eig.eigenvectors[:, i]
            row += [repr(float(subspace_angle(uh, U[:, [i]]))), repr(float(score_angle(Wp, uh, U[:, i])))]
        rows.append(row)
    _emit(_csv_text(header, rows), out)
    return 0


@cli.command()
@config_option
@click.option("--design", type=click.Path(dir_okay=False), required=True)
@click.option("--c", "c", type=click.FloatRange(0, 1, min_open=True, max_open=True), required=True)
@click.option("--cap", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSON output (default stdout).")
def spark(design, c, cap, out):
    """Robust spark of a design matrix by exhaustive search."""
    _, A = read_matrix(design, "design")
    tau = robust_spark(A, c, cap)
    _emit(_dump({"c": c, "cap": cap, "tau": tau, "exceeds_cap": tau is None}), out)
    return 0


@cli.command()
@click.option("--input", "input_path", type=click.Path(dir_okay=False), required=True)
def report(input_path):
    """Validate a simulation report and print its summary."""
    try:
        with open(input_path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read report {input_path}: {exc}") from exc
    try:
        jsonschema.validate(data, load_schema())
    except jsonschema.ValidationError as exc:
        raise InputError(f"report does not match the schema: {exc.message}") from exc
    if summarize(data["records"]) != data["summary"]:
        raise InputError("summary does not match the per-replication records")
    cols = ["PE", "FP", "FN", "sigma_hat", "FP_gamma", "FN_gamma", "gamma_Linf"]
    click.echo("method/model".ljust(14) + "".join(c.rjust(18) for c in cols))
    for key, entry in data["summary"].items():
        cells = []
        for c in cols:
            m = entry.get(c)
            cells.append((f"{m['mean']:.3f} ({m['sd']:.3f})" if m else "-").rjust(18))
        click.echo(key.ljust(14) + "".join(cells))
    return 0


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="nsl", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except NSLError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
