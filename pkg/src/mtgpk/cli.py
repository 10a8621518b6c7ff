"""``mtgpk`` command-line driver.

Exit codes: 0 success, 1 usage/config/input error, 2 numerical failure,
3 acceptance-property failure.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import experiments
from .config import dump_json, load_config
from .core import load_dataset
from .errors import DimensionMismatch, InputError, MtgpkError, NumericalError, ParseError, ResourceCapExceeded
from .multitask_kernels import kernel_matrix

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3

log = logging.getLogger("mtgpk")


class AcceptanceFailure(Exception):
    pass


def _config(path, seed):
    cfg = load_config(path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _write_text(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _fmt(v) -> str:
    return f"{v:.17g}"


config_opt = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                          help="Experiment config (JSON).")
seed_opt = click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the config seed.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging on stderr.")
def cli(verbose):
    """Multitask GP kernels from infinitely wide multitask networks."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(name)s: %(message)s")


def read_pairs(path, dim=None):
    """Rows ``t1,a0..a{d-1},t2,b0..b{d-1}`` -> ``(t1, X1, t2, X2)``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    d = (len(header) - 2) // 2
    expected = ["t1"] + [f"a{j}" for j in range(d)] + ["t2"] + [f"b{j}" for j in range(d)]
    if d < 1 or header != expected:
        raise ParseError(f"{path}: header must be t1,a0,...,t2,b0,... with matching dimensions, got {','.join(header)}", 1)
    n = len(rows) - 1
    if n == 0:
        raise ParseError(f"{path}: no data rows", 2)
    t1 = np.empty(n, dtype=np.int64)
    t2 = np.empty(n, dtype=np.int64)
    X1 = np.empty((n, d))
    X2 = np.empty((n, d))
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != len(header):
            raise DimensionMismatch(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
        for col, name in ((0, "t1"), (d + 1, "t2")):
            if not row[col].strip().isdigit():
                raise ParseError(f"{name} must be a non-negative integer, got {row[col]!r}", lineno, name)
        t1[i] = int(row[0])
        t2[i] = int(row[d + 1])
        for j in range(d):
            for arr, col, name in ((X1, 1 + j, f"a{j}"), (X2, d + 2 + j, f"b{j}")):
                try:
                    arr[i, j] = float(row[col])
                except ValueError:
                    raise ParseError(f"cannot parse {row[col]!r} as a number", lineno, name) from None
                if not np.isfinite(arr[i, j]):
                    raise ParseError(f"non-finite value {row[col]!r}", lineno, name)
    return t1, X1, t2, X2


@cli.command("kernel-eval")
@config_opt
@click.option("--pairs", required=True, type=click.Path(dir_okay=False), help="CSV of (t1, x1, t2, x2) rows.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output CSV, one value per row.")
@seed_opt
def kernel_eval_cmd(config_path, pairs, out, seed):
    """Evaluate the configured kernel at each row of a pairs file."""
    cfg = _config(config_path, seed)
    if cfg.kernel is None:
        raise InputError("kernel-eval needs a kernel in the config")
    t1, X1, t2, X2 = read_pairs(pairs)
    if len(t1) > cfg.caps.max_n:
        raise ResourceCapExceeded(f"{len(t1)} pairs exceed caps.max_n={cfg.caps.max_n}")
    values = [kernel_matrix(cfg.kernel, X1[i:i + 1], t1[i:i + 1], X2[i:i + 1], t2[i:i + 1])[0, 0]
              for i in range(len(t1))]
    _write_text(out, "k\n" + "".join(_fmt(v) + "\n" for v in values))


@cli.command("verify-converge")
@config_opt
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Report JSON.")
@seed_opt
def verify_converge_cmd(config_path, out, seed):
    """Compare finite-width network covariances against the analytic kernel."""
    cfg = _config(config_path, seed)
    report, passed = experiments.verify_converge(cfg)
    _write_text(out, dump_json(report))
    if not passed:
        raise AcceptanceFailure(report["monotone_reason"])


@cli.command("fit-predict")
@config_opt
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False))
@click.option("--test", "test_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Predictions CSV.")
@click.option("--summary", required=True, type=click.Path(dir_okay=False), help="Fit summary JSON.")
@click.option("--baseline", type=click.Choice(["independent"]), default=None,
              help="Fit independent per-task GPs instead of the multitask model.")
@click.option("--standardize", is_flag=True, default=None, help="Z-score inputs and per-task targets (train stats).")
@seed_opt
def fit_predict_cmd(config_path, train_path, test_path, out, summary, baseline, standardize, seed):
    """Fit on a training CSV and predict the rows of a test CSV."""
    cfg = _config(config_path, seed)
    if cfg.kernel is None:
        raise InputError("fit-predict needs a kernel in the config")
    train = load_dataset(train_path)
    test = load_dataset(test_path)
    standardize = cfg.standardize if standardize is None else standardize
    pred, summ = experiments.fit_predict(cfg, train, test, baseline, standardize)
    lines = [",".join([f"x{j}" for j in range(test.dim)] + ["task", "y", "mean", "var_latent", "var_observed"])]
    for x, t, y, p in zip(test.X, test.tasks, test.y, pred):
        lines.append(",".join([_fmt(v) for v in x] + [str(int(t)), _fmt(y)] + [_fmt(v) for v in p]))
    _write_text(out, "\n".join(lines) + "\n")
    _write_text(summary, dump_json(summ))


@cli.command("simulate")
@config_opt
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@seed_opt
def simulate_cmd(config_path, out, seed):
    """Write the two-task mismatched-smoothness benchmark as train/dev/test CSVs."""
    cfg = _config(config_path, seed)
    sim = experiments.simulate(cfg.simulate, cfg.seed)
    experiments.write_simulated(sim, out)


@cli.command("compare")
@config_opt
@click.option("--data", required=True, type=click.Path(file_okay=False), help="Directory written by simulate.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Comparison JSON.")
@seed_opt
def compare_cmd(config_path, data, out, seed):
    """Fit ICM, LMC and independent GPs on simulated data and tabulate test MSEs."""
    cfg = _config(config_path, seed)
    train, dev, test = experiments.read_simulated(data)
    search = dataclasses.replace(cfg.fit.search, seed=cfg.seed)
    report, passed = experiments.compare(train, dev, test, cfg.compare, search,
                                         experiments.rough_task_of(cfg.simulate))
    report["seed"] = cfg.seed
    _write_text(out, dump_json(report))
    if not passed:
        raise AcceptanceFailure("acceptance property failed; see 'checks' in the report")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="mtgpk", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INPUT
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except AcceptanceFailure as exc:
        click.echo(f"acceptance failure: {exc}", err=True)
        return EXIT_ACCEPTANCE
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return EXIT_NUMERICAL
    except (MtgpkError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
