"""``advrec`` command line: prepare, train, attack, kcore-study, report.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from advrec import runner
from advrec.config import load_config
from advrec.errors import AdvrecError, ConfigurationError


def _common(fn):
    fn = click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Dotted config override, value parsed as YAML; repeatable.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False, path_type=Path),
                      help="Run directory (overrides config 'output').")(fn)
    fn = click.option("--seed", type=int, help="Global seed (overrides config 'seed').")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
                      help="YAML experiment config; defaults describe a synthetic desk run.")(fn)
    return fn


def _config(config_path, seed, out, overrides):
    if config_path is not None and not config_path.exists():
        raise click.UsageError(f"config file {config_path} does not exist")
    try:
        return load_config(config_path, overrides, seed=seed, output=out)
    except ConfigurationError as exc:
        raise click.UsageError(str(exc)) from None


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except runner.UsageProblem as exc:
        raise click.UsageError(str(exc)) from None
    except (AdvrecError, OSError) as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}") from None


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def cli(verbose):
    """Train, attack and evaluate matrix-factorization recommenders."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@_common
def prepare(config_path, seed, out, overrides):
    """Load, binarize and split the dataset into OUT/data."""
    cfg = _config(config_path, seed, out, overrides)
    split = _run(runner.cmd_prepare, cfg)
    click.echo(f"prepared {cfg.output / 'data'} "
               f"({split.train.num_users} users, {len(split.test)} test users)")


@cli.command()
@_common
def train(config_path, seed, out, overrides):
    """Train BPR-MF (and AMF when configured) on the prepared split."""
    cfg = _config(config_path, seed, out, overrides)
    paths = _run(runner.cmd_train, cfg)
    click.echo(f"wrote {len(paths)} model artifacts to {cfg.output / 'models'}")


@cli.command()
@_common
@click.option("--model", "models", multiple=True, type=click.Path(dir_okay=False, path_type=Path),
              help="Model file to attack; repeatable. Defaults to every model in OUT/models.")
def attack(config_path, seed, out, overrides, models):
    """Perturb trained models and write evaluation CSVs."""
    cfg = _config(config_path, seed, out, overrides)
    for m in models:
        if not m.exists():
            raise click.UsageError(f"model file {m} does not exist")
    paths = _run(runner.cmd_attack, cfg, list(models) or None)
    click.echo(f"wrote {len(paths)} attack artifacts under {cfg.output}")


@cli.command("kcore-study")
@_common
def kcore_study(config_path, seed, out, overrides):
    """Retrain and attack on each k-core of the base dataset."""
    cfg = _config(config_path, seed, out, overrides)
    _run(runner.cmd_kcore_study, cfg)
    click.echo(f"wrote {cfg.output / 'reports' / 'kcore_study.csv'}")


@cli.command()
@_common
def report(config_path, seed, out, overrides):
    """Merge evaluation CSVs into plot-ready series."""
    cfg = _config(config_path, seed, out, overrides)
    if not cfg.output.is_dir():
        raise click.UsageError(f"run directory {cfg.output} does not exist")
    paths = _run(runner.cmd_report, cfg.output)
    problems = runner.verify_manifest(cfg.output)
    for p in problems:
        click.echo(f"manifest: {p}", err=True)
    click.echo(f"wrote {len(paths)} series files to {cfg.output / 'series'}")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="advrec", standalone_mode=True)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else (0 if exc.code is None else 1)
        if code not in (0, 1, 2):
            code = 1
        sys.exit(code)


if __name__ == "__main__":
    main()
