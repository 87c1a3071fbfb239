"""Command-line entry point: ``contrastive-mi {estimate,bench,oracle,gradcheck}``.

Exit codes: 0 success, 1 failed check, 2 configuration error,
3 numeric divergence, 4 oracle enumeration budget exceeded.
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click

from .errors import ConfigError, NumericDivergence, NumericError, OracleBudgetError

EXIT_FAILED_CHECK = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_BUDGET = 4


def _write(text: str, out: str | None):
    if out is None or out == "-":
        click.echo(text, nl=not text.endswith("\n"))
    else:
        Path(out).write_text(text, encoding="utf-8")


def _fail(msg: str, code: int):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


class _Guard:
    """Map package exceptions to exit codes."""

    def __enter__(self):
        return self

    def __exit__(self, etype, exc, tb):
        if exc is None:
            return False
        if isinstance(exc, ConfigError):
            _fail(str(exc), EXIT_CONFIG)
        if isinstance(exc, OracleBudgetError):
            _fail(str(exc), EXIT_BUDGET)
        if isinstance(exc, (NumericDivergence, NumericError)):
            _fail(str(exc), EXIT_DIVERGENCE)
        if isinstance(exc, ValueError):
            _fail(str(exc), EXIT_CONFIG)
        return False


_config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML run config.")
_set_option = click.option(
    "--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config entry, e.g. objective.nu=0.5."
)


@click.group()
@click.version_option(package_name="contrastive-mi")
def main():
    """Contrastive mutual-information estimation and exact checks."""


@main.command()
@_config_option
@_set_option
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the JSON report here.")
@click.option("--progress/--no-progress", default=False, help="Print evaluation points to stderr.")
def estimate(config_path, overrides, out, progress):
    """Train one critic and print its JSON estimate report."""
    from . import harness

    with _Guard():
        cfg = harness.load_config(config_path, overrides)

        def show(step, loss, est):
            click.echo(f"step {step:>7d}  loss {loss: .5f}  estimate {est: .4f} bits", err=True)

        try:
            rep = harness.run_benchmark(cfg, progress=show if progress else None)
        except NumericDivergence as e:
            if out and e.report is not None:
                _write(e.report.to_json(), out)
            raise
        _write(rep.to_json() + "\n", out)


@main.command()
@_config_option
@_set_option
@click.option("--seeds", default=None, help="Comma-separated seeds (overrides the config's suite.seeds).")
@click.option("--workers", default=1, show_default=True, type=int, help="Parallel worker processes.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Per-run CSV path (default stdout).")
@click.option("--summary", type=click.Path(dir_okay=False), default=None, help="Also write the aggregate CSV here.")
def bench(config_path, overrides, seeds, workers, out, summary):
    """Run a suite (objectives x targets x seeds) and emit a per-run CSV."""
    from . import harness

    with _Guard():
        d = harness.load_config_dict(config_path) if config_path else {}
        configs, suite_seeds = harness.suite_from_dict(d, overrides)
        if seeds:
            try:
                suite_seeds = [int(s) for s in seeds.split(",") if s.strip()]
            except ValueError as e:
                raise ConfigError(f"bad --seeds value {seeds!r}") from e
        res = harness.run_suite(configs, suite_seeds, workers=workers)
        _write(res.runs_csv(), out)
        if summary:
            _write(res.summary_csv(), summary)
        failed = [r for r in res.runs if r.get("status") != "ok"]
        for r in failed:
            click.echo(f"run failed: {r['objective']} target={r['target_bits']} seed={r['seed']}: {r['status']}", err=True)


@main.command()
@click.argument("spec", type=click.File("r"), default="-")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the JSON report here.")
def oracle(spec, out):
    """Exact quantities for a discrete pair.

    SPEC is a JSON file (or - for stdin) with keys q1, q0 and optionally K, nu,
    rule, alpha.
    """
    from . import oracle as orc

    with _Guard():
        try:
            d = json.load(spec)
        except json.JSONDecodeError as e:
            raise ConfigError(f"oracle spec is not valid JSON: {e}") from e
        if not isinstance(d, dict) or "q1" not in d or "q0" not in d:
            raise ConfigError("oracle spec needs q1 and q0")
        allowed = {"q1", "q0", "K", "nu", "rule", "alpha", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown oracle spec keys: {sorted(unknown)}")
        rep = orc.oracle_report(**d)
        _write(json.dumps(rep, indent=2) + "\n", out)


@main.command()
@click.option("--seeds", default=3, show_default=True, type=int, help="Random critics per objective and critic kind.")
@click.option("--eps", default=1e-5, show_default=True, type=float)
@click.option("--tol", default=1e-4, show_default=True, type=float, help="Max allowed relative error.")
def gradcheck(seeds, eps, tol):
    """Finite-difference gradient check of every objective family."""
    from . import harness

    with _Guard():
        rows = harness.gradient_sweep(seeds=tuple(range(seeds)), eps=eps)
        worst: dict = {}
        for r in rows:
            key = (r["objective"], r["critic"])
            worst[key] = max(worst.get(key, 0.0), r["max_rel_err"])
        bad = 0
        for (name, crit), err in worst.items():
            ok = err < tol and math.isfinite(err)
            bad += not ok
            click.echo(f"{'PASS' if ok else 'FAIL'}  {name:<48s} {crit:<20s} max rel err {err:.2e}")
        if bad:
            _fail(f"{bad} objective/critic combinations exceed {tol:g}", EXIT_FAILED_CHECK)


if __name__ == "__main__":
    main()
