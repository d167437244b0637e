"""``conoscatter`` command line.

Exit codes: 0 when every check passes, 2 when a check or stage fails, 3 for
configuration errors. ``CONOSCATTER_OUT`` overrides ``--out``.
"""

import json
import logging
import os
import sys

import click

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG = 0, 2, 3
STAGE_COMMANDS = ("synth", "forward", "scatter", "restrict", "reconstruct")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads(n):
    # only effective when numpy has not been imported yet (fresh process)
    if n:
        for var in THREAD_VARS:
            os.environ[var] = str(n)


def _load(config, out, threads, seed):
    from ..errors import ConfigInvalid
    from .config import ExperimentConfig

    try:
        cfg = ExperimentConfig.load(config)
    except ConfigInvalid as exc:
        click.echo(f"CONFIG_INVALID {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    out = os.environ.get("CONOSCATTER_OUT") or out
    return cfg.with_overrides(seed=seed, out=out, threads=threads)


def _report(manifest):
    for c in manifest.checks:
        rec = c.as_record()
        flag = "PASS" if rec["passed"] else "FAIL"
        click.echo(f"{flag} {rec['name']} value={rec['value']} threshold={rec['threshold']}")
    click.echo(f"status {manifest.status}")
    return EXIT_OK if manifest.passed else EXIT_CHECKS


def _run(command, cfg):
    from .pipeline import STAGES, StageError, new_manifest, run_pipeline, run_stage
    from .suites import run_geometry_suite

    try:
        if command == "validate":
            manifest = run_pipeline(cfg, STAGES)
        elif command == "geomcheck":
            manifest = run_geometry_suite(cfg)
        else:
            manifest = new_manifest(cfg)
            if cfg.is_empty:
                manifest.status = "NOOP"
            else:
                try:
                    run_stage(cfg, command, manifest)
                finally:
                    from pathlib import Path
                    out = Path(cfg.scenario.out)
                    out.mkdir(parents=True, exist_ok=True)
                    manifest.write(out / f"manifest_{command}.json")
    except StageError as exc:
        click.echo(f"ERROR {exc}", err=True)
        return EXIT_CHECKS
    return _report(manifest)


def _command(name, help_text):
    @click.command(name=name, help=help_text)
    @click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                  help="INI experiment configuration.")
    @click.option("--out", default=None, help="Output directory (env CONOSCATTER_OUT wins).")
    @click.option("--threads", type=int, default=None, help="Thread count for numeric libraries.")
    @click.option("--seed", type=int, default=None, help="Override the configured seed.")
    @click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
    def cmd(config, out, threads, seed, verbose):
        _set_threads(threads)
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load(config, out, threads, seed)
        sys.exit(_run(name, cfg))

    return cmd


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Born scattering workbench for nested conormal potentials."""


for _name in STAGE_COMMANDS:
    main.add_command(_command(_name, f"Run the {_name} stage alone."))
main.add_command(_command("validate", "Run every stage and the truth checks."))
main.add_command(_command("geomcheck", "Run the geometry certificate suite."))


@main.command(name="show-config")
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False))
def show_config(config):
    """Print the parsed configuration as JSON."""
    cfg = _load(config, None, None, None)
    click.echo(json.dumps(cfg.as_dict(), indent=2, default=list))


if __name__ == "__main__":
    main()
