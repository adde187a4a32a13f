"""Command-line entry point: ``urlalign {generate,train-graph,train-align,evaluate,all}``."""

from __future__ import annotations

import functools
import json
import logging
import sys

import click

from . import pipeline


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  help="TOML config file; unset keys take the defaults.")
    @click.option("--out", type=click.Path(file_okay=False), help="Artifact directory (overrides the config).")
    @click.option("--seed", type=int, help="Global seed (overrides the config).")
    @click.option("--workers", type=click.IntRange(min=1), help="Graph-training threads.")
    @click.option("--force", is_flag=True, help="Use stale upstream artifacts instead of refusing.")
    @click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
    @functools.wraps(fn)
    def wrapper(config_path, out, seed, workers, force, verbose, **kwargs):
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        try:
            config = pipeline.load_config(config_path, out=out, seed=seed, workers=workers)
            return fn(config, force, **kwargs)
        except (ValueError, FileNotFoundError, RuntimeError, LookupError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


def _report(stage: str, meta: dict) -> None:
    click.echo(f"{stage}: {pipeline.stage_dir_name(stage)}/ {json.dumps(meta.get('summary', {}), sort_keys=True)}")


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Graph-to-text alignment pipeline on planted-community corpora."""


def _stage_command(stage: str, help_text: str):
    @main.command(name=stage, help=help_text)
    @common_options
    def command(config, force):
        meta = pipeline.run_stage(config, stage, force=force)
        _report(stage, meta)
    return command


_stage_command("generate", "Generate and save a synthetic corpus.")
_stage_command("train-graph", "Train user and URL embedding tables on the engagement graph.")
_stage_command("train-align", "Align a text encoder to the frozen URL table.")
_stage_command("evaluate", "Run the few-shot probe suite and write the metrics report.")


@main.command(name="all")
@common_options
def all_command(config, force):
    """Run every stage, skipping those whose outputs are up to date."""
    ran = pipeline.cmd_all(config, force=force)
    for stage in pipeline.STAGES:
        click.echo(f"{stage}: {'ran' if stage in ran else 'up to date'}")


if __name__ == "__main__":
    main()
