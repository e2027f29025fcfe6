"""Operator command line.

One subcommand per pipeline stage plus ``run-all``.  Every configuration
key is settable three ways, later wins: INI file (``--config``), environment
variable ``NBAUDIT_<SECTION>_<KEY>``, and ``--set section.key=value``.

Exit codes: 0 stage completed; 2 configuration error; 3 missing external
tool; 4 stage-order violation; 1 any other audit failure.  Individual
notebook/repository failures inside a stage are recorded in the store as
data and do not affect the exit code.
"""

from __future__ import annotations

import logging
import sys

import click

from .config import load_config
from .errors import (AuditError, ConfigError, MissingToolError,
                     StageOrderError)
from .pipeline import (STAGE_FUNCTIONS, STAGE_ORDER, PipelineContext,
                       run_all, stage_report)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_TOOL = 3
EXIT_STAGE_ORDER = 4


def _parse_overrides(pairs: tuple[str, ...]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or "." not in key:
            raise ConfigError(
                f"--set expects section.key=value, got {pair!r}")
        overrides[key.strip()] = value
    return overrides


def _run_stage(config_path: str | None, run_id: str,
               overrides: tuple[str, ...], stage: str, fmt: str = "json") -> int:
    try:
        cfg = load_config(config_path, overrides=_parse_overrides(overrides))
        ctx = PipelineContext.open(cfg, run_id)
        try:
            if stage == "run-all":
                run_all(ctx, fmt)
            elif stage == "report":
                stage_report(ctx, fmt)
            else:
                STAGE_FUNCTIONS[stage](ctx)
        finally:
            ctx.close()
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return EXIT_CONFIG
    except MissingToolError as exc:
        click.echo(f"missing tool: {exc}", err=True)
        return EXIT_MISSING_TOOL
    except StageOrderError as exc:
        click.echo(f"stage order: {exc}", err=True)
        return EXIT_STAGE_ORDER
    except KeyboardInterrupt:
        click.echo("interrupted; in-flight work marked pending", err=True)
        return 130
    except AuditError as exc:
        click.echo(f"stage {stage} failed: {exc}", err=True)
        return EXIT_FAILURE
    return EXIT_OK


def _stage_command(stage: str, help_text: str):
    @click.pass_obj
    def command(obj) -> None:
        code = _run_stage(obj["config"], obj["run_id"], obj["set"], stage)
        sys.exit(code)

    command.__name__ = stage.replace("-", "_")
    return main.command(name=stage, help=help_text)(command)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              default=None, help="INI configuration file.")
@click.option("--run-id", default="default", show_default=True,
              help="Run identifier; reuse it to resume a run.")
@click.option("--set", "overrides", multiple=True,
              metavar="SECTION.KEY=VALUE",
              help="Override one config key (repeatable).")
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, run_id: str,
         overrides: tuple[str, ...], verbose: bool) -> None:
    """Audit how reproducible published notebooks are: mine articles,
    harvest repositories, re-execute notebooks, and report the funnel."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr)
    ctx.obj = {"config": config_path, "run_id": run_id, "set": overrides}


_stage_command("mine", "Search the article service and store article metadata.")
_stage_command("harvest", "Clone linked repositories and inventory notebooks.")
_stage_command("analyze", "Parse notebooks: structure, imports, style, dependencies.")
_stage_command("build-envs", "Plan and build one environment per dependency set.")
_stage_command("execute", "Re-execute each runnable notebook in its environment.")
_stage_command("diff", "Diff rerun outputs against stored ones and classify.")


@main.command(name="report", help="Emit report files and the footprint estimate.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]),
              default="json", show_default=True)
@click.pass_obj
def report_command(obj, fmt: str) -> None:
    sys.exit(_run_stage(obj["config"], obj["run_id"], obj["set"], "report", fmt))


@main.command(name="run-all", help="All stages in order on one run id.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]),
              default="json", show_default=True)
@click.pass_obj
def run_all_command(obj, fmt: str) -> None:
    sys.exit(_run_stage(obj["config"], obj["run_id"], obj["set"], "run-all", fmt))


if __name__ == "__main__":
    main()
