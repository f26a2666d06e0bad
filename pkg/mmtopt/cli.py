"""mmtopt CLI."""
import logging
import os
import sys
from functools import partial
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Iterable, Optional

import attr
import click
from click_option_group import optgroup

from . import errors
from .config import ProblemConfig, build_problem, load_config
from .export import export_csv, export_vtk, load_design_csv, render_svg
from .homogenize import (
    CACHE_ENV,
    CHOParams,
    PatternClass,
    build_database,
    dump_phase_field,
    homogenize_cell,
    homogenize_for_m,
    rotation_consistency_check,
    solve_cho,
)
from .logging import LogConfiguration
from .mesh import read_mesh
from .optimizer import run
from .utils import normalize_name, output_directory

logger = logging.getLogger(__name__)

EXIT_CONVERGED = 0
EXIT_CONFIGURATION = 1
EXIT_MAX_ITERATIONS = 2
EXIT_NUMERICAL = 3

CONFIGURATION_ERRORS = (
    errors.ConfigurationException,
    errors.InvalidArgumentException,
    errors.MeshException,
    errors.OutOfRangeException,
    errors.UnsupportedAngleException,
)
NUMERICAL_ERRORS = (
    errors.SolverException,
    errors.NumericalFailureException,
    errors.CHOInstabilityException,
    errors.PatternClassificationException,
)


class ClickPattern(click.ParamType):
    """Converter for click pattern class names to PatternClass."""

    name = "pattern"

    def convert(self, value, param, ctx):
        """Convert a string to a PatternClass."""
        if isinstance(value, PatternClass):
            return value
        try:
            return PatternClass(value)
        except ValueError:
            self.fail(
                f"{value} is not one of {', '.join(p.value for p in PatternClass)}", param, ctx
            )


seed_option = click.option("--seed", type=int, default=None, help="Override the configured seed")
threads_option = click.option(
    "--threads", "-t", type=int, default=1, show_default=True, help="Worker threads"
)
out_option = click.option(
    "--out",
    "-o",
    type=click.Path(file_okay=False),
    default=None,
    help="Output directory (default: the configured output)",
    metavar="OUTDIR",
)
config_argument = click.argument("config", type=click.Path(exists=True, dir_okay=False))


def _exit_code(exception: Exception) -> int:
    # m in the disordered region is a user input error
    if isinstance(exception, NUMERICAL_ERRORS) and not isinstance(
        exception, errors.DisorderException
    ):
        return EXIT_NUMERICAL
    return EXIT_CONFIGURATION


@click.group()
@click.option(
    "--log_level", "--log-level", default="INFO", show_default=True, help="Logging level"
)
@click.option(
    "--cache_dir",
    "--cache-dir",
    envvar=CACHE_ENV,
    default=None,
    help=f"Directory caching homogenized databases (env {CACHE_ENV})",
)
@click.pass_context
def cli(ctx, log_level, cache_dir):
    """Initialize CLI."""
    ctx.ensure_object(dict)
    ctx.obj["log_config"] = LogConfiguration(log_level=log_level)
    ctx.obj["cache_dir"] = cache_dir


def _load(config_path: str, seed: Optional[int], max_iters: Optional[int]) -> ProblemConfig:
    config = load_config(Path(config_path))
    overrides = {}
    if seed is not None:
        config.problem.seed = seed
    overrides["seed"] = config.problem.seed
    if max_iters is not None:
        overrides["max_iterations"] = max_iters
    config.optimizer = attr.evolve(config.optimizer, **overrides)
    return config


@cli.command()
@config_argument
@seed_option
@click.option("--max_iters", "--max-iters", type=int, default=None, help="Iteration cap")
@out_option
@threads_option
@click.option(
    "--dry_run", "--dry-run", is_flag=True, default=False, help="Validate without solving"
)
@click.option("--vtk/--no-vtk", default=True, show_default=True, help="Write design.vtk")
@click.option("--svg/--no-svg", default=True, show_default=True, help="Write design.svg")
@click.pass_context
def optimize(ctx, config, seed, max_iters, out, threads, dry_run, vtk, svg):
    """Run the optimization described by CONFIG."""
    log_config = ctx.obj["log_config"]
    handler = None
    try:
        problem_config = _load(config, seed, max_iters)
        out_dir = output_directory(out or problem_config.problem.output, create=not dry_run)
        if not dry_run:
            log_config = attr.evolve(log_config, iteration_log=str(out_dir / "iterations.csv"))
        handler = log_config.setup_logger()
        problem = build_problem(problem_config, threads, ctx.obj["cache_dir"])
        if dry_run:
            click.echo(f"{config}: valid ({problem.mesh.element_count} elements)")
            sys.exit(EXIT_CONVERGED)

        result = run(problem, problem_config.optimizer)
        export_csv(result.binary_design, problem, out_dir / "design.csv")
        if vtk:
            export_vtk(result.binary_design, problem.mesh, out_dir / "design.vtk")
        if svg:
            table = load_design_csv(out_dir / "design.csv")
            render_svg(problem.mesh, table.labels, table.orientations, out_dir / "design.svg")
    except CONFIGURATION_ERRORS + NUMERICAL_ERRORS as e:
        logger.error(str(e))
        sys.exit(_exit_code(e))
    finally:
        if handler is not None:
            handler.close()
            logging.getLogger().removeHandler(handler)

    click.echo(result.summary())
    sys.exit(EXIT_CONVERGED if result.converged else EXIT_MAX_ITERATIONS)


@cli.command()
@config_argument
@seed_option
@out_option
@threads_option
@optgroup.group("Single sample", help="Homogenize one m value instead of the whole database")
@optgroup.option("--m", "m_value", type=float, default=None, help="Monomer proportion")
@optgroup.option("--pattern", type=ClickPattern(), default=None, help="Force the pattern class")
@optgroup.option(
    "--rotation_check",
    "--rotation-check",
    is_flag=True,
    default=False,
    help="Also compare the 90 degree rotated cell with the rotated tensor",
)
@click.pass_context
def homogenize(ctx, config, seed, out, threads, m_value, pattern, rotation_check):
    """Build the homogenized tensor database described by CONFIG."""
    ctx.obj["log_config"].setup_logger()
    try:
        section = load_config(Path(config)).homogenization
        if seed is not None:
            section.seed = seed
        cho, elasticity = section.cho_params(), section.elasticity_params()
        out_dir = output_directory(out or "database")

        if m_value is not None:
            sample = homogenize_for_m(m_value, cho, elasticity, pattern)
            name = normalize_name(f"phi_{sample.pattern.value}_m{m_value:+.3f}.bin")
            dump_phase_field(sample.cell, out_dir / name)
            click.echo(f"m={m_value:g} {sample.pattern.value}: {sample.tensor}")
            if rotation_check:
                observed = homogenize_cell(sample.cell, elasticity).tensor
                deviation = rotation_consistency_check(observed, sample.cell, elasticity)
                click.echo(f"rotation deviation {deviation:.3e}")
            sys.exit(EXIT_CONVERGED)

        database = build_database(cho=cho, elasticity=elasticity, threads=threads)
        database.save(out_dir / "database.toml")
        click.echo(f"Wrote {out_dir / 'database.toml'}")
    except CONFIGURATION_ERRORS + NUMERICAL_ERRORS as e:
        logger.error(str(e))
        sys.exit(_exit_code(e))
    sys.exit(EXIT_CONVERGED)


@cli.command()
@click.argument("path", type=click.Path(exists=True), nargs=-1)
@threads_option
@click.pass_context
def check(ctx, path: Iterable[os.PathLike], threads):
    """Validate config files without solving."""
    ctx.obj["log_config"].setup_logger()
    validate = partial(_check_one, cache_dir=ctx.obj["cache_dir"])
    with ThreadPool(max(threads, 1)) as pool:
        results = pool.map(validate, [Path(p) for p in path])
    sys.exit(EXIT_CONVERGED if all(results) else EXIT_CONFIGURATION)


def _check_one(config_file: Path, cache_dir: Optional[str] = None) -> bool:
    if not config_file.is_file():
        return True
    print(f"Evaluating {config_file}...")
    try:
        build_problem(load_config(config_file), cache_dir=cache_dir)
    except CONFIGURATION_ERRORS + NUMERICAL_ERRORS as e:
        print(f"{config_file}: {e}")
        return False
    return True


@cli.command()
@click.argument("csv_path", metavar="CSV", type=click.Path(exists=True, dir_okay=False))
@click.argument("svg_path", metavar="SVG", type=click.Path(dir_okay=False))
@click.option(
    "--mesh",
    "mesh_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Mesh file (default: mesh.txt next to the CSV)",
)
@click.pass_context
def render(ctx, csv_path, svg_path, mesh_path):
    """Render a design CSV to SVG."""
    ctx.obj["log_config"].setup_logger()
    try:
        mesh = read_mesh(mesh_path or Path(csv_path).with_name("mesh.txt"))
        table = load_design_csv(csv_path)
        render_svg(mesh, table.labels, table.orientations, svg_path)
    except CONFIGURATION_ERRORS as e:
        logger.error(str(e))
        sys.exit(EXIT_CONFIGURATION)
    sys.exit(EXIT_CONVERGED)


@cli.command("cho")
@click.argument("m_value", metavar="M", type=float)
@click.argument("path", type=click.Path(dir_okay=False))
@click.option("--pattern", type=ClickPattern(), default=None, help="Seed this pattern template")
@click.option("--gamma", type=float, default=20.0, show_default=True)
@click.option("--grid", type=int, default=128, show_default=True, help="Cells per direction")
@seed_option
@click.pass_context
def cho(ctx, m_value, path, pattern, gamma, grid, seed):
    """Simulate the copolymer pattern at M and dump the phase field to PATH."""
    ctx.obj["log_config"].setup_logger()
    params = CHOParams(gamma=gamma, nx=grid, ny=grid, seed=seed or 0)
    try:
        cell = solve_cho(m_value, params, pattern=pattern)
    except (errors.InvalidArgumentException, errors.CHOInstabilityException) as e:
        logger.error(str(e))
        sys.exit(_exit_code(e))
    dump_phase_field(cell, path)
    click.echo(f"t={cell.time:g} converged={cell.converged}")
    sys.exit(EXIT_CONVERGED)
