"""Command line front end: profile, expand, specialize, simulate and report.

Stages talk to each other only through files, so any stage can be replaced by an
outside tool that reads and writes the same formats.
"""

import random
import sys
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any, TypeVar

import click
from rich.markup import escape
from rich.table import Table

from kforge.__version__ import __version__
from kforge.errors import KforgeError
from kforge.image import load_image, save_image
from kforge.metrics import CVE_DB, FORMATS, attack_surface_report, emit_report, load_cve_db
from kforge.profiler import (
    Granularity,
    KernelProfile,
    ProfileSession,
    check_granularity,
    check_within,
    coarsen,
    load_profile,
    read_traces,
    save_profile,
)
from kforge.simulate import boot, read_scenario, run_scenario, save_events
from kforge.specialize import (
    load_specialized,
    reduction_stats,
    save_specialized,
    sharing_matrix,
    specialize,
)
from kforge.synth import synthesize_image
from kforge.syscalls import (
    closure,
    expand_profile,
    load_syscall_list,
    save_closure,
    unused_syscalls,
)
from kforge.utils.config import Config, load_config
from kforge.utils.log import console, setup_logging

F = TypeVar("F", bound=Callable[..., Any])

EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)
EXISTING_DIR = click.Path(exists=True, file_okay=False, path_type=Path)
OUTPUT_FILE = click.Path(dir_okay=False, path_type=Path)


@contextmanager
def _handle_errors() -> Iterator[None]:
    """Turns domain errors into exit code 1 and I/O errors into exit code 2."""
    try:
        yield
    except KforgeError as e:
        console.print(f"[bold red]error:[/bold red] {escape(str(e))}")
        sys.exit(1)
    except OSError as e:
        console.print(f"[bold red]error:[/bold red] {escape(str(e))}")
        sys.exit(2)


def config_option(func: F) -> F:
    """Adds the ``--config`` option shared by every subcommand."""
    return click.option(
        "--config",
        "config_file",
        type=EXISTING_FILE,
        help="TOML or JSON file with default settings",
    )(func)


def _config(config_file: Path | None, **overrides: Any) -> Config:
    return load_config(config_file).override(**overrides)


@click.group()
@click.version_option(__version__, prog_name="kforge")
def cli() -> None:
    """Per-application kernel specialization toolkit."""
    setup_logging()


@cli.command()
@click.argument("image_dir", type=EXISTING_DIR)
@click.argument("traces", nargs=-1, required=True, type=EXISTING_FILE)
@click.option(
    "--granularity",
    type=click.Choice(["block", "symbol", "page"]),
    default="block",
    show_default=True,
    help="Unit of the written profile",
)
@click.option(
    "--window",
    type=click.IntRange(min=1),
    help="Runs without growth that make a profile stable",
)
@click.option(
    "--max-runs", type=click.IntRange(min=1), help="Maximum number of runs to consume"
)
@click.option("--allow-tags", help="Comma separated process tags to keep")
@click.option("--app", "app_name", help="Application name (default: output file stem)")
@click.option("-o", "--output", type=OUTPUT_FILE, required=True, help="Profile JSON to write")
@config_option
def profile(  # noqa: PLR0917
    image_dir: Path,
    traces: tuple[Path, ...],
    granularity: str,
    window: int | None,
    max_runs: int | None,
    allow_tags: str | None,
    app_name: str | None,
    output: Path,
    config_file: Path | None,
) -> None:
    """Builds a kernel profile from execution traces."""
    with _handle_errors():
        config = _config(config_file, stability_window=window, max_runs=max_runs)
        image = load_image(image_dir)
        tags = None
        if allow_tags:
            tags = frozenset(t.strip() for t in allow_tags.split(",") if t.strip())
        session = ProfileSession(
            image=image,
            app_name=app_name or output.stem,
            allow_tags=tags,
            window=config.stability_window,
            max_runs=config.max_runs,
            warn_fraction=config.unresolved_warn_fraction,
        )
        for run in read_traces(list(traces)):
            if not session.feed(run):
                break
        result = session.result()
        if granularity != Granularity.BLOCK.value:
            result = coarsen(result, Granularity(granularity), image)
        save_profile(result, output)
        _print_diagnostics(session)
        console.print(
            f"{result.app_name}: {len(result.ranges)} {granularity} ranges after "
            f"{result.runs_consumed} runs ({'stable' if result.stable else 'not stable'})"
        )


def _print_diagnostics(session: ProfileSession) -> None:
    table = Table(title="Profiling Runs")
    table.add_column("Run", style="cyan")
    table.add_column("Events", justify="right")
    table.add_column("Unresolved", justify="right", style="yellow")
    table.add_column("New ranges", justify="right", style="green")
    table.add_column("Markers", style="magenta")
    for item in session.diagnostics:
        table.add_row(
            item.run_id,
            str(item.events),
            str(item.unresolved),
            str(item.new_ranges),
            "missing" if item.segment_warning else "ok",
        )
    console.print(table)


@cli.command()
@click.argument("image_dir", type=EXISTING_DIR)
@click.argument("profile_file", type=EXISTING_FILE)
@click.argument("syscalls_file", type=EXISTING_FILE)
@click.option("-o", "--output", type=OUTPUT_FILE, required=True, help="Expanded profile JSON")
@click.option("--closure-out", type=OUTPUT_FILE, help="Also write the reachable symbols")
@config_option
def expand(
    image_dir: Path,
    profile_file: Path,
    syscalls_file: Path,
    output: Path,
    closure_out: Path | None,
    config_file: Path | None,
) -> None:
    """Adds everything the application's syscalls can reach to a profile.

    Block profiles are coarsened to symbols first.
    """
    with _handle_errors():
        _config(config_file)
        image = load_image(image_dir)
        current = load_profile(profile_file)
        check_within(current, image)
        check_granularity(current, image)
        if current.granularity is Granularity.BLOCK:
            current = coarsen(current, Granularity.SYMBOL, image)
        syscalls = load_syscall_list(syscalls_file, current.app_name)
        reach = closure(image, syscalls)
        save_profile(expand_profile(current, reach, image), output)
        if closure_out:
            save_closure(reach, closure_out)
        unused = unused_syscalls(image, syscalls)
        console.print(
            f"{len(reach.reached)} symbols reachable; {len(unused)} syscalls unused: "
            f"{', '.join(unused) or '-'}"
        )


@cli.command("specialize")
@click.argument("image_dir", type=EXISTING_DIR)
@click.argument("profile_file", type=EXISTING_FILE)
@click.option("-o", "--output", type=OUTPUT_FILE, required=True, help="Specialized .bin file")
@config_option
def specialize_command(
    image_dir: Path, profile_file: Path, output: Path, config_file: Path | None
) -> None:
    """Writes the masked kernel text for one profile, plus a JSON sidecar."""
    with _handle_errors():
        _config(config_file)
        image = load_image(image_dir)
        profile = load_profile(profile_file)
        check_granularity(profile, image)
        spec = specialize(image, profile)
        sidecar = save_specialized(spec, output)
        stats = reduction_stats(spec)
        console.print(
            f"{spec.app_name}: {stats.text_reduced_pct:.2f}% of the text masked, "
            f"{stats.symbols_fully_removed_pct:.2f}% of the symbols removed "
            f"(sidecar {sidecar})"
        )


def _parse_profiles(values: tuple[str, ...]) -> dict[str, KernelProfile]:
    profiles = {}
    for value in values:
        app, sep, file_name = value.partition("=")
        if not sep or not app or not file_name:
            raise click.BadParameter(f"expected APP=PROFILE, got {value!r}", param_hint="--profile")
        file_path = Path(file_name)
        if not file_path.is_file():
            raise click.BadParameter(f"{file_path} does not exist", param_hint="--profile")
        profiles[app] = load_profile(file_path)
    return profiles


@cli.command()
@click.argument("image_dir", type=EXISTING_DIR)
@click.argument("scenario", type=EXISTING_FILE)
@click.option(
    "--profile",
    "--profiles",
    "profile_args",
    multiple=True,
    metavar="APP=PROFILE",
    help="Profile used when APP is launched (repeatable)",
)
@click.option("-o", "--output", type=OUTPUT_FILE, required=True, help="Event log (JSON lines)")
@click.option("--fault-policy", type=click.Choice(["kill", "report"]), help="Reaction to traps")
@click.option("--ram-mb", type=click.IntRange(min=1), help="Modeled RAM")
@click.option(
    "--per-kernel-mb", type=click.IntRange(min=1), help="Size of one kernel text copy"
)
@click.option(
    "--baseline-mb", type=click.IntRange(min=0), help="Memory reserved for everything else"
)
@config_option
def simulate(  # noqa: PLR0917
    image_dir: Path,
    scenario: Path,
    profile_args: tuple[str, ...],
    output: Path,
    fault_policy: str | None,
    ram_mb: int | None,
    per_kernel_mb: int | None,
    baseline_mb: int | None,
    config_file: Path | None,
) -> None:
    """Plays a scenario on a system running one specialized kernel per process."""
    with _handle_errors():
        config = _config(
            config_file,
            fault_policy=fault_policy,
            ram_mb=ram_mb,
            per_kernel_mb=per_kernel_mb,
            baseline_reserved_mb=baseline_mb,
        )
        profiles = _parse_profiles(profile_args)
        image = load_image(image_dir)
        for profile in profiles.values():
            check_granularity(profile, image)
        state = boot(image, config)
        events = run_scenario(state, read_scenario(scenario), profiles)
        save_events(events, output)
        errors = sum(event["kind"] == "Error" for event in events)
        console.print(f"{len(events)} events written to {output} ({errors} errors)")


@cli.command()
@click.argument("image_dir", type=EXISTING_DIR)
@click.argument("bins", nargs=-1, required=True, type=EXISTING_FILE)
@click.option("--cve-db", type=EXISTING_FILE, help=f"Vulnerability database (e.g. {CVE_DB.name})")
@click.option(
    "--format",
    "fmt",
    type=click.Choice(FORMATS),
    default="text",
    show_default=True,
    help="Report format",
)
@click.option("--max-len", type=click.IntRange(min=1), help="Longest gadget in bytes")
@click.option("--sharing", is_flag=True, help="Also print pairwise kernel sharing")
@click.option("-o", "--output", type=OUTPUT_FILE, help="Write the report here instead of stdout")
@config_option
def report(  # noqa: PLR0917
    image_dir: Path,
    bins: tuple[Path, ...],
    cve_db: Path | None,
    fmt: str,
    max_len: int | None,
    sharing: bool,  # noqa: FBT001
    output: Path | None,
    config_file: Path | None,
) -> None:
    """Reports attack surface reduction for specialized kernels."""
    with _handle_errors():
        config = _config(config_file, gadget_max_len=max_len)
        image = load_image(image_dir)
        specs = [load_specialized(image, path) for path in bins]
        cves = load_cve_db(cve_db) if cve_db else []
        document = emit_report(
            attack_surface_report(image, specs, cves, config.gadget_max_len), fmt
        )
        if output:
            output.parent.mkdir(parents=True, exist_ok=True)
            output.write_text(document, encoding="utf-8")
        else:
            click.echo(document, nl=False)
        if sharing:
            for left, right, value in sharing_matrix([spec.profile for spec in specs]):
                console.print(f"{left} / {right}: {value:.2f}")


@cli.command()
@click.argument("out_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed")
@click.option(
    "--symbols",
    type=click.IntRange(min=1),
    default=40,
    show_default=True,
    help="Number of functions",
)
@click.option(
    "--page-size",
    type=click.IntRange(min=1),
    default=256,
    show_default=True,
    help="Page size",
)
@config_option
def synth(
    out_dir: Path, seed: int, symbols: int, page_size: int, config_file: Path | None
) -> None:
    """Writes a random but valid kernel image bundle."""
    with _handle_errors():
        _config(config_file)
        try:
            rng = random.Random(seed)  # noqa: S311
            image = synthesize_image(rng, n_symbols=symbols, page_size=page_size)
        except ValueError as e:
            raise click.BadParameter(str(e)) from e
        save_image(image, out_dir)
        console.print(f"Wrote {len(image.symbols)} symbols to {out_dir}")


if __name__ == "__main__":
    cli()
