"""shift_memory_segmentation main"""

import os
import sys
from typing import Optional, Sequence

import click
from byoa.telemetry.log_manager.log_manager import LogManager
from dotenv import load_dotenv

from shift_memory_segmentation.engines import RingCorruption, verify_equivalence
from shift_memory_segmentation.exceptions import FormatError, SmnException, SpecValidationError
from shift_memory_segmentation.metering import formula_table
from shift_memory_segmentation.processor import StreamSegmentationProcessor, bench, load_frames
from shift_memory_segmentation.pyramid_mode import EngineKind, PyramidMode
from shift_memory_segmentation.pyramid_model import PyramidSpec, init_weights, validate_spec
from shift_memory_segmentation.stream_io import gen_synthetic, parse_objects
from shift_memory_segmentation.weights_io import load_weights_file, save_weights_file
from utils.file_utils import load_input_data, validate_data

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DIVERGED = 3

logger = LogManager.get_instance()

MODE = click.Choice(["line", "video"], case_sensitive=False)


def _int_list(value: Optional[str]) -> Optional[list]:
    if value is None:
        return None
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError as exc:
        raise SpecValidationError(
            f"Expected a comma-separated list of integers, got '{value}'"
        ) from exc


def _merge(config: Optional[str], **flags) -> dict:
    """JSON config values overridden by the flags that were given."""
    data = load_input_data(config) if config else {}
    data.update({key: value for key, value in flags.items() if value is not None})
    return data


@click.group()
def cli():
    """Streaming temporal-pyramid segmentation with shift-memory evaluation."""


@cli.command()
@click.option("--out", "out_path", required=True, help="SMNS stream to write")
@click.option("--config", "config_path", default=None, help="SceneConfig JSON")
@click.option("--mode", type=MODE, default=None)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--frames", type=int, default=None)
@click.option("--objects", default=None, help="width:velocity:intensity:class;...")
@click.option("--seed", type=int, default=None)
@click.option("--background", type=float, default=None)
@click.option("--classes", "num_classes", type=int, default=None)
@click.option("--channels", type=int, default=None)
@click.option("--dtype", type=click.Choice(["u8", "f32"]), default=None)
@click.option("--truth", "truth_path", default=None, help="SMNL ground-truth labels to write")
def gen(out_path, config_path, objects, truth_path, **flags):
    """Generate a synthetic moving-object stream."""
    scene = _merge(config_path, **flags)
    if objects is not None:
        scene["objects"] = [item.model_dump() for item in parse_objects(objects)]
    scene = validate_data(scene, "scene")
    with open(out_path, "wb") as sink:
        if truth_path:
            with open(truth_path, "wb") as truth_sink:
                gen_synthetic(scene, sink, truth_sink)
        else:
            gen_synthetic(scene, sink)
    return EXIT_OK


@cli.command("init-weights")
@click.option("--out", "out_path", required=True, help="SMNW weight file to write")
@click.option("--config", "config_path", default=None, help="PyramidConfig JSON")
@click.option("--mode", type=MODE, default=None)
@click.option("--levels", type=int, default=None)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--in-channels", "in_channels", type=int, default=None)
@click.option("--channels", default=None, help="encoder widths, e.g. 16,32,32")
@click.option("--decoder-channels", "decoder_channels", default=None)
@click.option("--classes", "num_classes", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def init_weights_command(out_path, config_path, channels, decoder_channels, seed, **flags):
    """Write seeded pseudo-random weights."""
    config = _merge(
        config_path,
        channels=_int_list(channels),
        decoder_channels=_int_list(decoder_channels),
        **flags,
    )
    spec = validate_spec(validate_data(config, "pyramid"))
    save_weights_file(init_weights(spec, seed), spec, out_path)
    return EXIT_OK


@cli.command()
@click.option(
    "--engine",
    "engine_kind",
    type=click.Choice([kind.value for kind in EngineKind]),
    default=EngineKind.SMN.value,
    show_default=True,
)
@click.option("--weights", "weights_path", required=True)
@click.option("--input", "input_path", required=True, help="SMNS stream, `-` for stdin")
@click.option("--out", "out_path", required=True, help="SMNL labels to write")
@click.option("--meter", "meter_path", default=None, help="per-frame meter CSV")
@click.option("--metrics", is_flag=True, help="report execution time and memory")
@click.option("--json", "as_json", is_flag=True)
def run(engine_kind, weights_path, input_path, out_path, meter_path, metrics, as_json):
    """Stream a file through one engine and write the labels."""
    processor = StreamSegmentationProcessor(
        weights_path,
        input_path,
        out_path,
        engine_kind=EngineKind(engine_kind),
        meter_path=meter_path,
        metrics=metrics,
    )
    result = processor.trigger()
    if as_json:
        click.echo(result.model_dump_json(indent=2))
    else:
        click.echo(
            f"{result.engine}: {result.frames} frames, {result.ready_frames} labelled, "
            f"sha256 {result.labels_sha256}"
        )
    return EXIT_OK


@cli.command()
@click.option("--weights", "weights_path", required=True)
@click.option("--input", "input_path", required=True, help="SMNS stream, `-` for stdin")
@click.option("--frames", "n_frames", type=int, required=True)
@click.option("--no-period-check", "skip_period", is_flag=True)
@click.option(
    "--corrupt-frame", type=int, default=None, help="inject a ring fault after this frame"
)
@click.option("--corrupt-level", type=int, default=1, show_default=True)
@click.option("--corrupt-ring", type=click.Choice(["f", "c"]), default="c", show_default=True)
@click.option("--json", "as_json", is_flag=True)
def verify(
    weights_path, input_path, n_frames, skip_period, corrupt_frame, corrupt_level, corrupt_ring,
    as_json,
):
    """Check the shift and shift-memory engines agree bit for bit."""
    spec, weights = load_weights_file(weights_path)
    frames = load_frames(input_path, spec, n_frames)
    corruption = None
    if corrupt_frame is not None:
        corruption = RingCorruption(frame=corrupt_frame, level=corrupt_level, ring=corrupt_ring)
    report = verify_equivalence(
        spec, weights, frames, n_frames, period_check=not skip_period, corruption=corruption
    )
    if as_json:
        click.echo(report.model_dump_json(indent=2))
    elif report.equivalent:
        click.echo(
            f"equivalent: {report.frames_compared} frames, {report.ready_frames} ready, "
            f"{report.period_checks} period checks"
        )
    else:
        found = report.first_divergence or report.period_divergence
        click.echo(
            f"diverged at frame {found.frame}, level {found.level}, cell {found.cell}: "
            f"{found.detail}"
        )
    return EXIT_OK if report.equivalent else EXIT_DIVERGED


@cli.command("bench")
@click.option("--weights", "weights_path", required=True)
@click.option("--input", "input_path", required=True, help="SMNS stream, `-` for stdin")
@click.option("--frames", "n_frames", type=int, required=True)
@click.option("--repeat", type=int, default=None, help="defaults to SMN_BENCH_REPEAT or 3")
@click.option("--json", "as_json", is_flag=True)
def bench_command(weights_path, input_path, n_frames, repeat, as_json):
    """Time the three engines on the same frames."""
    if repeat is None:
        repeat = int(os.getenv("SMN_BENCH_REPEAT", "3"))
    if repeat < 1:
        raise click.BadParameter("must be at least 1", param_hint="--repeat")
    spec, weights = load_weights_file(weights_path)
    report = bench(spec, weights, load_frames(input_path, spec, n_frames), repeat)
    if as_json:
        click.echo(report.model_dump_json(indent=2))
        return EXIT_OK
    click.echo(f"{report.spec}, {report.frames} frames, median of {report.repeat}")
    click.echo(
        f"{'engine':<8}{'cells/frame':>14}{'expected':>14}{'memory cells':>14}{'ns/frame':>14}"
    )
    for row in report.rows:
        click.echo(
            f"{row.engine:<8}{row.cells_per_frame:>14.1f}{row.expected_cells_per_frame:>14.1f}"
            f"{row.memory_node_cells:>14}{row.ns_per_frame:>14.0f}"
        )
    return EXIT_OK


@cli.command()
@click.option("--mode", type=MODE, required=True)
@click.option("--levels", type=int, required=True)
@click.option("--width", type=int, required=True)
@click.option("--height", type=int, default=0)
@click.option("--json", "as_json", is_flag=True)
def formulas(mode, levels, width, height, as_json):
    """Print implemented counts next to the published closed forms."""
    if levels < 0:
        raise SpecValidationError(f"levels must be non-negative, got {levels}")
    table = formula_table(PyramidSpec.geometry(PyramidMode.from_name(mode), levels, width, height))
    if as_json:
        click.echo(table.model_dump_json(indent=2))
        return EXIT_OK
    click.echo(table.spec)
    click.echo(f"{'quantity':<26}{'implemented':>14}{'formula':>16}{'published':>14}{'gap':>10}")
    for row in table.rows:
        click.echo(
            f"{row.quantity:<26}{row.implemented:>14g}{row.published_formula:>16}"
            f"{row.published_value:>14g}{row.relative_gap:>10.4f}"
        )
    click.echo(f"{'level':<8}{'lag':>6}{'slots':>8}{'published':>13}{'node cells':>12}")
    for level in table.levels:
        click.echo(
            f"{level.level:<8}{level.lag:>6}{level.implemented_slots:>8}"
            f"{level.published_slots:>13}{level.node_cells:>12}"
        )
    return EXIT_OK


def cli_run(args: Sequence[str]) -> int:
    """
    Run one subcommand and map its outcome to an exit code.

    Returns:
        int: 0 success, 1 usage error, 2 I/O or format error, 3 verification divergence.
    """
    try:
        code = cli.main(args=list(args), prog_name="smn", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_IO
    except SpecValidationError as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_USAGE
    except (FormatError, OSError, SmnException) as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_IO
    except ValueError as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_USAGE
    return code if isinstance(code, int) else EXIT_OK


def entrypoint():
    """Console script: load `.env`, apply SMN_LOG_LEVEL and exit with the command's code."""
    load_dotenv()
    level = os.getenv("SMN_LOG_LEVEL")
    if level:
        logger.setLevel(level.upper())
    sys.exit(cli_run(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
