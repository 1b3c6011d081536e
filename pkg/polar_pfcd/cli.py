"""
Command-line front end: single-image pipelines, evaluation, synthetic and
captured datasets, visualization and benchmarks.

Exit codes: 0 success, 2 invalid usage or configuration, 3 unreadable or
unwritable data, 4 benchmark finished with failed scenes.
"""
import logging
import os
import posixpath
from functools import wraps
from typing import Dict, Optional

import click
import numpy as np
import yaml
from dacite import Config, DaciteError, from_dict

from polar_pfcd.dataset import (
    DEFAULT_EXCLUDE_COUNT,
    DEFAULT_PERCENTILE,
    LOWER_MEDIAN,
    MANIFEST_NAME,
    NEAREST_MEDIAN,
    NOISE_CONDITIONS,
    DegenerateInputError,
    MissingManifestEntry,
    SceneSpec,
    add_stack_noise,
    build_dataset_from_bursts,
    convert_directory_to_manifest,
    load_manifest,
    noisy_role,
    store_manifest,
    synthesize_scene,
)
from polar_pfcd.flow_manager import (
    LOG_LEVEL_VARIABLE,
    configure_logging,
    run_benchmark,
    scene_refs_from_manifest,
    synthetic_scene_refs,
    write_benchmark_outputs,
)
from polar_pfcd.imagecore import (
    ANGLES,
    CPFA,
    MPFA,
    PFI_RAW,
    PNG16,
    ContractError,
    ImageFormatError,
    ImageIOError,
    MosaicImage,
    load_plane,
    load_stack,
    store_plane,
    store_rgb_png,
    store_stack,
)
from polar_pfcd.meta_types.dataset import GT_ROLE, Manifest, ManifestEntry
from polar_pfcd.meta_types.params import MONO
from polar_pfcd.meta_types.run import (
    BILINEAR_DEMOSAICKER,
    DEMOSAICK_ONLY,
    DEMOSAICK_THEN_DENOISE,
    DENOISE_THEN_DEMOSAICK,
    IGRI2_DEMOSAICKER,
    BenchConfig,
    RunConfig,
)
from polar_pfcd.metrics import (
    DEFAULT_BORDER,
    PUBLISHED_REFERENCE,
    evaluate,
    reports_to_frame,
    write_report_csv,
)
from polar_pfcd.pipeline import PipelineConfigError, PipelineResult, pattern_for, run_pipeline
from polar_pfcd.polarimetry import compute_aop, compute_dop, render_aop_dop, stokes_from_stack
from polar_pfcd.storage import (
    UnsupportedStorageProtocol,
    configure_filesystem,
    filesystem_for_path,
)

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARTIAL = 4

IO_ERRORS = (ImageIOError, ImageFormatError, MissingManifestEntry, OSError)
USAGE_ERRORS = (
    PipelineConfigError,
    ContractError,
    DegenerateInputError,
    UnsupportedStorageProtocol,
)

CONDITIONS = tuple(NOISE_CONDITIONS)
PATTERN_CHOICE = click.Choice([MPFA, CPFA])
DEMOSAICKER_CHOICE = click.Choice([IGRI2_DEMOSAICKER, BILINEAR_DEMOSAICKER])
CONDITION_CHOICE = click.Choice(CONDITIONS)

config_loader = Config(type_hooks={float: float}, strict=True)


def handle_errors(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except IO_ERRORS as e:
            click.echo(f"Error: {e}", err=True)
            raise click.exceptions.Exit(EXIT_IO)
        except USAGE_ERRORS as e:
            click.echo(f"Error: {e}", err=True)
            raise click.exceptions.Exit(EXIT_USAGE)

    return wrapper


def read_config_data(path: str) -> Dict:
    """YAML or JSON mapping from ``path``."""
    fs = filesystem_for_path(path)
    with fs.open(path, "r") as handle:
        try:
            data = yaml.safe_load(handle)
        except yaml.YAMLError as e:
            raise PipelineConfigError(f"{path} is not valid YAML/JSON: {e}") from e
    if not isinstance(data, dict):
        raise PipelineConfigError(f"{path} must hold a mapping")
    return data


def _merge(base: Dict, override: Dict) -> Dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_from_dict(data_class, data: Dict):
    try:
        return from_dict(data_class=data_class, data=data, config=config_loader)
    except (DaciteError, ValueError, TypeError) as e:
        raise PipelineConfigError(f"Invalid {data_class.__name__}: {e}") from e


def noise_flags(
    pattern: str,
    sigma: Optional[float],
    sigma_rgb: Dict[str, Optional[float]],
    condition: Optional[str],
) -> Optional[Dict]:
    if condition is not None:
        return {"sigma": dict(NOISE_CONDITIONS[condition].profile(pattern).sigma)}
    levels = {color: value for color, value in sigma_rgb.items() if value is not None}
    if sigma is not None:
        levels[MONO] = sigma
    return {"sigma": levels} if levels else None


def build_run_config(config_path: Optional[str], flags: Dict) -> RunConfig:
    """RunConfig from command-line flags, overridden by the config file if given."""
    data = {key: value for key, value in flags.items() if value is not None}
    if config_path:
        data = _merge(data, read_config_data(config_path))
    return config_from_dict(RunConfig, data)


def load_mosaic(path: str, config: RunConfig) -> MosaicImage:
    format = PFI_RAW if path.endswith(".pfi") else PNG16
    return MosaicImage(load_plane(path, format), pattern_for(config))


def _suffix(color: str) -> str:
    return "" if color == MONO else f"_{color}"


def write_pipeline_outputs(result: PipelineResult, out_dir: str):
    fs = filesystem_for_path(out_dir)
    store_stack(result.stack, posixpath.join(out_dir, "stack.pfi"), fs)
    for color, stokes in result.stokes.items():
        planes = {
            "s0": stokes.s0,
            "s1": stokes.s1,
            "s2": stokes.s2,
            "dop": result.dop[color],
            "aop": result.aop[color],
        }
        for name, plane in planes.items():
            path = posixpath.join(out_dir, f"{name}{_suffix(color)}.pfi")
            store_plane(plane, path, PFI_RAW, fs)
    logger.info(f"Wrote stack and polarization planes to {out_dir}")


def pipeline_options(func):
    options = [
        click.argument("input_path", metavar="INPUT"),
        click.argument("output_dir", metavar="OUTPUT_DIR"),
        click.option("--pattern", type=PATTERN_CHOICE, default=None, help="Sensor pattern"),
        click.option("--demosaicker", type=DEMOSAICKER_CHOICE, default=None),
        click.option("--threads", type=int, default=None, help="BM3D worker threads"),
        click.option("--name", default=None, help="Method name used in reports"),
        click.option(
            "--config",
            "config_path",
            default=None,
            help="YAML/JSON RunConfig; its values override the flags",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def run_single(input_path: str, output_dir: str, config_path: Optional[str], flags: Dict):
    config = build_run_config(
        config_path, {**flags, "input": input_path, "output": output_dir}
    )
    result = run_pipeline(config, load_mosaic(config.input, config))
    write_pipeline_outputs(result, config.output)
    click.echo(f"{config.method}: wrote {config.output}")


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
)
def cli(log_level: str):
    """Polarization image denoising, demosaicking and evaluation."""
    os.environ[LOG_LEVEL_VARIABLE] = log_level.upper()
    configure_logging(log_level)


@cli.command()
@pipeline_options
@handle_errors
def demosaick(input_path, output_dir, pattern, demosaicker, threads, name, config_path):
    """Demosaick a raw mosaic without denoising."""
    flags = {
        "pipeline": DEMOSAICK_ONLY,
        "pattern": pattern,
        "demosaicker": demosaicker,
        "threads": threads,
        "name": name,
    }
    run_single(input_path, output_dir, config_path, flags)


@cli.command("denoise-demosaick")
@pipeline_options
@click.option(
    "--order",
    type=click.Choice([DENOISE_THEN_DEMOSAICK, DEMOSAICK_THEN_DENOISE]),
    default=None,
    help="Denoise the mosaic first (default) or the demosaicked planes",
)
@click.option("--sigma", type=float, default=None, help="MPFA noise level (full scale 1.0)")
@click.option("--sigma-r", type=float, default=None, help="CPFA red noise level")
@click.option("--sigma-g", type=float, default=None, help="CPFA green noise level")
@click.option("--sigma-b", type=float, default=None, help="CPFA blue noise level")
@click.option(
    "--condition",
    type=CONDITION_CHOICE,
    default=None,
    help="Use the average noise levels of a capture condition",
)
@handle_errors
def denoise_demosaick(
    input_path,
    output_dir,
    pattern,
    demosaicker,
    threads,
    name,
    config_path,
    order,
    sigma,
    sigma_r,
    sigma_g,
    sigma_b,
    condition,
):
    """Denoise and demosaick a raw mosaic."""
    flags = {
        "pipeline": order or DENOISE_THEN_DEMOSAICK,
        "pattern": pattern,
        "demosaicker": demosaicker,
        "threads": threads,
        "name": name,
        "noise": noise_flags(
            pattern or MPFA, sigma, {"R": sigma_r, "G": sigma_g, "B": sigma_b}, condition
        ),
    }
    run_single(input_path, output_dir, config_path, flags)


@cli.command("eval")
@click.argument("gt_path", metavar="GT")
@click.argument("test_path", metavar="TEST")
@click.option("--scene", default=None, help="Scene name (default: the GT file name)")
@click.option("--method", default="unknown", show_default=True)
@click.option("--noise-level", default="unspecified", show_default=True)
@click.option("--border", type=int, default=DEFAULT_BORDER, show_default=True)
@click.option("--peak", type=float, default=1.0, show_default=True)
@click.option("--dop-threshold", type=float, default=None, help="Mask the AoP error by GT DoP")
@click.option("--output", "output_path", default=None, help="CSV report path")
@handle_errors
def evaluate_command(
    gt_path, test_path, scene, method, noise_level, border, peak, dop_threshold, output_path
):
    """Score a reconstructed stack (pfi-raw) against its ground truth."""
    scene = scene or posixpath.splitext(posixpath.basename(gt_path))[0]
    report = evaluate(
        load_stack(gt_path),
        load_stack(test_path),
        scene=scene,
        method=method,
        noise_level=noise_level,
        border=border,
        peak=peak,
        dop_threshold=dop_threshold,
    )
    for quantity, score in report.scores.items():
        click.echo(f"{quantity}\t{score:.4f}")
    click.echo(f"AoP_err\t{report.aop_error:.4f}")
    if output_path:
        write_report_csv(reports_to_frame([report]), output_path)


@cli.command()
@click.argument("output_dir")
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--height", type=int, default=128, show_default=True)
@click.option("--width", type=int, default=128, show_default=True)
@click.option("--color/--mono", default=True, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--condition", "conditions", type=CONDITION_CHOICE, multiple=True, default=("High",)
)
@handle_errors
def synth(output_dir, count, height, width, color, seed, conditions):
    """Write a synthetic dataset (ground truth and noisy stacks) with its manifest."""
    if count < 1:
        raise click.UsageError("--count must be >= 1")
    fs = filesystem_for_path(output_dir)
    entries = []
    for index in range(count):
        scene = f"synthetic-{index:03d}"
        spec = SceneSpec(seed=seed + index, height=height, width=width, color=color)
        gt = synthesize_scene(spec)
        store_stack(gt, posixpath.join(output_dir, scene, "gt.pfi"), fs)
        entries.append(
            ManifestEntry(
                file=f"{scene}/gt.pfi", scene=scene, role=GT_ROLE, format=PFI_RAW, kind="stack"
            )
        )
        for level, condition in enumerate(conditions):
            role = noisy_role(condition)
            profile = NOISE_CONDITIONS[condition].profile(CPFA if color else MPFA)
            noisy = add_stack_noise(gt, profile, seed + 1000 * (level + 1) + index)
            store_stack(noisy, posixpath.join(output_dir, scene, f"{role}.pfi"), fs)
            entries.append(
                ManifestEntry(
                    file=f"{scene}/{role}.pfi",
                    scene=scene,
                    role=role,
                    format=PFI_RAW,
                    kind="stack",
                )
            )
    manifest = Manifest(root=".", entries=entries, pattern=CPFA if color else MPFA)
    store_manifest(manifest, posixpath.join(output_dir, MANIFEST_NAME), fs)
    click.echo(f"Wrote {count} synthetic scenes to {output_dir}")


@cli.command("dataset-build")
@click.argument("source")
@click.argument("output_dir")
@click.option("--scene", default=None, help="Scene name (default: the burst directory name)")
@click.option("--condition", type=CONDITION_CHOICE, default="High", show_default=True)
@click.option("--exclude-count", type=int, default=DEFAULT_EXCLUDE_COUNT, show_default=True)
@click.option("--percentile", type=float, default=DEFAULT_PERCENTILE, show_default=True)
@click.option(
    "--median-mode",
    type=click.Choice([LOWER_MEDIAN, NEAREST_MEDIAN]),
    default=LOWER_MEDIAN,
    show_default=True,
)
@click.option(
    "--from-images",
    is_flag=True,
    help="SOURCE is a directory of per-scene images to describe with a manifest",
)
@handle_errors
def dataset_build(
    source, output_dir, scene, condition, exclude_count, percentile, median_mode, from_images
):
    """Build a dataset from capture bursts, or index a directory of images."""
    if from_images:
        manifest = convert_directory_to_manifest(source)
        path = posixpath.join(output_dir, MANIFEST_NAME)
        store_manifest(manifest, path)
        click.echo(f"Indexed {len(manifest.scenes())} scenes into {path}")
        return
    dataset = build_dataset_from_bursts(
        source,
        output_dir,
        scene=scene,
        condition=condition,
        exclude_count=exclude_count,
        percentile=percentile,
        median_mode=median_mode,
    )
    sigma = ", ".join(
        f"{key}={value * 255:.2f}/255" for key, value in dataset.profile.sigma.items()
    )
    click.echo(f"Digital gain {dataset.digital_gain:.3f}, noise {sigma}")


def _display_planes(stack, color: str) -> Dict[str, np.ndarray]:
    """Quantities scaled to [0, 1] for grayscale display."""
    stokes = stokes_from_stack(stack, color)
    planes = {f"I{angle}": stack.plane(angle, color) for angle in ANGLES}
    planes.update(
        {
            "S0": stokes.s0 / 2.0,
            "S1": (stokes.s1 + 1.0) / 2.0,
            "S2": (stokes.s2 + 1.0) / 2.0,
            "DoP": compute_dop(stokes),
            "AoP": compute_aop(stokes) / 180.0,
        }
    )
    return planes


@cli.command()
@click.argument("stack_path", metavar="STACK")
@click.argument("output_dir")
@handle_errors
def visualize(stack_path, output_dir):
    """Write the AoP-DoP rendering and grayscale quantity images of a stack."""
    stack = load_stack(stack_path)
    fs = filesystem_for_path(output_dir)
    for color in stack.colors:
        stokes = stokes_from_stack(stack, color)
        rgb = render_aop_dop(compute_aop(stokes), compute_dop(stokes), stokes.s0)
        store_rgb_png(rgb, posixpath.join(output_dir, f"aop_dop{_suffix(color)}.png"), fs)
        for name, plane in _display_planes(stack, color).items():
            path = posixpath.join(output_dir, f"{name}{_suffix(color)}.png")
            store_plane(plane, path, PNG16, fs)
    click.echo(f"Wrote visualizations to {output_dir}")


def default_bench_config(pattern: str, demosaicker: str) -> BenchConfig:
    """The three chains compared on one pattern."""
    return BenchConfig(
        configs=[
            RunConfig(pipeline=pipeline, pattern=pattern, demosaicker=demosaicker)
            for pipeline in (DEMOSAICK_ONLY, DEMOSAICK_THEN_DENOISE, DENOISE_THEN_DEMOSAICK)
        ]
    )


@cli.command()
@click.argument("output_dir")
@click.option("--manifest", "manifest_path", default=None, help="Dataset manifest")
@click.option("--synthetic", type=int, default=None, help="Benchmark N synthetic scenes")
@click.option("--height", type=int, default=128, show_default=True)
@click.option("--width", type=int, default=128, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--condition", "conditions", type=CONDITION_CHOICE, multiple=True, default=("High",)
)
@click.option("--pattern", type=PATTERN_CHOICE, default=MPFA, show_default=True)
@click.option("--demosaicker", type=DEMOSAICKER_CHOICE, default=IGRI2_DEMOSAICKER)
@click.option("--jobs", type=int, default=1, show_default=True, help="Scenes run concurrently")
@click.option(
    "--reference",
    type=PATTERN_CHOICE,
    default=None,
    help="Compare the summary with published scores for this pattern",
)
@click.option("--config", "config_path", default=None, help="YAML/JSON BenchConfig")
@handle_errors
def bench(
    output_dir,
    manifest_path,
    synthetic,
    height,
    width,
    seed,
    conditions,
    pattern,
    demosaicker,
    jobs,
    reference,
    config_path,
):
    """Run every configuration on every scene and write report, summary and errors."""
    if (manifest_path is None) == (synthetic is None):
        raise click.UsageError("Pass exactly one of --manifest and --synthetic")
    if jobs < 1:
        raise click.UsageError("--jobs must be >= 1")
    if config_path:
        bench_config = config_from_dict(BenchConfig, read_config_data(config_path))
    else:
        bench_config = default_bench_config(pattern, demosaicker)

    if synthetic is not None:
        if synthetic < 1:
            raise click.UsageError("--synthetic must be >= 1")
        refs = synthetic_scene_refs(synthetic, conditions, height, width, seed)
    else:
        fs = None
        if bench_config.storage:
            fs = configure_filesystem(bench_config.storage, dict(os.environ))
        refs = scene_refs_from_manifest(load_manifest(manifest_path, fs), conditions)
        if not refs:
            raise ContractError(f"Manifest {manifest_path} lists no scenes")

    result = run_benchmark(refs, bench_config, jobs)
    write_benchmark_outputs(
        result, output_dir, PUBLISHED_REFERENCE[reference] if reference else None
    )
    click.echo(result.summary.to_string(index=False))
    if not result.complete:
        for failure in result.failures:
            method = f" [{failure.method}]" if failure.method else ""
            click.echo(
                f"FAILED {failure.scene} ({failure.noise_level}){method}: {failure.error}",
                err=True,
            )
        raise click.exceptions.Exit(EXIT_PARTIAL)


def main():
    cli(prog_name="polar-pfcd")
