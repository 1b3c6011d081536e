"""
Benchmark orchestration with Prefect.

Every scene becomes a mapped task that loads (or synthesizes) its ground
truth and noisy mosaics, followed by a mapped task that runs every
configured method on it and scores the result. Failures are recorded per
scene and never stop the run.
"""
import json
import logging
import os
import posixpath
from dataclasses import asdict, dataclass, field, replace
from functools import wraps
from typing import Dict, List, Optional, Sequence, Union

import fsspec
import pandas as pd
from prefect import Flow, task, unmapped
from prefect.executors import LocalDaskExecutor

from polar_pfcd.dataset import (
    NOISE_CONDITIONS,
    SceneSpec,
    add_mosaic_noise,
    load_ground_truth,
    load_noisy_mosaic,
    synthesize_scene,
)
from polar_pfcd.imagecore import (
    MPFA,
    ContractError,
    MosaicImage,
    PatternDescriptor,
    PolarizationStack,
)
from polar_pfcd.meta_types.dataset import Manifest
from polar_pfcd.meta_types.params import NoiseProfile
from polar_pfcd.meta_types.run import BenchConfig, RunConfig
from polar_pfcd.metrics import (
    EvalReport,
    compare_to_reference,
    evaluate,
    reports_to_frame,
    summarize,
    write_report_csv,
)
from polar_pfcd.mosaic import mosaic_from_stack
from polar_pfcd.pipeline import PipelineConfigError, pattern_for, run_pipeline
from polar_pfcd.storage import configure_filesystem, filesystem_for_path

logger = logging.getLogger(__name__)

LOG_LEVEL_VARIABLE = "POLAR_PFCD_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class BenchmarkFailed(Exception):
    pass


def configure_logging(level: str = "INFO"):
    logging.basicConfig(format=LOG_FORMAT)
    logging.getLogger("polar_pfcd").setLevel(level=level.upper())


def set_log_level(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        configure_logging(os.environ.get(LOG_LEVEL_VARIABLE, "INFO"))
        result = func(*args, **kwargs)
        return result

    return wrapper


@dataclass
class SceneRef:
    """A scene under one noise condition, from a manifest or synthesized."""

    scene: str
    noise_level: str
    manifest: Optional[Manifest] = None
    synthetic: Optional[SceneSpec] = None
    seed: int = 0


@dataclass
class SceneFailure:
    scene: str
    noise_level: str
    error: str
    method: Optional[str] = None


@dataclass
class SceneData:
    ref: SceneRef
    gt: Dict[PatternDescriptor, PolarizationStack] = field(default_factory=dict)
    noisy: Dict[PatternDescriptor, MosaicImage] = field(default_factory=dict)


@dataclass
class BenchmarkResult:
    report: pd.DataFrame
    summary: pd.DataFrame
    failures: List[SceneFailure]

    @property
    def complete(self) -> bool:
        return not self.failures


def scene_refs_from_manifest(manifest: Manifest, conditions: Sequence[str]) -> List[SceneRef]:
    return [
        SceneRef(scene=scene, noise_level=condition, manifest=manifest)
        for condition in conditions
        for scene in manifest.scenes()
    ]


def synthetic_scene_refs(
    count: int, conditions: Sequence[str], height: int = 128, width: int = 128, seed: int = 0
) -> List[SceneRef]:
    """Color scenes; MPFA configurations are scored on their green channel."""
    return [
        SceneRef(
            scene=f"synthetic-{index:03d}",
            noise_level=condition,
            synthetic=SceneSpec(seed=seed + index, height=height, width=width, color=True),
            seed=seed + 1000 * (level + 1) + index,
        )
        for level, condition in enumerate(conditions)
        for index in range(count)
    ]


def profile_for(config: RunConfig, noise_level: str, pattern_kind: str) -> NoiseProfile:
    """The configured noise profile, or the condition's average levels when none is set."""
    if config.noise.sigma:
        return config.noise
    if noise_level in NOISE_CONDITIONS:
        return NOISE_CONDITIONS[noise_level].profile(pattern_kind)
    raise PipelineConfigError(f"No noise profile for {config.method} at {noise_level!r}")


def load_scene_data(
    ref: SceneRef,
    patterns: Sequence[PatternDescriptor],
    fs: Optional[fsspec.AbstractFileSystem] = None,
) -> SceneData:
    data = SceneData(ref)
    clean = synthesize_scene(ref.synthetic) if ref.synthetic is not None else None
    for pattern in patterns:
        if clean is not None:
            stack = clean.select_color("G") if pattern.kind == MPFA else clean
            if ref.noise_level not in NOISE_CONDITIONS:
                raise ContractError(f"Unknown noise condition {ref.noise_level!r}")
            profile = NOISE_CONDITIONS[ref.noise_level].profile(pattern.kind)
            data.gt[pattern] = stack
            data.noisy[pattern] = add_mosaic_noise(
                mosaic_from_stack(stack, pattern), profile, ref.seed
            )
        else:
            data.gt[pattern] = load_ground_truth(ref.manifest, ref.scene, pattern.kind, fs)
            data.noisy[pattern] = load_noisy_mosaic(
                ref.manifest, ref.scene, ref.noise_level, pattern, fs
            )
    return data


def evaluate_scene_data(
    data: SceneData, bench: BenchConfig
) -> List[Union[EvalReport, SceneFailure]]:
    ref = data.ref
    outcomes = []
    for config in bench.configs:
        pattern = pattern_for(config)
        try:
            config = replace(config, noise=profile_for(config, ref.noise_level, pattern.kind))
            result = run_pipeline(config, data.noisy[pattern])
            report = evaluate(
                data.gt[pattern],
                result.stack,
                scene=ref.scene,
                method=config.method,
                noise_level=ref.noise_level,
                border=bench.border,
                peak=bench.peak,
                dop_threshold=bench.dop_threshold,
            )
            logger.info(
                f"{ref.scene} ({ref.noise_level}) {config.method}: "
                f"S0 {report.scores['S0']:.2f} dB"
            )
            outcomes.append(report)
        except Exception as e:
            logger.error(f"{ref.scene} ({ref.noise_level}) {config.method} failed: {e}")
            outcomes.append(
                SceneFailure(ref.scene, ref.noise_level, f"{type(e).__name__}: {e}", config.method)
            )
    return outcomes


@task
def load_scene(
    ref: SceneRef, patterns: List[PatternDescriptor], bench: BenchConfig
) -> Union[SceneData, SceneFailure]:
    fs = configure_filesystem(bench.storage, dict(os.environ)) if bench.storage else None
    try:
        return load_scene_data(ref, patterns, fs)
    except Exception as e:
        logger.error(f"Cannot load scene {ref.scene} ({ref.noise_level}): {e}")
        return SceneFailure(ref.scene, ref.noise_level, f"{type(e).__name__}: {e}")


@task
def evaluate_scene(
    data: Union[SceneData, SceneFailure], bench: BenchConfig
) -> List[Union[EvalReport, SceneFailure]]:
    if isinstance(data, SceneFailure):
        return [data]
    return evaluate_scene_data(data, bench)


def benchmark_patterns(bench: BenchConfig) -> List[PatternDescriptor]:
    patterns = []
    for config in bench.configs:
        pattern = pattern_for(config)
        if pattern not in patterns:
            patterns.append(pattern)
    return patterns


def build_benchmark_flow(refs: Sequence[SceneRef], bench: BenchConfig):
    """The benchmark flow and the task whose mapped results hold the outcomes."""
    patterns = benchmark_patterns(bench)
    with Flow("polar-pfcd-benchmark") as flow:
        scenes = load_scene.map(list(refs), unmapped(patterns), unmapped(bench))
        outcomes = evaluate_scene.map(scenes, unmapped(bench))

    for flow_task in flow.tasks:
        flow_task.run = set_log_level(flow_task.run)
    return flow, outcomes


def run_benchmark(refs: Sequence[SceneRef], bench: BenchConfig, jobs: int = 1) -> BenchmarkResult:
    """
    Run every configuration on every scene and score the results.

    Parameters
    ----------
    refs : Sequence[SceneRef]
        Scenes to evaluate, see ``scene_refs_from_manifest`` and
        ``synthetic_scene_refs``
    bench : BenchConfig
        Configurations to compare and evaluation options
    jobs : int
        Number of scenes processed concurrently
    """
    if not refs:
        raise ContractError("No scenes to benchmark")
    if not bench.configs:
        raise ContractError("No configurations to benchmark")
    flow, outcomes_task = build_benchmark_flow(refs, bench)
    state = flow.run(executor=LocalDaskExecutor(scheduler="threads", num_workers=jobs))
    if not state.is_successful():
        raise BenchmarkFailed(f"Benchmark flow ended in state {state}")

    outcomes = [item for scene in state.result[outcomes_task].result for item in scene]
    reports = [item for item in outcomes if isinstance(item, EvalReport)]
    failures = sorted(
        (item for item in outcomes if isinstance(item, SceneFailure)),
        key=lambda failure: (failure.scene, failure.noise_level, failure.method or ""),
    )
    frame = reports_to_frame(reports)
    logger.info(f"Scored {len(frame)} runs, {len(failures)} failures")
    return BenchmarkResult(report=frame, summary=summarize(frame), failures=failures)


def write_benchmark_outputs(
    result: BenchmarkResult,
    out_dir: str,
    reference: Optional[Dict[str, float]] = None,
    fs: Optional[fsspec.AbstractFileSystem] = None,
):
    """Write report.csv, summary.csv, reference.csv (with ``reference``) and errors.json."""
    fs = fs or filesystem_for_path(out_dir)
    write_report_csv(result.report, posixpath.join(out_dir, "report.csv"), fs)
    write_report_csv(result.summary, posixpath.join(out_dir, "summary.csv"), fs)
    if reference is not None:
        comparison = compare_to_reference(result.summary, reference)
        write_report_csv(comparison, posixpath.join(out_dir, "reference.csv"), fs)
    if result.failures:
        with fs.open(posixpath.join(out_dir, "errors.json"), "w") as handle:
            json.dump([asdict(failure) for failure in result.failures], handle, indent=2)
