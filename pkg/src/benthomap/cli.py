"""Command-line surface for the mapping pipeline.

One structured config file drives everything; any field can be overridden on
the command line. The common flags cover the fields touched on every run, and
the repeatable ``--set dotted.path=value`` flag reaches the rest, with values
parsed the same way the config file is.

Exit codes: 0 on success, 2 for configuration problems, 3 when a pipeline
stage or verification check fails.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import replace

import click

from . import __version__, dataio, pipeline
from .config import ConfigError, PipelineConfig, apply_override, load_config
from .pipeline import StageError
from .verify import (
    VerificationReport,
    geometry_check,
    gradient_check,
    objective_check,
)

_SUITES = ("gradient", "geometry", "objective")


def _build_config(config_file, dataset, output, seed, threads, backend,
                  overrides) -> PipelineConfig:
    cfg = load_config(config_file) if config_file else PipelineConfig()
    flags = {"dataset": dataset, "output": output, "seed": seed,
             "threads": threads, "backend": backend}
    updates = {k: v for k, v in flags.items() if v is not None}
    if updates:
        cfg = replace(cfg, **updates)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def _guarded(body):
    """Run a command body under the declared exit-code contract."""
    try:
        return body()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)


def common_options(fn):
    fn = click.option("--set", "-s", "overrides", multiple=True,
                      metavar="KEY=VALUE",
                      help="Override any config field by dotted path, e.g. "
                           "--set fit.steps=3000.")(fn)
    fn = click.option("--backend",
                      type=click.Choice(["ground_truth", "self_supervised"]),
                      default=None, help="Estimation backend.")(fn)
    fn = click.option("--threads", type=int, default=None,
                      help="Worker threads; 0 uses all available cores.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Random seed.")(fn)
    fn = click.option("--output", type=click.Path(), default=None,
                      help="Output directory.")(fn)
    fn = click.option("--dataset", type=click.Path(), default=None,
                      help="Dataset directory.")(fn)
    fn = click.option("--config", "config_file",
                      type=click.Path(exists=True, dir_okay=False),
                      default=None, help="Config file (YAML).")(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Reconstruct, label, and map a seafloor survey from ego-motion video."""


@main.command()
@common_options
@click.option("--frames", type=int, default=None,
              help="Number of frames to synthesize.")
@click.option("--force", is_flag=True,
              help="Write into a non-empty dataset directory.")
def generate(config_file, dataset, output, seed, threads, backend, overrides,
             frames, force):
    """Synthesize a survey dataset with ground-truth sidecars."""
    def body():
        cfg = _build_config(config_file, dataset, output, seed, threads,
                            backend, overrides)
        if frames is not None:
            cfg = apply_override(cfg, f"generate.trajectory.frame_count={frames}")
        path = pipeline.generate_dataset(cfg, force=force)
        click.echo(f"wrote {cfg.generate.trajectory.frame_count} frames to {path}")
    _guarded(body)


@main.command()
@common_options
def fit(config_file, dataset, output, seed, threads, backend, overrides):
    """Fit the estimation backend; write depth maps and trajectory."""
    def body():
        cfg = _build_config(config_file, dataset, output, seed, threads,
                            backend, overrides)
        manifest = pipeline.fit_products(cfg)
        detail = next(s for s in manifest["stages"] if s["name"] == "fit")
        line = f"fitted {detail['backend']} backend on {detail['frames']} frames"
        if "final_loss" in detail:
            line += f" (final loss {detail['final_loss']:.6f})"
        click.echo(line + f"; products in {cfg.output}")
    _guarded(body)


@main.command("map")
@common_options
def map_cmd(config_file, dataset, output, seed, threads, backend, overrides):
    """Fuse the survey into a semantic point cloud (cloud.ply)."""
    def body():
        cfg = _build_config(config_file, dataset, output, seed, threads,
                            backend, overrides)
        manifest = pipeline.map_products(cfg)
        detail = next(s for s in manifest["stages"] if s["name"] == "extract")
        click.echo(f"extracted {detail['points']} points to "
                   f"{os.path.join(cfg.output, 'cloud.ply')}")
        if manifest["empty_output"]:
            click.echo("the cloud is empty; check the unwanted-class set",
                       err=True)
    _guarded(body)


@main.command()
@common_options
@click.option("--cloud", type=click.Path(), default=None,
              help="Point cloud to project (default: <output>/cloud.ply).")
def ortho(config_file, dataset, output, seed, threads, backend, overrides,
          cloud):
    """Project a point cloud into top-down map rasters."""
    def body():
        cfg = _build_config(config_file, dataset, output, seed, threads,
                            backend, overrides)
        manifest = pipeline.ortho_products(cfg, cloud_path=cloud)
        if manifest["empty_output"]:
            click.echo("empty point cloud; nothing to project", err=True)
            return
        detail = next(s for s in manifest["stages"] if s["name"] == "ortho")
        click.echo(f"rasterized {detail['cells']} cells; maps in {cfg.output}")
    _guarded(body)


@main.command("eval")
@common_options
@click.option("--cloud", type=click.Path(), default=None,
              help="Point cloud to score (default: <output>/cloud.ply).")
@click.option("--markers", type=click.Path(), default=None,
              help="Estimated marker positions "
                   "(default: <output>/markers_est.json).")
def eval_cmd(config_file, dataset, output, seed, threads, backend, overrides,
             cloud, markers):
    """Score a point cloud against the dataset's ground-truth sidecars."""
    def body():
        cfg = _build_config(config_file, dataset, output, seed, threads,
                            backend, overrides)
        manifest = pipeline.eval_products(cfg, cloud_path=cloud,
                                          markers_path=markers)
        if manifest["empty_output"]:
            click.echo("empty point cloud; nothing to evaluate", err=True)
            return
        metrics = dataio.read_json(os.path.join(cfg.output, "metrics.json"))
        click.echo(_metrics_summary(metrics) + f"; report in {cfg.output}")
    _guarded(body)


@main.command()
@common_options
def run(config_file, dataset, output, seed, threads, backend, overrides):
    """Run every stage: fit, fuse, extract, project, evaluate."""
    def body():
        cfg = _build_config(config_file, dataset, output, seed, threads,
                            backend, overrides)
        manifest = pipeline.run_pipeline(cfg)
        seconds = sum(s.get("seconds", 0.0) for s in manifest["stages"])
        if manifest["empty_output"]:
            click.echo(f"finished in {seconds:.1f}s; extracted cloud is empty "
                       f"(manifest in {cfg.output})")
            return
        detail = next(s for s in manifest["stages"] if s["name"] == "extract")
        metrics = dataio.read_json(os.path.join(cfg.output, "metrics.json"))
        click.echo(f"finished in {seconds:.1f}s; {detail['points']} points; "
                   + _metrics_summary(metrics) + f"; outputs in {cfg.output}")
    _guarded(body)


def _metrics_summary(metrics: dict) -> str:
    parts = []
    markers = metrics.get("markers", {})
    if "mare" in markers:
        parts.append(f"marker MARE {markers['mare']:.4f}")
    semantic = metrics.get("semantic", {})
    if "total_accuracy" in semantic:
        parts.append(f"point accuracy {semantic['total_accuracy']:.4f}")
    ortho_block = metrics.get("ortho", {})
    if "hole_fraction" in ortho_block:
        parts.append(f"hole fraction {ortho_block['hole_fraction']:.4f}")
    return ", ".join(parts) if parts else "no metrics computed"


@main.command("verify")
@click.option("--suite", "suites", multiple=True,
              type=click.Choice(_SUITES + ("none",)),
              help="Check suites to run (repeatable; default: all). "
                   "'none' selects the empty suite.")
@click.option("--instances", type=int, default=100, show_default=True,
              help="Random instances for the gradient check.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Random seed.")
@click.option("--output", type=click.Path(), default=None,
              help="Directory to write verify.json into.")
def verify_cmd(suites, instances, seed, output):
    """Run the built-in self checks; report pass/fail per invariant."""
    def body():
        if "none" in suites and len(set(suites)) > 1:
            raise ConfigError("--suite none excludes every other suite")
        selected = _SUITES if not suites else tuple(s for s in suites
                                                    if s != "none")
        checks = []
        if "gradient" in selected:
            checks.append(gradient_check(instances, seed=seed))
        if "geometry" in selected:
            checks.extend(geometry_check(seed=seed))
        if "objective" in selected:
            checks.extend(objective_check(seed=seed))
        report = VerificationReport(checks)
        payload = report.to_dict()
        click.echo(json.dumps(payload, sort_keys=True, indent=2))
        if output:
            os.makedirs(output, exist_ok=True)
            dataio.write_json(os.path.join(output, "verify.json"), payload)
        if not report.ok:
            sys.exit(3)
    _guarded(body)


if __name__ == "__main__":
    main()
