"""Command-line entry point.

Subcommands: gen-data, run, eval, inspect, validate-config. Configuration
is TOML; a frozen JSON copy (with overrides applied) is written into every
run directory so eval/inspect need no original config file. Progress is
emitted to stderr as line-delimited JSON.

Exit codes: 0 success, 2 configuration/constraint error, 3 missing
artifact, 4 training failure.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import click
import numpy as np
import torch

from . import datasets as ds
from . import pipeline as pl
from .clustering import validate_capacity
from .errors import (ConfigurationError, DataFormatError, EvaluationError, MCLError,
                     MissingArtifactError, SamplingError, TrainingError)
from .evaluation import topk_neighbors

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_TRAINING = 4


def _progress(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)


def _load_toml(path) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


def _apply_overrides(config: dict, overrides: tuple[str, ...]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"override references unknown section {key!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigurationError(f"override references unknown config key {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[leaf] = value
    return config


def _resolve_data_path(path_str: str) -> Path:
    path = Path(path_str)
    if path.exists():
        return path
    root = os.environ.get("MCL_DATA_DIR")
    if root and (Path(root) / path_str).exists():
        return Path(root) / path_str
    raise MissingArtifactError(f"dataset path {path_str!r} not found "
                               f"(also tried MCL_DATA_DIR)")


def build_dataset(data_cfg: dict) -> ds.ImageDataset:
    """Materialize the dataset described by a [data] config section."""
    if "path" in data_cfg:
        return ds.load_dataset(_resolve_data_path(data_cfg["path"]))
    preset = data_cfg.get("preset")
    seed = int(data_cfg.get("seed", 0))
    if preset == "trifeature":
        return ds.generate_trifeature(
            shapes=int(data_cfg.get("shapes", 10)),
            textures=int(data_cfg.get("textures", 10)),
            colors=int(data_cfg.get("colors", 10)),
            per_combo=int(data_cfg.get("per_combo", 8)),
            size=int(data_cfg.get("size", 64)), seed=seed)
    if preset == "patterns":
        return ds.generate_patterns(
            classes=int(data_cfg.get("classes", 10)),
            count=int(data_cfg.get("count", 20000)),
            size=int(data_cfg.get("size", 32)), seed=seed)
    if preset == "glyphs":
        return ds.generate_glyphs(
            classes=int(data_cfg.get("classes", 10)),
            count=int(data_cfg.get("count", 20000)),
            size=int(data_cfg.get("size", 32)), seed=seed)
    if preset == "composite":
        count = int(data_cfg.get("count", 20000))
        size = int(data_cfg.get("size", 32))
        source_a = ds.generate_patterns(
            classes=int(data_cfg.get("classes_a", 10)), count=count, size=size,
            seed=seed + 1)
        source_b = ds.generate_glyphs(
            classes=int(data_cfg.get("classes_b", 10)), count=count, size=size,
            seed=seed + 2)
        return ds.generate_composite(source_a, source_b, count=count, seed=seed)
    if preset == "mnist_idx":
        return ds.load_idx(_resolve_data_path(data_cfg["images"]),
                           _resolve_data_path(data_cfg["labels"])
                           if "labels" in data_cfg else None)
    if preset == "cifar_binary":
        return ds.load_cifar_binary(_resolve_data_path(data_cfg["file"]))
    raise ConfigurationError(f"unknown data preset {preset!r}")


def experiment_config(config: dict) -> pl.ExperimentConfig:
    exp = dict(config.get("experiment", {}))
    exp["encoder"] = config.get("encoder", {})
    exp["augment"] = config.get("augment", {})
    return pl.ExperimentConfig.from_dict(exp)


def _fail(exc: Exception) -> None:
    print(f"error: {exc}", file=sys.stderr)
    if isinstance(exc, TrainingError):
        sys.exit(EXIT_TRAINING)
    if isinstance(exc, MissingArtifactError) or isinstance(exc, FileNotFoundError):
        sys.exit(EXIT_MISSING)
    if isinstance(exc, (ConfigurationError, DataFormatError, SamplingError,
                        EvaluationError, MCLError, tomllib.TOMLDecodeError)):
        sys.exit(EXIT_CONFIG)
    raise exc


@click.group()
@click.option("--threads", type=int, default=1, show_default=True,
              help="torch intra-op threads (1 gives bitwise-reproducible runs)")
@click.option("-v", "--verbose", count=True)
def main(threads, verbose):
    torch.set_num_threads(threads)
    main.verbose = verbose


@main.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override [data].seed")
@click.option("--set", "overrides", multiple=True, help="key=value config override")
def cmd_gen_data(config_path, out_dir, seed, overrides):
    """Generate (or ingest) a dataset and persist it with a manifest."""
    try:
        config = _apply_overrides(_load_toml(config_path), overrides)
        data_cfg = dict(config.get("data", {}))
        if seed is not None:
            data_cfg["seed"] = seed
        dataset = build_dataset(data_cfg)
        ds.save_dataset(dataset, out_dir)
        for f in dataset.factors:
            click.echo(f"factor {f.name}: {f.cardinality} values")
        click.echo(f"wrote {len(dataset)} images "
                   f"({'x'.join(map(str, dataset.images.shape[1:]))}) to {out_dir}")
    except Exception as exc:   # noqa: BLE001 - single mapping point to exit codes
        _fail(exc)


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override [experiment].seed")
@click.option("--set", "overrides", multiple=True, help="key=value config override")
@click.option("--drop-last/--no-drop-last", default=None,
              help="override the partial-batch policy")
def cmd_run(config_path, out_dir, seed, overrides, drop_last):
    """Run the full multistage experiment described by the config."""
    try:
        config = _apply_overrides(_load_toml(config_path), overrides)
        if seed is not None:
            config.setdefault("experiment", {})["seed"] = seed
        if drop_last is not None:
            config.setdefault("experiment", {})["drop_last"] = drop_last
        cfg = experiment_config(config)
        dataset = build_dataset(dict(config.get("data", {})))
        report = pl.run_experiment(cfg, dataset, out_dir, progress=_progress)
        # keep the data section in the frozen config so eval can rebuild the dataset
        frozen_path = Path(out_dir) / "config.json"
        frozen = json.loads(frozen_path.read_text())
        frozen["data"] = config.get("data", {})
        frozen_path.write_text(json.dumps(frozen, indent=2, sort_keys=True))
        for probe in report["integrated_probes"]:
            click.echo(f"integrated {probe['factor']}: {probe['accuracy']:.4f}")
        click.echo(f"report written to {Path(out_dir) / 'report.json'}")
    except Exception as exc:   # noqa: BLE001
        _fail(exc)


@main.command("eval")
@click.argument("exp_dir", type=click.Path(exists=True))
def cmd_eval(exp_dir):
    """Recompute report.json from the artifacts persisted in a run directory."""
    try:
        exp_dir = Path(exp_dir)
        frozen = json.loads((exp_dir / "config.json").read_text())
        cfg = pl.ExperimentConfig.from_dict(
            {k: v for k, v in frozen.items() if k not in ("data", "dataset", "capacity")})
        dataset = build_dataset(frozen["data"])
        artifacts = []
        pseudo = np.zeros((len(dataset), 0), dtype=np.int64)
        stage_pseudo = [pseudo]
        for j in range(cfg.stages):
            h, z, labels = pl.load_stage_outputs(exp_dir, j)
            from .clustering import ClusterAssignment
            assignment = ClusterAssignment(labels=labels, centroids=np.zeros((cfg.clusters, z.shape[1])),
                                           inertia=0.0, stage=j)
            art = pl.StageArtifacts(stage=j, encoder=None, representations=h,
                                    embeddings=z, assignment=assignment,
                                    metrics={"epoch_losses": []})
            artifacts.append(art)
            pseudo = np.concatenate([pseudo, labels[:, None]], axis=1)
            stage_pseudo.append(pseudo)
        integrated = pl.read_embeddings(exp_dir / "integrated.bin")
        report = pl.evaluate_experiment(cfg, dataset, artifacts, integrated,
                                        stage_pseudo, progress=_progress)
        (exp_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        click.echo(f"report written to {exp_dir / 'report.json'}")
    except Exception as exc:   # noqa: BLE001
        _fail(exc)


@main.command("inspect")
@click.argument("exp_dir", type=click.Path(exists=True))
@click.option("--anchor", type=int, required=True)
@click.option("-k", type=int, default=3, show_default=True)
def cmd_inspect(exp_dir, anchor, k):
    """List the top-k most similar samples to an anchor, per stage."""
    try:
        exp_dir = Path(exp_dir)
        frozen = json.loads((exp_dir / "config.json").read_text())
        for j in range(frozen["stages"]):
            _, z, _ = pl.load_stage_outputs(exp_dir, j)
            neighbors = topk_neighbors(z, anchor, k)
            click.echo(f"stage {j}: {' '.join(map(str, neighbors))}")
    except Exception as exc:   # noqa: BLE001
        _fail(exc)


@main.command("validate-config")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--set", "overrides", multiple=True)
@click.option("--samples", "m", type=int, default=None,
              help="dataset size to check against (skips materializing the data)")
def cmd_validate_config(config_path, overrides, m):
    """Parse the config and check the cluster-capacity constraint."""
    try:
        config = _apply_overrides(_load_toml(config_path), overrides)
        cfg = experiment_config(config)
        if m is None:
            m = len(build_dataset(dict(config.get("data", {}))))
        full = validate_capacity(cfg.clusters, cfg.stages, m, cfg.batch_size)
        eff = pl.effective_capacity(cfg, m)
        click.echo(f"full bound (K^N): {full}")
        click.echo(f"training bound (K^(N-1)): {eff}")
        if not eff.ok:
            raise ConfigurationError(f"capacity constraint violated: {eff}")
        click.echo("config ok")
    except Exception as exc:   # noqa: BLE001
        _fail(exc)


if __name__ == "__main__":
    main()
