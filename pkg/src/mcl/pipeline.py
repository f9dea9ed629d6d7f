"""Multistage training loop: train, embed, cluster, extend labels, repeat;
then concatenate each stage's representations into the final one.

Experiment directory layout:
    config.json                 frozen config + hash
    stage_<j>/checkpoint        encoder parameters
    stage_<j>/embeddings.bin    projection-space Z (clustered)
    stage_<j>/representations.bin  pre-projection H (probed, integrated)
    stage_<j>/clusters.csv      sample_index,stage,cluster_id
    pseudo_labels.csv           one column per stage
    integrated.bin              M x (N * representation_dim)
    report.json                 metrics (see evaluation module)
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import encoder as enc
from .augment import AugmentationConfig, augment_batch
from .clustering import (ClusterAssignment, empty_pseudo_labels, extend_pseudo_labels,
                         kmeans, validate_capacity)
from .datasets import ImageDataset
from .errors import ConfigurationError, ContractError, DataFormatError, MCLError, MissingArtifactError
from .evaluation import linear_probe_mean, pseudo_label_histogram, stage_ami_matrix
from .objective import build_mask
from .sampling import plan_epoch, plan_epoch_uniform

EMBEDDINGS_MAGIC = b"MCLE"
EMBEDDINGS_VERSION = 1


@dataclass
class ExperimentConfig:
    stages: int = 3
    clusters: int = 5
    batch_size: int = 256
    temperature: float = 0.25
    epochs_per_stage: int = 50
    seed: int = 0
    drop_last: bool = True
    integration_normalize: bool = True
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    init_mode: str = "scratch"
    probe_seeds: tuple[int, ...] = (0, 1, 2)
    kmeans_max_iter: int = 100
    encoder: enc.EncoderSpec = field(default_factory=enc.EncoderSpec)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    clustering_space: str = "projection"   # recorded choice: z, not h

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigurationError(f"stages must be >= 1, got {self.stages}")
        if self.clusters < 1:
            raise ConfigurationError(f"clusters must be >= 1, got {self.clusters}")
        self.probe_seeds = tuple(self.probe_seeds)

    def stage_seed(self, j: int) -> int:
        # decorrelate per-stage initializations
        return self.seed + j

    def train_config(self) -> enc.TrainConfig:
        return enc.TrainConfig(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            epochs=self.epochs_per_stage, batch_size=self.batch_size,
            temperature=self.temperature, init_mode=self.init_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["conv_widths"] = list(self.encoder.conv_widths)
        d["augment"]["crop_scale_range"] = list(self.augment.crop_scale_range)
        d["probe_seeds"] = list(self.probe_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("config_hash", None)
        if "encoder" in d and isinstance(d["encoder"], dict):
            e = dict(d["encoder"])
            e["conv_widths"] = tuple(e.get("conv_widths", (32, 64, 128, 128)))
            d["encoder"] = enc.EncoderSpec(**e)
        if "augment" in d and isinstance(d["augment"], dict):
            a = dict(d["augment"])
            a["crop_scale_range"] = tuple(a.get("crop_scale_range", (0.2, 1.0)))
            d["augment"] = AugmentationConfig(**a)
        return cls(**d)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class StageArtifacts:
    stage: int
    encoder: enc.EncoderState
    representations: np.ndarray     # H, M x representation_dim
    embeddings: np.ndarray          # Z, M x projection_dim (unit rows)
    assignment: ClusterAssignment
    metrics: dict


def write_embeddings(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(EMBEDDINGS_MAGIC)
        f.write(struct.pack("<IQQ", EMBEDDINGS_VERSION, array.shape[0], array.shape[1]))
        f.write(array.tobytes())


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMBEDDINGS_MAGIC:
            raise DataFormatError(f"bad embeddings magic {magic!r}", offset=0)
        version, rows, cols = struct.unpack("<IQQ", f.read(20))
        if version != EMBEDDINGS_VERSION:
            raise DataFormatError(f"unsupported embeddings version {version}", offset=4)
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != rows * cols:
        raise DataFormatError(f"embeddings payload holds {data.size} floats, "
                              f"expected {rows * cols}", offset=24 + data.size * 4)
    return data.reshape(rows, cols).astype(np.float32)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def effective_capacity(cfg: ExperimentConfig, m: int):
    """Constraint the training loop actually consumes: grouping at the last
    stage uses pseudo labels of length N-1, so K^(N-1) * b must fit in M."""
    return validate_capacity(cfg.clusters, max(cfg.stages - 1, 1), m, cfg.batch_size) \
        if cfg.stages > 1 else validate_capacity(1, 1, m, cfg.batch_size)


def run_stage(j: int, dataset: ImageDataset, pseudo_labels: np.ndarray,
              cfg: ExperimentConfig, out_dir=None, previous: StageArtifacts | None = None,
              progress=None) -> StageArtifacts:
    """Train stage j, embed the full dataset, cluster, persist artifacts."""
    m = len(dataset)
    if pseudo_labels.shape != (m, j):
        raise ContractError(
            f"stage {j} expects pseudo labels of shape {(m, j)}, got {pseudo_labels.shape}")
    stage_seed = cfg.stage_seed(j)
    torch.manual_seed(stage_seed)

    spec = enc.EncoderSpec(**{**asdict(cfg.encoder), "seed": stage_seed})
    train_cfg = cfg.train_config()
    prev_state = previous.encoder if previous is not None else None
    state = enc.init_encoder(spec, train_cfg, previous=prev_state)

    images = torch.from_numpy(dataset.images)
    gen = torch.Generator()
    gen.manual_seed(_derived_seed(stage_seed, 7))
    losses = []
    for epoch in range(cfg.epochs_per_stage):
        if j == 0:
            plan = plan_epoch_uniform(m, cfg.batch_size,
                                      seed=_derived_seed(stage_seed, epoch),
                                      drop_last=cfg.drop_last, epoch=epoch)
        else:
            plan = plan_epoch(pseudo_labels, cfg.batch_size, seed=stage_seed,
                              drop_last=cfg.drop_last, epoch=epoch,
                              embeddings=previous.embeddings if previous else None)
        epoch_loss, nb = 0.0, 0
        for bi, batch_idx in enumerate(plan):
            batch = images[batch_idx]
            v1 = augment_batch(batch, cfg.augment, spec.input_size, gen)
            v2 = augment_batch(batch, cfg.augment, spec.input_size, gen)
            mask = build_mask(pseudo_labels[batch_idx])
            epoch_loss += enc.train_step(state, v1, v2, mask, batch_index=bi)
            nb += 1
        mean_loss = epoch_loss / max(nb, 1)
        losses.append(mean_loss)
        if progress:
            progress({"event": "epoch", "stage": j, "epoch": epoch,
                      "loss": round(mean_loss, 6), "batches": nb})

    h, z = enc.embed_dataset(state, dataset.images)
    assignment = kmeans(z, cfg.clusters, max_iter=cfg.kmeans_max_iter,
                        seed=stage_seed, stage=j)
    metrics = {"epoch_losses": losses, "inertia": assignment.inertia,
               "kmeans_iterations": assignment.n_iter}
    artifacts = StageArtifacts(stage=j, encoder=state, representations=h,
                               embeddings=z, assignment=assignment, metrics=metrics)
    if out_dir is not None:
        save_stage_artifacts(artifacts, Path(out_dir) / f"stage_{j}")
    if progress:
        progress({"event": "stage_done", "stage": j, "inertia": assignment.inertia})
    return artifacts


def save_stage_artifacts(artifacts: StageArtifacts, stage_dir) -> None:
    stage_dir = Path(stage_dir)
    stage_dir.mkdir(parents=True, exist_ok=True)
    enc.save_checkpoint(artifacts.encoder, stage_dir / "checkpoint")
    write_embeddings(stage_dir / "embeddings.bin", artifacts.embeddings)
    write_embeddings(stage_dir / "representations.bin", artifacts.representations)
    with open(stage_dir / "clusters.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_index", "stage", "cluster_id"])
        for i, label in enumerate(artifacts.assignment.labels):
            writer.writerow([i, artifacts.stage, int(label)])
    (stage_dir / "metrics.json").write_text(
        json.dumps(artifacts.metrics, indent=2, sort_keys=True))


def load_stage_outputs(exp_dir, j: int):
    """Reload (H, Z, cluster labels) persisted for stage j."""
    stage_dir = Path(exp_dir) / f"stage_{j}"
    if not stage_dir.exists():
        raise MissingArtifactError(f"missing stage directory {stage_dir}")
    h = read_embeddings(stage_dir / "representations.bin")
    z = read_embeddings(stage_dir / "embeddings.bin")
    labels = np.loadtxt(stage_dir / "clusters.csv", delimiter=",", skiprows=1,
                        dtype=np.int64, usecols=2)
    return h, z, labels


def integrate(artifacts: list[StageArtifacts], normalize: bool = True) -> np.ndarray:
    """Concatenate per-stage pre-projection representations row-wise."""
    if not artifacts:
        raise ContractError("integrate needs at least one stage")
    m = artifacts[0].representations.shape[0]
    blocks = []
    for art in artifacts:
        h = art.representations
        if h.shape[0] != m:
            raise ContractError("stage representations are not row-aligned")
        if normalize:
            norms = np.linalg.norm(h, axis=1, keepdims=True)
            norms[norms < 1e-12] = 1e-12
            h = h / norms
        blocks.append(h.astype(np.float32))
    return np.concatenate(blocks, axis=1)


def _probe_entry(result, per_seed):
    return {"factor": result.factor, "representation_id": result.representation_id,
            "accuracy": round(result.accuracy, 6),
            "per_seed": [round(a, 6) for a in per_seed],
            "train_size": result.train_size, "test_size": result.test_size}


def run_experiment(cfg: ExperimentConfig, dataset: ImageDataset, out_dir,
                   progress=None) -> dict:
    """Execute all stages, integrate, evaluate, and write report.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "lock"
    try:
        lock_fd = open(lock, "x")
    except FileExistsError:
        raise MCLError(f"run directory {out_dir} is locked by another writer")
    try:
        m = len(dataset)
        check = effective_capacity(cfg, m)
        full = validate_capacity(cfg.clusters, cfg.stages, m, cfg.batch_size)
        if not check.ok:
            raise ConfigurationError(
                f"capacity constraint violated for the clusterings consumed in "
                f"training (K^(N-1) * b <= M): {check}; full bound: {full}")
        frozen = cfg.to_dict()
        frozen["config_hash"] = cfg.config_hash()
        frozen["dataset"] = {"name": dataset.name, "count": m,
                             "shape": list(dataset.images.shape[1:]),
                             "factors": [{"name": f.name, "cardinality": f.cardinality}
                                         for f in dataset.factors]}
        frozen["capacity"] = {"effective_ok": check.ok, "full_eq_ok": full.ok,
                              "detail": str(full)}
        (out_dir / "config.json").write_text(json.dumps(frozen, indent=2, sort_keys=True))
        if progress and not full.ok:
            progress({"event": "warning",
                      "message": f"full K^N capacity bound not met: {full}"})

        pseudo = empty_pseudo_labels(m)
        artifacts: list[StageArtifacts] = []
        stage_pseudo = [pseudo]
        for j in range(cfg.stages):
            art = run_stage(j, dataset, pseudo, cfg, out_dir=out_dir,
                            previous=artifacts[-1] if artifacts else None,
                            progress=progress)
            artifacts.append(art)
            pseudo = extend_pseudo_labels(pseudo, art.assignment)
            stage_pseudo.append(pseudo)

        integrated = integrate(artifacts, normalize=cfg.integration_normalize)
        write_embeddings(out_dir / "integrated.bin", integrated)
        with open(out_dir / "pseudo_labels.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([f"stage_{j}" for j in range(cfg.stages)])
            writer.writerows(pseudo.tolist())

        report = evaluate_experiment(cfg, dataset, artifacts, integrated,
                                     stage_pseudo, progress=progress)
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        _write_metrics_csv(report, out_dir / "metrics.csv")
        return report
    finally:
        lock_fd.close()
        lock.unlink(missing_ok=True)


def evaluate_experiment(cfg: ExperimentConfig, dataset: ImageDataset,
                        artifacts: list[StageArtifacts], integrated: np.ndarray,
                        stage_pseudo: list[np.ndarray], progress=None) -> dict:
    per_stage = []
    for art in artifacts:
        probes = []
        for factor in dataset.factors:
            result, per_seed = linear_probe_mean(
                art.representations, dataset.labels[factor.name],
                seeds=cfg.probe_seeds, factor=factor.name,
                representation_id=f"stage_{art.stage}")
            probes.append(_probe_entry(result, per_seed))
            if progress:
                progress({"event": "probe", "representation": f"stage_{art.stage}",
                          "factor": factor.name, "accuracy": round(result.accuracy, 4)})
        per_stage.append({
            "stage": art.stage,
            "probes": probes,
            "inertia": round(art.assignment.inertia, 6),
            "histogram": pseudo_label_histogram(stage_pseudo[art.stage]),
            "epoch_losses": [round(v, 6) for v in art.metrics["epoch_losses"]],
        })

    integrated_probes = []
    for factor in dataset.factors:
        result, per_seed = linear_probe_mean(
            integrated, dataset.labels[factor.name], seeds=cfg.probe_seeds,
            factor=factor.name, representation_id="integrated")
        integrated_probes.append(_probe_entry(result, per_seed))
        if progress:
            progress({"event": "probe", "representation": "integrated",
                      "factor": factor.name, "accuracy": round(result.accuracy, 4)})

    if len(artifacts) >= 2:
        ami_matrix = stage_ami_matrix([a.assignment for a in artifacts])
        ami_list = [[round(v, 6) for v in row] for row in ami_matrix.tolist()]
    else:
        ami_list = [[1.0]]
    return {
        "config_hash": cfg.config_hash(),
        "per_stage": per_stage,
        "ami_matrix": ami_list,
        "integrated_probes": integrated_probes,
    }


def _write_metrics_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["representation", "factor", "accuracy"])
        for stage in report["per_stage"]:
            for probe in stage["probes"]:
                writer.writerow([probe["representation_id"], probe["factor"],
                                 probe["accuracy"]])
        for probe in report["integrated_probes"]:
            writer.writerow([probe["representation_id"], probe["factor"],
                             probe["accuracy"]])
