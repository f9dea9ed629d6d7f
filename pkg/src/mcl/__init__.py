"""Multistage contrastive learning with feature-aware negative sampling."""

from .augment import AugmentationConfig, augment_batch, augment_pair
from .clustering import (ClusterAssignment, ami, empty_pseudo_labels,
                         extend_pseudo_labels, kmeans, validate_capacity)
from .datasets import (FactorSpec, ImageDataset, LabeledImage, generate_composite,
                       generate_glyphs, generate_patterns, generate_trifeature,
                       load_cifar_binary, load_dataset, load_idx, save_dataset)
from .encoder import (ConvEncoder, EncoderSpec, EncoderState, TrainConfig,
                      embed_dataset, forward, init_encoder, load_checkpoint,
                      save_checkpoint, train_step)
from .evaluation import (ProbeResult, linear_probe, linear_probe_mean,
                         pseudo_label_histogram, stage_ami_matrix, topk_neighbors)
from .objective import build_mask, cosine_similarity, info_nce, symmetric_info_nce
from .pipeline import (ExperimentConfig, StageArtifacts, integrate, read_embeddings,
                       run_experiment, run_stage, write_embeddings)
from .sampling import BatchPlan, plan_epoch, plan_epoch_uniform

__version__ = "0.1.0"
