"""Desk-scale convolutional encoder with projection head.

The encoder maps images to a pre-projection representation h (used for
linear evaluation and cross-stage integration) and a unit-normalized
projection z (used by the contrastive loss and for clustering). torch
provides the reverse-mode gradients; correctness is pinned by a
finite-difference check in the test suite.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractError, TrainingError
from .objective import build_mask, symmetric_info_nce

CHECKPOINT_MAGIC = b"MCLC"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderSpec:
    input_channels: int = 4
    input_size: int = 32
    conv_widths: tuple[int, ...] = (32, 64, 128, 128)
    representation_dim: int = 128
    projection_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)
        if not self.conv_widths:
            raise ConfigurationError("conv_widths must be nonempty")
        if not self.representation_dim >= self.projection_dim >= 2:
            raise ConfigurationError(
                f"need representation_dim >= projection_dim >= 2, got "
                f"{self.representation_dim}/{self.projection_dim}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 50
    batch_size: int = 256
    temperature: float = 0.25
    init_mode: str = "scratch"       # scratch | inherit_previous | fixed_weights
    init_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate and weight_decay must be nonnegative")
        if self.init_mode not in ("scratch", "inherit_previous", "fixed_weights"):
            raise ConfigurationError(f"unknown init_mode {self.init_mode!r}")


class ConvEncoder(nn.Module):
    """Strided conv blocks + global average pool -> h; 2-layer head -> z."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        c = spec.input_channels
        for w in spec.conv_widths:
            blocks += [
                nn.Conv2d(c, w, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(min(8, w), w),
                nn.ReLU(inplace=True),
            ]
            c = w
        self.backbone = nn.Sequential(*blocks)
        self.rep = nn.Linear(c, spec.representation_dim)
        self.head = nn.Sequential(
            nn.Linear(spec.representation_dim, spec.representation_dim),
            nn.ReLU(inplace=True),
            nn.Linear(spec.representation_dim, spec.projection_dim),
        )

    def forward(self, x: torch.Tensor):
        h = self.rep(self.backbone(x).mean(dim=(2, 3)))
        z = self.head(h)
        z = z / torch.linalg.norm(z, dim=1, keepdim=True).clamp_min(1e-12)
        return h, z


@dataclass
class EncoderState:
    spec: EncoderSpec
    module: ConvEncoder
    optimizer: torch.optim.Optimizer
    train_config: TrainConfig = field(default_factory=TrainConfig)
    step_count: int = 0

    def parameter_vector(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.module.parameters()]).numpy()


def _make_optimizer(module: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(module.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)


def init_encoder(spec: EncoderSpec, cfg: TrainConfig | None = None,
                 previous: EncoderState | None = None) -> EncoderState:
    """Fresh encoder; inherit_previous copies parameters, resets the optimizer."""
    cfg = cfg or TrainConfig()
    if cfg.init_mode == "inherit_previous" and previous is None:
        raise ConfigurationError("init_mode=inherit_previous requires a previous state")
    with torch.random.fork_rng():
        torch.manual_seed(spec.seed)
        module = ConvEncoder(spec)
    if cfg.init_mode == "inherit_previous":
        if previous.spec.conv_widths != spec.conv_widths:
            raise ConfigurationError("cannot inherit parameters across different architectures")
        module.load_state_dict(previous.module.state_dict())
    elif cfg.init_mode == "fixed_weights":
        if not cfg.init_path:
            raise ConfigurationError("init_mode=fixed_weights requires init_path")
        loaded = load_checkpoint(cfg.init_path)
        module.load_state_dict(loaded.module.state_dict())
    return EncoderState(spec=spec, module=module, optimizer=_make_optimizer(module, cfg),
                        train_config=cfg)


def forward(state: EncoderState, batch) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate a frozen encoder: returns (H, Z) as numpy arrays."""
    x = torch.as_tensor(np.asarray(batch), dtype=torch.float32)
    if x.ndim != 4 or x.shape[1] != state.spec.input_channels \
            or x.shape[2] != state.spec.input_size:
        raise ContractError(
            f"batch shape {tuple(x.shape)} does not match encoder spec "
            f"({state.spec.input_channels}x{state.spec.input_size})")
    state.module.eval()
    with torch.no_grad():
        h, z = state.module(x)
    return h.numpy(), z.numpy()


def train_step(state: EncoderState, view1: torch.Tensor, view2: torch.Tensor,
               negative_mask: torch.Tensor, batch_index: int = -1) -> float:
    """One optimizer step on the symmetrized masked InfoNCE loss."""
    state.module.train()
    state.optimizer.zero_grad(set_to_none=True)
    _, z1 = state.module(view1)
    _, z2 = state.module(view2)
    loss = symmetric_info_nce(z1, z2, negative_mask, state.train_config.temperature)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}", batch_index=batch_index)
    loss.backward()
    state.optimizer.step()
    state.step_count += 1
    return float(loss.detach())


def embed_dataset(state: EncoderState, images, batch_size: int = 512):
    """Full-dataset (H, Z) with the frozen encoder."""
    hs, zs = [], []
    for start in range(0, len(images), batch_size):
        h, z = forward(state, images[start:start + batch_size])
        hs.append(h)
        zs.append(z)
    return np.concatenate(hs), np.concatenate(zs)


def save_checkpoint(state: EncoderState, path) -> None:
    """Single file: magic, version, JSON manifest with a layer offset table,
    then a little-endian float32 parameter blob."""
    layers = []
    blob = io.BytesIO()
    offset = 0
    sd = state.module.state_dict()
    for name, tensor in sd.items():
        arr = tensor.detach().numpy().astype("<f4")
        layers.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blob.write(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({
        "spec": asdict(state.spec),
        "step_count": state.step_count,
        "seed": state.spec.seed,
        "layers": layers,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(manifest)))
        f.write(manifest)
        f.write(blob.getvalue())


def load_checkpoint(path, cfg: TrainConfig | None = None) -> EncoderState:
    from .errors import DataFormatError
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"bad checkpoint magic {magic!r}", offset=0)
        version, mlen = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
        manifest = json.loads(f.read(mlen).decode())
        blob = f.read()
    spec_d = manifest["spec"]
    spec_d["conv_widths"] = tuple(spec_d["conv_widths"])
    spec = EncoderSpec(**spec_d)
    state = init_encoder(spec, cfg or TrainConfig())
    sd = {}
    for layer in manifest["layers"]:
        shape = tuple(layer["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=layer["offset"])
        sd[layer["name"]] = torch.from_numpy(arr.reshape(shape).copy())
    state.module.load_state_dict(sd)
    state.step_count = manifest["step_count"]
    return state
