"""Stochastic two-view augmentation for contrastive positives.

Geometric transforms (random resized crop, horizontal flip) are applied
identically across all channels of a view; photometric transforms (color
jitter, grayscale) touch only the first three channels of 3- or 4-channel
images, so an appended digit-style channel is changed only geometrically.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError

_LUMA = (0.299, 0.587, 0.114)
_JITTER_PROB = 0.8  # chance that a view receives color jitter at all


@dataclass
class AugmentationConfig:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    horizontal_flip_prob: float = 0.5
    color_jitter_strength: float = 0.4
    grayscale_prob: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ConfigurationError(f"bad crop_scale_range {self.crop_scale_range}")
        for name in ("horizontal_flip_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigurationError(f"{name} must be in [0, 1], got {p}")
        if self.color_jitter_strength < 0:
            raise ConfigurationError("color_jitter_strength must be nonnegative")

    def make_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.seed)
        return g


def _rand(n, gen, lo=0.0, hi=1.0):
    return torch.rand(n, generator=gen) * (hi - lo) + lo


def augment_batch(images: torch.Tensor, cfg: AugmentationConfig, out_size: int,
                  generator: torch.Generator) -> torch.Tensor:
    """One stochastic view per input image, output (n, C, out_size, out_size)."""
    cfg.validate()
    if images.ndim != 4:
        raise ConfigurationError(f"expected (n, C, H, W) batch, got {tuple(images.shape)}")
    n, c, h, _ = images.shape
    if c not in (1, 3, 4):
        raise ConfigurationError(f"unsupported channel count {c}")
    lo, hi = cfg.crop_scale_range

    geometric_identity = (lo == hi == 1.0 and cfg.horizontal_flip_prob == 0.0
                          and out_size == h)
    if geometric_identity:
        out = images.clone()
    else:
        side = torch.sqrt(_rand(n, generator, lo, hi))
        slack = 1.0 - side
        cx = (_rand(n, generator, -1.0, 1.0)) * slack
        cy = (_rand(n, generator, -1.0, 1.0)) * slack
        flip = torch.where(torch.rand(n, generator=generator) < cfg.horizontal_flip_prob,
                           -1.0, 1.0)
        theta = torch.zeros(n, 2, 3)
        theta[:, 0, 0] = side * flip
        theta[:, 1, 1] = side
        theta[:, 0, 2] = cx
        theta[:, 1, 2] = cy
        grid = F.affine_grid(theta, (n, c, out_size, out_size), align_corners=False)
        out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border",
                            align_corners=False)

    if c >= 3:
        rgb = out[:, :3]
        s = cfg.color_jitter_strength
        if s > 0:
            apply = (torch.rand(n, generator=generator) < _JITTER_PROB).view(n, 1, 1, 1)
            fb = _rand(n, generator, max(0.0, 1 - 0.8 * s), 1 + 0.8 * s).view(n, 1, 1, 1)
            fc = _rand(n, generator, max(0.0, 1 - 0.8 * s), 1 + 0.8 * s).view(n, 1, 1, 1)
            fs = _rand(n, generator, max(0.0, 1 - 0.8 * s), 1 + 0.8 * s).view(n, 1, 1, 1)
            jittered = rgb * fb
            mean = jittered.mean(dim=(1, 2, 3), keepdim=True)
            jittered = (jittered - mean) * fc + mean
            luma = (_LUMA[0] * jittered[:, 0] + _LUMA[1] * jittered[:, 1]
                    + _LUMA[2] * jittered[:, 2]).unsqueeze(1)
            jittered = luma + (jittered - luma) * fs
            rgb = torch.where(apply, jittered, rgb)
        if cfg.grayscale_prob > 0:
            to_gray = (torch.rand(n, generator=generator) < cfg.grayscale_prob).view(n, 1, 1, 1)
            luma = (_LUMA[0] * rgb[:, 0] + _LUMA[1] * rgb[:, 1]
                    + _LUMA[2] * rgb[:, 2]).unsqueeze(1)
            rgb = torch.where(to_gray, luma.expand_as(rgb), rgb)
        out = torch.cat([rgb.clamp(0.0, 1.0), out[:, 3:]], dim=1)
    return out


def augment_pair(image, cfg: AugmentationConfig, rng_state, out_size: int | None = None):
    """Two independent stochastic views of one image.

    rng_state is a torch.Generator (mutated in place) or an int seed.
    """
    if isinstance(rng_state, int):
        gen = torch.Generator()
        gen.manual_seed(rng_state)
    else:
        gen = rng_state
    pixels = image.pixels if hasattr(image, "pixels") else image
    batch = torch.as_tensor(pixels, dtype=torch.float32).unsqueeze(0)
    size = out_size or batch.shape[-1]
    v1 = augment_batch(batch, cfg, size, gen)[0]
    v2 = augment_batch(batch, cfg, size, gen)[0]
    return v1, v2
