"""Feature-factorized synthetic datasets plus loaders for real MNIST/CIFAR files.

Three procedural generators are provided:

* trifeature: colored, textured shapes; independent shape/texture/color
  factors, one image per (combination, repeat) with random pose.
* patterns: full-frame procedural textures with a random color tint; the
  pattern class is the only labeled factor, tint and pose are nuisance.
* glyphs: single-channel high-contrast shapes, one class per glyph.

Composite datasets stack a 3-channel and a 1-channel source image into a
4-channel image with two independent class labels, mirroring channel-wise
concatenation datasets used to study feature suppression.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DataFormatError

BACKGROUND = 0.15

PALETTE = np.array([
    [0.85, 0.10, 0.10],  # red
    [0.10, 0.70, 0.15],  # green
    [0.15, 0.25, 0.85],  # blue
    [0.90, 0.85, 0.10],  # yellow
    [0.85, 0.15, 0.80],  # magenta
    [0.10, 0.80, 0.80],  # cyan
    [0.95, 0.55, 0.10],  # orange
    [0.45, 0.15, 0.75],  # purple
    [0.55, 0.35, 0.15],  # brown
    [0.95, 0.95, 0.95],  # white
], dtype=np.float32)

SHAPE_NAMES = ["circle", "ellipse", "triangle", "square", "pentagon",
               "hexagon", "star5", "star6", "annulus", "cross"]
TEXTURE_NAMES = ["solid", "stripes_coarse", "stripes_fine", "checker", "dots",
                 "rings", "spokes", "grid", "zigzag", "speckle"]


@dataclass(frozen=True)
class FactorSpec:
    name: str
    cardinality: int

    def __post_init__(self):
        if self.cardinality < 2:
            raise ConfigurationError(
                f"factor {self.name!r} needs cardinality >= 2, got {self.cardinality}")


@dataclass
class LabeledImage:
    pixels: np.ndarray                 # (C, H, W) float32 in [0, 1]
    factor_labels: dict[str, int]
    sample_index: int


@dataclass
class ImageDataset:
    """In-memory dataset: one image tensor plus per-factor label vectors."""

    factors: list[FactorSpec]
    images: np.ndarray                 # (M, C, H, W) float32
    labels: dict[str, np.ndarray]      # factor name -> (M,) int64
    seed: int = 0
    name: str = "dataset"

    def __post_init__(self):
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate factor names: {names}")
        for f in self.factors:
            if f.name not in self.labels:
                raise ContractError(f"missing labels for factor {f.name!r}")
            if len(self.labels[f.name]) != len(self.images):
                raise ContractError(f"label count mismatch for factor {f.name!r}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(
            pixels=self.images[i],
            factor_labels={f.name: int(self.labels[f.name][i]) for f in self.factors},
            sample_index=i,
        )

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]


def _smoothstep(x):
    return np.clip(x, 0.0, 1.0)


def _object_grid(size, cx, cy, angle, scale):
    """Rotated, translated, scaled object coordinates over the pixel grid."""
    axis = np.linspace(-1.0, 1.0, size, dtype=np.float32)
    xx, yy = np.meshgrid(axis, axis)
    x, y = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u = (c * x + s * y) / scale
    v = (-s * x + c * y) / scale
    return u.astype(np.float32), v.astype(np.float32)


def _polygon_radius(phi, k):
    a = np.mod(phi, 2 * np.pi / k)
    return np.cos(np.pi / k) / np.cos(a - np.pi / k)


def _star_radius(phi, points, inner):
    half = np.pi / points
    a = np.mod(phi, 2 * half)
    a = np.where(a > half, 2 * half - a, a)
    # line between the outer tip (radius 1 at angle 0) and the inner notch
    return inner * np.sin(half) / (inner * np.sin(half - a) + np.sin(a) + 1e-9)


def shape_mask(index: int, u, v, edge: float) -> np.ndarray:
    """Soft inside/outside mask for catalog shape `index` in object coords."""
    if index == 1:     # ellipse: squash one axis, then treat as circle
        v = v * 2.0
    if index == 9:     # cross
        w = 0.35
        arm1 = _smoothstep((w - np.abs(u)) / edge) * _smoothstep((1 - np.abs(v)) / edge)
        arm2 = _smoothstep((w - np.abs(v)) / edge) * _smoothstep((1 - np.abs(u)) / edge)
        return np.maximum(arm1, arm2)
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    if index in (0, 1):
        rmax = np.ones_like(r)
    elif index == 2:
        rmax = _polygon_radius(phi, 3)
    elif index == 3:
        rmax = _polygon_radius(phi + np.pi / 4, 4)
    elif index == 4:
        rmax = _polygon_radius(phi, 5)
    elif index == 5:
        rmax = _polygon_radius(phi, 6)
    elif index == 6:
        rmax = _star_radius(phi, 5, 0.45)
    elif index == 7:
        rmax = _star_radius(phi, 6, 0.55)
    elif index == 8:   # annulus
        outer = _smoothstep((1.0 - r) / edge)
        inner = _smoothstep((r - 0.45) / edge)
        return outer * inner
    else:
        raise ConfigurationError(f"unknown shape index {index}")
    return _smoothstep((rmax - r) / edge)


def texture_field(index: int, u, v) -> np.ndarray:
    """Procedural texture value in [0, 1] over object coordinates."""
    two_pi = 2 * np.pi
    if index == 0:      # solid
        return np.ones_like(u)
    if index == 1:      # coarse stripes
        return 0.5 + 0.5 * np.tanh(4 * np.cos(two_pi * 1.5 * u))
    if index == 2:      # fine stripes
        return 0.5 + 0.5 * np.tanh(4 * np.cos(two_pi * 4.0 * u))
    if index == 3:      # checkerboard
        return 0.5 + 0.5 * np.tanh(4 * np.cos(two_pi * 2.0 * u)) * np.tanh(4 * np.cos(two_pi * 2.0 * v))
    if index == 4:      # dot lattice
        du = np.abs(np.mod(u, 0.5) - 0.25)
        dv = np.abs(np.mod(v, 0.5) - 0.25)
        return _smoothstep((0.14 - np.hypot(du, dv)) / 0.05)
    if index == 5:      # concentric rings
        return 0.5 + 0.5 * np.tanh(4 * np.cos(two_pi * 2.5 * np.hypot(u, v)))
    if index == 6:      # angular spokes
        return 0.5 + 0.5 * np.tanh(4 * np.cos(8 * np.arctan2(v, u)))
    if index == 7:      # thin grid lines
        lu = 0.5 + 0.5 * np.tanh(6 * (np.cos(two_pi * 2.5 * u) - 0.55))
        lv = 0.5 + 0.5 * np.tanh(6 * (np.cos(two_pi * 2.5 * v) - 0.55))
        return np.maximum(lu, lv)
    if index == 8:      # zigzag stripes
        saw = np.abs(np.mod(v * 2.0, 2.0) - 1.0)
        return 0.5 + 0.5 * np.tanh(4 * np.cos(two_pi * 2.0 * (u + 0.4 * saw)))
    if index == 9:      # speckle (fixed interference pattern)
        return 0.5 + 0.5 * np.tanh(3 * np.cos(23.0 * u + 9.0 * v) * np.cos(19.0 * v - 7.0 * u))
    raise ConfigurationError(f"unknown texture index {index}")


def generate_trifeature(shapes: int, textures: int, colors: int, per_combo: int,
                        size: int = 64, seed: int = 0) -> ImageDataset:
    """Colored, textured shapes over all factor combinations with random pose."""
    for name, card, limit in (("shapes", shapes, len(SHAPE_NAMES)),
                              ("textures", textures, len(TEXTURE_NAMES)),
                              ("colors", colors, len(PALETTE))):
        if not 2 <= card <= limit:
            raise ConfigurationError(f"{name} must be in [2, {limit}], got {card}")
    if per_combo < 1:
        raise ConfigurationError(f"per_combo must be >= 1, got {per_combo}")
    if size < 16:
        raise ConfigurationError(f"image size must be >= 16, got {size}")

    m = shapes * textures * colors * per_combo
    rng = np.random.default_rng(seed)
    images = np.empty((m, 3, size, size), dtype=np.float32)
    lab_s = np.empty(m, dtype=np.int64)
    lab_t = np.empty(m, dtype=np.int64)
    lab_c = np.empty(m, dtype=np.int64)

    i = 0
    for si in range(shapes):
        for ti in range(textures):
            for ci in range(colors):
                for _ in range(per_combo):
                    angle = rng.uniform(0, 2 * np.pi)
                    cx, cy = rng.uniform(-0.3, 0.3, size=2)
                    scale = rng.uniform(0.5, 0.65)
                    edge = 1.5 * (2.0 / size) / scale
                    u, v = _object_grid(size, cx, cy, angle, scale)
                    mask = shape_mask(si, u, v, edge)
                    tex = 0.45 + 0.55 * texture_field(ti, u, v)
                    fg = PALETTE[ci][:, None, None] * tex[None]
                    images[i] = BACKGROUND + mask[None] * (fg - BACKGROUND)
                    lab_s[i], lab_t[i], lab_c[i] = si, ti, ci
                    i += 1
    np.clip(images, 0.0, 1.0, out=images)
    return ImageDataset(
        factors=[FactorSpec("shape", shapes), FactorSpec("texture", textures),
                 FactorSpec("color", colors)],
        images=images,
        labels={"shape": lab_s, "texture": lab_t, "color": lab_c},
        seed=seed, name="trifeature",
    )


def generate_patterns(classes: int, count: int, size: int = 32, seed: int = 0,
                      contrast: float = 0.5) -> ImageDataset:
    """Full-frame textures; class = pattern type, color tint is nuisance."""
    if not 2 <= classes <= len(TEXTURE_NAMES):
        raise ConfigurationError(f"classes must be in [2, {len(TEXTURE_NAMES)}]")
    if size < 16:
        raise ConfigurationError(f"image size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = rng.integers(classes, size=count).astype(np.int64)
    for i in range(count):
        angle = rng.uniform(0, 2 * np.pi)
        cx, cy = rng.uniform(-0.5, 0.5, size=2)
        scale = rng.uniform(0.8, 1.3)
        u, v = _object_grid(size, cx, cy, angle, scale)
        tex = texture_field(int(labels[i]), u, v)
        # keep the nuisance tint mild so the texture class, not the tint,
        # is the main signal left once a dominant channel is factored out
        fg = rng.uniform(0.55, 0.9, size=3).astype(np.float32)
        bg = fg * rng.uniform(0.25, 0.4)
        blend = bg[:, None, None] + contrast * tex[None] * (fg - bg)[:, None, None]
        images[i] = blend + rng.normal(0.0, 0.02, size=(3, size, size))
    np.clip(images, 0.0, 1.0, out=images)
    return ImageDataset(
        factors=[FactorSpec("pattern", classes)],
        images=images, labels={"pattern": labels},
        seed=seed, name="patterns",
    )


def generate_glyphs(classes: int, count: int, size: int = 32, seed: int = 0) -> ImageDataset:
    """Single-channel, high-contrast glyphs; class = catalog shape."""
    if not 2 <= classes <= len(SHAPE_NAMES):
        raise ConfigurationError(f"classes must be in [2, {len(SHAPE_NAMES)}]")
    if size < 16:
        raise ConfigurationError(f"image size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 1, size, size), dtype=np.float32)
    labels = rng.integers(classes, size=count).astype(np.int64)
    for i in range(count):
        # mild pose jitter only: the glyph class is meant to be the easy,
        # high-salience factor when composited with a texture channel
        angle = rng.uniform(-0.12, 0.12)
        cx, cy = rng.uniform(-0.08, 0.08, size=2)
        scale = rng.uniform(0.6, 0.72)
        edge = 1.5 * (2.0 / size) / scale
        u, v = _object_grid(size, cx, cy, angle, scale)
        images[i, 0] = shape_mask(int(labels[i]), u, v, edge)
    np.clip(images, 0.0, 1.0, out=images)
    return ImageDataset(
        factors=[FactorSpec("glyph", classes)],
        images=images, labels={"glyph": labels},
        seed=seed, name="glyphs",
    )


def _resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    m, c, h, w = images.shape
    ri = (np.arange(size) * h / size).astype(np.int64)
    ci = (np.arange(size) * w / size).astype(np.int64)
    return images[:, :, ri][:, :, :, ci]


def generate_composite(source_a: ImageDataset, source_b: ImageDataset, count: int,
                       seed: int = 0, class_factor_a: str | None = None,
                       class_factor_b: str | None = None) -> ImageDataset:
    """Stack random (3-channel, 1-channel) source pairs into 4-channel images.

    Pairing is uniform-random, so the two class labels are statistically
    independent. The 1-channel source is nearest-neighbor resized to the
    3-channel source's spatial size if needed.
    """
    if source_a.channels != 3:
        raise DataFormatError(f"source_a must have 3 channels, got {source_a.channels}")
    if source_b.channels != 1:
        raise DataFormatError(f"source_b must have 1 channel, got {source_b.channels}")
    fa = class_factor_a or source_a.factors[0].name
    fb = class_factor_b or source_b.factors[0].name
    size = source_a.image_size
    b_images = source_b.images
    if source_b.image_size != size:
        b_images = _resize_nearest(b_images, size)
    if b_images.shape[2:] != source_a.images.shape[2:]:
        raise DataFormatError("spatial size mismatch after resize")

    rng = np.random.default_rng(seed)
    ia = rng.integers(len(source_a), size=count)
    ib = rng.integers(len(source_b), size=count)
    images = np.concatenate([source_a.images[ia], b_images[ib]], axis=1)
    return ImageDataset(
        factors=[FactorSpec("class_a", next(f.cardinality for f in source_a.factors if f.name == fa)),
                 FactorSpec("class_b", next(f.cardinality for f in source_b.factors if f.name == fb))],
        images=np.ascontiguousarray(images),
        labels={"class_a": source_a.labels[fa][ia].copy(),
                "class_b": source_b.labels[fb][ib].copy()},
        seed=seed, name="composite",
    )


# --- real-data loaders -------------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, n, what, offset):
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file while reading {what}", offset=offset + len(buf))
    return buf


def load_idx(images_path, labels_path=None) -> ImageDataset:
    """Load an IDX image file (optionally with its IDX label file)."""
    images_path = Path(images_path)
    with open(images_path, "rb") as f:
        header = _read_exact(f, 16, "IDX header", 0)
        magic, m, rows, cols = struct.unpack(">IIII", header)
        if magic != _IDX_IMAGES_MAGIC:
            raise DataFormatError(f"bad IDX image magic 0x{magic:08x}", offset=0)
        raw = _read_exact(f, m * rows * cols, "IDX pixel data", 16)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(m, 1, rows, cols)
    images = images.astype(np.float32) / 255.0

    if labels_path is not None:
        with open(labels_path, "rb") as f:
            header = _read_exact(f, 8, "IDX label header", 0)
            magic, lm = struct.unpack(">II", header)
            if magic != _IDX_LABELS_MAGIC:
                raise DataFormatError(f"bad IDX label magic 0x{magic:08x}", offset=0)
            if lm != m:
                raise DataFormatError(f"label count {lm} != image count {m}", offset=4)
            labels = np.frombuffer(_read_exact(f, lm, "IDX labels", 8), dtype=np.uint8)
        labels = labels.astype(np.int64)
    else:
        labels = np.zeros(m, dtype=np.int64)
    card = max(2, int(labels.max()) + 1)
    return ImageDataset(factors=[FactorSpec("digit", card)], images=images,
                        labels={"digit": labels}, name=images_path.stem)


def load_cifar_binary(path) -> ImageDataset:
    """Load one CIFAR-10 binary batch (1 label byte + 3072 pixel bytes/record)."""
    path = Path(path)
    record = 1 + 3072
    data = path.read_bytes()
    if len(data) == 0 or len(data) % record != 0:
        raise DataFormatError(
            f"CIFAR binary size {len(data)} is not a multiple of {record}",
            offset=len(data) - len(data) % record)
    m = len(data) // record
    arr = np.frombuffer(data, dtype=np.uint8).reshape(m, record)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"CIFAR label {labels.max()} out of range", offset=0)
    images = arr[:, 1:].reshape(m, 3, 32, 32).astype(np.float32) / 255.0
    return ImageDataset(factors=[FactorSpec("class", 10)], images=images,
                        labels={"class": labels}, name=path.stem)


# --- internal serialization --------------------------------------------------

def save_dataset(dataset: ImageDataset, directory) -> Path:
    """Persist as manifest.json + raw little-endian float32/int64 blobs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": dataset.name,
        "seed": dataset.seed,
        "count": len(dataset),
        "shape": list(dataset.images.shape[1:]),
        "factors": [{"name": f.name, "cardinality": f.cardinality} for f in dataset.factors],
        "images_file": "images.f32",
        "labels_file": "labels.i64",
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    dataset.images.astype("<f4").tofile(directory / "images.f32")
    label_mat = np.stack([dataset.labels[f.name] for f in dataset.factors], axis=1)
    label_mat.astype("<i8").tofile(directory / "labels.i64")
    return directory


def load_dataset(directory) -> ImageDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    count = manifest["count"]
    shape = tuple(manifest["shape"])
    images = np.fromfile(directory / manifest["images_file"], dtype="<f4")
    expected = count * int(np.prod(shape))
    if images.size != expected:
        raise DataFormatError(
            f"images file holds {images.size} floats, expected {expected}",
            offset=min(images.size, expected) * 4)
    factors = [FactorSpec(f["name"], f["cardinality"]) for f in manifest["factors"]]
    label_mat = np.fromfile(directory / manifest["labels_file"], dtype="<i8")
    label_mat = label_mat.reshape(count, len(factors))
    return ImageDataset(
        factors=factors,
        images=images.reshape((count,) + shape).astype(np.float32),
        labels={f.name: label_mat[:, i].copy() for i, f in enumerate(factors)},
        seed=manifest.get("seed", 0), name=manifest.get("name", directory.name),
    )
