"""Deterministic synthetic benchmark: colored shapes on shared procedural
textures, plus CIFAR-binary storage and training-time augmentation.

Every split draws its backgrounds from one texture pool, so background-only
OOD images look exactly like ID backgrounds. Shape silhouettes carry the
class label; background-only and novel-shape splits are the two OOD test
sets. All randomness derives from the config seed through fixed stream ids,
so regeneration is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar")
OOD_SHAPES = ("star", "hexagon")
SPLITS = ("id-train", "id-test", "ood-background", "ood-novelshape")

CIFAR_RECORD_BYTES = 3073
MANIFEST_NAME = "manifest.json"

# Stream ids for seed derivation (one per independent RNG consumer).
STREAM_TEXTURE_POOL = 0
STREAM_SPLIT_BASE = 1  # + split index
STREAM_INIT = 10
STREAM_DATA_ORDER = 11
STREAM_AUGMENT = 12

# Largest canvas fraction each shape can occupy and still fit inside the
# image with a small border (elongated shapes saturate earlier).
_MAX_FRACTION = {
    "disk": 0.50,
    "square": 0.50,
    "triangle": 0.32,
    "cross": 0.48,
    "ring": 0.46,
    "bar": 0.30,
    "star": 0.33,
    "hexagon": 0.50,
}


class DataError(Exception):
    """Malformed dataset file or inconsistent benchmark configuration."""


def derive_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent deterministic stream for a given consumer id."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


@dataclass(frozen=True)
class AugmentationPolicy:
    """Pad-and-crop plus optional flip and per-channel color jitter."""

    crop_padding: int = 4
    horizontal_flip: bool = True
    color_jitter: bool = True

    @classmethod
    def pretraining(cls):
        return cls(crop_padding=4, horizontal_flip=True, color_jitter=True)

    @classmethod
    def finetuning(cls):
        # Color jitter is dropped so background colors stay faithful while
        # locations are being classified as foreground or background.
        return cls(crop_padding=4, horizontal_flip=True, color_jitter=False)


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 7
    class_count: int = 6
    image_side: int = 32
    texture_count: int = 16
    id_train_count: int = 6000
    id_test_count: int = 1200
    ood_count: int = 1200

    def __post_init__(self):
        if not 2 <= self.class_count <= len(CLASS_SHAPES):
            raise ValueError(
                f"class_count must be in [2, {len(CLASS_SHAPES)}], got {self.class_count}"
            )
        if self.texture_count < 1:
            raise ValueError(f"texture_count must be >= 1, got {self.texture_count}")
        if self.image_side < 16:
            raise ValueError(f"image_side must be >= 16, got {self.image_side}")


@dataclass
class SplitArrays:
    """One generated split plus its per-image bookkeeping."""

    images: np.ndarray  # (N, 3, S, S) uint8
    labels: np.ndarray  # (N,) uint8
    texture_ids: np.ndarray  # (N,) int
    fg_fraction: np.ndarray  # (N,) float


# --------------------------------------------------------------------------
# Textures


def build_texture_pool(config: BenchmarkConfig):
    """Procedural texture family parameters: half oriented sinusoidal
    gratings, half bilinear value-noise fields."""
    rng = derive_rng(config.seed, STREAM_TEXTURE_POOL)
    pool = []
    for t in range(config.texture_count):
        if t % 2 == 0:
            axis = rng.uniform(-1.0, 1.0, size=3)
            axis /= max(np.linalg.norm(axis), 1e-9)
            pool.append(
                {
                    "kind": "grating",
                    "angle": float(rng.uniform(0.0, np.pi)),
                    "freq": float(rng.uniform(2.0, 8.0)),
                    "base": rng.uniform(0.3, 0.7, size=3),
                    "amplitude": float(rng.uniform(0.18, 0.32)),
                    "axis": axis,
                }
            )
        else:
            pool.append(
                {
                    "kind": "noise",
                    "grid": int(rng.choice([4, 8])),
                    "base": rng.uniform(0.3, 0.7, size=3),
                    "amplitude": float(rng.uniform(0.22, 0.38)),
                    "channel_gain": rng.uniform(0.5, 1.0, size=3),
                }
            )
    return pool


def _bilinear_upsample(grid: np.ndarray, side: int) -> np.ndarray:
    m = grid.shape[0]
    pos = np.linspace(0.0, m - 1.0, side)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, m - 1)
    frac = pos - i0
    rows = grid[i0] * (1.0 - frac)[:, None] + grid[i1] * frac[:, None]
    return rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i1] * frac[None, :]


def render_texture(spec, side: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, side, side) float image in [0, 1] from a texture family spec."""
    if spec["kind"] == "grating":
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ys, xs = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
        wave = np.sin(
            2.0 * np.pi * spec["freq"] * (xs * np.cos(spec["angle"]) + ys * np.sin(spec["angle"])) / side
            + phase
        )
        img = spec["base"][:, None, None] + spec["amplitude"] * wave[None] * spec["axis"][:, None, None]
    else:
        g = spec["grid"]
        coarse = _bilinear_upsample(rng.random((g + 1, g + 1)), side)
        fine = _bilinear_upsample(rng.random((2 * g + 1, 2 * g + 1)), side)
        fieldv = 0.7 * coarse + 0.3 * fine
        img = (
            spec["base"][:, None, None]
            + spec["amplitude"] * (fieldv[None] - 0.5) * 2.0 * spec["channel_gain"][:, None, None]
        )
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# Shapes


def _polygon_mask(vertices: np.ndarray, side: int) -> np.ndarray:
    """Even-odd rasterization of a polygon over pixel centers."""
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    inside = np.zeros((side, side), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (ys - y1) / (y2 - y1) + x1
        inside ^= crosses & (xs < x_at)
    return inside


def _regular_polygon(center, radii, angles) -> np.ndarray:
    return np.stack(
        [center[0] + radii * np.cos(angles), center[1] + radii * np.sin(angles)], axis=1
    )


def render_shape_mask(kind: str, side: int, rng: np.random.Generator):
    """Boolean foreground mask for one shape occupying 25%..max fraction of
    the canvas at a random position. Returns (mask, area_fraction_target)."""
    area_fraction = rng.uniform(0.25, _MAX_FRACTION[kind])
    area = area_fraction * side * side
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5

    def center(extent):
        ext = min(extent + 0.5, side / 2.0 - 1e-6)
        return rng.uniform(ext, side - ext), rng.uniform(ext, side - ext)

    if kind == "disk":
        r = np.sqrt(area / np.pi)
        cx, cy = center(r)
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    elif kind == "square":
        half = np.sqrt(area) / 2.0
        cx, cy = center(half)
        mask = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    elif kind == "ring":
        r_out = np.sqrt(area / (np.pi * (1.0 - 0.6 ** 2)))
        r_in = 0.6 * r_out
        cx, cy = center(r_out)
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        mask = (d2 <= r_out * r_out) & (d2 >= r_in * r_in)
    elif kind == "bar":
        w = np.sqrt(area / 3.0)
        length = 3.0 * w
        if rng.random() < 0.5:
            cx, cy = rng.uniform(length / 2, side - length / 2), rng.uniform(w / 2, side - w / 2)
            mask = (np.abs(xs - cx) <= length / 2) & (np.abs(ys - cy) <= w / 2)
        else:
            cx, cy = rng.uniform(w / 2, side - w / 2), rng.uniform(length / 2, side - length / 2)
            mask = (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= length / 2)
    elif kind == "cross":
        w = np.sqrt(area / 5.0)
        arm = 3.0 * w
        cx, cy = center(arm / 2)
        horizontal = (np.abs(xs - cx) <= arm / 2) & (np.abs(ys - cy) <= w / 2)
        vertical = (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= arm / 2)
        mask = horizontal | vertical
    elif kind == "triangle":
        # Equilateral; centroid-to-vertex distance is the rotation-safe extent.
        b = np.sqrt(4.0 * area / np.sqrt(3.0))
        circ = b / np.sqrt(3.0)
        cx, cy = center(circ)
        rot = rng.uniform(0.0, 2.0 * np.pi)
        angles = rot + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
        mask = _polygon_mask(_regular_polygon((cx, cy), circ, angles), side)
    elif kind == "hexagon":
        r = np.sqrt(2.0 * area / (3.0 * np.sqrt(3.0)))
        cx, cy = center(r)
        rot = rng.uniform(0.0, 2.0 * np.pi)
        angles = rot + np.arange(6) * np.pi / 3.0
        mask = _polygon_mask(_regular_polygon((cx, cy), r, angles), side)
    elif kind == "star":
        # Five-point star, inner radius half the outer; area = 5·R·r·sin(36°).
        r_out = np.sqrt(area / (5.0 * 0.5 * np.sin(np.pi / 5.0)))
        cx, cy = center(r_out)
        rot = rng.uniform(0.0, 2.0 * np.pi)
        angles = rot + np.arange(10) * np.pi / 5.0
        radii = np.where(np.arange(10) % 2 == 0, r_out, 0.5 * r_out)
        mask = _polygon_mask(_regular_polygon((cx, cy), radii, angles), side)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return mask, area_fraction


def _draw_fill_color(rng: np.random.Generator, texture_base: np.ndarray) -> np.ndarray:
    """A fill color with guaranteed contrast against the texture's base color."""
    for _ in range(64):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - texture_base).max() >= 0.3:
            return color
    return 1.0 - texture_base


# --------------------------------------------------------------------------
# Split generation


def generate_split(config: BenchmarkConfig, split: str, pool) -> SplitArrays:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    counts = {
        "id-train": config.id_train_count,
        "id-test": config.id_test_count,
        "ood-background": config.ood_count,
        "ood-novelshape": config.ood_count,
    }
    count = counts[split]
    rng = derive_rng(config.seed, STREAM_SPLIT_BASE + SPLITS.index(split))
    side = config.image_side

    images = np.empty((count, 3, side, side), dtype=np.uint8)
    labels = np.zeros(count, dtype=np.uint8)
    texture_ids = np.empty(count, dtype=np.int64)
    fg_fraction = np.zeros(count, dtype=np.float64)

    for i in range(count):
        texture_id = int(rng.integers(len(pool)))
        img = render_texture(pool[texture_id], side, rng)
        if split in ("id-train", "id-test"):
            label = i % config.class_count
            shape = CLASS_SHAPES[label]
            labels[i] = label
        elif split == "ood-novelshape":
            shape = OOD_SHAPES[i % len(OOD_SHAPES)]
        else:
            shape = None
        if shape is not None:
            mask, _ = render_shape_mask(shape, side, rng)
            color = _draw_fill_color(rng, pool[texture_id]["base"])
            img = img.copy()
            img[:, mask] = color[:, None]
            fg_fraction[i] = mask.mean()
        texture_ids[i] = texture_id
        images[i] = np.round(img * 255.0).astype(np.uint8)
    return SplitArrays(images=images, labels=labels, texture_ids=texture_ids, fg_fraction=fg_fraction)


def generate_benchmark(config: BenchmarkConfig, out_dir) -> dict:
    """Write all four splits plus the manifest; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = build_texture_pool(config)

    manifest = {
        "format_version": 1,
        "seed": config.seed,
        "class_count": config.class_count,
        "image_side": config.image_side,
        "texture_count": config.texture_count,
        "class_names": list(CLASS_SHAPES[: config.class_count]),
        "ood_shape_names": list(OOD_SHAPES),
        "splits": {},
        "normalization": None,
    }
    id_train = None
    for split in SPLITS:
        arrays = generate_split(config, split, pool)
        if split == "ood-background" and arrays.fg_fraction.any():
            raise DataError("ood-background split unexpectedly contains foreground pixels")
        file_name = f"{split}.bin"
        write_cifar10_binary(out_dir / file_name, arrays.images, arrays.labels)
        manifest["splits"][split] = {
            "file": file_name,
            "count": int(arrays.images.shape[0]),
            "texture_ids": sorted(int(t) for t in np.unique(arrays.texture_ids)),
        }
        if split == "id-train":
            id_train = arrays
    floats = id_train.images.astype(np.float64) / 255.0
    manifest["normalization"] = {
        "mean": [float(floats[:, c].mean()) for c in range(3)],
        "std": [float(floats[:, c].std()) for c in range(3)],
    }
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"missing dataset manifest: {path}")
    with open(path) as fh:
        return json.load(fh)


def load_split(data_dir, split: str):
    """(images float32 in [0,1] (N,3,S,S), labels (N,)) for a named split."""
    manifest = load_manifest(data_dir)
    if split not in manifest["splits"]:
        raise DataError(f"unknown split {split!r}; manifest has {sorted(manifest['splits'])}")
    path = Path(data_dir) / manifest["splits"][split]["file"]
    if not path.exists():
        raise DataError(f"missing split file: {path}")
    return read_cifar10_binary(path, image_side=manifest["image_side"])


# --------------------------------------------------------------------------
# CIFAR binary records


def write_cifar10_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Pack (N, 3, S, S) uint8 images into label-byte + channel-major records."""
    if images.dtype != np.uint8:
        raise ValueError("images must be uint8")
    n = images.shape[0]
    per_image = int(np.prod(images.shape[1:]))
    records = np.empty((n, per_image + 1), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def read_cifar10_binary(path, image_side: int = 32):
    """Parse label/pixel records; images scaled to float32 [0, 1]."""
    raw = np.fromfile(path, dtype=np.uint8)
    record = 3 * image_side * image_side + 1
    if raw.size % record:
        raise DataError(
            f"{path}: malformed CIFAR binary (length {raw.size} is not a "
            f"multiple of {record})"
        )
    n = raw.size // record
    if n == 0:
        return (
            np.zeros((0, 3, image_side, image_side), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
        )
    records = raw.reshape(n, record)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DataError(f"{path}: record {bad} has label {labels[bad]} outside [0, 10)")
    images = records[:, 1:].reshape(n, 3, image_side, image_side).astype(np.float32) / 255.0
    return images, labels


# --------------------------------------------------------------------------
# Augmentation


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad-and-crop, optional flip (p=0.5), optional per-channel
    brightness/contrast jitter of ±0.2. Draws occur in that fixed order."""
    out = image
    if policy.crop_padding > 0:
        p = policy.crop_padding
        padded = np.pad(out, ((0, 0), (p, p), (p, p)))
        dy = int(rng.integers(0, 2 * p + 1))
        dx = int(rng.integers(0, 2 * p + 1))
        side = image.shape[1]
        out = padded[:, dy : dy + side, dx : dx + side]
    if policy.horizontal_flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if policy.color_jitter:
        gain = rng.uniform(0.8, 1.2, size=3).astype(np.float32)
        offset = rng.uniform(-0.2, 0.2, size=3).astype(np.float32)
        out = np.clip(
            (out - 0.5) * gain[:, None, None] + 0.5 + offset[:, None, None], 0.0, 1.0
        )
    return np.ascontiguousarray(out, dtype=np.float32)
