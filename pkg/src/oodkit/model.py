"""The small residual CNN encoder, the shared linear head, and bit-exact
checkpoint persistence.

Each encoder block is a 3x3 convolution wrapped in a residual connection
(1x1 projection shortcut whenever channels or stride change), followed by
ReLU, so the final feature map is nonnegative everywhere. The first block of
every stage after the first downsamples with stride 2. The head applies to
any (M, C) batch of feature vectors: the pooled global vector or individual
spatial cells alike.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"OODK"
CHECKPOINT_VERSION = 1

_HP_KEYS = ("input_channels", "blocks_per_stage", "image_side", "class_count")


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 3
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    image_side: int = 32

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.blocks_per_stage < 1:
            raise ValueError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        side = self.image_side
        for _ in range(len(self.widths) - 1):
            if side % 2:
                raise ValueError(
                    f"image_side {self.image_side} not divisible by 2^{len(self.widths) - 1}"
                )
            side //= 2
        if side < 2:
            raise ValueError(
                f"feature side {side} too small; the method needs several spatial cells"
            )

    @property
    def feature_side(self):
        return self.image_side // 2 ** (len(self.widths) - 1)

    @property
    def feature_channels(self):
        return self.widths[-1]


@dataclass
class ModelState:
    """Encoder + head parameters plus the input normalization statistics."""

    config: EncoderConfig
    class_count: int
    params: dict
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    @property
    def head_weight(self):
        return self.params["head.weight"]

    @property
    def head_bias(self):
        return self.params["head.bias"]


def _block_plan(config: EncoderConfig):
    """Yield (name, in_channels, out_channels, stride) for every block in order."""
    in_ch = config.input_channels
    for s, width in enumerate(config.widths):
        for b in range(config.blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            yield f"enc.s{s}.b{b}", in_ch, width, stride
            in_ch = width


# Without normalization layers the residual stack amplifies Kaiming-sized
# activations block by block, and the resulting gradient spike kills the
# ReLUs within the first optimizer steps. Shrinking the residual-branch init
# keeps early activations near the shortcut scale, and a small head init lets
# the classifier bootstrap as a linear probe before encoder gradients grow.
_RESIDUAL_BRANCH_SCALE = 0.5
_HEAD_SCALE = 0.1


def init_model(config: EncoderConfig, class_count: int, rng: np.random.Generator) -> ModelState:
    """Fresh parameters: Kaiming-uniform fan-in weights (rescaled for the
    residual branches and the head), zero biases."""
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    params = {}

    def kaiming(shape, fan_in, scale=1.0):
        bound = scale * np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    for name, in_ch, out_ch, stride in _block_plan(config):
        params[f"{name}.conv.weight"] = kaiming(
            (out_ch, in_ch, 3, 3), in_ch * 9, scale=_RESIDUAL_BRANCH_SCALE
        )
        params[f"{name}.conv.bias"] = Tensor(np.zeros(out_ch), requires_grad=True)
        if stride != 1 or in_ch != out_ch:
            params[f"{name}.proj.weight"] = kaiming((out_ch, in_ch, 1, 1), in_ch)
            params[f"{name}.proj.bias"] = Tensor(np.zeros(out_ch), requires_grad=True)
    c = config.feature_channels
    params["head.weight"] = kaiming((class_count, c), c, scale=_HEAD_SCALE)
    params["head.bias"] = Tensor(np.zeros(class_count), requires_grad=True)
    return ModelState(config=config, class_count=class_count, params=params)


def forward_encoder(state: ModelState, batch: Tensor) -> Tensor:
    """Encode a normalized (N, 3, side, side) batch into the post-ReLU feature map."""
    cfg = state.config
    if batch.ndim != 4 or batch.shape[1] != cfg.input_channels:
        raise ValueError(
            f"forward_encoder: expected (N, {cfg.input_channels}, {cfg.image_side}, "
            f"{cfg.image_side}) input, got {tuple(batch.shape)}"
        )
    if batch.shape[2] != cfg.image_side or batch.shape[3] != cfg.image_side:
        raise ValueError(
            f"forward_encoder: input side {batch.shape[2]}x{batch.shape[3]} != "
            f"{cfg.image_side}"
        )
    h = batch
    for name, in_ch, out_ch, stride in _block_plan(cfg):
        y = autodiff.conv2d(
            h,
            state.params[f"{name}.conv.weight"],
            state.params[f"{name}.conv.bias"],
            stride=stride,
            padding=1,
        )
        if f"{name}.proj.weight" in state.params:
            shortcut = autodiff.conv2d(
                h,
                state.params[f"{name}.proj.weight"],
                state.params[f"{name}.proj.bias"],
                stride=stride,
                padding=0,
            )
        else:
            shortcut = h
        h = autodiff.relu(y + shortcut)
    return h


def classify(state: ModelState, features: Tensor) -> Tensor:
    """Raw logits of the shared head for any (M, C) batch of feature vectors."""
    c = state.config.feature_channels
    if features.ndim != 2 or features.shape[1] != c:
        raise ValueError(
            f"classify: expected (M, {c}) features, got {tuple(features.shape)}"
        )
    return autodiff.linear(features, state.head_weight, state.head_bias)


def forward_logits(state: ModelState, batch: Tensor):
    """Convenience path: encoder -> GAP -> head. Returns (feature_map, pooled, logits)."""
    fmap = forward_encoder(state, batch)
    pooled = autodiff.global_average_pool(fmap)
    return fmap, pooled, classify(state, pooled)


def normalize_images(images: np.ndarray, state: ModelState) -> np.ndarray:
    """Map [0,1] images to normalized model inputs using the stored statistics."""
    mean = state.norm_mean.reshape(1, -1, 1, 1)
    std = state.norm_std.reshape(1, -1, 1, 1)
    return ((images - mean) / std).astype(np.float32)


def _canonical_records(state: ModelState):
    """The checkpoint record list in its fixed serialization order."""
    cfg = state.config
    records = [
        ("hp.input_channels", np.asarray([cfg.input_channels], dtype=np.float32)),
        ("hp.widths", np.asarray(cfg.widths, dtype=np.float32)),
        ("hp.blocks_per_stage", np.asarray([cfg.blocks_per_stage], dtype=np.float32)),
        ("hp.image_side", np.asarray([cfg.image_side], dtype=np.float32)),
        ("hp.class_count", np.asarray([state.class_count], dtype=np.float32)),
        ("norm.mean", state.norm_mean.astype(np.float32)),
        ("norm.std", state.norm_std.astype(np.float32)),
    ]
    for name in sorted(state.params):
        records.append((name, state.params[name].data))
    return records


def save_checkpoint(state: ModelState, path) -> None:
    """Write the model to the binary checkpoint format (bit-exact round trips)."""
    records = _canonical_records(state)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(records)))
        for name, data in records:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_exact(fh, count, context):
    buf = fh.read(count)
    if len(buf) != count:
        raise CheckpointError(f"unexpected end of file while reading {context}")
    return buf


def load_checkpoint(path) -> ModelState:
    """Read a checkpoint, validating structure and reporting precise failures."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        count = struct.unpack("<Q", _read_exact(fh, 8, "record count"))[0]
        records = {}
        order = []
        for i in range(count):
            name_len = struct.unpack(
                "<I", _read_exact(fh, 4, f"name length of record {i}")
            )[0]
            name = _read_exact(fh, name_len, f"name of record {i}").decode("utf-8")
            ndim = struct.unpack("<I", _read_exact(fh, 4, f"rank of tensor '{name}'"))[0]
            dims = [
                struct.unpack("<Q", _read_exact(fh, 8, f"dims of tensor '{name}'"))[0]
                for _ in range(ndim)
            ]
            size = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(fh, size * 4, f"tensor '{name}'")
            records[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            order.append(name)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing data after the last record")

    for key in _HP_KEYS:
        if f"hp.{key}" not in records:
            raise CheckpointError(f"{path}: missing hyperparameter record 'hp.{key}'")
    if "hp.widths" not in records:
        raise CheckpointError(f"{path}: missing hyperparameter record 'hp.widths'")
    config = EncoderConfig(
        input_channels=int(records["hp.input_channels"][0]),
        widths=tuple(int(w) for w in records["hp.widths"]),
        blocks_per_stage=int(records["hp.blocks_per_stage"][0]),
        image_side=int(records["hp.image_side"][0]),
    )
    class_count = int(records["hp.class_count"][0])

    params = {}
    for name in order:
        if name.startswith(("hp.", "norm.")):
            continue
        params[name] = Tensor(records[name], requires_grad=True)
    state = ModelState(
        config=config,
        class_count=class_count,
        params=params,
        norm_mean=records.get("norm.mean", np.zeros(3, dtype=np.float32)),
        norm_std=records.get("norm.std", np.ones(3, dtype=np.float32)),
    )
    expected = {name for name, _ in _canonical_records(state)}
    actual = set(order)
    missing = expected - actual
    if missing:
        raise CheckpointError(f"{path}: missing tensor record '{sorted(missing)[0]}'")
    extra = actual - expected
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor record '{sorted(extra)[0]}'")
    return state
