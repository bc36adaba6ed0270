"""Configurable encoder-decoder segmentation network and its checkpoint format.

The network maps (n, 3, h, w) images to per-pixel probabilities over the
four colony classes. Depth is the number of pooling stages; channel width
doubles at every encoder level. Each encoder/decoder block is two
conv3x3 + (optional batchnorm) + relu units; the decoder upsamples with
nearest-neighbor duplication followed by a channel-halving conv, then
concatenates the matching encoder skip. The classification head is a
conv3x3 down to 4 channels followed by a channel softmax.

Checkpoint file layout (all little-endian, bit-exact round trip):

    magic   4 bytes  b"CSEG"
    version u16      currently 1
    config  u16 depth, u16 base_channels, u8 batchnorm flag
    table   u32 tensor count, then per tensor:
              u16 name length, name (utf-8), 4 x u32 dims
              (shapes shorter than 4 dims are right-padded with 1),
              raw float32 data
    crc     u32 CRC32 of everything between the version and the CRC
"""

from __future__ import annotations

import dataclasses
import math
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Graph, Parameter, ShapeError, Tensor

CHECKPOINT_MAGIC = b"CSEG"
CHECKPOINT_VERSION = 1
ENCODER_PREFIX = "enc"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, truncation, or checksum mismatch."""


class CheckpointVersionError(CheckpointError):
    """The file was written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """The tensor table does not match the requested configuration."""


@dataclasses.dataclass(frozen=True)
class UNetConfig:
    depth: int = 2
    base_channels: int = 16
    batchnorm: bool = False
    num_classes: int = 4
    input_channels: int = 3

    def __post_init__(self):
        if self.depth not in (2, 4, 6):
            raise ValueError(f"depth must be 2, 4, or 6, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.num_classes != 4:
            raise ValueError("num_classes is fixed at 4")
        if self.input_channels != 3:
            raise ValueError("input_channels is fixed at 3")

    @property
    def size_multiple(self) -> int:
        return 2 ** self.depth


class UNetModel:
    """A built network: configuration plus the underlying layer graph."""

    LOGITS_NODE = "head.conv"

    def __init__(self, config: UNetConfig, graph: Graph):
        self.config = config
        self.graph = graph

    def forward(self, images, mode: str = "infer") -> Tensor:
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected images of shape (n, {self.config.input_channels}, h, w), "
                f"got {x.shape}"
            )
        m = self.config.size_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(
                f"input height and width must be multiples of {m} for depth "
                f"{self.config.depth}, got {x.shape[2]}x{x.shape[3]}"
            )
        return self.graph.forward({"images": x}, mode=mode)

    def backward_from_logits(self, grad_logits) -> None:
        """Push a gradient on the pre-softmax activations through the net."""
        self.graph.backward(grad_logits, at=self.LOGITS_NODE)

    def parameters(self):
        return self.graph.parameters()

    def trainable_parameters(self):
        return self.graph.trainable_parameters()

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.parameters())

    def snapshot(self):
        return self.graph.snapshot()

    def load_state(self, state) -> None:
        self.graph.load_state(state)


def _he_uniform(rng: np.random.Generator, cin: int, cout: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (cin * 9))
    return rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(np.float32)


def build_unet(config: UNetConfig, seed: int) -> UNetModel:
    """Deterministically initialize the network for (config, seed)."""
    rng = np.random.default_rng(seed)
    g = Graph(inputs=("images",))

    def conv(name: str, cin: int, cout: int, src: str, scale: float = 1.0) -> str:
        params = {
            "weight": Parameter(_he_uniform(rng, cin, cout) * np.float32(scale)),
            "bias": Parameter(np.zeros(cout, dtype=np.float32)),
        }
        return g.add(name, "conv3x3", (src,), params)

    def bn(name: str, c: int, src: str) -> str:
        params = {
            "gamma": Parameter(np.ones(c, dtype=np.float32)),
            "beta": Parameter(np.zeros(c, dtype=np.float32)),
            "running_mean": Parameter(np.zeros(c, dtype=np.float32), trainable=False),
            "running_var": Parameter(np.ones(c, dtype=np.float32), trainable=False),
        }
        return g.add(name, "batchnorm", (src,), params)

    def block(prefix: str, cin: int, cout: int, src: str) -> str:
        src = conv(f"{prefix}.conv1", cin, cout, src)
        if config.batchnorm:
            src = bn(f"{prefix}.bn1", cout, src)
        src = g.add(f"{prefix}.relu1", "relu", (src,))
        src = conv(f"{prefix}.conv2", cout, cout, src)
        if config.batchnorm:
            src = bn(f"{prefix}.bn2", cout, src)
        return g.add(f"{prefix}.relu2", "relu", (src,))

    base = config.base_channels
    cur = "images"
    cin = config.input_channels
    skips = []
    for i in range(config.depth):
        cout = base * (2 ** i)
        cur = block(f"enc{i}", cin, cout, cur)
        skips.append(cur)
        cur = g.add(f"enc{i}.pool", "maxpool2", (cur,))
        cin = cout

    cur = block("bottleneck", cin, base * (2 ** config.depth), cur)
    cin = base * (2 ** config.depth)

    for i in reversed(range(config.depth)):
        cout = base * (2 ** i)
        cur = g.add(f"dec{i}.up", "upsample2", (cur,))
        cur = conv(f"dec{i}.upconv", cin, cout, cur)
        cur = g.add(f"dec{i}.uprelu", "relu", (cur,))
        cur = g.add(f"dec{i}.cat", "concat", (cur, skips[i]))
        cur = block(f"dec{i}", 2 * cout, cout, cur)
        cin = cout

    # Down-scaled head init keeps a fresh model's predictions near uniform.
    conv("head.conv", base, config.num_classes, cur, scale=0.1)
    g.add("probs", "softmax_channels", ("head.conv",))
    return UNetModel(config, g)


def encoder_channel_widths(config: UNetConfig) -> tuple[list[int], int]:
    """(encoder widths per level, bottleneck width) implied by the config."""
    widths = [config.base_channels * (2 ** i) for i in range(config.depth)]
    return widths, config.base_channels * (2 ** config.depth)


def predict_mask(probs) -> np.ndarray:
    """Per-pixel argmax over class probabilities; ties go to the lower class id."""
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if arr.ndim != 4:
        raise ShapeError(f"expected (n, c, h, w) probabilities, got {arr.shape}")
    return arr.argmax(axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint read/write
# ---------------------------------------------------------------------------


def _padded_dims(shape) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise ValueError(f"cannot store a tensor with {len(shape)} dims")
    return tuple(list(shape) + [1] * (4 - len(shape)))


def save_weights(model: UNetModel, path) -> None:
    payload = bytearray()
    cfg = model.config
    payload += struct.pack("<HHB", cfg.depth, cfg.base_channels, int(cfg.batchnorm))
    tensors = list(model.parameters())
    payload += struct.pack("<I", len(tensors))
    for name, param in tensors:
        if not np.isfinite(param.data).all():
            raise ValueError(f"refusing to save non-finite parameter {name!r}")
        encoded = name.encode("utf-8")
        payload += struct.pack("<H", len(encoded))
        payload += encoded
        payload += struct.pack("<4I", *_padded_dims(param.shape))
        payload += np.ascontiguousarray(param.data, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(payload))
    blob = CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + bytes(payload)
    blob += struct.pack("<I", crc)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError("checkpoint is truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(
    path,
    config: Optional[UNetConfig] = None,
    *,
    encoder_only: bool = False,
    seed: int = 0,
) -> UNetModel:
    """Restore a model from a checkpoint file.

    With `encoder_only=True` only the encoder-block tensors are taken from
    the file; everything else keeps the fresh initialization for
    (config, seed). This is the hook for dropping in externally
    pre-trained encoder weights.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    payload = blob[6:-4]
    if zlib.crc32(payload) != stored_crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch (file damaged or truncated)")

    r = _Reader(payload)
    depth, base_channels, bn_flag = r.unpack("<HHB")
    try:
        file_cfg = UNetConfig(depth=depth, base_channels=base_channels, batchnorm=bool(bn_flag))
    except ValueError as exc:
        raise CheckpointShapeError(f"invalid stored configuration: {exc}") from exc
    if config is not None and config != file_cfg:
        raise CheckpointShapeError(
            f"checkpoint was written for {file_cfg}, requested {config}"
        )

    (count,) = r.unpack("<I")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dims = r.unpack("<4I")
        size = int(np.prod(dims))
        raw = r.take(size * 4)
        table[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
    if r.pos != len(payload):
        raise CorruptCheckpointError("trailing bytes after the tensor table")

    model = build_unet(file_cfg, seed)
    loaded = set()
    for name, param in model.parameters():
        if encoder_only and not name.startswith(ENCODER_PREFIX):
            continue
        if name not in table:
            raise CheckpointShapeError(f"checkpoint is missing tensor {name!r}")
        arr = table[name]
        if arr.shape != _padded_dims(param.shape):
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {arr.shape}, expected "
                f"{_padded_dims(param.shape)}"
            )
        param.data[...] = arr.reshape(param.shape)
        loaded.add(name)
    if not encoder_only:
        extra = set(table) - loaded
        if extra:
            raise CheckpointShapeError(f"checkpoint holds unknown tensors: {sorted(extra)}")
    return model
