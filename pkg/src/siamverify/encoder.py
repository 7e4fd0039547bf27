"""VGG-style CNN encoder written against plain numpy.

Layout is NHWC throughout. Three blocks of ``conv3x3 -> ReLU -> conv3x3 ->
ReLU -> maxpool2x2`` are followed by ``FC -> ReLU -> FC`` down to the
embedding. Every layer has a matching backward function; the encoder
backward is the exact reverse-mode derivative of the forward pass.

Functions are dtype-generic: training runs in float32 and gradient checks
run the same code in float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PARAM_MAGIC = b"SNW1"
PARAM_VERSION = 1


class ParamFormatError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_height: int = 64
    input_width: int = 64
    input_channels: int = 3
    block_channels: tuple = (32, 64, 128)
    fc1_units: int = 1024
    embedding_dim: int = 300
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if self.input_height % 8 or self.input_width % 8:
            raise ValueError("input height and width must be divisible by 8")
        if min(self.input_height, self.input_width, self.input_channels) < 1:
            raise ValueError("input dimensions must be positive")
        if len(self.block_channels) != 3 or min(self.block_channels) < 1:
            raise ValueError("block_channels must be three positive integers")
        if self.fc1_units < 1 or self.embedding_dim < 1:
            raise ValueError("fc1_units and embedding_dim must be >= 1")

    @property
    def input_shape(self) -> tuple:
        return (self.input_height, self.input_width, self.input_channels)

    @property
    def flatten_dim(self) -> int:
        return (self.input_height // 8) * (self.input_width // 8) * self.block_channels[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


@dataclass(frozen=True)
class HeadConfig:
    """Siamese head (``kind="siamese"``) or identity classifier (``kind="classifier"``)."""

    kind: str = "siamese"
    hidden_units: int = 256
    num_classes: int = 0

    def __post_init__(self):
        if self.kind == "siamese" and self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.kind == "classifier" and self.num_classes < 2:
            raise ValueError("a classifier head needs at least 2 classes")
        if self.kind not in ("siamese", "classifier"):
            raise ValueError(f"unknown head kind {self.kind!r}")


CONV_NAMES = ("conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2")


def layer_shapes(enc: EncoderConfig, head: HeadConfig | None = None) -> dict:
    """Declared parameter names and shapes, in serialization order."""
    shapes = {}
    c_in = enc.input_channels
    for block, c_out in enumerate(enc.block_channels):
        for j, name in enumerate(CONV_NAMES[2 * block: 2 * block + 2]):
            shapes[f"{name}.W"] = (3, 3, c_in if j == 0 else c_out, c_out)
            shapes[f"{name}.b"] = (c_out,)
        c_in = c_out
    shapes["fc1.W"] = (enc.flatten_dim, enc.fc1_units)
    shapes["fc1.b"] = (enc.fc1_units,)
    shapes["fc2.W"] = (enc.fc1_units, enc.embedding_dim)
    shapes["fc2.b"] = (enc.embedding_dim,)
    if head is not None and head.kind == "siamese":
        shapes["head1.W"] = (2 * enc.embedding_dim, head.hidden_units)
        shapes["head1.b"] = (head.hidden_units,)
        shapes["head2.W"] = (head.hidden_units, 1)
        shapes["head2.b"] = (1,)
    elif head is not None:
        shapes["cls.W"] = (enc.embedding_dim, head.num_classes)
        shapes["cls.b"] = (head.num_classes,)
    return shapes


@dataclass
class ModelParams:
    encoder: EncoderConfig
    head: HeadConfig | None
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.encoder, self.head, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.encoder, self.head,
                           {k: v.astype(dtype) for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def params_init(enc: EncoderConfig, head: HeadConfig | None = None, dtype=np.float32) -> ModelParams:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases.

    The classifier layer of the supervised baseline starts at zero so that
    relabelling the identities only permutes its columns.
    """
    rng = np.random.default_rng(enc.seed)
    tensors = {}
    for name, shape in layer_shapes(enc, head).items():
        if name.endswith(".b") or name.startswith("cls."):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(enc, head, tensors)


# --- layers -----------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """Patches of a 3x3 same-padded convolution, shaped (B, H, W, 3, 3, C)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv_forward(x, W, b):
    cols = _im2col(x)
    B, H, Wd = x.shape[:3]
    out = cols.reshape(B * H * Wd, -1) @ W.reshape(-1, W.shape[-1]) + b
    return out.reshape(B, H, Wd, -1), cols


def conv_backward(dout, x, W):
    """Gradients of a same-padded 3x3 convolution given its input ``x``."""
    cols = _im2col(x)
    B, H, Wd, c_out = dout.shape
    c_in = W.shape[2]
    d2 = dout.reshape(-1, c_out)
    dW = (cols.reshape(d2.shape[0], -1).T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(-1, c_out).T).reshape(B, H, Wd, 3, 3, c_in)
    dxp = np.zeros((B, H + 2, Wd + 2, c_in), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + H, j:j + Wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], dW, db


def maxpool_forward(x):
    B, H, W, C = x.shape
    win = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout, arg):
    """Routes each gradient to the first maximal element of its window."""
    B, h, w, C = dout.shape
    dwin = np.zeros((B, h, w, C, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(B, h, w, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * h, 2 * w, C)


def relu_backward(dout, pre):
    return dout * (pre > 0)


# --- encoder ----------------------------------------------------------------

def check_batch(images: np.ndarray, enc: EncoderConfig) -> None:
    if images.ndim != 4 or images.shape[1:] != enc.input_shape:
        raise ValueError(f"expected a batch of shape (B, {', '.join(map(str, enc.input_shape))}), "
                         f"got {images.shape}")


def encoder_forward(params: ModelParams, images: np.ndarray, return_cache: bool = False):
    """Embed a ``(B, H, W, C)`` batch into ``(B, embedding_dim)``."""
    check_batch(images, params.encoder)
    t = params.tensors
    h = images.astype(t["fc1.W"].dtype, copy=False)
    cache = []
    for block in range(3):
        layers = []
        for name in CONV_NAMES[2 * block: 2 * block + 2]:
            pre, _ = conv_forward(h, t[f"{name}.W"], t[f"{name}.b"])
            layers.append((name, h, pre))
            h = np.maximum(pre, 0)
        h, arg = maxpool_forward(h)
        cache.append((layers, arg))
    pooled_shape = h.shape
    flat = h.reshape(h.shape[0], -1)
    z1 = flat @ t["fc1.W"] + t["fc1.b"]
    a1 = np.maximum(z1, 0)
    emb = a1 @ t["fc2.W"] + t["fc2.b"]
    if return_cache:
        return emb, (cache, pooled_shape, flat, z1, a1)
    return emb


def encoder_backward(params: ModelParams, cache, d_emb: np.ndarray, grads: dict | None = None) -> dict:
    """Accumulate encoder parameter gradients for upstream gradient ``d_emb``."""
    t = params.tensors
    grads = {} if grads is None else grads

    def acc(name, g):
        grads[name] = grads[name] + g if name in grads else g

    blocks, pooled_shape, flat, z1, a1 = cache
    acc("fc2.W", a1.T @ d_emb)
    acc("fc2.b", d_emb.sum(axis=0))
    dz1 = relu_backward(d_emb @ t["fc2.W"].T, z1)
    acc("fc1.W", flat.T @ dz1)
    acc("fc1.b", dz1.sum(axis=0))
    dh = (dz1 @ t["fc1.W"].T).reshape(pooled_shape)
    for layers, arg in reversed(blocks):
        dh = maxpool_backward(dh, arg)
        for name, x, pre in reversed(layers):
            dh, dW, db = conv_backward(relu_backward(dh, pre), x, t[f"{name}.W"])
            acc(f"{name}.W", dW)
            acc(f"{name}.b", db)
    return grads


# --- serialization ----------------------------------------------------------

def _config_blob(params: ModelParams) -> bytes:
    head = None if params.head is None else asdict(params.head)
    return json.dumps({"encoder": params.encoder.to_dict(), "head": head}, sort_keys=True).encode()


def params_to_bytes(params: ModelParams) -> bytes:
    blob = _config_blob(params)
    parts = [PARAM_MAGIC, struct.pack("<II", PARAM_VERSION, len(blob)), blob,
             struct.pack("<I", len(params.tensors))]
    for name, shape in layer_shapes(params.encoder, params.head).items():
        arr = params.tensors[name]
        if arr.shape != shape:
            raise ValueError(f"{name}: shape {arr.shape} != declared {shape}")
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def params_save(params: ModelParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def params_load(path, expected: EncoderConfig | None = None) -> ModelParams:
    """Read an SNW1 file. With ``expected`` given, shape-relevant fields must match."""
    raw = Path(path).read_bytes()
    if raw[:4] != PARAM_MAGIC:
        raise ParamFormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, blob_len = struct.unpack_from("<II", raw, 4)
        if version != PARAM_VERSION:
            raise ParamFormatError(f"{path}: unsupported version {version}")
        pos = 12
        meta = json.loads(raw[pos:pos + blob_len])
        pos += blob_len
        enc = EncoderConfig(**meta["encoder"])
        head = None if meta["head"] is None else HeadConfig(**meta["head"])
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(raw):
                raise ParamFormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, TypeError, KeyError) as exc:
        raise ParamFormatError(f"{path}: corrupt parameter file ({exc})") from exc
    if pos != len(raw):
        raise ParamFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    declared = layer_shapes(enc, head)
    if {k: v.shape for k, v in tensors.items()} != declared:
        raise ParamFormatError(f"{path}: tensors do not match the embedded config")
    if expected is not None:
        ours, theirs = enc.to_dict(), expected.to_dict()
        ours.pop("seed"), theirs.pop("seed")
        if ours != theirs:
            diff = sorted(k for k in ours if ours[k] != theirs[k])
            raise ConfigMismatchError(f"{path}: config mismatch on {', '.join(diff)}")
    return ModelParams(enc, head, tensors)
