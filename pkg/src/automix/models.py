"""Small convolutional encoder/classifier with per-stage features and EMA teacher updates.

The encoder is a plain conv -> (scale, shift) -> ReLU stack with stride in the
convolution; a per-channel learnable scale+shift stands in for normalization so
teacher and student behave identically in every mode. The head is global
average pooling followed by a linear map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, LengthError, ParameterError
from .tensor import Tensor, conv2d, matmul, no_grad, relu

ParamSet = dict[str, Tensor]

CHECKPOINT_MAGIC = b"AMXCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 1
    stage_channels: tuple[int, ...] = (4, 8, 16, 16)
    stage_strides: tuple[int, ...] = (2, 2, 2, 2)
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(self.stage_strides))
        if len(self.stage_channels) != len(self.stage_strides):
            raise ParameterError("stage_channels and stage_strides must have equal length")
        if len(self.stage_channels) < 2:
            raise ParameterError("encoder needs at least two stages")
        if any(c < 1 for c in self.stage_channels) or any(s < 1 for s in self.stage_strides):
            raise ParameterError("stage channels and strides must be positive")
        if self.input_channels < 1 or self.num_classes < 2:
            raise ParameterError("need input_channels >= 1 and num_classes >= 2")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def check_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.num_stages:
            raise ParameterError(f"feature layer {layer} outside [1, {self.num_stages}]")

    def cumulative_stride(self, layer: int) -> int:
        self.check_layer(layer)
        out = 1
        for s in self.stage_strides[:layer]:
            out *= s
        return out

    def feature_channels(self, layer: int) -> int:
        self.check_layer(layer)
        return self.stage_channels[layer - 1]


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_params(config: EncoderConfig, seed: int) -> ParamSet:
    """He fan-in initialized weights, unit scales, zero shifts/biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    c_in = config.input_channels
    for i, (c_out, _) in enumerate(zip(config.stage_channels, config.stage_strides), start=1):
        params[f"stage{i}.conv"] = Tensor(he_normal(rng, (c_out, c_in, 3, 3), c_in * 9), requires_grad=True)
        params[f"stage{i}.scale"] = Tensor(np.ones(c_out), requires_grad=True)
        params[f"stage{i}.shift"] = Tensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out
    params["head.weight"] = Tensor(he_normal(rng, (c_in, config.num_classes), c_in), requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return params


def _run_stage(params: ParamSet, x: Tensor, index: int, stride: int) -> Tensor:
    h = conv2d(x, params[f"stage{index}.conv"], stride=stride, padding=1)
    c = h.shape[1]
    scale = params[f"stage{index}.scale"].reshape(1, c, 1, 1)
    shift = params[f"stage{index}.shift"].reshape(1, c, 1, 1)
    return relu(h * scale + shift)


def forward_features(params: ParamSet, x: Tensor, layer: int, config: EncoderConfig) -> Tensor:
    """Post-activation feature map after the given stage (1-based)."""
    config.check_layer(layer)
    h = x
    for i in range(1, layer + 1):
        h = _run_stage(params, h, i, config.stage_strides[i - 1])
    return h


def forward_logits(params: ParamSet, x: Tensor, config: EncoderConfig) -> Tensor:
    """Unnormalized class scores; losses apply their own normalization."""
    h = forward_features(params, x, config.num_stages, config)
    pooled = h.mean(axis=(2, 3))
    return matmul(pooled, params["head.weight"]) + params["head.bias"]


def predict_logits(params: ParamSet, images: np.ndarray, config: EncoderConfig,
                   batch_size: int = 512) -> np.ndarray:
    """Inference-only logits over a full image array, computed off the tape."""
    chunks = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = forward_logits(params, Tensor(images[start:start + batch_size]), config)
            chunks.append(logits.data)
    return np.concatenate(chunks, axis=0)


def clone_params(src: ParamSet) -> ParamSet:
    """Deep copy, detached from any tape."""
    return {name: Tensor(t.data.copy()) for name, t in src.items()}


def ema_update(teacher: ParamSet, student: ParamSet, m: float) -> ParamSet:
    """teacher <- m * teacher + (1 - m) * student, elementwise, off the tape.

    m = 1 and m = 0 return exact copies so the fixed-point and full-copy
    contracts hold bitwise.
    """
    if not 0.0 <= m <= 1.0:
        raise ParameterError(f"EMA coefficient must lie in [0, 1], got {m}")
    if teacher.keys() != student.keys():
        raise ContractError("teacher and student parameter names differ")
    updated: ParamSet = {}
    for name, t in teacher.items():
        s = student[name]
        if t.data.shape != s.data.shape:
            raise ContractError(f"shape mismatch for {name}: {t.data.shape} vs {s.data.shape}")
        if m == 1.0:
            updated[name] = Tensor(t.data.copy())
        elif m == 0.0:
            updated[name] = Tensor(s.data.copy())
        else:
            updated[name] = Tensor(m * t.data + (1.0 - m) * s.data)
    return updated


# ---------------------------------------------------------------------------
# checkpoint container: magic + u32 version, then per-parameter records of
# u32 name length, name bytes, u32 rank, u64 extents, float64 LE values
# ---------------------------------------------------------------------------

def save_params(path, params: ParamSet) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.data.ndim))
            for extent in tensor.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise LengthError(f"checkpoint truncated while reading {what} "
                          f"(wanted {count} bytes, got {len(buf)})")
    return buf


def load_params(path, requires_grad: bool = False) -> ParamSet:
    params: ParamSet = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic at offset 0: {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise LengthError("checkpoint truncated inside a record header")
            name_len = struct.unpack("<I", head)[0]
            name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4, "rank"))[0]
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "extent"))[0] for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, count * 8, f"values of {name}")
            data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            params[name] = Tensor(data, requires_grad=requires_grad)
    return params
