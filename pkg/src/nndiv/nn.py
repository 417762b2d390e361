"""Critic networks: construction, forward pass, weight averaging, checkpoints.

The image critic is three stride-2 5x5 convolutions (base widths 64/128/256,
scaled by a channel multiplier) each followed by a Swish, then a single
fully-connected layer to one scalar per example. No normalization layers.
Vector data uses an MLP of the same flavour.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as T
from .tensor import Tensor

CNN_BASE_CHANNELS = (64, 128, 256)
CONV_KERNEL = 5
CONV_STRIDE = 2


class ConfigError(ValueError):
    """Invalid architecture or checkpoint configuration."""


@dataclass(frozen=True)
class CriticSpec:
    """Architecture of one critic: image CNN or vector MLP."""

    kind: str  # "cnn" | "mlp"
    input_shape: tuple[int, ...]  # (H, W, C) for cnn, (D,) for mlp
    channel_multiplier: float = 1.0
    mlp_hidden: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.mlp_hidden is not None:
            object.__setattr__(self, "mlp_hidden", tuple(int(d) for d in self.mlp_hidden))
        self.validate()

    def validate(self) -> None:
        if self.kind == "cnn":
            if len(self.input_shape) != 3:
                raise ConfigError(f"cnn input_shape must be (H, W, C), got {self.input_shape}")
            if any(d < 1 for d in self.input_shape):
                raise ConfigError(f"cnn input_shape has empty extent: {self.input_shape}")
            if self.mlp_hidden is not None:
                raise ConfigError("mlp_hidden is only valid for kind 'mlp'")
            if self.channel_multiplier <= 0:
                raise ConfigError(f"channel_multiplier must be positive, got {self.channel_multiplier}")
            for base in CNN_BASE_CHANNELS:
                if int(round(base * self.channel_multiplier)) < 1:
                    raise ConfigError(
                        f"channel_multiplier {self.channel_multiplier} rounds "
                        f"{base} base channels below 1")
        elif self.kind == "mlp":
            if len(self.input_shape) != 1 or self.input_shape[0] < 1:
                raise ConfigError(f"mlp input_shape must be (D,), got {self.input_shape}")
            if self.mlp_hidden is None:
                raise ConfigError("mlp requires mlp_hidden (may be empty)")
            if any(h < 1 for h in self.mlp_hidden):
                raise ConfigError(f"mlp_hidden widths must be >= 1, got {self.mlp_hidden}")
        else:
            raise ConfigError(f"unknown critic kind {self.kind!r}")

    def channels(self) -> tuple[int, ...]:
        return tuple(int(round(base * self.channel_multiplier)) for base in CNN_BASE_CHANNELS)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "channel_multiplier": self.channel_multiplier,
            "mlp_hidden": None if self.mlp_hidden is None else list(self.mlp_hidden),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CriticSpec":
        required = {"kind", "input_shape", "channel_multiplier", "mlp_hidden"}
        keys = set(obj)
        if keys != required:
            unknown = sorted(keys - required)
            missing = sorted(required - keys)
            raise ConfigError(f"critic_spec keys: unknown {unknown}, missing {missing}")
        return cls(kind=obj["kind"], input_shape=tuple(obj["input_shape"]),
                   channel_multiplier=float(obj["channel_multiplier"]),
                   mlp_hidden=None if obj["mlp_hidden"] is None else tuple(obj["mlp_hidden"]))


@dataclass
class CriticParams:
    """Named parameter tensors, in forward order."""

    spec: CriticSpec
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "CriticParams":
        """A parameter set of the same shape backed by the given arrays."""
        out = CriticParams(self.spec)
        for name, t in self.tensors.items():
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {t.data.shape}")
            out.tensors[name] = Tensor(arr, requires_grad=True)
        return out


def _he_normal(key: int, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    flat = rng.normal(key, np.arange(int(np.prod(shape)))) * std
    return flat.reshape(shape).astype(np.float32)


def conv_trunk_dims(input_shape: tuple[int, ...], multiplier: float):
    """Parameter dims of the conv stack plus its flattened output width."""
    h, w, cin = input_shape
    channels = tuple(int(round(base * multiplier)) for base in CNN_BASE_CHANNELS)
    dims: list[tuple[str, tuple[int, ...], int]] = []
    for i, cout in enumerate(channels, start=1):
        fan_in = CONV_KERNEL * CONV_KERNEL * cin
        dims.append((f"conv{i}/kernel", (CONV_KERNEL, CONV_KERNEL, cin, cout), fan_in))
        dims.append((f"conv{i}/bias", (cout,), fan_in))
        h = -(-h // CONV_STRIDE)
        w = -(-w // CONV_STRIDE)
        cin = cout
    return dims, h * w * cin


def _layer_dims(spec: CriticSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in forward order."""
    if spec.kind == "cnn":
        dims, flat = conv_trunk_dims(spec.input_shape, spec.channel_multiplier)
        dims.append(("out/weight", (flat, 1), flat))
        dims.append(("out/bias", (1,), flat))
        return dims
    dims = []
    d = spec.input_shape[0]
    for i, width in enumerate(spec.mlp_hidden, start=1):
        dims.append((f"fc{i}/weight", (d, width), d))
        dims.append((f"fc{i}/bias", (width,), d))
        d = width
    dims.append(("out/weight", (d, 1), d))
    dims.append(("out/bias", (1,), d))
    return dims


def init_named_tensors(dims, seed: int) -> dict[str, Tensor]:
    """He init for weights, zeros for biases, deterministic per (seed, name)."""
    tensors: dict[str, Tensor] = {}
    for name, shape, fan_in in dims:
        if name.endswith("/bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = _he_normal(rng.derive_key(seed, "init", name), shape, fan_in)
        tensors[name] = Tensor(data, requires_grad=True)
    return tensors


def build_critic(spec: CriticSpec, seed: int) -> CriticParams:
    """He-style initialization: N(0, sqrt(2/fan_in)) weights, zero biases.

    The final scalar layer starts at zero, so the critic's first updates are
    driven by the discrimination term alone. A randomly-signed initial output
    can otherwise get captured by the wrong-signed unit-slope well of the
    two-sided gradient penalty, which flips the sign of the whole estimate.
    """
    params = CriticParams(spec)
    params.tensors = init_named_tensors(_layer_dims(spec), seed)
    params.tensors["out/weight"].data[:] = 0.0
    return params


def _check_batch(spec: CriticSpec, batch: Tensor) -> None:
    expected = spec.input_shape
    if batch.data.ndim != len(expected) + 1 or batch.data.shape[1:] != expected:
        raise T.ShapeError(f"batch shape {batch.data.shape} does not match "
                           f"critic input {expected}")


def conv_trunk(tensors: dict[str, Tensor], batch: Tensor) -> Tensor:
    """The convolutional feature stack: conv -> bias -> swish, three times."""
    x = batch
    for i in range(1, len(CNN_BASE_CHANNELS) + 1):
        x = T.conv2d(x, tensors[f"conv{i}/kernel"], stride=CONV_STRIDE)
        x = T.add(x, tensors[f"conv{i}/bias"])
        x = T.swish(x)
    n = x.data.shape[0]
    return T.reshape(x, (n, -1))  # row-major NHWC flatten


def critic_forward(params: CriticParams, batch: Tensor | np.ndarray) -> Tensor:
    """Per-example scalar critic values, shape (N, 1)."""
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    _check_batch(params.spec, batch)
    if params.spec.kind == "cnn":
        x = conv_trunk(params.tensors, batch)
    else:
        x = batch
        for i in range(1, len(params.spec.mlp_hidden) + 1):
            x = T.matmul(x, params.tensors[f"fc{i}/weight"])
            x = T.add(x, params.tensors[f"fc{i}/bias"])
            x = T.swish(x)
    return T.add(T.matmul(x, params.tensors["out/weight"]), params.tensors["out/bias"])


@dataclass
class EmaState:
    """Exponential moving average of parameter values."""

    coefficient: float
    shadow: dict[str, np.ndarray]

    def __post_init__(self):
        if not 0.0 < self.coefficient < 1.0:
            raise ConfigError(f"ema coefficient must be in (0,1), got {self.coefficient}")

    @classmethod
    def init(cls, params: CriticParams, coefficient: float) -> "EmaState":
        # shadow starts as a copy of the live parameters
        return cls(coefficient, params.copy_arrays())


def ema_update(state: EmaState, live: CriticParams) -> EmaState:
    """shadow <- c * shadow + (1 - c) * live; never touches the live tensors."""
    c = np.float32(state.coefficient)
    one_minus = np.float32(1.0 - state.coefficient)
    for name, t in live.tensors.items():
        shadow = state.shadow[name]
        if shadow.shape != t.data.shape:
            raise ConfigError(f"ema shadow {name}: shape {shadow.shape} != {t.data.shape}")
        np.multiply(shadow, c, out=shadow)
        shadow += one_minus * t.data
    return state


# ---------------------------------------------------------------------------
# NNDW checkpoint format: magic "NNDW", version u32, tensor count u32, then
# per tensor: name length u32 + UTF-8 name, rank u32, dims u32 each,
# f32 little-endian payload. All integers little-endian.

NNDW_MAGIC = b"NNDW"
NNDW_VERSION = 1


class CheckpointError(ValueError):
    """Malformed NNDW file."""


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(NNDW_MAGIC)
        fh.write(struct.pack("<II", NNDW_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != NNDW_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {NNDW_MAGIC!r}")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header ({len(blob)} bytes)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != NNDW_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"{path}: tensor {name!r} expects {nbytes} payload bytes at "
                f"offset {offset}, file has {len(blob) - offset}")
        arrays[name] = np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").reshape(dims).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")
    return arrays


def save_params(path, params: CriticParams) -> None:
    save_checkpoint(path, {name: t.data for name, t in params.tensors.items()})


def load_params(path, spec: CriticSpec) -> CriticParams:
    arrays = load_checkpoint(path)
    template = build_critic(spec, seed=0)
    expected = set(template.tensors)
    if set(arrays) != expected:
        raise CheckpointError(f"{path}: tensor names {sorted(arrays)} != expected {sorted(expected)}")
    return template.with_arrays(arrays)
