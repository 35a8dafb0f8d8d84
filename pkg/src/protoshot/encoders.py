"""Embedding encoders: a trainable conv net and a frozen-feature linear head.

Two archetypes cover the frozen-vs-finetuned contrast: ``conv-net`` stacks
conv3x3/relu/maxpool blocks and projects to the embedding dimension, while
``frozen-embed`` applies a single trainable linear layer to precomputed
feature vectors (the features themselves are never differentiated).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError

ARCHETYPES = ("conv-net", "frozen-embed")
CHECKPOINT_VERSION = 1
_CONV_KERNEL = 3  # conv blocks are fixed 3x3, pad 1, pool 2


@dataclass
class EncoderConfig:
    archetype: str = "conv-net"
    input_channels: int = 1
    input_size: int = 64
    embed_dim: int = 64
    conv_blocks: int = 4
    channels_per_block: int = 32
    frozen_dim: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.archetype not in ARCHETYPES:
            raise ConfigError(f"unknown encoder archetype '{self.archetype}', expected one of {ARCHETYPES}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.archetype == "conv-net":
            if self.conv_blocks < 1:
                raise ConfigError(f"conv_blocks must be >= 1, got {self.conv_blocks}")
            if self.input_size % (2 ** self.conv_blocks):
                raise ConfigError(
                    f"input_size {self.input_size} not divisible by 2^{self.conv_blocks}"
                )
            if self.channels_per_block < 1:
                raise ConfigError(f"channels_per_block must be >= 1, got {self.channels_per_block}")
            if self.input_channels < 1:
                raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        else:
            if self.frozen_dim < 1:
                raise ConfigError(f"frozen_dim must be >= 1, got {self.frozen_dim}")

    @property
    def flat_dim(self) -> int:
        """Flattened feature length entering the final linear layer."""
        if self.archetype == "frozen-embed":
            return self.frozen_dim
        side = self.input_size >> self.conv_blocks
        return self.channels_per_block * side * side


class ParamSet:
    """Named tensors with a per-entry trainable flag honored by the optimizer."""

    def __init__(self):
        self._entries: dict[str, T.Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, tensor: T.Tensor, trainable: bool = True) -> None:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = trainable
        self._entries[name] = tensor
        self._trainable[name] = trainable

    def __getitem__(self, name: str) -> T.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, trainable: bool) -> None:
        self._trainable[name] = trainable
        self._entries[name].requires_grad = trainable

    def put(self, name: str, tensor: T.Tensor) -> None:
        """Replace an existing entry, keeping its trainable flag."""
        if name not in self._entries:
            raise ConfigError(f"unknown parameter name '{name}'")
        tensor.requires_grad = self._trainable[name]
        self._entries[name] = tensor

    def trainable_items(self):
        return [(n, t) for n, t in self._entries.items() if self._trainable[n]]

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self._entries[n].data = arr.copy()


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def init_params(config: EncoderConfig, seed: int) -> ParamSet:
    """Seeded Glorot-uniform weights, zero biases, in a fixed name order."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    if config.archetype == "conv-net":
        c_in = config.input_channels
        c_out = config.channels_per_block
        k = _CONV_KERNEL
        for b in range(config.conv_blocks):
            kernel = _glorot(rng, (c_out, c_in, k, k), fan_in=c_in * k * k, fan_out=c_out * k * k)
            params.add(f"block{b}.kernel", T.Tensor(kernel))
            params.add(f"block{b}.bias", T.Tensor(np.zeros(c_out, dtype=np.float32)))
            c_in = c_out
    d_in = config.flat_dim
    weight = _glorot(rng, (config.embed_dim, d_in), fan_in=d_in, fan_out=config.embed_dim)
    params.add("head.weight", T.Tensor(weight))
    params.add("head.bias", T.Tensor(np.zeros(config.embed_dim, dtype=np.float32)))
    return params


def encode_convnet(
    images: T.Tensor, params: ParamSet, config: EncoderConfig, capture: dict | None = None
) -> T.Tensor:
    """Embed a (n, C, S, S) batch through the conv blocks into (n, embed_dim).

    When ``capture`` is a dict, the post-relu activation of the last conv
    block (before its pooling) is stored under ``capture["last_conv"]``.
    """
    if config.archetype != "conv-net":
        raise ConfigError("encode_convnet requires a conv-net config")
    x = images
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != config.input_channels or x.shape[2:] != (config.input_size,) * 2:
        raise ShapeError(
            f"encode_convnet: input shape {images.shape} does not match "
            f"(n,{config.input_channels},{config.input_size},{config.input_size})"
        )
    for b in range(config.conv_blocks):
        x = T.conv2d(x, params[f"block{b}.kernel"], stride=1, padding=1)
        x = T.add(x, params[f"block{b}.bias"])
        x = T.relu(x)
        if capture is not None and b == config.conv_blocks - 1:
            capture["last_conv"] = x
        x = T.max_pool2d(x, 2)
    flat = T.reshape(x, (x.shape[0], config.flat_dim))
    return T.linear(flat, params["head.weight"], params["head.bias"])


def encode_frozen(features: T.Tensor, params: ParamSet, config: EncoderConfig) -> T.Tensor:
    """Embed precomputed (n, frozen_dim) features through the trainable linear layer."""
    if config.archetype != "frozen-embed":
        raise ConfigError("encode_frozen requires a frozen-embed config")
    x = features
    if x.ndim == 1:
        x = T.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != config.frozen_dim:
        raise ShapeError(
            f"encode_frozen: feature length {features.shape} does not match ({config.frozen_dim},)"
        )
    if x.requires_grad:
        x = x.detach()  # the frozen backbone output is data, never differentiated
    return T.linear(x, params["head.weight"], params["head.bias"])


# ---------------------------------------------------------------------------
# checkpoint container: one JSON header line, then raw little-endian float32


def write_checkpoint(path, config: EncoderConfig, seed: int, params: ParamSet) -> None:
    tensors = []
    blobs = []
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(t.shape),
                "trainable": params.is_trainable(name),
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "config": asdict(config),
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[EncoderConfig, int, ParamSet]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"unreadable checkpoint header in {path}") from exc
        version = header.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint format_version {version} in {path}")
        config = EncoderConfig(**header["config"])
        params = ParamSet()
        for meta in header["tensors"]:
            raw = fh.read(meta["nbytes"])
            if len(raw) != meta["nbytes"]:
                raise DataError(f"truncated checkpoint tensor '{meta['name']}' in {path}")
            shape = tuple(meta["shape"])
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
            params.add(meta["name"], T.Tensor(arr), trainable=bool(meta["trainable"]))
    return config, int(header["seed"]), params
