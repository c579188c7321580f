"""Segmentation network assembly.

Encoder/decoder FCN with three additions over a plain U-Net: learnable
mixed (max/average) pooling, dense pooling connections that funnel every
encoder level down to the bottleneck resolution, and dilated convolution
blocks at the two deepest encoder levels. `ablation_unet=True` switches
all three off, leaving a plain U-Net built from the same primitives.

Channel widths double per level from `base_channels`; the bottleneck is
one doubling past the deepest encoder level. The decoder mirrors the
encoder with one stage per level: upsample, concatenate the same-level
skip, two 3x3 convolutions. A 1x1 convolution plus channel softmax
produces per-pixel class probabilities at the input resolution.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ModelConfig",
    "ParamStore",
    "mixed_pool",
    "dilated_block",
    "dense_pool_connect",
    "build_model",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"CSEGCKPT"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The defaults are the desk-scale configuration used throughout the
    test suite; clinical-scale runs raise `base_channels` and
    `image_size`. `dilation_rates` must divide the channel width at every
    level hosting a dilated block, which with power-of-two widths means
    the rate count must itself be a power of two.
    """

    depth: int = 4
    base_channels: int = 8
    in_channels: int = 3
    num_classes: int = 4
    dilation_rates: tuple[int, ...] = (1, 2, 4, 8)
    dilated_block_levels: tuple[int, ...] = (3, 4)
    dense_pooling: bool = True
    mixed_pool_alpha_learnable: bool = True
    ablation_unet: bool = False
    image_size: int = 384

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(
                f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_classes < 2:
            raise ValueError(
                f"num_classes must be >= 2, got {self.num_classes}")
        rates = tuple(self.dilation_rates)
        if not rates or rates[0] != 1 or any(
                b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(
                f"dilation_rates must be non-empty, strictly increasing and "
                f"start at 1, got {rates}")
        if not self.ablation_unet:
            levels = tuple(self.dilated_block_levels)
            if len(levels) != 2:
                raise ValueError(
                    f"dilated_block_levels must have exactly 2 members, "
                    f"got {levels}")
            if any(l < 1 or l > self.depth for l in levels):
                raise ValueError(
                    f"dilated_block_levels {levels} outside 1..{self.depth}")
            for level in levels:
                width = self.level_channels(level)
                if width % len(rates):
                    raise ValueError(
                        f"level {level} width {width} not divisible by "
                        f"{len(rates)} dilation branches")
        if self.image_size % (1 << self.depth):
            raise ValueError(
                f"image_size {self.image_size} not divisible by "
                f"2^depth = {1 << self.depth}")

    def level_channels(self, level: int) -> int:
        return self.base_channels << (level - 1)

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels << self.depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("dilation_rates", "dilated_block_levels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class ParamStore:
    """Named parameter tensors in a deterministic creation order."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None


def _he_kernel(rng: np.random.Generator, c_out: int, c_in: int,
               kh: int, kw: int) -> np.ndarray:
    fan_in = c_in * kh * kw
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kh, kw))


def build_model(config: ModelConfig, seed: int) -> ParamStore:
    """Create all parameters for the configured architecture.

    Kernels draw from N(0, sqrt(2/fan_in)), biases start at zero, and
    every pooling blend parameter starts at 0 (blend weight 0.5). The
    draw order equals registration order, so equal (config, seed) give a
    bitwise-identical store.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    store = ParamStore(config)
    L = config.depth
    rates = tuple(config.dilation_rates)

    def conv_pair(prefix: str, c_in: int, c_out: int, k: int = 3) -> None:
        store.register(f"{prefix}.kernel", _he_kernel(rng, c_out, c_in, k, k))
        store.register(f"{prefix}.bias", np.zeros(c_out))

    in_ch = config.in_channels
    for level in range(1, L + 1):
        width = config.level_channels(level)
        conv_pair(f"enc.{level}.conv1", in_ch, width)
        if not config.ablation_unet and level in config.dilated_block_levels:
            branch_ch = width // len(rates)
            for rate in rates:
                conv_pair(f"enc.{level}.dilated.r{rate}", width, branch_ch)
        else:
            conv_pair(f"enc.{level}.conv2", width, width)
        in_ch = width

    if not config.ablation_unet:
        for level in range(1, L + 1):
            store.register(f"pool.{level}.alpha_raw", np.zeros(()))
        if config.dense_pooling:
            for level in range(1, L + 1):
                for hop in range(1, L - level + 2):
                    store.register(f"dense.{level}.hop{hop}.alpha_raw",
                                   np.zeros(()))

    deepest = config.level_channels(L)
    if config.ablation_unet or not config.dense_pooling:
        bottleneck_in = deepest
    else:
        bottleneck_in = sum(config.level_channels(l)
                            for l in range(1, L + 1)) + deepest
    conv_pair("bottleneck.conv1", bottleneck_in, config.bottleneck_channels)
    conv_pair("bottleneck.conv2", config.bottleneck_channels,
              config.bottleneck_channels)

    above = config.bottleneck_channels
    for level in range(L, 0, -1):
        width = config.level_channels(level)
        conv_pair(f"dec.{level}.conv1", above + width, width)
        conv_pair(f"dec.{level}.conv2", width, width)
        above = width

    conv_pair("head", config.base_channels, config.num_classes, k=1)
    return store


def mixed_pool(x: Tensor, alpha_raw: Tensor) -> Tensor:
    """Blend of max and average pooling: sigmoid(alpha_raw) weighs the max
    half. alpha_raw=0 starts the blend at 0.5."""
    return ad.mixed_pool2(x, ad.sigmoid(alpha_raw))


def dilated_block(x: Tensor, branches: list[tuple[Tensor, Tensor]],
                  rates: tuple[int, ...]) -> Tensor:
    """Parallel 3x3 convolutions, one per dilation rate with padding equal
    to the rate (spatial size preserved), each followed by ReLU, then
    channel-concatenated in rate order."""
    outs = []
    for (kernel, bias), rate in zip(branches, rates):
        outs.append(ad.conv2d_relu(x, kernel, bias, padding=rate,
                                   dilation=rate))
    if len(outs) == 1:
        return outs[0]
    return ad.concat_channels(*outs)


def dense_pool_connect(encoder_outputs: list[Tensor],
                       hop_alphas: list[list[Tensor]],
                       standard_path: Tensor) -> Tensor:
    """Pool every encoder level down to the bottleneck resolution and
    concatenate with the standard pooled path.

    Level l (1-based, full resolution first) is reduced by L - l + 1
    successive mixed pools, each with its own blend parameter.
    """
    L = len(encoder_outputs)
    target = standard_path.data.shape[2:]
    reduced = []
    for index, feature in enumerate(encoder_outputs):
        hops = hop_alphas[index]
        cur = feature
        for alpha in hops:
            cur = mixed_pool(cur, alpha)
        if cur.data.shape[2:] != target:
            raise ValueError(
                f"dense pooling of level {index + 1} reached spatial size "
                f"{cur.data.shape[2:]}, bottleneck expects {target}; "
                f"input image size is wrong for depth {L}")
        reduced.append(cur)
    return ad.concat_channels(*reduced, standard_path)


def forward(store: ParamStore, batch: Tensor) -> Tensor:
    """Per-pixel class probabilities for an (N, in_channels, S, S) batch.

    S must be divisible by 2^depth; the output keeps the input's spatial
    size and its channel sums are 1 to within 1e-12.
    """
    config = store.config
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.data.ndim != 4:
        raise ValueError(f"expected 4-D batch, got shape {batch.data.shape}")
    n, c, h, w = batch.data.shape
    if c != config.in_channels:
        raise ValueError(
            f"batch has {c} channels, model expects {config.in_channels}")
    div = 1 << config.depth
    if h != w or h % div:
        raise ValueError(
            f"spatial size {h}x{w} must be square and divisible by "
            f"2^depth = {div}")

    L = config.depth
    unet = config.ablation_unet
    rates = tuple(config.dilation_rates)

    def conv_relu(x: Tensor, prefix: str, padding: int = 1) -> Tensor:
        return ad.conv2d_relu(x, store[f"{prefix}.kernel"],
                              store[f"{prefix}.bias"], padding=padding)

    def pool(x: Tensor, level: int) -> Tensor:
        if unet:
            return ad.max_pool2(x)
        return mixed_pool(x, store[f"pool.{level}.alpha_raw"])

    encoder_outputs: list[Tensor] = []
    cur = batch
    for level in range(1, L + 1):
        cur = conv_relu(cur, f"enc.{level}.conv1")
        if not unet and level in config.dilated_block_levels:
            branches = [(store[f"enc.{level}.dilated.r{r}.kernel"],
                         store[f"enc.{level}.dilated.r{r}.bias"])
                        for r in rates]
            cur = dilated_block(cur, branches, rates)
        else:
            cur = conv_relu(cur, f"enc.{level}.conv2")
        encoder_outputs.append(cur)
        if level < L:
            cur = pool(cur, level)

    standard = pool(encoder_outputs[-1], L)
    if unet or not config.dense_pooling:
        bottleneck_in = standard
    else:
        hop_alphas = [[store[f"dense.{level}.hop{hop}.alpha_raw"]
                       for hop in range(1, L - level + 2)]
                      for level in range(1, L + 1)]
        bottleneck_in = dense_pool_connect(encoder_outputs, hop_alphas,
                                           standard)

    cur = conv_relu(bottleneck_in, "bottleneck.conv1")
    cur = conv_relu(cur, "bottleneck.conv2")

    for level in range(L, 0, -1):
        cur = ad.upsample_nearest2(cur)
        cur = ad.concat_channels(cur, encoder_outputs[level - 1])
        cur = conv_relu(cur, f"dec.{level}.conv1")
        cur = conv_relu(cur, f"dec.{level}.conv2")

    logits = ad.conv2d(cur, store["head.kernel"], store["head.bias"])
    return ad.softmax_channels(logits)


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON manifest (config, seed, names, shapes, byte offsets)
# followed by a little-endian float64 blob.


def save_checkpoint(store: ParamStore, path, seed: int | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, tensor in store.items():
        # note: tobytes always emits C order; ascontiguousarray would
        # promote 0-d blend parameters to 1-d and corrupt their shape
        data = np.asarray(tensor.data, dtype="<f8")
        entries.append({
            "name": name,
            "shape": list(data.shape),
            "offset": offset,
        })
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = json.dumps({
        "config": store.config.to_dict(),
        "seed": seed,
        "params": entries,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ParamStore:
    """Read a checkpoint and validate it against a fresh build of its own
    config (names, order, and shapes must all agree)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        blob = fh.read()

    config = ModelConfig.from_dict(manifest["config"])
    seed = manifest["seed"]
    store = build_model(config, seed if seed is not None else 0)
    expected = {name: t.data.shape for name, t in store.items()}
    listed = {e["name"]: tuple(e["shape"]) for e in manifest["params"]}
    if set(expected) != set(listed):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise ValueError(
            f"checkpoint parameters do not match config: missing={missing} "
            f"unexpected={extra}")
    for entry in manifest["params"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if expected[name] != shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name!r}: file {shape}, "
                f"config expects {expected[name]}")
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        data = np.frombuffer(blob, dtype="<f8", count=size,
                             offset=start).reshape(shape)
        store[name].data = data.astype(np.float64).reshape(shape)
    return store
