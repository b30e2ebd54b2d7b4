"""NIN encoder, siamese AET regression head and probe classifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadTap, ShapeMismatch
from .nn import ops
from .nn.layers import BatchNorm, ConvBnRelu, Linear, Module
from .nn.tensor import Tensor, as_tensor, no_grad

PROBE_TAP = 2
TARGET_DIM = 8


@dataclass
class NinConfig:
    """Layer plan for the Network-In-Network encoder.

    Each block is a ``k x k`` lead convolution followed by ``convs_per_block - 1``
    1x1 convolutions, all with batch-norm and ReLU. Blocks listed in
    ``downsample_after`` (1-based) end with 2x2 average pooling.
    """

    num_blocks: int = 4
    convs_per_block: int = 3
    widths: tuple = (192, 192, 192, 192)
    kernels: tuple = (5, 5, 3, 3)
    downsample_after: tuple = (1, 2)
    in_channels: int = 3
    image_size: int = 32

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.kernels = tuple(int(k) for k in self.kernels)
        self.downsample_after = tuple(int(b) for b in self.downsample_after)
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be at least 2 (block 2 is the probe tap)")
        if len(self.widths) != self.num_blocks or len(self.kernels) != self.num_blocks:
            raise ValueError("widths and kernels need one entry per block")
        if min(self.widths) <= 0 or self.convs_per_block < 1:
            raise ValueError("widths and convs_per_block must be positive")
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError("kernels must be odd to preserve spatial size")

    @property
    def feature_width(self) -> int:
        return self.widths[-1]

    def spatial_size(self, tap: int) -> int:
        size = self.image_size
        for b in range(1, tap + 1):
            if b in self.downsample_after:
                size //= 2
        return size


class Encoder(Module):
    def __init__(self, cfg: NinConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = []
        in_ch = cfg.in_channels
        for b in range(cfg.num_blocks):
            layers = []
            for i in range(cfg.convs_per_block):
                k = cfg.kernels[b] if i == 0 else 1
                layers.append(ConvBnRelu(rng, in_ch, cfg.widths[b], k, name=f"block{b + 1}.conv{i + 1}"))
                in_ch = cfg.widths[b]
            self.blocks.append(_Block(layers, downsample=(b + 1) in cfg.downsample_after))

    def __call__(self, x: Tensor, tap: int | None = None) -> Tensor:
        """NCHW feature map after block ``tap``."""
        return ops.to_nchw(self.forward_nhwc(x, tap))

    def forward_nhwc(self, x, tap: int | None = None) -> Tensor:
        """Run NCHW images through the first ``tap`` blocks; returns an NHWC map."""
        tap = self.cfg.num_blocks if tap is None else tap
        if not 1 <= tap <= self.cfg.num_blocks:
            raise BadTap(f"tap must lie in [1, {self.cfg.num_blocks}], got {tap}")
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"encoder expects (N, {self.cfg.in_channels}, H, W), got {x.shape}")
        x = ops.to_nhwc(x)
        for block in self.blocks[:tap]:
            x = block(x)
        return x


class _Block(Module):
    def __init__(self, layers, downsample):
        self.layers = layers
        self.downsample = downsample

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return ops.avg_pool2d(x, 2, channels_last=True) if self.downsample else x


def encode(e: Encoder, x, tap: int, pooled: bool = False) -> Tensor:
    """Feature map after block ``tap``; globally averaged when ``pooled``."""
    fmap = e.forward_nhwc(x, tap)
    return ops.avg_pool_global(fmap, channels_last=True) if pooled else ops.to_nchw(fmap)


class AetHead(Module):
    """Linear decoder from a concatenated feature pair to 8 transformation parameters."""

    def __init__(self, rng, feature_width: int):
        self.fc = Linear(rng, 2 * feature_width, TARGET_DIM, name="head.fc")

    def __call__(self, pair: Tensor) -> Tensor:
        return self.fc(pair)


def aet_forward(e: Encoder, d: AetHead, x, tx) -> Tensor:
    """Predict the transformation taking ``x`` to ``tx`` from their encodings.

    Both branches run through the very same encoder object.
    """
    x, tx = as_tensor(x), as_tensor(tx)
    if x.shape != tx.shape:
        raise ShapeMismatch(f"branch inputs differ: {x.shape} vs {tx.shape}")
    fx = encode(e, x, e.cfg.num_blocks, pooled=True)
    ftx = encode(e, tx, e.cfg.num_blocks, pooled=True)
    return d(ops.concat(fx, ftx, axis=1))


# ---------------------------------------------------------------------------
# probes

PROBE_KINDS = ("fc_1", "fc_2", "fc_3", "conv")


@dataclass
class ProbeSpec:
    kind: str = "fc_3"
    hidden: int = 200
    num_classes: int = 10

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"probe kind must be one of {PROBE_KINDS}, got {self.kind!r}")
        if self.hidden <= 0 or self.num_classes < 2:
            raise ValueError("hidden width must be positive and num_classes >= 2")

    @property
    def hidden_layers(self) -> int:
        return 0 if self.kind == "conv" else int(self.kind[-1]) - 1

    @property
    def needs_map(self) -> bool:
        return self.kind == "conv"


class ProbeHead(Module):
    """Classifier trained on frozen block-2 features.

    ``fc_n`` reads the globally pooled features through ``n - 1`` hidden
    layers (linear, batch-norm, ReLU); ``conv`` adds a fresh NIN block on the
    feature map, pools, and classifies linearly.
    """

    def __init__(self, spec: ProbeSpec, in_channels: int, rng, conv_width=None, conv_kernel=3, convs=3):
        self.spec = spec
        self.hidden = []
        self.conv_layers = []
        if spec.kind == "conv":
            width = conv_width or in_channels
            ch = in_channels
            for i in range(convs):
                self.conv_layers.append(ConvBnRelu(rng, ch, width, conv_kernel if i == 0 else 1,
                                                   name=f"probe.block3.conv{i + 1}"))
                ch = width
            self.out = Linear(rng, width, spec.num_classes, name="probe.out")
        else:
            width = in_channels
            for i in range(spec.hidden_layers):
                self.hidden.append(_Hidden(rng, width, spec.hidden, name=f"probe.fc{i + 1}"))
                width = spec.hidden
            self.out = Linear(rng, width, spec.num_classes, name="probe.out")

    def __call__(self, feats) -> Tensor:
        x = as_tensor(feats)
        if self.spec.kind == "conv":
            x = ops.to_nhwc(x)
            for layer in self.conv_layers:
                x = layer(x)
            x = ops.avg_pool_global(x, channels_last=True)
        else:
            for layer in self.hidden:
                x = layer(x)
        return self.out(x)


class _Hidden(Module):
    def __init__(self, rng, fan_in, width, name):
        self.fc = Linear(rng, fan_in, width, name=f"{name}.linear")
        self.bn = BatchNorm(width, name=f"{name}.bn")

    def __call__(self, x):
        return ops.relu(self.bn(self.fc(x)))


def make_probe_head(e: Encoder, spec: ProbeSpec, rng) -> ProbeHead:
    cfg = e.cfg
    conv_width = cfg.widths[PROBE_TAP] if cfg.num_blocks > PROBE_TAP else cfg.widths[PROBE_TAP - 1]
    return ProbeHead(spec, cfg.widths[PROBE_TAP - 1], rng, conv_width=conv_width,
                     convs=cfg.convs_per_block)


def probe_features(frozen: Encoder, spec: ProbeSpec, x) -> Tensor:
    """Block-2 features of a frozen encoder, computed without recording a graph."""
    if frozen.cfg.num_blocks < PROBE_TAP:
        raise BadTap("encoder has no block 2")
    if frozen.training:
        raise ValueError("probe features require the encoder in eval mode")
    with no_grad():
        return encode(frozen, x, PROBE_TAP, pooled=not spec.needs_map).detach()


def probe_forward(frozen: Encoder, spec: ProbeSpec, head: ProbeHead, x) -> Tensor:
    return head(probe_features(frozen, spec, x))
