"""U-Net subnetworks and their recursive-refinement compositions.

The full model pairs a base encoder-decoder that maps a fundus image to
artery/vein/vessel probability maps with a second encoder-decoder that is
applied recursively to the artery/vein channels only. Ablation variants
(plain U-Net, a two-subnetwork stack without recursion, a single recursive
net fed the image, and a variant refining all three channels) share the same
building blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    max_pool2,
    relu,
    sigmoid,
    slice_channels,
    upsample2,
)

VARIANTS = ("rrwnet", "rrwnet_all", "unet_only", "wnet", "rrunet")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    base_channels: int = 64
    depth: int = 5

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.base_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")

    @property
    def divisor(self) -> int:
        """Spatial sizes must be multiples of this (one pool per level)."""
        return 2 ** (self.depth - 1)

    def level_channels(self) -> list[int]:
        """Feature widths per level: doubles down to the bottleneck."""
        return [self.base_channels * 2 ** i for i in range(self.depth)]


def conv_layer_specs(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_ch, out_ch, kernel) for every convolution, in forward order."""
    chans = config.level_channels()
    specs = []
    prev = config.in_channels
    for i in range(config.depth - 1):
        specs.append((f"enc{i}.conv0", prev, chans[i], 3))
        specs.append((f"enc{i}.conv1", chans[i], chans[i], 3))
        prev = chans[i]
    specs.append(("bottleneck.conv0", prev, chans[-1], 3))
    specs.append(("bottleneck.conv1", chans[-1], chans[-1], 3))
    for i in reversed(range(config.depth - 1)):
        specs.append((f"dec{i}.up", chans[i + 1], chans[i], 3))
        specs.append((f"dec{i}.conv0", 2 * chans[i], chans[i], 3))
        specs.append((f"dec{i}.conv1", chans[i], chans[i], 3))
    specs.append(("head", chans[0], config.out_channels, 1))
    return specs


def parameter_count(config: UNetConfig) -> int:
    return sum(cin * cout * k * k + cout for _, cin, cout, k in conv_layer_specs(config))


def init_unet_params(config: UNetConfig, rng: np.random.Generator,
                     dtype=np.float32) -> dict[str, Tensor]:
    """He fan-in normal kernels, zero biases."""
    params = {}
    for name, cin, cout, k in conv_layer_specs(config):
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return params


def unet_forward(x: Tensor, params: dict[str, Tensor], config: UNetConfig) -> Tensor:
    """Encoder-decoder forward pass ending in a sigmoid.

    Each level is two [3x3 conv -> ReLU] blocks; downsampling is 2x2 max
    pooling, upsampling is nearest-neighbor 2x followed by a 3x3 convolution,
    and skip connections concatenate encoder features into the decoder.
    """
    cin, h, w = x.shape
    if cin != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {cin}")
    d = config.divisor
    if h % d or w % d:
        raise ShapeError(
            f"spatial size {h}x{w} not divisible by {d}; pad to "
            f"{-(-h // d) * d}x{-(-w // d) * d} first")

    def block(t, name):
        t = relu(conv2d(t, params[f"{name}.conv0.w"], params[f"{name}.conv0.b"]))
        return relu(conv2d(t, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"]))

    skips = []
    t = x
    for i in range(config.depth - 1):
        t = block(t, f"enc{i}")
        skips.append(t)
        t = max_pool2(t)
    t = block(t, "bottleneck")
    for i in reversed(range(config.depth - 1)):
        t = relu(conv2d(upsample2(t), params[f"dec{i}.up.w"], params[f"dec{i}.up.b"]))
        t = concat_channels(skips[i], t)
        t = block(t, f"dec{i}")
    logits = conv2d(t, params["head.w"], params["head.b"])
    return sigmoid(logits)


class UNet:
    def __init__(self, config: UNetConfig, seed=None, dtype=np.float32, params=None):
        self.config = config
        if params is None:
            params = init_unet_params(config, np.random.default_rng(seed), dtype)
        self.params = params

    def forward(self, x: Tensor) -> Tensor:
        return unet_forward(x, self.params, self.config)


# ---------------------------------------------------------------------------
# Recursive composition


@dataclass(frozen=True)
class RRWNetConfig:
    base: UNetConfig | None
    refiner: UNetConfig | None
    k: int = 6
    variant: str = "rrwnet"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.variant == "wnet" and self.k != 1:
            raise ValueError("wnet is the k=1 configuration; got k="
                             f"{self.k}")
        if self.variant in ("rrwnet", "wnet"):
            if self.refiner is None or (self.refiner.in_channels,
                                        self.refiner.out_channels) != (2, 2):
                raise ValueError("rrwnet/wnet refiner must map 2 -> 2 channels")
        if self.variant == "rrwnet_all":
            if self.refiner is None or (self.refiner.in_channels,
                                        self.refiner.out_channels) != (3, 3):
                raise ValueError("rrwnet_all refiner must map 3 -> 3 channels")
        if self.variant == "unet_only" and self.refiner is not None:
            raise ValueError("unet_only takes no refiner")
        if self.variant == "rrunet":
            if self.base is not None:
                raise ValueError("rrunet has a single recursive net, no base")
            if self.refiner is None:
                raise ValueError("rrunet requires its recursive net config")

    @classmethod
    def create(cls, variant="rrwnet", k=6, in_channels=3, base_channels=64,
               depth=5) -> "RRWNetConfig":
        """Build a consistent config for any variant from the shared knobs."""
        if variant == "wnet":
            k = 1
        mk = lambda cin, cout: UNetConfig(cin, cout, base_channels, depth)  # noqa: E731
        if variant in ("rrwnet", "wnet"):
            return cls(mk(in_channels, 3), mk(2, 2), k, variant)
        if variant == "rrwnet_all":
            return cls(mk(in_channels, 3), mk(3, 3), k, variant)
        if variant == "unet_only":
            return cls(mk(in_channels, 3), None, 0, variant)
        if variant == "rrunet":
            return cls(None, mk(in_channels + 3, 3), k, variant)
        raise ValueError(f"unknown variant {variant!r}")


class RRWNet:
    """Base + recursive-refinement composition with variant selection.

    ``forward`` returns every stage [y_0 .. y_K]; training weights each stage,
    prediction consumes the last. For the main variant, the vessel channel of
    every stage is the very tensor produced by the base net, so it is
    bit-identical across stages and receives gradient from every stage loss.
    """

    def __init__(self, config: RRWNetConfig, seed=0, dtype=np.float32,
                 params=None):
        self.config = config
        rng = np.random.default_rng(seed)
        self.base = None
        self.refiner = None
        if params is None:
            params = {}
            if config.base is not None:
                params.update({f"base.{k}": v for k, v in
                               init_unet_params(config.base, rng, dtype).items()})
            if config.refiner is not None:
                params.update({f"refiner.{k}": v for k, v in
                               init_unet_params(config.refiner, rng, dtype).items()})
        base_params = {k[5:]: v for k, v in params.items() if k.startswith("base.")}
        ref_params = {k[8:]: v for k, v in params.items() if k.startswith("refiner.")}
        if config.base is not None:
            self.base = UNet(config.base, params=base_params)
        if config.refiner is not None:
            self.refiner = UNet(config.refiner, params=ref_params)
        self._params = params

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def refine(self, av_maps: Tensor) -> Tensor:
        """One refinement application; a pure function of the map channels."""
        if self.refiner is None:
            raise ValueError(f"variant {self.config.variant!r} has no refiner")
        want = self.refiner.config.in_channels
        if av_maps.shape[0] != want:
            raise ShapeError(
                f"refiner expects {want} map channels, got {av_maps.shape[0]}")
        return self.refiner.forward(av_maps)

    def forward(self, image: Tensor) -> list[Tensor]:
        variant = self.config.variant
        if variant == "unet_only":
            return [self.base.forward(image)]
        if variant == "rrunet":
            zeros = Tensor(np.zeros((3,) + tuple(image.shape[1:]),
                                    dtype=image.data.dtype))
            y = self.refiner.forward(concat_channels(image, zeros))
            stages = [y]
            for _ in range(self.config.k):
                y = self.refiner.forward(concat_channels(image, y))
                stages.append(y)
            return stages
        y0 = self.base.forward(image)
        stages = [y0]
        if variant == "rrwnet_all":
            y = y0
            for _ in range(self.config.k):
                y = self.refine(y)
                stages.append(y)
            return stages
        # rrwnet / wnet: refine A,V only; BV stays pinned to the base output
        bv = slice_channels(y0, 2, 3)
        av = slice_channels(y0, 0, 2)
        for _ in range(self.config.k):
            av = self.refine(av)
            stages.append(concat_channels(av, bv))
        return stages
