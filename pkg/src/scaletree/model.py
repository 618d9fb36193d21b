"""Full network assembly: backbone, dense block stack, and the two heads.

The density head regresses a non-negative per-pixel density map from the
high-level features (3x3 conv, relu, 1x1 conv, relu). The confidence head
(the auxiliator) fuses low-, middle- and high-level features: the lower taps
are max-pooled down to the high-level resolution, every included tap is
channel-aligned by a 1x1 convolution, the aligned maps are summed, and a 3x3
conv, relu, 1x1 conv, sigmoid sequence turns the sum into a crowd-confidence
map. The auxiliator exists only to shape training; ``strip_auxiliator``
removes it for inference without touching the density path.

A model instance is exclusively owned while training. Frozen models may run
any number of concurrent eval forwards, each building its own record.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .enhancer import dense_stack_forward, resample_gates, stack_dense_enhancers
from .layers import Conv2d
from .tensor import Tensor, add, channel_concat, maxpool2d, no_grad, relu, sigmoid

DESK_BACKBONE = ((16, False), (16, True), (32, False), (32, True), (64, False), (64, False))
VGG10_BACKBONE = (
    (64, False), (64, True), (128, False), (128, True),
    (256, False), (256, False), (256, True), (512, False), (512, False), (512, False),
)


@dataclass
class ModelSpec:
    """Declarative description of the network.

    backbone_layers lists (out_channels, followed_by_pool) per 3x3 conv
    layer; tap indices are 1-based positions into that list. aux_levels is a
    subset of "hml" naming which feature levels feed the auxiliator; the
    empty string disables the confidence branch entirely.
    """

    backbone_layers: Tuple[Tuple[int, bool], ...] = DESK_BACKBONE
    low_tap_index: int = 3
    middle_tap_index: int = 6
    enhancer_count: int = 6
    d_channels: int = 18
    head_channels: int = 32
    in_channels: int = 1
    block_kind: str = "tree"
    leaf_assignment: str = "reverse"
    aux_levels: str = "hml"

    def __post_init__(self):
        n = len(self.backbone_layers)
        if not (1 <= self.low_tap_index < self.middle_tap_index <= n):
            raise ValueError(
                f"tap indices must satisfy 1 <= low < middle <= {n}, "
                f"got {self.low_tap_index}, {self.middle_tap_index}"
            )
        if self.enhancer_count < 0:
            raise ValueError("enhancer_count cannot be negative")
        if sorted(self.aux_levels) != sorted(set(self.aux_levels)) or set(
            self.aux_levels
        ) - {"h", "m", "l"}:
            raise ValueError(f"aux_levels must be a subset of 'hml', got {self.aux_levels!r}")
        if self.block_kind not in ("tree", "standard"):
            raise ValueError(f"block_kind must be tree or standard, got {self.block_kind!r}")

    @staticmethod
    def vgg10_shape() -> "ModelSpec":
        """Untrained ten-layer, three-pool backbone at 1/8 resolution, taps
        on the fifth and top layers. For shape checks only."""
        return ModelSpec(
            backbone_layers=VGG10_BACKBONE,
            low_tap_index=5,
            middle_tap_index=10,
            in_channels=3,
        )

    def pool_factor_at(self, layer_index: int) -> int:
        """Cumulative downsampling after the given 1-based layer."""
        f = 1
        for _, pooled in self.backbone_layers[:layer_index]:
            if pooled:
                f *= 2
        return f

    @property
    def total_pool_factor(self) -> int:
        return self.pool_factor_at(len(self.backbone_layers))


class _Auxiliator:
    """Confidence branch: align the taps, sum, then 3x3 / 1x1 / sigmoid."""

    def __init__(self, spec: ModelSpec, tap_channels: dict, tap_factors: dict,
                 rng: np.random.Generator):
        hc = spec.head_channels
        self.levels = "".join(l for l in "lmh" if l in spec.aux_levels)
        self.pool_factors = {}
        self.aligns = {}
        for level in self.levels:
            self.aligns[level] = Conv2d(tap_channels[level], hc, 1, rng=rng)
            self.pool_factors[level] = tap_factors[level]
        self.fuse = Conv2d(hc, hc, 3, rng=rng)
        self.out = Conv2d(hc, 1, 1, rng=rng)

    def forward(self, taps: dict) -> Tensor:
        aligned = []
        for level in self.levels:
            f = self.pool_factors[level]
            t = taps[level]
            if f > 1:
                t = maxpool2d(t, f, f)
            aligned.append(self.aligns[level](t))
        fused = aligned[0]
        for t in aligned[1:]:
            fused = add(fused, t)
        return sigmoid(self.out(relu(self.fuse(fused))))

    def named_parameters(self, prefix: str = "aux") -> dict:
        out = {}
        for level in self.levels:
            out.update(self.aligns[level].named_parameters(f"{prefix}.align_{level}"))
        out.update(self.fuse.named_parameters(f"{prefix}.fuse"))
        out.update(self.out.named_parameters(f"{prefix}.out"))
        return out


class ScaleTreeNet:
    """Backbone, dense enhancer stack, density head, optional auxiliator."""

    def __init__(self, spec: ModelSpec, seed: int):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.mode = "train"

        self.backbone: List[Conv2d] = []
        c = spec.in_channels
        for out_ch, _pool in spec.backbone_layers:
            self.backbone.append(Conv2d(c, out_ch, 3, rng=rng))
            c = out_ch
        backbone_out = c

        if spec.enhancer_count > 0:
            self.blocks = stack_dense_enhancers(
                spec.enhancer_count, spec.d_channels, backbone_out, rng,
                leaf_assignment=spec.leaf_assignment, kind=spec.block_kind,
            )
            high_channels = spec.d_channels
        else:
            self.blocks = []
            high_channels = backbone_out

        self.density_conv = Conv2d(high_channels, spec.head_channels, 3, rng=rng)
        self.density_out = Conv2d(spec.head_channels, 1, 1, rng=rng)

        if spec.aux_levels:
            tap_channels = {
                "l": spec.backbone_layers[spec.low_tap_index - 1][0],
                "m": spec.backbone_layers[spec.middle_tap_index - 1][0],
                "h": high_channels,
            }
            total = spec.total_pool_factor
            tap_factors = {
                "l": total // spec.pool_factor_at(spec.low_tap_index),
                "m": total // spec.pool_factor_at(spec.middle_tap_index),
                "h": 1,
            }
            self.aux: Optional[_Auxiliator] = _Auxiliator(spec, tap_channels, tap_factors, rng)
        else:
            self.aux = None

    # -- mode handling ------------------------------------------------------

    def train_mode(self):
        self.mode = "train"
        for b in self.blocks:
            b.gates.mode = "train"

    def eval_mode(self):
        self.mode = "eval"
        resample_gates(self.blocks, mode="eval")

    # -- forward ------------------------------------------------------------

    def _check_divisible(self, h: int, w: int):
        f = self.spec.total_pool_factor
        if h % f or w % f:
            raise ValueError(
                f"input {h}x{w} is not divisible by the pooling factor {f}"
            )

    def _run_trunk(self, images: Tensor):
        n, c, h, w = images.shape
        if c != self.spec.in_channels:
            raise ValueError(f"model expects {self.spec.in_channels} input channels, got {c}")
        self._check_divisible(h, w)
        taps = {}
        x = images
        for i, (conv, (_, pooled)) in enumerate(
            zip(self.backbone, self.spec.backbone_layers), start=1
        ):
            x = relu(conv(x))
            if pooled:
                x = maxpool2d(x, 2, 2)
            if i == self.spec.low_tap_index:
                taps["l"] = x
            if i == self.spec.middle_tap_index:
                taps["m"] = x
        if self.blocks:
            high = dense_stack_forward(self.blocks, x)
        else:
            high = x
        taps["h"] = high
        return taps

    def _density_from(self, high: Tensor) -> Tensor:
        return relu(self.density_out(relu(self.density_conv(high))))

    def forward(self, images: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        """Returns (density, confidence); confidence is None when the
        auxiliator is disabled."""
        taps = self._run_trunk(images)
        density = self._density_from(taps["h"])
        confidence = self.aux.forward(taps) if self.aux is not None else None
        return density, confidence

    __call__ = forward

    def predict_density(self, images: Tensor) -> Tensor:
        """Eval-mode, record-free density prediction."""
        self.eval_mode()
        with no_grad():
            taps = self._run_trunk(images)
            return self._density_from(taps["h"])

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict:
        out = {}
        for i, conv in enumerate(self.backbone, start=1):
            out.update(conv.named_parameters(f"backbone.{i}"))
        for i, block in enumerate(self.blocks, start=1):
            out.update(block.named_parameters(f"blocks.{i}"))
        out.update(self.density_conv.named_parameters("density.conv"))
        out.update(self.density_out.named_parameters("density.out"))
        if self.aux is not None:
            out.update(self.aux.named_parameters("aux"))
        return out

    def density_parameters(self) -> dict:
        """Parameters of the density path only (no auxiliator)."""
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("aux.")}


class DensityModel:
    """Inference-only view of a trained network with the auxiliator removed.

    Shares the trunk and density-head parameters with the source model, so
    its density output is identical; confidence queries are rejected.
    """

    def __init__(self, source: ScaleTreeNet):
        self._source = source
        self.spec = source.spec

    def forward(self, images: Tensor) -> Tensor:
        taps = self._source._run_trunk(images)
        return self._source._density_from(taps["h"])

    __call__ = forward

    def predict_density(self, images: Tensor) -> Tensor:
        return self._source.predict_density(images)

    def eval_mode(self):
        self._source.eval_mode()

    def confidence(self, images: Tensor):
        raise RuntimeError(
            "the auxiliator was stripped from this model; confidence maps "
            "are unavailable"
        )

    def named_parameters(self) -> dict:
        return self._source.density_parameters()


def build_model(spec: ModelSpec, seed: int) -> ScaleTreeNet:
    """Deterministic construction: the same spec and seed always produce
    bitwise-identical parameters."""
    return ScaleTreeNet(spec, seed)


def strip_auxiliator(model: ScaleTreeNet) -> DensityModel:
    return DensityModel(model)
