"""The scale-tree diversity enhancer and its dense-connected stack.

An enhancer block is a depth-2, degree-3 tree of convolutions. A 1x1
convolution first compresses the input to D channels (the root). The root is
split into three groups of D/3 channels, each transformed by a 3x3
convolution at dilation 1, 2 or 3 (the children). The three child streams,
ordered small-to-large by receptive field, then exchange information through
stochastic convex gates. Each mixed child is split again into three groups of
D/9 channels and refined by a 3x3 convolution whose dilation comes from the
leaf schedule, and the nine leaves are concatenated back into a D-channel
output. Every path from root to leaf sees a different composition of
dilations, so one block emits nine receptive-field scales.

The leaf schedule uses the multiset {1, 2, 3, 3, 4, 5, 5, 6, 7}. With the
default "reverse" assignment the widest child (dilation 3) owns the smallest
leaf dilations, which caps the composed receptive field at 17x17; the
"forward" assignment attaches the listed order directly and tops out at
21x21. Both are constructible, "reverse" is the default.

Blocks are stacked densely: block k consumes the channel concatenation of
the backbone output and the outputs of blocks 1..k-1, and its 1x1 root
convolution absorbs the growing width.

Gate resampling must not run concurrently with a forward pass; a frozen
block may be shared read-only across evaluation threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .layers import Conv2d
from .tensor import Tensor, affine_mix, channel_concat, channel_split, relu

CHILD_DILATIONS = (1, 2, 3)
LEAF_DILATION_MULTISET = (1, 2, 3, 3, 4, 5, 5, 6, 7)
LEAF_ASSIGNMENTS = {
    "forward": ((1, 2, 3), (3, 4, 5), (5, 6, 7)),
    "reverse": ((5, 6, 7), (3, 4, 5), (1, 2, 3)),
}


@dataclass
class EnhancerSpec:
    """Shape of one scale-tree block: root width and dilation schedule."""

    d_channels: int
    leaf_assignment: str = "reverse"
    child_dilations: Tuple[int, int, int] = CHILD_DILATIONS
    leaf_dilations_by_child: Optional[Tuple[Tuple[int, ...], ...]] = None

    def __post_init__(self):
        if self.d_channels <= 0 or self.d_channels % 9 != 0:
            raise ValueError(
                f"d_channels must be a positive multiple of 9, got {self.d_channels}"
            )
        if self.leaf_dilations_by_child is None:
            if self.leaf_assignment not in LEAF_ASSIGNMENTS:
                raise ValueError(
                    f"leaf_assignment must be one of {sorted(LEAF_ASSIGNMENTS)}, "
                    f"got {self.leaf_assignment!r}"
                )
            self.leaf_dilations_by_child = LEAF_ASSIGNMENTS[self.leaf_assignment]
        flat = tuple(d for leafs in self.leaf_dilations_by_child for d in leafs)
        if tuple(sorted(flat)) != LEAF_DILATION_MULTISET:
            raise ValueError(
                f"leaf dilations {flat} are not the multiset {LEAF_DILATION_MULTISET}"
            )
        if len(self.child_dilations) != 3 or len(self.leaf_dilations_by_child) != 3:
            raise ValueError("the tree has exactly three children")

    @property
    def path_count(self) -> int:
        return sum(len(leafs) for leafs in self.leaf_dilations_by_child)


@dataclass
class CrossScaleGates:
    """Convex mixing weights between adjacent child scales.

    In eval mode the effective gates are pinned to exactly 0.5 regardless of
    the stored values; in train mode the stored values (resampled once per
    epoch) are used.
    """

    alpha: float = 0.5
    beta: float = 0.5
    mode: str = "eval"

    def __post_init__(self):
        self._validate()

    def _validate(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"gates must lie in [0, 1], got {self.alpha}, {self.beta}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"gate mode must be train or eval, got {self.mode!r}")

    def effective(self) -> Tuple[float, float]:
        if self.mode == "eval":
            return 0.5, 0.5
        return self.alpha, self.beta


def cross_scale_mix(s1: Tensor, s2: Tensor, s3: Tensor,
                    gates: CrossScaleGates) -> Tuple[Tensor, Tensor, Tensor]:
    """Recursive refinement across the three child scales.

    The smallest scale passes through unchanged; each larger scale is a
    convex blend of the previous refined stream and its own:
    s1_hat = s1, s2_hat = a*s1_hat + (1-a)*s2, s3_hat = b*s2_hat + (1-b)*s3.
    """
    alpha, beta = gates.effective()
    s1_hat = s1
    s2_hat = affine_mix(s1_hat, s2, alpha)
    s3_hat = affine_mix(s2_hat, s3, beta)
    return s1_hat, s2_hat, s3_hat


class EnhancerBlock:
    """One scale-tree block: 1x1 root, three dilated children, nine leaves."""

    def __init__(self, spec: EnhancerSpec, c_in: int, rng: np.random.Generator):
        if c_in < 1:
            raise ValueError(f"c_in must be positive, got {c_in}")
        d = spec.d_channels
        self.spec = spec
        self.c_in = c_in
        self.t0 = Conv2d(c_in, d, 1, rng=rng)
        self.child_convs = [
            Conv2d(d // 3, d // 3, 3, rng=rng, dilation=di)
            for di in spec.child_dilations
        ]
        self.leaf_convs = [
            [Conv2d(d // 9, d // 9, 3, rng=rng, dilation=dj) for dj in leafs]
            for leafs in spec.leaf_dilations_by_child
        ]
        self.gates = CrossScaleGates()

    @property
    def out_channels(self) -> int:
        return self.spec.d_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ValueError(
                f"block expects {self.c_in} input channels, got {x.shape[1]}"
            )
        d = self.spec.d_channels
        root = relu(self.t0(x))
        children = channel_split(root, [d // 3] * 3)
        children = [relu(conv(c)) for conv, c in zip(self.child_convs, children)]
        mixed = cross_scale_mix(*children, self.gates)
        leaves = []
        for child, convs in zip(mixed, self.leaf_convs):
            subs = channel_split(child, [d // 9] * 3)
            leaves.extend(relu(conv(s)) for conv, s in zip(convs, subs))
        return channel_concat(leaves)

    __call__ = forward

    def _conv_layers(self):
        yield "t0", self.t0
        for i, conv in enumerate(self.child_convs):
            yield f"child{i}", conv
        for i, convs in enumerate(self.leaf_convs):
            for j, conv in enumerate(convs):
                yield f"leaf{i}{j}", conv

    def named_parameters(self, prefix: str = "enhancer") -> dict:
        out = {}
        for name, conv in self._conv_layers():
            out.update(conv.named_parameters(f"{prefix}.{name}"))
        return out

    def parameter_count(self, include_bias: bool = True) -> int:
        return sum(c.parameter_count(include_bias) for _, c in self._conv_layers())


class StandardBlock:
    """Plain dilated block of matching depth: 1x1 compress plus two dense
    3x3 convolutions at a single dilation. The comparison baseline for the
    tree block."""

    def __init__(self, d_channels: int, c_in: int, rng: np.random.Generator,
                 dilation: int = 2):
        if d_channels <= 0:
            raise ValueError(f"d_channels must be positive, got {d_channels}")
        self.d_channels = d_channels
        self.c_in = c_in
        self.compress = Conv2d(c_in, d_channels, 1, rng=rng)
        self.conv_a = Conv2d(d_channels, d_channels, 3, rng=rng, dilation=dilation)
        self.conv_b = Conv2d(d_channels, d_channels, 3, rng=rng, dilation=dilation)
        self.gates = CrossScaleGates()  # inert; keeps the stack interface uniform

    @property
    def out_channels(self) -> int:
        return self.d_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ValueError(
                f"block expects {self.c_in} input channels, got {x.shape[1]}"
            )
        h = relu(self.compress(x))
        h = relu(self.conv_a(h))
        return relu(self.conv_b(h))

    __call__ = forward

    def _conv_layers(self):
        yield "compress", self.compress
        yield "conv_a", self.conv_a
        yield "conv_b", self.conv_b

    def named_parameters(self, prefix: str = "block") -> dict:
        out = {}
        for name, conv in self._conv_layers():
            out.update(conv.named_parameters(f"{prefix}.{name}"))
        return out

    def parameter_count(self, include_bias: bool = True) -> int:
        return sum(c.parameter_count(include_bias) for _, c in self._conv_layers())


def build_enhancer(spec: EnhancerSpec, c_in: int, seed) -> EnhancerBlock:
    """Construct one block with He-initialised convolutions from a seed (or
    an existing Generator)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return EnhancerBlock(spec, c_in, rng)


def enhancer_forward(block: EnhancerBlock, x: Tensor) -> Tensor:
    return block.forward(x)


def resample_gates(blocks: Sequence, rng: Optional[np.random.Generator] = None,
                   mode: str = "train") -> None:
    """Overwrite every block's gates with fresh uniform draws (train mode) or
    pin them to 0.5 (eval mode)."""
    if mode == "eval":
        for b in blocks:
            b.gates.alpha = 0.5
            b.gates.beta = 0.5
            b.gates.mode = "eval"
        return
    if mode != "train":
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if rng is None:
        raise ValueError("train-mode resampling needs a random generator")
    for b in blocks:
        b.gates.alpha = float(rng.uniform())
        b.gates.beta = float(rng.uniform())
        b.gates.mode = "train"


def stack_dense_enhancers(count: int, d_channels: int, backbone_out_channels: int,
                          seed, *, leaf_assignment: str = "reverse",
                          kind: str = "tree") -> List:
    """Build a densely connected stack: block k consumes the concatenation of
    the backbone output and the outputs of blocks 1..k-1."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    blocks = []
    for k in range(count):
        c_in = backbone_out_channels + k * d_channels
        if kind == "tree":
            spec = EnhancerSpec(d_channels, leaf_assignment=leaf_assignment)
            blocks.append(EnhancerBlock(spec, c_in, rng))
        elif kind == "standard":
            blocks.append(StandardBlock(d_channels, c_in, rng))
        else:
            raise ValueError(f"kind must be tree or standard, got {kind!r}")
    return blocks


def dense_stack_forward(blocks: Sequence, backbone_out: Tensor) -> Tensor:
    """Run the dense stack; returns the final block's output."""
    feats = [backbone_out]
    out = backbone_out
    for block in blocks:
        x = feats[0] if len(feats) == 1 else channel_concat(feats)
        out = block(x)
        feats.append(out)
    return out
