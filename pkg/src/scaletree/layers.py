"""Convolution layer wrapper: parameters plus the call that applies them."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, same_padding


class Conv2d:
    """Square-kernel convolution at stride 1 with He fan-in initialisation.

    Padding defaults to "same" so spatial resolution is preserved; biases
    start at zero.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, *,
                 rng: np.random.Generator, dilation: int = 1, groups: int = 1,
                 bias: bool = True, padding: int = None):
        if c_in % groups != 0 or c_out % groups != 0:
            raise ValueError(
                f"channels ({c_in} -> {c_out}) must be divisible by groups {groups}"
            )
        fan_in = (c_in // groups) * kernel * kernel
        w = rng.standard_normal((c_out, c_in // groups, kernel, kernel))
        w *= np.sqrt(2.0 / fan_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True) if bias else None
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.dilation = dilation
        self.groups = groups
        self.padding = same_padding(kernel, dilation) if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, dilation=self.dilation,
                      groups=self.groups, padding=self.padding)

    def named_parameters(self, prefix: str) -> dict:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out

    def parameter_count(self, include_bias: bool = True) -> int:
        total = self.weight.data.size
        if include_bias and self.bias is not None:
            total += self.c_out
        return total
