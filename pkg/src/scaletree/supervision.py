"""The three training losses, crowd-label derivation, and batch mixing.

The objective is an unweighted sum of three terms. Density loss: mean (over
crowd images) of the summed squared per-pixel error between predicted and
ground-truth density. Confidence loss: binary cross entropy between the
predicted confidence map and a crowd label binarised from the density ground
truth at half its per-image mean. Background loss: mean (over unlabeled pure
background images) of the summed squared confidence, driving the confidence
map toward zero where no people exist.

Prefactors follow the definitions literally: density and confidence terms
divide by (1-lambda)*N, the background term by lambda*N, where N is the full
batch size. With the default lambda = 0.125 and N = 16 those equal the
actual sub-batch sizes exactly.

All functions here are pure over their tensors and safe to call concurrently
on disjoint data; ``compose_batch`` needs exclusive ownership of its random
generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .tensor import Tensor, add, clip, log, mul, scale, square, sub, sum_all

BCE_EPS = 1e-7


@dataclass
class CrowdLabel:
    """Binary (N, 1, H, W) map: 1 marks crowd pixels, 0 background."""

    map: np.ndarray

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=np.float64)
        if self.map.ndim != 4:
            raise ValueError(f"crowd label must be 4-D, got shape {self.map.shape}")
        if not np.all((self.map == 0.0) | (self.map == 1.0)):
            raise ValueError("crowd label values must be exactly 0 or 1")


@dataclass
class MixedBatch:
    """One training batch: annotated crowd samples plus unlabeled pure
    background samples, in the lambda-determined proportion."""

    crowd: list
    background: list
    lam: float
    n: int

    def __post_init__(self):
        for s in self.background:
            if getattr(s, "points", None):
                raise ValueError("background samples must carry no annotations")
        if len(self.crowd) + len(self.background) != self.n:
            raise ValueError(
                f"batch holds {len(self.crowd)}+{len(self.background)} samples, expected {self.n}"
            )


def background_count(n: int, lam: float) -> int:
    """round(lambda*N), at least 1 whenever lambda > 0."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    if lam == 0.0:
        return 0
    return max(1, round(lam * n))


def make_crowd_label(density) -> CrowdLabel:
    """Binarise a density map at half its per-image mean.

    A pixel is crowd when its density is at least 0.5 * Mean(density), the
    mean taken over all pixels of that image. An all-zero map yields an
    all-zero label (a scene with no people has no crowd pixels).
    """
    d = density.data if isinstance(density, Tensor) else np.asarray(density, dtype=np.float64)
    if d.ndim != 4:
        raise ValueError(f"density must be 4-D, got shape {d.shape}")
    if np.any(d < 0.0):
        raise ValueError("density values must be non-negative")
    means = d.mean(axis=(1, 2, 3), keepdims=True)
    label = (d >= 0.5 * means).astype(np.float64)
    empty = (means == 0.0).reshape(-1)
    label[empty] = 0.0
    return CrowdLabel(label)


def downsample_label_max(label: CrowdLabel, factor: int) -> CrowdLabel:
    """Max-pool a binary label by an integer factor (keeps thin crowd
    regions that sum pooling would blur)."""
    if factor == 1:
        return CrowdLabel(label.map.copy())
    n, c, h, w = label.map.shape
    if h % factor or w % factor:
        raise ValueError(f"label {h}x{w} not divisible by factor {factor}")
    blocks = label.map.reshape(n, c, h // factor, factor, w // factor, factor)
    return CrowdLabel(blocks.max(axis=(3, 5)))


def _crowd_denominator(lam: float, n: int) -> float:
    denom = (1.0 - lam) * n
    if denom <= 0:
        raise ValueError(f"empty crowd sub-batch: (1-lambda)*N = {denom}")
    return denom


def loss_density(pred: Tensor, gt, lam: float, n: int) -> Tensor:
    """Summed squared error per crowd image, averaged with 1/((1-lambda)N)."""
    gt_t = gt if isinstance(gt, Tensor) else Tensor(gt)
    if pred.shape != gt_t.shape:
        raise ValueError(f"density shapes differ: {pred.shape} vs {gt_t.shape}")
    if pred.shape[0] == 0:
        raise ValueError("empty crowd sub-batch")
    denom = _crowd_denominator(lam, n)
    return scale(sum_all(square(sub(pred, gt_t))), 1.0 / denom)


def loss_confidence(pred_conf: Tensor, labels: CrowdLabel, lam: float, n: int) -> Tensor:
    """Binary cross entropy between confidence and the crowd label, summed
    per image and averaged with 1/((1-lambda)N). Predictions are clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    if pred_conf.shape != labels.map.shape:
        raise ValueError(
            f"confidence {pred_conf.shape} and label {labels.map.shape} shapes differ"
        )
    denom = _crowd_denominator(lam, n)
    p = clip(pred_conf, BCE_EPS, 1.0 - BCE_EPS)
    c = Tensor(labels.map)
    one_minus_c = Tensor(1.0 - labels.map)
    ones = Tensor(np.ones_like(labels.map))
    ll = add(mul(c, log(p)), mul(one_minus_c, log(sub(ones, p))))
    return scale(sum_all(ll), -1.0 / denom)


def loss_background(pred_background: Tensor, lam: float, n: int) -> Tensor:
    """Summed squared confidence per background image, averaged with
    1/(lambda*N). Only defined for lambda > 0."""
    if lam <= 0.0:
        raise ValueError("background loss needs lambda > 0")
    if pred_background.shape[0] == 0:
        raise ValueError("empty background sub-batch")
    denom = lam * n
    return scale(sum_all(square(pred_background)), 1.0 / denom)


def loss_total(ld: Tensor, lc: Tensor, lb: Optional[Tensor] = None) -> Tensor:
    """Plain unweighted sum of the finite loss terms. A missing background
    term (lambda = 0) contributes exactly zero."""
    terms = [("density", ld), ("confidence", lc)]
    if lb is not None:
        terms.append(("background", lb))
    for name, t in terms:
        if not np.isfinite(t.item()):
            raise FloatingPointError(f"{name} loss is not finite: {t.item()}")
    total = terms[0][1]
    for _, t in terms[1:]:
        total = add(total, t)
    return total


def compose_batch(crowd_pool: Sequence, background_pool: Sequence, n: int,
                  lam: float, rng: np.random.Generator) -> MixedBatch:
    """Draw a lambda-mixed batch: round(lambda*n) background samples
    uniformly with replacement, the remainder crowd samples, order shuffled
    within each group."""
    if not crowd_pool:
        raise ValueError("crowd pool is empty")
    n_bg = background_count(n, lam)
    if n_bg > 0 and not background_pool:
        raise ValueError("lambda > 0 but the background pool is empty")
    n_crowd = n - n_bg
    if n_crowd <= 0:
        raise ValueError(f"batch of {n} leaves no room for crowd samples at lambda={lam}")
    replace = n_crowd > len(crowd_pool)
    crowd_idx = rng.choice(len(crowd_pool), size=n_crowd, replace=replace)
    rng.shuffle(crowd_idx)
    crowd = [crowd_pool[int(i)] for i in crowd_idx]
    bg_idx = rng.choice(len(background_pool), size=n_bg, replace=True) if n_bg else []
    background = [background_pool[int(i)] for i in bg_idx]
    return MixedBatch(crowd=crowd, background=background, lam=lam, n=n)
