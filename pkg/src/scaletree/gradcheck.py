"""Finite-difference verification of reverse-mode gradients.

``grad_check`` evaluates a deterministic scalar closure, runs one backward
pass, then perturbs sampled parameter coordinates one at a time and compares
the analytic gradient against central differences. A coordinate whose two
one-sided differences disagree strongly (a relu sitting on its kink, for
example) is reported as excluded rather than failed, because no finite
difference is meaningful there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .tensor import Tensor, backward, zero_grads


@dataclass
class CoordCheck:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float
    excluded: bool = False


@dataclass
class GradCheckReport:
    checks: List[CoordCheck] = field(default_factory=list)
    tolerance: float = 1e-4
    step: float = 1e-4

    @property
    def included(self) -> List[CoordCheck]:
        return [c for c in self.checks if not c.excluded]

    @property
    def excluded_count(self) -> int:
        return sum(1 for c in self.checks if c.excluded)

    @property
    def max_rel_err(self) -> float:
        inc = self.included
        return max((c.rel_err for c in inc), default=0.0)

    @property
    def mean_rel_err(self) -> float:
        inc = self.included
        return sum(c.rel_err for c in inc) / len(inc) if inc else 0.0

    @property
    def passed(self) -> bool:
        return all(c.rel_err < self.tolerance for c in self.included)

    def summary(self) -> str:
        lines = [
            f"gradient check: {len(self.checks)} coordinates, "
            f"{self.excluded_count} excluded (non-smooth)",
            f"  step {self.step:g}, tolerance {self.tolerance:g}",
            f"  max relative error  {self.max_rel_err:.3e}",
            f"  mean relative error {self.mean_rel_err:.3e}",
            f"  result: {'PASS' if self.passed else 'FAIL'}",
        ]
        for c in self.checks:
            if c.excluded or c.rel_err >= self.tolerance:
                tag = "excluded" if c.excluded else "FAIL"
                lines.append(
                    f"    [{tag}] {c.param}{list(c.index)}: "
                    f"analytic {c.analytic:.6e} vs numeric {c.numeric:.6e}"
                )
        return "\n".join(lines)


def grad_check(
    model_closure: Callable[[], Tensor],
    params: Dict[str, Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    *,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    rel_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``model_closure`` against central
    finite differences.

    params maps names to leaf tensors; the closure must re-run the forward
    pass from their current data on every call. When ``max_coords`` is given,
    that many coordinates are sampled uniformly across all parameter entries
    (otherwise every coordinate is checked). Relative error is
    |a - n| / max(|a|, |n|, rel_floor).
    """
    named = list(params.items())
    if not named:
        raise ValueError("grad_check needs at least one parameter")

    f_a = model_closure().item()
    f_b = model_closure().item()
    if f_a != f_b:
        raise ValueError(
            "closure is not deterministic: two forward evaluations disagree "
            f"({f_a!r} vs {f_b!r}); freeze stochastic gates before checking"
        )

    tensors = [t for _, t in named]
    zero_grads(tensors)
    loss = model_closure()
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in named
    }

    coords = [
        (name, idx) for name, t in named for idx in np.ndindex(t.data.shape)
    ]
    if max_coords is not None and max_coords < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in chosen]

    by_name = dict(named)
    report = GradCheckReport(tolerance=tolerance, step=step)
    f0 = f_a
    for name, idx in coords:
        t = by_name[name]
        orig = t.data[idx]
        t.data[idx] = orig + step
        f_plus = model_closure().item()
        t.data[idx] = orig - step
        f_minus = model_closure().item()
        t.data[idx] = orig

        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[name][idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
        excluded = False
        if rel >= tolerance:
            # one-sided slopes disagreeing marks a kink, not a gradient bug
            right = (f_plus - f0) / step
            left = (f0 - f_minus) / step
            if abs(right - left) > 0.25 * (abs(right) + abs(left)) + rel_floor:
                excluded = True
        report.checks.append(
            CoordCheck(name, idx, a, numeric, rel, excluded=excluded)
        )
    return report
