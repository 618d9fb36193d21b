"""grad_check behaviour: exactness on linear models, conv layers, kink
exclusion, and non-determinism rejection."""

import numpy as np
import pytest

from scaletree.gradcheck import grad_check
from scaletree.tensor import Tensor, conv2d, mul, relu, scalar, sum_all


def test_linear_model_is_nearly_exact():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((1, 1, 3, 3)))
    report = grad_check(lambda: sum_all(mul(w, x)), {"w": w}, step=1e-4)
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_single_conv_layer():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal((1, 2, 1, 1)), requires_grad=True)
    x = Tensor(rng.standard_normal((1, 3, 5, 5)))
    coeff = Tensor(rng.standard_normal((1, 2, 5, 5)))

    def closure():
        return sum_all(mul(conv2d(x, w, b, padding=1), coeff))

    report = grad_check(closure, {"w": w, "b": b}, step=1e-4, tolerance=1e-6)
    assert report.passed
    assert report.max_rel_err < 1e-6


def test_relu_kink_is_excluded_not_failed():
    w = scalar(0.0, requires_grad=True)  # relu input sits exactly on the kink
    c = scalar(3.0)

    def closure():
        return sum_all(mul(relu(w), c))

    report = grad_check(closure, {"w": w}, step=1e-4)
    assert report.excluded_count == 1
    assert report.passed  # excluded points do not fail the check


def test_non_deterministic_closure_rejected():
    w = scalar(1.0, requires_grad=True)
    rng = np.random.default_rng(2)

    def closure():
        return sum_all(mul(w, scalar(rng.uniform())))

    with pytest.raises(ValueError, match="deterministic"):
        grad_check(closure, {"w": w})


def test_coordinate_sampling_bounds_work():
    rng = np.random.default_rng(3)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    coeff = Tensor(rng.standard_normal((1, 2, 5, 5)))

    def closure():
        return sum_all(mul(conv2d(x, w, padding=1), coeff))

    report = grad_check(closure, {"w": w}, max_coords=5,
                        rng=np.random.default_rng(4))
    assert len(report.checks) == 5
    assert report.passed


def test_summary_mentions_result():
    w = scalar(2.0, requires_grad=True)
    report = grad_check(lambda: sum_all(mul(w, w)), {"w": w})
    text = report.summary()
    assert "PASS" in text and "relative error" in text
