"""Cost closed forms vs measured counts, receptive-field enumeration, and
the count-metric conventions."""

import numpy as np
import pytest

from scaletree.analysis import count_params_flops, evaluate_mae_mse, receptive_fields
from scaletree.data import SceneSpec, downsample_density, generate_scene
from scaletree.enhancer import EnhancerSpec
from scaletree.model import ModelSpec, build_model
from scaletree.tensor import Tensor


class TestCostReport:
    def test_analytic_values_d18(self):
        r = count_params_flops("tree", 18, 8, 8)
        assert r.analytic_params_tree == 1620
        assert r.analytic_params_standard == 6156
        assert r.analytic_flops_tree == 5 * 324 * 64 == 103_680

    @pytest.mark.parametrize("d", [9, 18, 36])
    def test_measured_matches_analytic_exactly(self, d):
        tree = count_params_flops("tree", d, 8, 8)
        std = count_params_flops("standard", d, 8, 8)
        assert tree.measured_params_bias_free == tree.analytic_params_tree
        assert std.measured_params_bias_free == std.analytic_params_standard

    @pytest.mark.parametrize("d", [9, 18])
    def test_instrumented_macs_match_closed_form(self, d):
        tree = count_params_flops("tree", d, 8, 8)
        std = count_params_flops("standard", d, 8, 8)
        assert tree.measured_macs == tree.analytic_flops_tree
        assert std.measured_macs == std.analytic_flops_standard

    def test_bias_counts_exceed_bias_free(self):
        r = count_params_flops("tree", 18, 8, 8)
        # 13 convs with c_out summing to D + 3*(D/3) + 9*(D/9) = 3D
        assert r.measured_params_with_bias == r.measured_params_bias_free + 3 * 18

    def test_ratio(self):
        r = count_params_flops("tree", 18, 8, 8)
        assert abs(r.params_ratio - 5 / 19) < 1e-12

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError, match="block_kind"):
            count_params_flops("huge", 18, 8, 8)

    def test_report_lines_mention_key_figures(self):
        r = count_params_flops("tree", 18, 8, 8)
        text = "\n".join(r.lines())
        assert "1620" in text and "max 17" in text


class TestReceptiveFields:
    def test_reverse_assignment_multiset(self):
        rf = receptive_fields(EnhancerSpec(18, leaf_assignment="reverse"))
        assert len(rf) == 9
        sizes = sorted(r for _, _, r in rf)
        assert sizes == [9, 11, 11, 13, 13, 13, 15, 15, 17]
        assert max(sizes) == 17

    def test_forward_assignment_max(self):
        rf = receptive_fields(EnhancerSpec(18, leaf_assignment="forward"))
        assert max(r for _, _, r in rf) == 21

    def test_smallest_path(self):
        rf = receptive_fields(EnhancerSpec(9, leaf_assignment="forward"))
        assert (1, 1, 5) in rf


class _OracleModel:
    """Stub that predicts the stored downsampled ground truth exactly."""

    def __init__(self, factor):
        self.factor = factor
        self.lookup = {}

    def remember(self, sample):
        key = sample.image.tobytes()
        gt = sample.density_gt if sample.density_gt is not None else np.zeros(sample.image.shape[1:])
        self.lookup[key] = downsample_density(gt, self.factor)

    def eval_mode(self):
        pass

    def predict_density(self, images):
        key = np.ascontiguousarray(images.data[0]).tobytes()
        return Tensor(self.lookup[key][np.newaxis, np.newaxis])


class TestMetrics:
    def test_perfect_predictions_zero(self):
        samples = [generate_scene(SceneSpec(count_range=(3, 9), seed=s)) for s in range(5)]
        oracle = _OracleModel(factor=4)
        for s in samples:
            oracle.remember(s)
        m = evaluate_mae_mse(oracle, samples)
        assert m.mae < 1e-6 and m.mse < 1e-6

    def test_hand_counts(self):
        class Fixed:
            def __init__(self):
                self.queue = [10.0, 20.0]

            def eval_mode(self):
                pass

            def predict_density(self, images):
                v = self.queue.pop(0)
                return Tensor(np.full((1, 1, 1, 1), v))

        samples = [
            generate_scene(SceneSpec(count_range=(12, 12), seed=1)),
            generate_scene(SceneSpec(count_range=(16, 16), seed=2)),
        ]
        m = evaluate_mae_mse(Fixed(), samples)
        assert abs(m.mae - 3.0) < 1e-12
        assert abs(m.mse - np.sqrt(10.0)) < 1e-12

    def test_single_image_mae_equals_mse(self):
        sample = generate_scene(SceneSpec(count_range=(5, 5), seed=3))
        model = build_model(
            ModelSpec(backbone_layers=((4, True), (8, True)), low_tap_index=1,
                      middle_tap_index=2, enhancer_count=1, d_channels=9,
                      head_channels=4),
            seed=0,
        )
        m = evaluate_mae_mse(model, [sample])
        assert abs(m.mae - m.mse) < 1e-12

    def test_mae_never_exceeds_mse(self):
        samples = [generate_scene(SceneSpec(count_range=(2, 14), seed=s)) for s in range(6)]
        model = build_model(
            ModelSpec(backbone_layers=((4, True), (8, True)), low_tap_index=1,
                      middle_tap_index=2, enhancer_count=1, d_channels=9,
                      head_channels=4),
            seed=1,
        )
        m = evaluate_mae_mse(model, samples)
        assert m.mae <= m.mse + 1e-12
        assert m.mae >= 0.0

    def test_empty_samples_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            evaluate_mae_mse(_OracleModel(4), [])
