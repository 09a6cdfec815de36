import math

from types import SimpleNamespace
from unittest import TestCase

import numpy as np

from pymemrecon.core.grids import (
    ConfidenceMap,
    Pointmap,
)
from pymemrecon.core.memory import MemoryConfig
from pymemrecon.core.objective import (
    CurriculumConfig,
    LossConfig,
    active_ratio,
    curriculum_interval,
    loss_conf,
    loss_scale,
    normalize_pointmaps,
    supervision_pairs,
    total_loss,
)
from pymemrecon.core.scenes import sample_clip
from pymemrecon.core.tensor import (
    Tensor,
    no_grad,
)
from pymemrecon.core.training import run_clip
from pymemrecon.exceptions import (
    DegenerateInputError,
    EmptyGroundTruthError,
)

from tests.helpers import (
    micro_model,
    micro_scene,
)


def random_pointmap(rng, shape=(4, 5), valid=None):
    valid = np.ones(shape, dtype=bool) if valid is None else valid
    return Pointmap(rng.normal(size=shape + (3,)), valid)


class TestNormalizePointmaps(TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test__two_points_at_distance_one_and_three__scale_two(self):

        gt = Pointmap(np.array([[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]]), np.ones((1, 2)))

        pred_norm, gt_norm, scale_pred, scale_gt = normalize_pointmaps([gt], [gt])

        self.assertAlmostEqual(scale_gt.item(), 2.0)
        np.testing.assert_allclose(np.linalg.norm(gt_norm[0].array, axis=-1), [[0.5, 1.5]])
        np.testing.assert_allclose(pred_norm[0].array, gt_norm[0].array)

    def test__unit_sphere_points__unchanged(self):

        points = self.rng.normal(size=(3, 3, 3))
        points /= np.linalg.norm(points, axis=-1, keepdims=True)
        gt = Pointmap(points, np.ones((3, 3)))

        _, gt_norm, _, scale_gt = normalize_pointmaps([gt], [gt])

        self.assertAlmostEqual(scale_gt.item(), 1.0)
        np.testing.assert_allclose(gt_norm[0].array, points)

    def test__doubled_points__same_normalised_points(self):

        maps = [random_pointmap(self.rng) for _ in range(3)]
        doubled = [Pointmap(2.0 * m.array, m.valid) for m in maps]

        _, first, _, _ = normalize_pointmaps(maps, maps)
        _, second, _, _ = normalize_pointmaps(doubled, doubled)

        for a, b in zip(first, second):
            np.testing.assert_allclose(a.array, b.array)

    def test__normalised_set__idempotent(self):

        valid = self.rng.random((4, 5)) > 0.3
        maps = [random_pointmap(self.rng, valid=valid) for _ in range(2)]
        pred_norm, gt_norm, _, _ = normalize_pointmaps(maps, maps)

        _, _, scale_pred, scale_gt = normalize_pointmaps(pred_norm, gt_norm)

        self.assertAlmostEqual(scale_pred.item(), 1.0, delta=1e-6)
        self.assertAlmostEqual(scale_gt.item(), 1.0, delta=1e-6)

    def test__joint_normalisation__one_scale_across_maps(self):

        near = Pointmap(np.full((1, 1, 3), 1.0 / np.sqrt(3)), np.ones((1, 1)))
        far = Pointmap(np.full((1, 1, 3), 3.0 / np.sqrt(3)), np.ones((1, 1)))

        _, gt_norm, _, scale_gt = normalize_pointmaps([near, far], [near, far])

        self.assertAlmostEqual(scale_gt.item(), 2.0)
        self.assertAlmostEqual(float(np.linalg.norm(gt_norm[0].array)), 0.5)

    def test__no_valid_pixel__empty_ground_truth_error_raised(self):

        gt = random_pointmap(self.rng, valid=np.zeros((4, 5), dtype=bool))

        with self.assertRaises(EmptyGroundTruthError):
            normalize_pointmaps([gt], [gt])

    def test__all_zero_prediction__degenerate_input_error_raised(self):

        gt = random_pointmap(self.rng)
        pred = Pointmap(np.zeros((4, 5, 3)), gt.valid)

        with self.assertRaises(DegenerateInputError):
            normalize_pointmaps([pred], [gt])


class TestLossConf(TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test__perfect_prediction_with_zero_raw_confidence__closed_form(self):

        valid = self.rng.random((6, 6)) > 0.4
        gt = random_pointmap(self.rng, shape=(6, 6), valid=valid)
        conf = ConfidenceMap.from_raw(np.zeros((6, 6)))

        loss = loss_conf(gt, conf, gt, valid, alpha=0.4)

        self.assertAlmostEqual(loss.item(), -0.4 * math.log(2.0) * valid.sum(), delta=1e-6)

    def test__zero_alpha__non_negative_and_zero_only_when_perfect(self):

        gt = random_pointmap(self.rng)
        pred = Pointmap(gt.array + 0.1 * self.rng.normal(size=gt.array.shape), gt.valid)
        conf = ConfidenceMap.from_raw(self.rng.normal(size=(4, 5)))

        self.assertGreater(loss_conf(pred, conf, gt, gt.valid, alpha=0.0).item(), 0.0)
        self.assertEqual(loss_conf(gt, conf, gt, gt.valid, alpha=0.0).item(), 0.0)

    def test__raw_confidence_gradient__closed_form_and_finite_differences(self):

        gt = random_pointmap(self.rng, shape=(2, 2))
        pred = Pointmap(gt.array + self.rng.normal(size=(2, 2, 3)), gt.valid)
        raw_values = np.array([[-2.0, 0.0], [1.0, 3.0]])
        alpha = 0.4

        raw = Tensor(raw_values, requires_grad=True)
        loss_conf(pred, ConfidenceMap.from_raw(raw), gt, gt.valid, alpha).backward()

        distance = np.linalg.norm(pred.array - gt.array, axis=-1)
        expected = np.exp(raw_values) * (distance - alpha / (1.0 + np.exp(raw_values)))
        np.testing.assert_allclose(raw.grad, expected, rtol=1e-10)

        eps = 1e-6
        for position in np.ndindex(raw_values.shape):
            plus, minus = raw_values.copy(), raw_values.copy()
            plus[position] += eps
            minus[position] -= eps
            numeric = (
                loss_conf(pred, ConfidenceMap.from_raw(plus), gt, gt.valid, alpha).item()
                - loss_conf(pred, ConfidenceMap.from_raw(minus), gt, gt.valid, alpha).item()
            ) / (2 * eps)
            self.assertEqual(np.sign(numeric), np.sign(raw.grad[position]))
            self.assertAlmostEqual(numeric, raw.grad[position], delta=1e-6 * max(1.0, abs(numeric)))

    def test__empty_mask__empty_ground_truth_error_raised(self):

        gt = random_pointmap(self.rng)
        conf = ConfidenceMap.from_raw(np.zeros((4, 5)))

        with self.assertRaises(EmptyGroundTruthError):
            loss_conf(gt, conf, gt, np.zeros((4, 5), dtype=bool), alpha=0.4)


class TestLossScale(TestCase):

    def test__equal_scales__zero(self):

        self.assertEqual(loss_scale(Tensor(2.0), Tensor(2.0)).item(), 0.0)

    def test__predicted_scale_above__linear_excess(self):

        self.assertEqual(loss_scale(Tensor(3.0), Tensor(2.0)).item(), 1.0)
        self.assertEqual(loss_scale(Tensor(5.5), Tensor(2.0)).item(), 3.5)

    def test__predicted_scale_below__zero_gradient_to_points(self):

        rng = np.random.default_rng(2)
        gt = random_pointmap(rng)
        points = Tensor(0.5 * gt.array, requires_grad=True)

        _, _, scale_pred, scale_gt = normalize_pointmaps([Pointmap(points, gt.valid)], [gt])
        hinge = loss_scale(scale_pred, scale_gt)
        hinge.backward()

        self.assertEqual(hinge.item(), 0.0)
        np.testing.assert_array_equal(points.grad, np.zeros_like(gt.array))


class TestTotalLoss(TestCase):

    def test__perfect_predictions_with_zero_raw_confidence__closed_form(self):

        rng = np.random.default_rng(3)
        valid = rng.random((4, 5)) > 0.2
        gt = [random_pointmap(rng, valid=valid) for _ in range(4)]
        predictions = [
            (Pointmap(Tensor(m.array), m.valid), ConfidenceMap.from_raw(np.zeros((4, 5))))
            for m in gt
        ]

        terms = total_loss(predictions, gt, LossConfig(alpha=0.4))

        self.assertAlmostEqual(terms.value, -0.4 * math.log(2.0) * 4 * valid.sum(), delta=1e-6)
        self.assertEqual(terms.scale, 0.0)
        self.assertAlmostEqual(terms.value, terms.conf)

    def test__loss_terms__logged_fields(self):

        rng = np.random.default_rng(4)
        gt = [random_pointmap(rng)]
        predictions = [(Pointmap(Tensor(3.0 * gt[0].array), gt[0].valid), ConfidenceMap.from_raw(np.zeros((4, 5))))]

        terms = total_loss(predictions, gt)

        self.assertAlmostEqual(terms.scale, terms.scale_pred - terms.scale_gt)
        self.assertAlmostEqual(terms.value, terms.conf + terms.scale)
        self.assertEqual(sorted(terms.to_dict()), ['loss', 'loss_conf', 'loss_scale', 'scale_gt', 'scale_pred'])


class TestSupervisionPairs(TestCase):

    def test__clip_outputs__reference_then_target_stream_frames(self):

        gt = ['gt0', 'gt1', 'gt2', 'gt3']
        outputs = [
            SimpleNamespace(pred=f'ref{t}', target_pred=f'tgt{t + 1}', frame_index=t, target_frame_index=t + 1)
            for t in range(3)
        ]

        predictions, targets = supervision_pairs(outputs, gt)

        self.assertEqual(predictions, ['ref0', 'ref1', 'ref2', 'tgt1', 'tgt2', 'tgt3'])
        self.assertEqual(targets, ['gt0', 'gt1', 'gt2', 'gt1', 'gt2', 'gt3'])


class TestTotalLossGradients(TestCase):

    @classmethod
    def setUpClass(cls):
        cls.model = micro_model(seed=3)
        cls.clip = sample_clip(micro_scene(seed=3, n_frames=6), 1, 4, start=0)
        cls.memory_config = MemoryConfig()

    def loss_value(self):
        with no_grad():
            _, terms, _ = run_clip(self.model, self.clip, self.memory_config, rng=np.random.default_rng(0))
        return terms.value

    def test__micro_model__every_parameter_gradient_matches_finite_differences(self):

        self.model.zero_grad()
        _, terms, _ = run_clip(self.model, self.clip, self.memory_config, rng=np.random.default_rng(0))
        terms.total.backward()

        rng = np.random.default_rng(7)
        eps = 1e-6
        for name, param in self.model.named_parameters():
            self.assertIsNotNone(param.grad, name)
            for flat in rng.choice(param.size, size=min(2, param.size), replace=False):
                position = np.unravel_index(flat, param.shape)
                original = param.data[position]
                param.data[position] = original + eps
                plus = self.loss_value()
                param.data[position] = original - eps
                minus = self.loss_value()
                param.data[position] = original

                numeric = (plus - minus) / (2 * eps)
                analytic = float(param.grad[position])
                with self.subTest(name=name, position=position):
                    self.assertLess(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0), 1e-5)


class TestCurriculum(TestCase):

    def test__schedule_points__piecewise_closed_form(self):

        config = CurriculumConfig(t_min=1, t_max=9)
        expected = {0.0: 1, 0.25: 5, 0.375: 7, 0.5: 9, 0.75: 9, 0.9: 5, 1.0: 5}

        for eta, interval in expected.items():
            with self.subTest(eta=eta):
                self.assertEqual(curriculum_interval(eta, config), interval)

    def test__continuity_points__active_ratio_one(self):

        self.assertEqual(active_ratio(0.5), 1.0)
        self.assertEqual(active_ratio(0.75), 1.0)
        self.assertEqual(active_ratio(0.0), 0.0)
        self.assertEqual(active_ratio(1.0), 0.5)

    def test__plateau__maximum_interval(self):

        config = CurriculumConfig(t_min=2, t_max=6)

        for eta in np.linspace(0.5, 0.75, 11):
            self.assertEqual(curriculum_interval(float(eta), config), 6)

    def test__half_way_value__rounded_half_up(self):

        self.assertEqual(curriculum_interval(0.25, CurriculumConfig(t_min=1, t_max=4)), 3)

    def test__eta_out_of_range__value_error_raised(self):

        for eta in (-0.01, 1.01):
            with self.assertRaises(ValueError):
                curriculum_interval(eta)
