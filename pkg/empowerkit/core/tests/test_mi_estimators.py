import math
import tempfile

import numpy as np
from django.test import SimpleTestCase, tag

from core.exceptions import ContractViolation, EstimatorDivergence
from core.mi_estimators import (
    LOG2,
    CmiBatch,
    CmiSample,
    EstimatorConfig,
    EstimatorKind,
    build_estimator,
    estimate_batch,
    estimate_mi,
    estimate_pointwise,
    jsd_loss,
    joint_negative_sampler,
    js_information,
    kld_loss,
    load_estimator,
    save_estimator,
    shuffled_negative_sampler,
    train_estimator,
    vlb_loss,
)
from core.numerics import make_rng, numerical_gradient, relative_error
from core.synthetic_bench import (
    SynthConfig,
    bijection_joint,
    independent_joint,
    sample_synth,
    sample_tabular,
    tabular_cmi,
    tabular_negative_sampler,
)

SMALL = EstimatorConfig(hidden=(6,), activation='tanh', zero_output=False, batch_size=32)


def random_batch(rng, n=12, dims=(2, 3, 2)):
    return CmiBatch(rng.normal(size=(n, dims[0])), rng.normal(size=(n, dims[1])), rng.normal(size=(n, dims[2])))


class BoundValueTests(SimpleTestCase):

    def test_zero_critic_jsd_bound_is_zero(self):
        rng = make_rng(0)
        handle = build_estimator('jsd', 2, 3, 2, rng)
        batch = random_batch(rng)
        result = jsd_loss(batch, shuffled_negative_sampler(batch, rng), handle.critic)
        self.assertAlmostEqual(result.bound, 0.0, places=12)

    def test_constant_one_critic_kld_bound_is_zero(self):
        rng = make_rng(1)
        handle = build_estimator('kld', 2, 3, 2, rng)
        handle.critic.params[-1] = 1.0
        batch = random_batch(rng)
        result = kld_loss(batch, shuffled_negative_sampler(batch, rng), handle.critic)
        self.assertAlmostEqual(result.bound, 0.0, places=12)

    def test_equal_vlb_heads_give_zero(self):
        rng = make_rng(2)
        handle = build_estimator('vlb', 2, 3, 2, rng)
        batch = random_batch(rng)
        result = vlb_loss(batch, handle.critic, handle.prior_head)
        np.testing.assert_array_equal(result.pointwise, np.zeros(len(batch)))
        self.assertEqual(result.loss, 0.0)

    def test_kld_exponent_clamp(self):
        rng = make_rng(3)
        handle = build_estimator('kld', 1, 1, 1, rng)
        handle.critic.params[-1] = 100.0
        batch = random_batch(rng, dims=(1, 1, 1))
        result = kld_loss(batch, batch.x, handle.critic, handle.config)
        self.assertTrue(math.isfinite(result.loss))
        self.assertFalse(np.any(result.grads[0][-1:] > 1.0))


class GradientTests(SimpleTestCase):

    def assert_gradient(self, net, fn, analytic):
        numeric = numerical_gradient(fn, net.params)
        self.assertLess(relative_error(analytic, numeric), 1e-4)

    def test_vlb_gradients(self):
        rng = make_rng(4)
        handle = build_estimator('vlb', 2, 3, 2, rng, SMALL)
        batch = random_batch(rng)
        result = vlb_loss(batch, handle.critic, handle.prior_head, SMALL)
        loss = lambda: vlb_loss(batch, handle.critic, handle.prior_head, SMALL).loss
        prior_nll = lambda: vlb_loss(batch, handle.critic, handle.prior_head, SMALL).prior_nll
        self.assert_gradient(handle.critic, loss, result.grads[0])
        self.assert_gradient(handle.prior_head, prior_nll, result.grads[1])

    def test_prior_nll_matches_prior_head(self):
        rng = make_rng(17)
        handle = build_estimator('vlb', 1, 2, 1, rng)
        batch = random_batch(rng, dims=(1, 2, 1))
        expected = np.mean(0.5 * batch.x[:, 0] ** 2 + 0.5 * math.log(2.0 * math.pi))
        self.assertAlmostEqual(vlb_loss(batch, handle.critic, handle.prior_head).prior_nll, expected, places=12)

    def test_kld_gradients(self):
        rng = make_rng(5)
        handle = build_estimator('kld', 2, 3, 2, rng, SMALL)
        batch = random_batch(rng)
        negatives = shuffled_negative_sampler(batch, rng)
        result = kld_loss(batch, negatives, handle.critic, SMALL)
        self.assert_gradient(handle.critic, lambda: kld_loss(batch, negatives, handle.critic, SMALL).loss, result.grads[0])

    def test_jsd_gradients(self):
        rng = make_rng(6)
        handle = build_estimator('jsd', 2, 3, 2, rng, SMALL)
        batch = random_batch(rng)
        negatives = shuffled_negative_sampler(batch, rng)
        result = jsd_loss(batch, negatives, handle.critic)
        self.assert_gradient(handle.critic, lambda: jsd_loss(batch, negatives, handle.critic).loss, result.grads[0])

    def test_glu_critic_gradients(self):
        rng = make_rng(7)
        config = EstimatorConfig(hidden=(4,), activation='tanh', glu_layers=2, glu_width=5, zero_output=False)
        handle = build_estimator('jsd', 1, 2, 1, rng, config)
        batch = random_batch(rng, dims=(1, 2, 1))
        negatives = shuffled_negative_sampler(batch, rng)
        result = jsd_loss(batch, negatives, handle.critic)
        self.assert_gradient(handle.critic, lambda: jsd_loss(batch, negatives, handle.critic).loss, result.grads[0])


class EstimatorTests(SimpleTestCase):

    def test_zero_epochs_leave_handle_unchanged(self):
        rng = make_rng(8)
        handle = build_estimator('jsd', 1, 1, 1, rng, SMALL)
        before = handle.critic.params.copy()
        data = sample_synth(SynthConfig(), 100, rng)
        _, report = train_estimator(handle, data, shuffled_negative_sampler, 0, rng)
        np.testing.assert_array_equal(handle.critic.params, before)
        self.assertEqual(report.heldout, [])

    def test_training_records_one_value_per_epoch(self):
        rng = make_rng(9)
        handle = build_estimator('vlb', 1, 1, 1, rng, SMALL)
        data = sample_synth(SynthConfig(), 300, rng)
        _, report = train_estimator(handle, data, None, 3, rng)
        self.assertEqual(len(report.heldout), 3)
        self.assertEqual(len(report.in_sample), 3)

    def test_zero_critic_pointwise_is_zero(self):
        handle = build_estimator('jsd', 1, 2, 1, make_rng(10))
        sample = CmiSample(np.array([0.3]), np.array([1.0, -1.0]), np.array([0.5]))
        self.assertEqual(estimate_pointwise(handle, sample), 0.0)

    def test_pointwise_is_pure(self):
        rng = make_rng(11)
        handle = build_estimator('vlb', 1, 2, 1, rng, SMALL)
        sample = CmiSample(np.array([0.3]), np.array([1.0, -1.0]), np.array([0.5]))
        self.assertEqual(estimate_pointwise(handle, sample), estimate_pointwise(handle, sample))

    def test_dimension_mismatch(self):
        rng = make_rng(12)
        handle = build_estimator('jsd', 1, 1, 1, rng)
        with self.assertRaises(ContractViolation):
            estimate_batch(handle, random_batch(rng, dims=(2, 1, 1)))

    def test_kld_readout_needs_sampler(self):
        rng = make_rng(13)
        handle = build_estimator('kld', 1, 1, 1, rng)
        with self.assertRaises(ContractViolation):
            estimate_mi(handle, random_batch(rng, dims=(1, 1, 1)))

    def test_huge_learning_rate_diverges(self):
        rng = make_rng(14)
        config = EstimatorConfig(hidden=(8,), lr=1e300)
        handle = build_estimator('vlb', 1, 1, 1, rng, config)
        data = sample_synth(SynthConfig(), 400, rng)
        with self.assertRaises(EstimatorDivergence) as ctx:
            train_estimator(handle, data, None, 5, rng)
        self.assertEqual(ctx.exception.kind, 'vlb')

    def test_joint_negatives_are_the_positive_samples(self):
        rng = make_rng(15)
        batch = random_batch(rng)
        np.testing.assert_array_equal(joint_negative_sampler(batch, rng), batch.x)

    def test_save_and_load_round_trip(self):
        rng = make_rng(16)
        handle = build_estimator('vlb', 1, 2, 1, rng, SMALL)
        batch = random_batch(rng, dims=(1, 2, 1))
        with tempfile.TemporaryDirectory() as tmp:
            save_estimator(tmp, handle)
            loaded = load_estimator(tmp)
        self.assertEqual(loaded.kind, EstimatorKind.VLB)
        self.assertEqual(loaded.config, SMALL)
        np.testing.assert_array_equal(estimate_batch(loaded, batch), estimate_batch(handle, batch))

    def test_vlb_bound_stays_bounded_on_copy_channel(self):
        rng = make_rng(18)
        joint = bijection_joint(4, 1)
        config = EstimatorConfig(hidden=(32,), batch_size=64)
        handle = build_estimator('vlb', 1, 4, 1, rng, config)
        _, report = train_estimator(handle, sample_tabular(joint, 3000, rng), None, 30, rng)
        self.assertTrue(all(math.isfinite(value) for value in report.heldout))
        self.assertLess(report.final_heldout, math.log(4.0) + 0.1)
        self.assertGreater(report.final_heldout, 0.5)
        heldout = sample_tabular(joint, 1000, make_rng(19))
        prior_nll = vlb_loss(heldout, handle.critic, handle.prior_head, config).prior_nll
        self.assertLess(prior_nll, 2.0)


@tag('slow')
class OracleConvergenceTests(SimpleTestCase):
    config = EstimatorConfig(hidden=(256,), activation='relu', lr=1e-3, batch_size=256)

    def fit(self, kind, joint, seed=0, epochs=30):
        rng = make_rng(seed)
        sampler = tabular_negative_sampler(joint)
        _, ny, nz = joint.shape
        handle = build_estimator(kind, 1, ny, nz, rng, self.config)
        train_estimator(handle, sample_tabular(joint, 20000, rng), sampler, epochs, rng)
        heldout = sample_tabular(joint, 4000, make_rng(seed + 100))
        return estimate_mi(handle, heldout, sampler, rng)

    def test_vlb_on_copy_channel(self):
        joint = bijection_joint(4, 1)
        self.assertAlmostEqual(self.fit('vlb', joint), math.log(4.0), delta=0.1)

    def test_kld_on_copy_channel(self):
        joint = bijection_joint(4, 1)
        self.assertAlmostEqual(self.fit('kld', joint), math.log(4.0), delta=0.15)

    def test_jsd_on_independent_joint(self):
        joint = independent_joint(4, 2)
        self.assertAlmostEqual(tabular_cmi(joint), 0.0, places=12)
        self.assertAlmostEqual(self.fit('jsd', joint), 0.0, delta=0.05)

    def test_jsd_bound_stays_below_log_two(self):
        rng = make_rng(3)
        joint = bijection_joint(4, 2)
        sampler = tabular_negative_sampler(joint)
        handle = build_estimator('jsd', 1, 4, 2, rng, self.config)
        _, report = train_estimator(handle, sample_tabular(joint, 20000, rng), sampler, 20, rng)
        self.assertLess(js_information(report.final_heldout), LOG2 + 0.05)

    def test_shuffled_labels_read_zero(self):
        rng = make_rng(4)
        data = sample_synth(SynthConfig(), 20000, rng)
        shuffled = CmiBatch(data.x, data.y[rng.permutation(len(data))], data.z)
        handle = build_estimator('vlb', 1, 1, 1, rng, self.config)
        train_estimator(handle, shuffled, None, 20, rng)
        heldout = sample_synth(SynthConfig(), 5000, make_rng(5))
        heldout = CmiBatch(heldout.x, heldout.y[make_rng(6).permutation(5000)], heldout.z)
        self.assertAlmostEqual(estimate_mi(handle, heldout), 0.0, delta=0.05)
