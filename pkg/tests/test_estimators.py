import math

import numpy as np
from absl.testing import absltest, parameterized
from numpy import testing as npt

from balweights.core.dataset import BasisSpec, FeatureMatrix, ObservationTable, build_features
from balweights.core.errors import InputError, SingularSystemError
from balweights.core.estimators import (
    EstimandSpec,
    OutcomeModel,
    aipw_estimate,
    assign_folds,
    build_balance_target,
    combine_contrast,
    error_decomposition,
    fit_crossfit_ridge,
    hajek_normalize,
    ipw_estimate,
    normal_quantile,
    wald_ci,
    zero_model,
)
from balweights.core.imbalance import WeightVector, uniform_weights


def _fixed_model(predictions, arm="treated"):
    predictions = np.asarray(predictions, dtype=float)
    return OutcomeModel(
        folds=np.zeros(predictions.size, dtype=int),
        coefficients=np.zeros((1, 0)),
        intercepts=np.zeros(1),
        predictions=predictions,
        penalty=1.0,
        arm=arm,
    )


def _linear_sample(n=120, d=3, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    W = (rng.uniform(size=n) < 0.5).astype(float)
    W[:6] = (1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
    beta = np.arange(1.0, d + 1.0)
    m1 = X @ beta + 0.5
    Y = m1 + noise * rng.normal(size=n)
    return ObservationTable.from_arrays(X, W, Y), beta


class WeightingEstimateTest(parameterized.TestCase):

    def test_uniform_weights_give_arm_mean(self):
        table, _ = _linear_sample()
        g = uniform_weights(table.treatment)
        self.assertAlmostEqual(ipw_estimate(table, g), table.outcome[table.treatment == 1.0].mean(), places=12)

    def test_two_units(self):
        table = ObservationTable.from_arrays([[0.0], [1.0]], [1.0, 0.0], [3.0, 5.0])
        self.assertEqual(ipw_estimate(table, WeightVector.on_arm([2.0, 0.0], table.treatment)), 3.0)

    def test_missing_outcome(self):
        table = ObservationTable.from_arrays([[0.0], [1.0]], [1.0, 0.0])
        with self.assertRaises(InputError):
            ipw_estimate(table, WeightVector.on_arm([2.0, 0.0], table.treatment))

    def test_hajek(self):
        g = hajek_normalize(WeightVector.on_arm([2.0, 4.0], [1.0, 1.0]), [1.0, 1.0])
        npt.assert_allclose(g.values, [2.0 / 3.0, 4.0 / 3.0])
        self.assertTrue(g.sum_to_one)
        npt.assert_allclose(hajek_normalize(g, [1.0, 1.0]).values, g.values)

    def test_hajek_zero_total(self):
        with self.assertRaises(InputError):
            hajek_normalize(WeightVector.on_arm([0.0, 0.0], [1.0, 0.0]), [1.0, 0.0])

    def test_translation_after_normalization(self):
        table, _ = _linear_sample(seed=1)
        rng = np.random.default_rng(2)
        g = hajek_normalize(WeightVector.on_arm(rng.uniform(0.1, 3.0, table.n), table.treatment), table.treatment)
        shifted = table.with_outcome(table.outcome + 7.25)
        self.assertAlmostEqual(ipw_estimate(shifted, g), ipw_estimate(table, g) + 7.25, places=12)

    def test_sample_bounded(self):
        table, _ = _linear_sample(seed=3)
        rng = np.random.default_rng(4)
        g = hajek_normalize(WeightVector.on_arm(rng.exponential(size=table.n), table.treatment), table.treatment)
        treated = table.outcome[table.treatment == 1.0]
        self.assertBetween(ipw_estimate(table, g), treated.min(), treated.max())


class AugmentedEstimateTest(parameterized.TestCase):

    def test_zero_model_equals_weighting_estimate(self):
        table, _ = _linear_sample(seed=5)
        g = WeightVector.on_arm(np.random.default_rng(6).normal(2.0, 1.0, table.n), table.treatment)
        self.assertEqual(aipw_estimate(table, g, zero_model(table.n)), ipw_estimate(table, g))

    def test_zero_weights_are_pure_imputation(self):
        table, _ = _linear_sample(seed=7)
        fm = build_features(table, BasisSpec(kind="linear"))
        m = fit_crossfit_ridge(table, fm, folds=3, penalty=0.5)
        g = WeightVector.on_arm(np.zeros(table.n), table.treatment)
        self.assertAlmostEqual(aipw_estimate(table, g, m), m.predictions.mean(), places=12)

    def test_correct_model_on_noiseless_data(self):
        table, beta = _linear_sample(seed=8, noise=0.0)
        truth = table.covariates @ beta + 0.5
        rng = np.random.default_rng(9)
        for _ in range(5):
            g = WeightVector.on_arm(rng.normal(0.0, 3.0, table.n), table.treatment)
            self.assertAlmostEqual(aipw_estimate(table, g, _fixed_model(truth)), truth.mean(), places=10)

    def test_difference_is_the_correction(self):
        table, _ = _linear_sample(seed=10)
        fm = build_features(table, BasisSpec(kind="linear"))
        m = fit_crossfit_ridge(table, fm)
        g = uniform_weights(table.treatment)
        correction = m.predictions.mean() - np.sum(g.weighted(table.treatment) * m.predictions) / table.n
        self.assertAlmostEqual(aipw_estimate(table, g, m) - ipw_estimate(table, g), correction, places=12)


class WaldTest(parameterized.TestCase):

    def test_two_unit_variance(self):
        table = ObservationTable.from_arrays([[0.0], [1.0]], [1.0, 0.0], [1.0, 7.0])
        g = WeightVector.on_arm([2.0, 0.0], table.treatment)
        est = wald_ci(table, g, _fixed_model([0.5, 0.0]), level=0.95)
        self.assertAlmostEqual(est.variance, 0.25)
        self.assertAlmostEqual(est.gamma_rms, math.sqrt(2.0))
        self.assertEqual(est.status, "ok")
        half = normal_quantile(0.95) * 0.5
        npt.assert_allclose(est.ci, (est.point - half, est.point + half))
        self.assertTrue(est.covers(est.point))

    def test_zero_residuals_are_degenerate(self):
        table = ObservationTable.from_arrays([[0.0], [1.0], [2.0]], [1.0, 0.0, 1.0], [1.0, 7.0, 2.0])
        g = uniform_weights(table.treatment)
        est = wald_ci(table, g, _fixed_model(table.outcome), level=0.95)
        self.assertEqual(est.variance, 0.0)
        self.assertTrue(est.degenerate)
        self.assertIsNone(est.ci)
        self.assertIsNone(est.covers(1.5))
        self.assertEqual(est.to_dict()["status"], "degenerate-interval")

    def test_all_zero_weights(self):
        table = ObservationTable.from_arrays([[0.0], [1.0], [2.0]], [1.0, 0.0, 1.0], [1.0, 7.0, 2.0])
        g = WeightVector.on_arm(np.zeros(3), table.treatment)
        est = wald_ci(table, g, None, level=0.95)
        self.assertEqual(est.point, 0.0)
        self.assertIsNone(est.ess)
        self.assertTrue(est.degenerate)
        contrast = combine_contrast(est, wald_ci(table, uniform_weights(table.treatment, "control"), None, 0.95),
                                    {"kind": "ate"})
        self.assertIsNone(contrast.ess)

    def test_variance_ignores_unit_order(self):
        table, _ = _linear_sample(seed=11)
        fm = build_features(table, BasisSpec(kind="linear"))
        m = fit_crossfit_ridge(table, fm)
        gamma = np.random.default_rng(12).uniform(0.5, 2.0, table.n)
        g = WeightVector.on_arm(gamma, table.treatment)
        order = np.random.default_rng(13).permutation(table.n)
        permuted = ObservationTable.from_arrays(table.covariates[order], table.treatment[order], table.outcome[order])
        v1 = wald_ci(table, g, m, 0.9).variance
        v2 = wald_ci(permuted, WeightVector.on_arm(gamma[order], permuted.treatment), _fixed_model(m.predictions[order]),
                     0.9).variance
        self.assertAlmostEqual(v1, v2, places=14)

    @parameterized.parameters((0.95, 1.959963984540054), (0.5, 0.6744897501960817), (0.99, 2.5758293035489004))
    def test_normal_quantile(self, level, expected):
        self.assertAlmostEqual(normal_quantile(level), expected, places=9)

    @parameterized.parameters(0.0, 1.0, 1.5)
    def test_invalid_level(self, level):
        with self.assertRaises(InputError):
            normal_quantile(level)

    def test_contrast(self):
        table, _ = _linear_sample(seed=14)
        treated = wald_ci(table, uniform_weights(table.treatment), None, 0.95)
        control = wald_ci(table, uniform_weights(table.treatment, "control"), None, 0.95)
        ate = combine_contrast(treated, control, {"kind": "ate"})
        self.assertEqual(ate.point, treated.point - control.point)
        self.assertEqual(ate.variance, treated.variance + control.variance)
        self.assertEqual(set(ate.components), {"treated", "control"})


class CrossfitRidgeTest(parameterized.TestCase):

    def test_constant_outcome(self):
        table, _ = _linear_sample(seed=15)
        table = table.with_outcome(np.full(table.n, 3.2))
        fm = build_features(table, BasisSpec(kind="linear"))
        m = fit_crossfit_ridge(table, fm)
        npt.assert_allclose(m.predictions, 3.2, atol=1e-10)

    def test_full_shrinkage_gives_fold_means(self):
        table, _ = _linear_sample(seed=16)
        fm = build_features(table, BasisSpec(kind="linear"))
        m = fit_crossfit_ridge(table, fm, folds=4, penalty=1e12)
        treated = table.treatment == 1.0
        for i in range(table.n):
            train = treated & (m.folds != m.folds[i])
            self.assertAlmostEqual(m.predictions[i], table.outcome[train].mean(), places=6)

    def test_exact_recovery(self):
        rng = np.random.default_rng(17)
        X = rng.normal(size=(200, 3))
        W = np.resize([1.0, 0.0], 200)
        table = ObservationTable.from_arrays(X, W)
        fm = build_features(table, BasisSpec(kind="linear"))
        beta = np.array([0.7, -1.2, 2.0, 0.3])
        truth = fm.values @ beta
        m = fit_crossfit_ridge(table.with_outcome(truth), fm, penalty=1e-8)
        self.assertLess(np.max(np.abs(m.predictions - truth)), 1e-5)

    def test_unpenalized_collinear_fit(self):
        x = np.random.default_rng(18).normal(size=20)
        fm = FeatureMatrix(values=np.column_stack([np.ones(20), x, 2 * x]), scales=[math.inf, 1.0, 1.0],
                           labels=("1", "x", "x2"), intercept=0)
        table = ObservationTable.from_arrays(x, np.resize([1.0, 0.0], 20), x)
        with self.assertRaises(SingularSystemError):
            fit_crossfit_ridge(table, fm, folds=2, penalty=0.0)

    def test_too_few_arm_units(self):
        table = ObservationTable.from_arrays([[0.0], [1.0], [2.0], [3.0]], [1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0, 4.0])
        fm = build_features(table, BasisSpec(kind="linear"))
        with self.assertRaises(InputError):
            fit_crossfit_ridge(table, fm, folds=2)

    def test_folds_are_deterministic(self):
        W = np.resize([1.0, 0.0, 0.0], 30)
        npt.assert_array_equal(assign_folds(W, 5, seed=3), assign_folds(W, 5, seed=3))
        self.assertEqual(set(assign_folds(W, 5, seed=3)), set(range(5)))


class BalanceTargetTest(parameterized.TestCase):

    def setUp(self):
        super().setUp()
        self.table, _ = _linear_sample(n=60, d=2, seed=19)
        self.fm = build_features(self.table, BasisSpec(kind="polynomial", degree=2))
        self.ate = build_balance_target(EstimandSpec("ate"), self.table, self.fm)

    def test_external_copy_of_the_sample(self):
        spec = EstimandSpec("target-population-mean", target_covariates=self.table.covariates[:, ::-1],
                            target_columns=self.table.column_names[::-1])
        target = build_balance_target(spec, self.table, self.fm)
        self.assertEqual(target.provenance, "external-sample")
        npt.assert_allclose(target.target_means, self.ate.target_means, atol=1e-12)

    def test_external_missing_covariate(self):
        spec = EstimandSpec("target-population-mean", target_covariates=self.table.covariates[:, :1],
                            target_columns=("x1",))
        with self.assertRaises(InputError):
            build_balance_target(spec, self.table, self.fm)

    def test_point_target_with_tiny_bandwidth(self):
        spec = EstimandSpec("cate-at-point", x0=(0.3, -0.2), bandwidth=1e-6, draws=10000)
        target = build_balance_target(spec, self.table, self.fm)
        npt.assert_allclose(target.target_means, self.fm.transform([[0.3, -0.2]])[0], atol=1e-5)
        self.assertEqual(target.provenance, "gaussian-point")

    def test_treated_target_when_everyone_is_treated(self):
        table = ObservationTable.from_arrays(self.table.covariates, np.ones(self.table.n), self.table.outcome)
        target = build_balance_target(EstimandSpec("att"), table, self.fm)
        self.assertEqual(target.provenance, "treated-sample")
        npt.assert_allclose(target.target_means, self.ate.target_means, atol=1e-12)

    def test_treated_target_uses_treated_means(self):
        target = build_balance_target(EstimandSpec("att"), self.table, self.fm)
        npt.assert_allclose(target.target_means, self.fm.values[self.table.treatment == 1.0].mean(axis=0), atol=1e-12)

    @parameterized.parameters(
        dict(kind="quantile"),
        dict(kind="cate-at-point", bandwidth=0.1),
        dict(kind="cate-at-point", x0=(0.0,), bandwidth=0.1, draws=10),
        dict(kind="target-population-mean"),
        dict(kind="ate", arm="both"),
    )
    def test_invalid_estimands(self, **kwargs):
        with self.assertRaises(InputError):
            EstimandSpec(**kwargs)

    @parameterized.parameters(
        ("treated-mean", ("treated",)),
        ("control-mean", ("control",)),
        ("ate", ("treated", "control")),
        ("att", ("treated", "control")),
    )
    def test_groups(self, kind, groups):
        self.assertEqual(EstimandSpec(kind).groups, groups)


class ErrorDecompositionTest(parameterized.TestCase):

    def setUp(self):
        super().setUp()
        self.table, beta = _linear_sample(seed=20)
        self.oracle = lambda X: np.asarray(X) @ beta + 0.5
        self.fm = build_features(self.table, BasisSpec(kind="linear"))
        self.g = WeightVector.on_arm(np.random.default_rng(21).uniform(0.5, 3.0, self.table.n), self.table.treatment)

    def test_components_sum_to_the_error(self):
        m = fit_crossfit_ridge(self.table, self.fm, folds=3)
        parts = error_decomposition(self.table, self.g, m, self.oracle, population_mean=0.4)
        self.assertAlmostEqual(parts.imbalance + parts.noise + parts.sampling, parts.total, places=12)
        self.assertAlmostEqual(parts.estimate, aipw_estimate(self.table, self.g, m), places=12)

    def test_oracle_model_has_no_imbalance_term(self):
        m = _fixed_model(self.oracle(self.table.covariates))
        parts = error_decomposition(self.table, self.g, m, self.oracle)
        self.assertEqual(parts.imbalance, 0.0)
        self.assertEqual(parts.sampling, 0.0)

    def test_zero_model_reduces_to_weighting_bias(self):
        parts = error_decomposition(self.table, self.g, None, self.oracle)
        truth = self.oracle(self.table.covariates)
        gw = self.g.weighted(self.table.treatment)
        self.assertAlmostEqual(parts.imbalance, np.sum(gw * truth) / self.table.n - truth.mean(), places=12)
        self.assertAlmostEqual(parts.estimate, ipw_estimate(self.table, self.g), places=12)


if __name__ == "__main__":
    absltest.main()
