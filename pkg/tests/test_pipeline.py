import math

import numpy as np
from absl.testing import absltest, parameterized
from numpy import testing as npt

from balweights.core.dataset import BasisSpec, ObservationTable, build_features
from balweights.core.dual_solvers import DispersionSpec
from balweights.core.errors import ConvergenceError, InfeasibleError, InputError
from balweights.core.estimators import EstimandSpec, build_balance_target, ipw_estimate
from balweights.core.imbalance import full_sample_target, uniform_weights
from balweights.core.pipeline import (
    OutcomeConfig,
    WeightFit,
    WeightingConfig,
    fit_weights,
    require_converged,
    run_estimand,
)


def _sample(n=80, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    e = 1.0 / (1.0 + np.exp(-0.6 * X[:, 0]))
    W = (rng.uniform(size=n) < e).astype(float)
    W[:4] = (1.0, 1.0, 0.0, 0.0)
    Y = 1.0 + X[:, 0] - 0.5 * X[:, 1] + 2.0 * W + rng.normal(size=n)
    table = ObservationTable.from_arrays(X, W, Y)
    return table, build_features(table, BasisSpec(kind="linear")), e


class WeightingConfigTest(parameterized.TestCase):

    def test_from_dict(self):
        config = WeightingConfig.from_dict(
            {"method": "dual", "dispersion": "entropy", "penalty": "l2-scaled", "sigma2": 2.0},
            solver={"max_iter": 7},
        )
        self.assertEqual(config.dispersion.kind, "entropy")
        self.assertEqual(config.penalty.kind, "l2-scaled")
        self.assertEqual(config.penalty.sigma2, 2.0)
        self.assertEqual(config.solver.max_iter, 7)
        self.assertEqual(config.to_dict()["penalty"], {"kind": "l2-scaled", "sigma2": 2.0})

    @parameterized.parameters(
        dict(method="magic"),
        dict(method="kernel", crossfit=True),
        dict(method="minimax-l2", sigma2=-1.0),
    )
    def test_invalid(self, **kwargs):
        with self.assertRaises(InputError):
            WeightingConfig(**kwargs)


class FitWeightsTest(parameterized.TestCase):

    def setUp(self):
        super().setUp()
        self.table, self.fm, self.e = _sample()
        self.target = full_sample_target(self.fm)

    def test_uniform(self):
        fit = fit_weights(self.table, self.fm, self.target, config=WeightingConfig(method="uniform"))
        npt.assert_allclose(fit.weights.values, uniform_weights(self.table.treatment).values)

    def test_oracle(self):
        with self.assertRaises(InputError):
            fit_weights(self.table, self.fm, self.target, config=WeightingConfig(method="oracle"))
        fit = fit_weights(self.table, self.fm, self.target, "control", WeightingConfig(method="oracle"),
                          propensity=self.e)
        control = self.table.treatment == 0.0
        npt.assert_allclose(fit.weights.values[control], 1.0 / (1.0 - self.e[control]))
        npt.assert_array_equal(fit.weights.values[~control], 0.0)

    @parameterized.parameters("quadratic", "quadratic-nonneg", "entropy")
    def test_dual(self, dispersion):
        config = WeightingConfig.from_dict({"method": "dual", "dispersion": dispersion})
        fit = require_converged(fit_weights(self.table, self.fm, self.target, config=config))
        self.assertEqual(fit.method, "dual")
        self.assertAlmostEqual(fit.weights.values.sum() / self.table.n, 1.0, places=8)

    def test_kernel(self):
        config = WeightingConfig(method="kernel", sigma2=0.5)
        fit = fit_weights(self.table, self.fm, self.target, config=config)
        self.assertTrue(fit.converged)
        self.assertEqual(fit.gram.shape, (self.table.n, self.table.n))
        self.assertIsNotNone(fit.kernel.bandwidth)

    def test_kernel_simplex_with_heuristic_sigma2(self):
        config = WeightingConfig(method="kernel", constraints="simplex")
        fit = fit_weights(self.table, self.fm, self.target, config=config)
        self.assertGreater(fit.sigma2, 0.0)
        self.assertTrue(fit.weights.sum_to_one)
        self.assertTrue(fit.weights.nonnegative)

    def test_least_squares_equivalence(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(12, 40))
            X = rng.normal(size=(n, 2))
            W = np.resize([1.0, 0.0], n)
            rng.shuffle(W)
            Y = rng.normal(size=n)
            table = ObservationTable.from_arrays(X, W, Y)
            fm = build_features(table, BasisSpec(kind="linear", standardize=False))
            fit = fit_weights(table, fm, full_sample_target(fm), config=WeightingConfig(method="minimax-l2", sigma2=0.0))
            treated = W == 1.0
            beta = np.linalg.lstsq(fm.values[treated], Y[treated], rcond=None)[0]
            self.assertAlmostEqual(ipw_estimate(table, fit.weights), float(np.mean(fm.values @ beta)), delta=1e-8)

    def test_crossfit(self):
        config = WeightingConfig(method="dual", dispersion=DispersionSpec("entropy"), crossfit=True, folds=3)
        fit = fit_weights(self.table, self.fm, self.target, config=config)
        self.assertTrue(fit.converged)
        self.assertLen(fit.fold_solutions, 3)
        self.assertGreaterEqual(fit.weights.values.min(), 0.0)
        npt.assert_array_equal(fit.weights.values[self.table.treatment == 0.0], 0.0)
        self.assertLen(fit.to_dict()["folds"], 3)

    def test_hajek(self):
        config = WeightingConfig(method="minimax-l2", sigma2=1.0, hajek=True)
        fit = fit_weights(self.table, self.fm, self.target, config=config)
        self.assertAlmostEqual(fit.weights.values.sum() / self.table.n, 1.0, places=12)
        self.assertTrue(fit.weights.sum_to_one)


class RequireConvergedTest(parameterized.TestCase):

    def test_statuses(self):
        g = uniform_weights([1.0, 0.0])
        ok = WeightFit(g, "dual", True, "converged")
        self.assertIs(require_converged(ok), ok)
        with self.assertRaises(InfeasibleError):
            require_converged(WeightFit(g, "dual", False, "infeasible"))
        with self.assertRaises(ConvergenceError) as ctx:
            require_converged(WeightFit(g, "dual", False, "max-iter"))
        self.assertNotIsInstance(ctx.exception, InfeasibleError)


class RunEstimandTest(parameterized.TestCase):

    def setUp(self):
        super().setUp()
        self.table, self.fm, self.e = _sample(n=150, seed=2)

    def test_without_outcome_model_point_is_weighting_estimate(self):
        run = run_estimand(self.table, self.fm, EstimandSpec("treated-mean"), outcome=OutcomeConfig(enabled=False))
        self.assertEqual(run.estimate.point, run.estimate.components["ipw"])
        self.assertIsNone(run.models["treated"])

    def test_ate_is_difference_of_arms(self):
        run = run_estimand(self.table, self.fm, EstimandSpec("ate"))
        treated = run.estimate.components["treated"]
        control = run.estimate.components["control"]
        self.assertEqual(run.estimate.point, treated["point"] - control["point"])
        self.assertEqual(run.estimate.variance, treated["variance"] + control["variance"])
        self.assertTrue(run.converged)
        self.assertEqual(run.estimate.estimand, {"kind": "ate"})
        self.assertIn("correction", treated["components"])

    def test_att_targets_treated_means(self):
        run = run_estimand(self.table, self.fm, EstimandSpec("att"))
        self.assertEqual(run.target.provenance, "treated-sample")
        self.assertEqual(run.fits["treated"].method, "uniform")
        self.assertEqual(run.estimate.components["target"]["provenance"], "treated-sample")

    def test_translation_equivariance(self):
        config = WeightingConfig(method="dual", dispersion=DispersionSpec("entropy"), hajek=True)
        base = run_estimand(self.table, self.fm, EstimandSpec("treated-mean"), weighting=config)
        shifted_table = self.table.with_outcome(self.table.outcome + 11.0)
        shifted = run_estimand(shifted_table, self.fm, EstimandSpec("treated-mean"), weighting=config)
        self.assertAlmostEqual(shifted.estimate.point, base.estimate.point + 11.0, places=9)
        self.assertAlmostEqual(shifted.estimate.components["ipw"], base.estimate.components["ipw"] + 11.0, places=9)

    def test_sample_bounded(self):
        config = WeightingConfig(method="dual", dispersion=DispersionSpec("entropy"))
        run = run_estimand(self.table, self.fm, EstimandSpec("treated-mean"), weighting=config,
                           outcome=OutcomeConfig(enabled=False))
        treated = self.table.outcome[self.table.treatment == 1.0]
        self.assertBetween(run.estimate.point, treated.min(), treated.max())

    def test_oracle_weights_reach_estimates(self):
        run = run_estimand(self.table, self.fm, EstimandSpec("ate"), weighting=WeightingConfig(method="oracle"),
                           propensity=self.e)
        self.assertTrue(math.isfinite(run.estimate.point))
        self.assertEqual(run.fits["control"].method, "oracle")

    def test_point_target(self):
        estimand = EstimandSpec("cate-at-point", x0=(0.0, 0.0), bandwidth=0.5, draws=2000)
        run = run_estimand(self.table, self.fm, estimand, weighting=WeightingConfig(method="minimax-l2", sigma2=1.0))
        self.assertEqual(run.target.provenance, "gaussian-point")
        expected = build_balance_target(estimand, self.table, self.fm)
        npt.assert_allclose(run.target.target_means, expected.target_means)

    def test_needs_outcomes(self):
        table = ObservationTable.from_arrays(self.table.covariates, self.table.treatment)
        with self.assertRaises(InputError):
            run_estimand(table, self.fm, EstimandSpec("ate"))


if __name__ == "__main__":
    absltest.main()
