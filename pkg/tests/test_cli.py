import json
import os
import shutil
import tempfile

import numpy as np
import pandas as pd
from absl.testing import absltest, parameterized

from balweights import __version__
from balweights.__main__ import main
from balweights.helpers.defend import EXIT_CONVERGENCE, EXIT_INPUT, EXIT_OK, EXIT_VERIFICATION

DGP = {
    "n": 300,
    "d": 2,
    "covariate_law": "normal",
    "basis": {"kind": "linear", "standardize": False},
    "propensity_coef": [0.0, 0.5, -0.5],
    "outcome_treated": [1.0, 1.0, 2.0],
    "outcome_control": [0.0, 1.0, 1.0],
    "noise_sd": 1.0,
    "seed": 7,
}


class CommandLineTest(parameterized.TestCase):

    def setUp(self):
        super().setUp()
        self.workdir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.workdir)
        rng = np.random.default_rng(0)
        n = 120
        X = rng.normal(size=(n, 2))
        W = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-0.5 * X[:, 0]))).astype(int)
        W[:2] = (1, 0)
        Y = X[:, 0] + 2.0 * W + rng.normal(size=n)
        self.data = os.path.join(self.workdir, "units.csv")
        pd.DataFrame({"id": [f"u{i}" for i in range(n)], "x1": X[:, 0], "x2": X[:, 1], "W": W, "Y": Y}).to_csv(
            self.data, index=False
        )

    def config(self, name, **payload):
        path = os.path.join(self.workdir, f"{name}.json")
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle)
        return path

    def weights_config(self, **overrides):
        payload = {
            "columns": {"treatment": "W", "outcome": "Y", "unit_id": "id"},
            "basis": {"kind": "linear"},
            "weighting": {"method": "dual", "dispersion": "entropy", "penalty": "l1-scaled"},
        }
        payload.update(overrides)
        return self.config("weights", **payload)

    def out(self, name="out"):
        return os.path.join(self.workdir, name)

    def read_json(self, out, name):
        with open(os.path.join(out, name), encoding="utf-8") as handle:
            return json.load(handle)

    def test_version(self):
        self.assertEqual(main(["--version"]), EXIT_OK)
        self.assertEqual(__version__, "0.1.0")

    def test_no_command(self):
        self.assertEqual(main([]), EXIT_INPUT)

    def test_unknown_flag_is_input_error(self):
        self.assertEqual(main(["weights", "--bogus"]), EXIT_INPUT)

    def test_weights_writes_artifacts(self):
        out = self.out()
        code = main(["weights", "--data", self.data, "--config", self.weights_config(), "--out", out])
        self.assertEqual(code, EXIT_OK)
        self.assertCountEqual(
            os.listdir(out), ["weights.csv", "solution.json", "imbalance.json", "imbalance.txt"]
        )
        frame = pd.read_csv(os.path.join(out, "weights.csv"), dtype={"unit_id": str})
        self.assertLen(frame, 120)
        self.assertEqual(frame["unit_id"].iloc[0], "u0")
        self.assertEqual(float(frame.loc[frame["unit_id"] == "u1", "weight"].iloc[0]), 0.0)
        solution = self.read_json(out, "solution.json")
        self.assertTrue(solution["fit"]["converged"])
        self.assertEqual(solution["run"]["command"], "weights")
        self.assertNotIn("out", solution["run"]["config"])

    def test_zero_scales_give_zero_weights_and_still_write(self):
        out = self.out()
        config = self.weights_config(
            basis={"kind": "linear", "intercept_scale": 0, "scales": {"x1": 0, "x2": 0}},
            weighting={"method": "dual", "dispersion": "quadratic", "penalty": "l1-scaled"},
        )
        self.assertEqual(main(["weights", "--data", self.data, "--config", config, "--out", out]), EXIT_OK)
        frame = pd.read_csv(os.path.join(out, "weights.csv"))
        self.assertTrue((frame["weight"] == 0.0).all())
        imbalance = self.read_json(out, "imbalance.json")["imbalance"]
        self.assertIsNone(imbalance["effective_sample_size"])
        self.assertIsNone(imbalance["ks_per_covariate"])

    def test_text_artifacts_carry_provenance(self):
        out = self.out()
        self.assertEqual(
            main(["weights", "--data", self.data, "--config", self.weights_config(), "--out", out, "--seed", "5"]),
            EXIT_OK,
        )
        with open(os.path.join(out, "imbalance.txt"), encoding="utf-8") as handle:
            lines = handle.read().splitlines()
        self.assertEqual(lines[0], f"# balweights {__version__} weights")
        self.assertTrue(lines[1].startswith("# config: "))
        config = json.loads(lines[1][len("# config: "):])
        self.assertEqual(config["seed"], 5)
        self.assertEqual(config["data"], self.data)

    def test_weights_output_is_deterministic(self):
        config = self.weights_config()
        first, second = self.out("first"), self.out("second")
        self.assertEqual(main(["weights", "--data", self.data, "--config", config, "--out", first]), EXIT_OK)
        self.assertEqual(main(["weights", "--data", self.data, "--config", config, "--out", second]), EXIT_OK)
        for name in ("weights.csv", "solution.json", "imbalance.json"):
            with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
                self.assertEqual(a.read(), b.read(), name)

    def test_weights_not_converged(self):
        out = self.out()
        config = self.weights_config(solver={"max_iter": 1})
        self.assertEqual(main(["weights", "--data", self.data, "--config", config, "--out", out]), EXIT_CONVERGENCE)
        self.assertFalse(self.read_json(out, "solution.json")["fit"]["converged"])

    def test_missing_treatment_column(self):
        out = self.out()
        config = self.weights_config(columns={"treatment": "Z", "outcome": "Y", "unit_id": "id"})
        self.assertEqual(main(["weights", "--data", self.data, "--config", config, "--out", out]), EXIT_INPUT)
        self.assertFalse(os.path.exists(out) and os.listdir(out))

    def test_missing_data_file(self):
        missing = os.path.join(self.workdir, "absent.csv")
        code = main(["weights", "--data", missing, "--config", self.weights_config(), "--out", self.out()])
        self.assertEqual(code, EXIT_INPUT)

    def test_bad_seed(self):
        code = main(["weights", "--data", self.data, "--config", self.weights_config(seed=-3), "--out", self.out()])
        self.assertEqual(code, EXIT_INPUT)

    def test_balance_on_raw_arms(self):
        out = self.out()
        self.assertEqual(main(["balance", "--data", self.data, "--config", self.weights_config(), "--out", out]), EXIT_OK)
        document = self.read_json(out, "balance.json")
        self.assertCountEqual(document["reports"], ["treated", "control"])
        self.assertTrue(os.path.isfile(os.path.join(out, "balance.txt")))

    def test_balance_of_fitted_weights(self):
        fitted = self.out("fitted")
        self.assertEqual(
            main(["weights", "--data", self.data, "--config", self.weights_config(), "--out", fitted]), EXIT_OK
        )
        config = self.weights_config(weights=os.path.join(fitted, "weights.csv"))
        out = self.out()
        self.assertEqual(main(["balance", "--data", self.data, "--config", config, "--out", out]), EXIT_OK)
        reports = self.read_json(out, "balance.json")["reports"]
        self.assertCountEqual(reports, ["treated-unweighted", "treated-weighted"])

    def test_estimate_from_data_without_outcome_model(self):
        out = self.out()
        config = self.weights_config(estimand={"kind": "treated-mean"}, outcome_model={"enabled": False})
        self.assertEqual(main(["estimate", "--data", self.data, "--config", config, "--out", out]), EXIT_OK)
        estimate = self.read_json(out, "estimate.json")["estimate"]
        self.assertEqual(estimate["point"], estimate["components"]["ipw"])
        self.assertIsNone(estimate["decomposition"])

    def test_estimate_simulated_ate(self):
        out = self.out()
        config = self.config(
            "estimate", dgp=DGP, basis={"kind": "linear"}, estimand={"kind": "ate"},
            weighting={"method": "minimax-l2", "sigma2": 1.0}, outcome_model={"enabled": True, "folds": 3},
        )
        self.assertEqual(main(["estimate", "--config", config, "--out", out, "--format", "text"]), EXIT_OK)
        document = self.read_json(out, "estimate.json")
        self.assertCountEqual(document["estimate"]["decomposition"], ["treated", "control"])
        self.assertIsNotNone(document["oracle"])
        self.assertLen(document["estimate"]["ci"], 2)
        with open(os.path.join(out, "estimate.txt"), encoding="utf-8") as handle:
            self.assertIn("estimand: ate", handle.read())

    def test_estimate_att_provenance(self):
        out = self.out()
        config = self.config(
            "att", dgp=DGP, basis={"kind": "linear"}, estimand={"kind": "att"},
            weighting={"method": "dual", "dispersion": "quadratic-nonneg", "penalty": "l2-scaled", "sigma2": 0.25},
        )
        self.assertEqual(main(["estimate", "--config", config, "--out", out]), EXIT_OK)
        estimate = self.read_json(out, "estimate.json")["estimate"]
        self.assertEqual(estimate["components"]["target"]["provenance"], "treated-sample")
        self.assertEqual(estimate["estimand"]["kind"], "att")

    def test_check_duality(self):
        out = self.out()
        config = self.config("duality", instances=4, max_n=20, max_p=4)
        self.assertEqual(main(["check-duality", "--config", config, "--out", out]), EXIT_OK)
        self.assertEqual(self.read_json(out, "duality.json")["failures"], 0)
        self.assertTrue(os.path.isfile(os.path.join(out, "duality.txt")))

    def test_check_duality_zero_tolerance_fails_verification(self):
        out = self.out()
        config = self.config("duality", instances=2, max_n=20, max_p=4, tolerance=0.0)
        self.assertEqual(main(["check-duality", "--config", config, "--out", out]), EXIT_VERIFICATION)
        self.assertGreater(self.read_json(out, "duality.json")["failures"], 0)

    @parameterized.parameters("convergence", "coverage")
    def test_simulate_rejects_zero_replications(self, experiment):
        config = self.config("sim", experiment=experiment, replications=0, dgp=DGP)
        self.assertEqual(main(["simulate", "--config", config, "--out", self.out()]), EXIT_INPUT)

    def test_simulate_unknown_experiment(self):
        config = self.config("sim", experiment="bootstrap")
        self.assertEqual(main(["simulate", "--config", config, "--out", self.out()]), EXIT_INPUT)


if __name__ == "__main__":
    absltest.main()
