import functools
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np
from scipy import optimize
from scipy.special import expit, logit

from balweights.core.dataset import (
    BasisSpec,
    FeatureMatrix,
    ObservationTable,
    arm_indicator,
    basis_terms,
    build_features,
    count_columns,
    evaluate_terms,
)
from balweights.core.dual_solvers import (
    DISPERSIONS,
    PENALTIES,
    DispersionSpec,
    PenaltySpec,
    SolverOptions,
    primal_objective,
    solve_dual,
    verify_duality,
)
from balweights.core.errors import ConvergenceError, InputError
from balweights.core.estimators import EstimandSpec, error_decomposition
from balweights.core.imbalance import BalanceTarget, WeightVector, full_sample_target
from balweights.core.kernel_solver import kernel_objective
from balweights.core.pipeline import OutcomeConfig, WeightingConfig, fit_weights, require_converged, run_estimand
from balweights.helpers.artifacts import format_table
from balweights.helpers.logger import LOGGER
from balweights.helpers.utils import fsum_mean, run_parallel, spawn_generators
from config import (
    BRUTE_FORCE_STARTS,
    BRUTE_FORCE_STEP,
    DEFAULT_LEVEL,
    DEFAULT_OVERLAP_EPS,
    DEFAULT_SEED,
    MAX_BRUTE_FORCE_WEIGHTS,
    POPULATION_DRAWS,
)

COVARIATE_LAWS = ("uniform", "normal", "bernoulli")
OVERLAP_CHECK_DRAWS = 10000


@dataclass(frozen=True)
class DGPSpec:
    n: int = 500
    d: int = 2
    covariate_law: str = "normal"
    bernoulli_p: float = 0.5
    basis: BasisSpec = field(default_factory=lambda: BasisSpec(kind="linear", standardize=False))
    propensity_coef: tuple = ()
    outcome_treated: tuple = ()
    outcome_control: tuple = ()
    noise_sd: float = 1.0
    overlap_eps: float = DEFAULT_OVERLAP_EPS
    strict_overlap: bool = False
    seed: int = DEFAULT_SEED
    population_seed: int = DEFAULT_SEED + 1

    def __post_init__(self):
        if self.n < 2:
            raise InputError(f"n must be at least 2, got {self.n}")
        if self.d < 1:
            raise InputError(f"d must be at least 1, got {self.d}")
        if self.covariate_law not in COVARIATE_LAWS:
            raise InputError(f"unknown covariate law {self.covariate_law!r}, expected one of {COVARIATE_LAWS}")
        if not 0.0 < self.bernoulli_p < 1.0:
            raise InputError(f"bernoulli_p must lie in (0, 1), got {self.bernoulli_p}")
        if not self.noise_sd >= 0:
            raise InputError(f"noise_sd must be nonnegative, got {self.noise_sd}")
        if not 0.0 < self.overlap_eps < 0.5:
            raise InputError(f"overlap_eps must lie in (0, 0.5), got {self.overlap_eps}")
        self.basis.validate(self.d)
        p = self.p
        for name in ("propensity_coef", "outcome_treated", "outcome_control"):
            coef = tuple(float(c) for c in getattr(self, name)) or (0.0,) * p
            if len(coef) != p:
                raise InputError(f"{name} has {len(coef)} entries, the declared basis has {p} columns")
            object.__setattr__(self, name, coef)

    @property
    def p(self) -> int:
        return count_columns(self.basis, self.d)

    @property
    def column_names(self) -> tuple:
        return tuple(f"x{j + 1}" for j in range(self.d))

    @classmethod
    def from_dict(cls, payload: Mapping) -> "DGPSpec":
        basis = payload.get("basis", {"kind": "linear", "standardize": False})
        return cls(
            n=int(payload.get("n", 500)),
            d=int(payload.get("d", 2)),
            covariate_law=payload.get("covariate_law", "normal"),
            bernoulli_p=float(payload.get("bernoulli_p", 0.5)),
            basis=BasisSpec.from_dict(basis),
            propensity_coef=tuple(payload.get("propensity_coef", ())),
            outcome_treated=tuple(payload.get("outcome_treated", ())),
            outcome_control=tuple(payload.get("outcome_control", ())),
            noise_sd=float(payload.get("noise_sd", 1.0)),
            overlap_eps=float(payload.get("overlap_eps", DEFAULT_OVERLAP_EPS)),
            strict_overlap=bool(payload.get("strict_overlap", False)),
            seed=int(payload.get("seed", DEFAULT_SEED)),
            population_seed=int(payload.get("population_seed", DEFAULT_SEED + 1)),
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "covariate_law": self.covariate_law,
            "bernoulli_p": self.bernoulli_p,
            "basis": self.basis.to_dict(),
            "propensity_coef": list(self.propensity_coef),
            "outcome_treated": list(self.outcome_treated),
            "outcome_control": list(self.outcome_control),
            "noise_sd": self.noise_sd,
            "overlap_eps": self.overlap_eps,
            "strict_overlap": self.strict_overlap,
            "seed": self.seed,
            "population_seed": self.population_seed,
        }

    def draw_covariates(self, rng, size: int) -> np.ndarray:
        if self.covariate_law == "uniform":
            return rng.random((size, self.d))
        if self.covariate_law == "normal":
            return rng.standard_normal((size, self.d))
        return (rng.random((size, self.d)) < self.bernoulli_p).astype(float)

    def features(self, X) -> np.ndarray:
        terms = basis_terms(self.basis, self.column_names)
        return evaluate_terms(X, terms, hermite=self.basis.kind == "hermite")

    def propensity(self, X) -> np.ndarray:
        bound = logit(1.0 - self.overlap_eps)
        return expit(np.clip(self.features(X) @ np.asarray(self.propensity_coef), -bound, bound))

    def m1(self, X) -> np.ndarray:
        return self.features(X) @ np.asarray(self.outcome_treated)

    def m0(self, X) -> np.ndarray:
        return self.features(X) @ np.asarray(self.outcome_control)


@functools.lru_cache(maxsize=32)
def _population_feature_means(key: str, draws: int) -> np.ndarray:
    spec = DGPSpec.from_dict(json.loads(key))
    rng = np.random.default_rng(spec.population_seed)
    total = np.zeros(spec.p)
    for start in range(0, draws, 50000):
        size = min(50000, draws - start)
        total += spec.features(spec.draw_covariates(rng, size)).sum(axis=0)
    return total / draws


def population_feature_means(spec: DGPSpec, draws: int = POPULATION_DRAWS) -> np.ndarray:
    payload = spec.to_dict()
    payload.pop("n")
    payload.pop("seed")
    return _population_feature_means(json.dumps(payload, sort_keys=True), draws)


@dataclass(frozen=True)
class Oracles:
    propensity: np.ndarray
    m1: np.ndarray
    m0: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    mu1: float
    mu0: float
    mu1_tilde: float
    mu0_tilde: float
    propensity_fn: Callable = None
    m1_fn: Callable = None
    m0_fn: Callable = None

    @property
    def tau(self) -> float:
        return self.mu1 - self.mu0

    @property
    def tau_tilde(self) -> float:
        return self.mu1_tilde - self.mu0_tilde

    def truth(self, kind: str, sample: bool = True) -> float:
        mu1, mu0 = (self.mu1_tilde, self.mu0_tilde) if sample else (self.mu1, self.mu0)
        if kind == "treated-mean":
            return mu1
        if kind == "control-mean":
            return mu0
        if kind == "ate":
            return mu1 - mu0
        raise InputError(f"no oracle truth for estimand {kind!r}")

    def regression(self, group: str) -> Callable:
        return self.m1_fn if group == "treated" else self.m0_fn

    def to_dict(self) -> dict:
        return {
            "mu1": self.mu1,
            "mu0": self.mu0,
            "tau": self.tau,
            "mu1_tilde": self.mu1_tilde,
            "mu0_tilde": self.mu0_tilde,
            "tau_tilde": self.tau_tilde,
        }


def check_overlap(spec: DGPSpec):
    rng = np.random.default_rng(spec.population_seed)
    index = spec.features(spec.draw_covariates(rng, OVERLAP_CHECK_DRAWS)) @ np.asarray(spec.propensity_coef)
    bound = logit(1.0 - spec.overlap_eps)
    if np.max(np.abs(index)) > bound:
        raise InputError(
            f"propensity coefficients push e(x) outside [{spec.overlap_eps}, {1 - spec.overlap_eps}]; "
            f"shrink them or disable strict_overlap"
        )


def generate(spec: DGPSpec):
    if spec.strict_overlap:
        check_overlap(spec)
    covariate_stream, treatment_stream, noise_stream = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)
    )
    X = spec.draw_covariates(covariate_stream, spec.n)
    e = spec.propensity(X)
    W = (treatment_stream.random(spec.n) < e).astype(float)
    m1, m0 = spec.m1(X), spec.m0(X)
    noise = noise_stream.standard_normal((spec.n, 2)) * spec.noise_sd
    y1, y0 = m1 + noise[:, 0], m0 + noise[:, 1]
    Y = np.where(W == 1.0, y1, y0)
    table = ObservationTable.from_arrays(X, W, Y, column_names=spec.column_names)
    means = population_feature_means(spec)
    oracles = Oracles(
        propensity=e,
        m1=m1,
        m0=m0,
        y1=y1,
        y0=y0,
        mu1=float(means @ np.asarray(spec.outcome_treated)),
        mu0=float(means @ np.asarray(spec.outcome_control)),
        mu1_tilde=math.fsum(m1) / spec.n,
        mu0_tilde=math.fsum(m0) / spec.n,
        propensity_fn=spec.propensity,
        m1_fn=spec.m1,
        m0_fn=spec.m0,
    )
    return table, oracles


def oracle_weights(table: ObservationTable, propensity, group: str = "treated") -> WeightVector:
    e = propensity.propensity if isinstance(propensity, Oracles) else np.asarray(propensity, dtype=float)
    inverse = 1.0 / e if group == "treated" else 1.0 / (1.0 - e)
    return WeightVector.on_arm(inverse, table.treatment, group, nonnegative=True)


def minimax_l2_objective(fm, w, t: BalanceTarget, sigma2: float, group: str = "treated") -> Callable:
    chi = DispersionSpec("quadratic")
    pen = PenaltySpec("l2-scaled", sigma2)

    def objective(gamma):
        g = WeightVector.on_arm(gamma, w, group, sum_to_one=False, nonnegative=False)
        return primal_objective(fm, w, t, g, chi, pen)

    return objective


def kernel_minimax_objective(K, w, sigma2: float, group: str = "treated", target_weights=None) -> Callable:
    def objective(gamma):
        return kernel_objective(K, w, gamma, sigma2, group, target_weights)

    return objective


def _compass_directions(m: int, simplex: bool):
    if simplex:
        return [(i, j) for i, j in itertools.permutations(range(m), 2)]
    eye = np.eye(m)
    directions = [s * eye[i] for i in range(m) for s in (1.0, -1.0)]
    for i, j in itertools.combinations(range(m), 2):
        for si, sj in ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)):
            directions.append(si * eye[i] + sj * eye[j])
    return directions


def _refine(f, x, value, step, floor, simplex, directions):
    while step >= floor:
        improved = False
        for direction in directions:
            if simplex:
                i, j = direction
                delta = min(step, x[i])
                if delta <= 0:
                    continue
                candidate = x.copy()
                candidate[i] -= delta
                candidate[j] += delta
            else:
                candidate = x + step * direction
            candidate_value = f(candidate)
            if candidate_value < value:
                x, value, improved = candidate, candidate_value, True
        if not improved:
            step /= 2.0
    return x, value


def brute_force_weights(
    objective: Callable,
    treatment,
    group: str = "treated",
    constraints: str = "none",
    seed: int = DEFAULT_SEED,
    starts: int = BRUTE_FORCE_STARTS,
    step: float = BRUTE_FORCE_STEP,
    refine: int = 10,
) -> WeightVector:
    """Minimize a primal objective over the arm weights by multistart search and compass refinement.

    The objective receives the full length-n weight vector. Constraints "simplex" keeps the
    weights nonnegative with (1/n) sum = 1.
    """
    arm = arm_indicator(treatment, group) == 1.0
    n, m = arm.size, int(arm.sum())
    if m > MAX_BRUTE_FORCE_WEIGHTS:
        raise InputError(f"brute force handles at most {MAX_BRUTE_FORCE_WEIGHTS} free weights, got {m}")
    if m == 0:
        raise InputError(f"the {group} arm has no units")
    if constraints not in ("none", "simplex"):
        raise InputError(f"unknown constraints {constraints!r}")
    simplex = constraints == "simplex"
    rng = np.random.default_rng(seed)

    def f(x):
        gamma = np.zeros(n)
        gamma[arm] = x
        return objective(gamma)

    scale = n / m
    if simplex:
        candidates = rng.dirichlet(np.ones(m), size=starts) * n
    else:
        candidates = rng.uniform(-4 * scale, 4 * scale, size=(starts, m))
    values = np.array([f(x) for x in candidates])
    directions = _compass_directions(m, simplex)
    best_x, best_value = None, math.inf
    for k in np.argsort(values, kind="stable")[:refine]:
        x, value = _refine(f, candidates[k].copy(), values[k], scale, step, simplex, directions)
        if value < best_value:
            best_x, best_value = x, value
    if simplex:
        best_x = np.maximum(best_x, 0.0)
        best_x *= n / best_x.sum()
    gamma = np.zeros(n)
    gamma[arm] = best_x
    return WeightVector.on_arm(gamma, treatment, group, sum_to_one=True if simplex else None,
                               nonnegative=True if simplex else None)


def solve_primal_direct(
    fm,
    w,
    t: BalanceTarget,
    chi: DispersionSpec,
    pen: PenaltySpec,
    group: str = "treated",
    max_iter: int = 2000,
    ftol: float = 1e-15,
) -> WeightVector:
    """Solve the weight problem on the weights themselves with SLSQP, without touching the dual."""
    Phi = fm.values if isinstance(fm, FeatureMatrix) else np.asarray(fm, dtype=float)
    scales = fm.scales if isinstance(fm, FeatureMatrix) else np.ones(Phi.shape[1])
    arm = arm_indicator(w, group) == 1.0
    n, m = Phi.shape[0], int(arm.sum())
    A = Phi[arm].T / n
    b = t.target_means
    exact = np.isinf(scales)
    bounded = np.isfinite(scales) & (scales > 0)
    lam = scales[bounded]

    def slope(gamma):
        if chi.kind == "entropy":
            return np.log(gamma)
        return gamma

    def spread(gamma):
        return float(np.sum(chi.dispersion(gamma)))

    if pen.kind == "l1-scaled":
        def objective(gamma):
            return spread(gamma)

        def gradient(gamma):
            return slope(gamma)
    else:
        def objective(gamma):
            d = b[bounded] - A[bounded] @ gamma
            return n ** 2 * float(np.sum((lam * d) ** 2)) + 2 * pen.sigma2 * spread(gamma)

        def gradient(gamma):
            d = b[bounded] - A[bounded] @ gamma
            return -2 * n ** 2 * A[bounded].T @ (lam ** 2 * d) + 2 * pen.sigma2 * slope(gamma)

    constraints = []
    if exact.any():
        constraints.append({"type": "eq", "fun": lambda g: A[exact] @ g - b[exact], "jac": lambda g: A[exact]})
    if pen.kind == "l1-scaled" and bounded.any():
        radius = 1.0 / lam
        constraints.append({"type": "ineq", "fun": lambda g: radius - (b[bounded] - A[bounded] @ g), "jac": lambda g: A[bounded]})
        constraints.append({"type": "ineq", "fun": lambda g: radius + (b[bounded] - A[bounded] @ g), "jac": lambda g: -A[bounded]})
    lower = {"quadratic": None, "quadratic-nonneg": 0.0, "entropy": 1e-12}[chi.kind]
    result = optimize.minimize(
        objective,
        np.full(m, n / m),
        jac=gradient,
        method="SLSQP",
        bounds=[(lower, None)] * m,
        constraints=constraints,
        options={"maxiter": max_iter, "ftol": ftol},
    )
    if not result.success:
        LOGGER.warning(f"Direct primal solve did not report success: {result.message}")
    gamma = np.zeros(n)
    gamma[arm] = result.x
    return WeightVector.on_arm(gamma, w, group, nonnegative=True if chi.nonnegative else None)


def random_duality_instance(rng, chi: DispersionSpec, pen: PenaltySpec, max_n: int = 60, max_p: int = 12):
    n = int(rng.integers(20, max_n + 1))
    p = int(rng.integers(2, max_p + 1))
    W = np.zeros(n)
    while W.sum() < max(p, 3) or W.sum() > n - 3:
        W = (rng.random(n) < 0.5).astype(float)
    X = rng.standard_normal((n, p - 1))
    values = np.column_stack([np.ones(n), X])
    scales = np.concatenate([[math.inf], rng.uniform(1.0, 3.0, size=p - 1)])
    fm = FeatureMatrix(values=values, scales=scales, labels=("1",) + tuple(f"z{j + 1}" for j in range(p - 1)), intercept=0)
    if pen.kind == "l2-scaled":
        pen = PenaltySpec("l2-scaled", float(rng.uniform(0.5, 2.0)))
    return fm, W, full_sample_target(fm), pen


@dataclass(frozen=True)
class DualityCheckConfig:
    instances: int = 100
    tolerance: float = 1e-6
    seed: int = DEFAULT_SEED
    dispersions: tuple = DISPERSIONS
    penalties: tuple = PENALTIES
    max_n: int = 60
    max_p: int = 12
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.instances < 1:
            raise InputError(f"instances must be at least 1, got {self.instances}")
        if not self.tolerance >= 0:
            raise InputError(f"tolerance must be nonnegative, got {self.tolerance}")

    @classmethod
    def from_dict(cls, payload: Optional[Mapping]) -> "DualityCheckConfig":
        payload = dict(payload or {})
        return cls(
            instances=int(payload.get("instances", 100)),
            tolerance=float(payload.get("tolerance", 1e-6)),
            seed=int(payload.get("seed", DEFAULT_SEED)),
            dispersions=tuple(payload.get("dispersions", DISPERSIONS)),
            penalties=tuple(payload.get("penalties", PENALTIES)),
            max_n=int(payload.get("max_n", 60)),
            max_p=int(payload.get("max_p", 12)),
            solver=SolverOptions.from_dict(payload.get("solver")),
        )

    def to_dict(self) -> dict:
        return {
            "instances": self.instances,
            "tolerance": self.tolerance,
            "seed": self.seed,
            "dispersions": list(self.dispersions),
            "penalties": list(self.penalties),
            "max_n": self.max_n,
            "max_p": self.max_p,
            "solver": self.solver.to_dict(),
        }


def duality_check(config: DualityCheckConfig, threads: int = 1) -> dict:
    pairs = [(DispersionSpec(c), PenaltySpec(z)) for c in config.dispersions for z in config.penalties]
    jobs = list(itertools.product(range(len(pairs)), range(config.instances)))
    streams = spawn_generators(config.seed, len(jobs))

    def run(job):
        (pair, instance), rng = job
        chi, pen = pairs[pair]
        fm, W, target, pen = random_duality_instance(rng, chi, pen, config.max_n, config.max_p)
        dual = solve_dual(fm, W, target, chi, pen, config.solver)
        primal = solve_primal_direct(fm, W, target, chi, pen)
        report = verify_duality(fm, W, target, chi, pen, primal, dual, config.tolerance)
        return {
            "instance": instance,
            "dispersion": chi.kind,
            "penalty": pen.kind,
            "n": fm.n,
            "p": fm.p,
            "iterations": dual.iterations,
            **report.to_dict(),
        }

    rows = run_parallel(run, list(zip(jobs, streams)), threads)
    failures = sum(not row["passed"] for row in rows)
    worst = max(row["max_discrepancy"] for row in rows)
    LOGGER.info(f"Duality check: {len(rows) - failures}/{len(rows)} instances passed, max discrepancy {worst:.3g}")
    return {"rows": rows, "failures": failures, "max_discrepancy": worst, "passed": failures == 0}


def duality_table(result: dict) -> str:
    rows = [
        (r["dispersion"], r["penalty"], r["instance"], r["n"], r["p"], r["link_gap"], r["objective_gap"],
         "pass" if r["passed"] else "FAIL")
        for r in result["rows"]
    ]
    head = format_table(("dispersion", "penalty", "instance", "n", "p", "link_gap", "objective_gap", "result"), rows)
    return f"{head}\n\nfailures: {result['failures']}\nmax discrepancy: {result['max_discrepancy']:.3g}"


@dataclass(frozen=True)
class SimResult:
    kind: str
    replications: int
    rows: tuple = ()
    coverage: Optional[float] = None
    coverage_population: Optional[float] = None
    rmse_weights: Optional[dict] = None
    bias: Optional[float] = None
    variance: Optional[float] = None
    mean_gamma_rms: Optional[float] = None
    mean_variance_estimate: Optional[float] = None
    degenerate: int = 0
    excluded: int = 0
    violation: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "replications": self.replications,
            "rows": list(self.rows),
            "coverage": self.coverage,
            "coverage_population": self.coverage_population,
            "rmse_weights": self.rmse_weights,
            "bias": self.bias,
            "variance": self.variance,
            "mean_gamma_rms": self.mean_gamma_rms,
            "mean_variance_estimate": self.mean_variance_estimate,
            "degenerate": self.degenerate,
            "excluded": self.excluded,
            "violation": self.violation,
            "details": self.details,
        }

    def to_text(self) -> str:
        if self.kind == "convergence":
            rows = [(r["n"], r["rmse"], r["reps_used"], r["excluded"], r.get("negative_control_rmse")) for r in self.rows]
            lines = [format_table(("n", "rmse", "reps", "excluded", "negative_control_rmse"), rows), ""]
            lines.append(f"strictly decreasing: {not self.violation}")
            if "negative_control_decreases" in self.details:
                lines.append(f"negative control decreases: {self.details['negative_control_decreases']}")
            return "\n".join(lines)
        rows = [
            ("replications", self.replications),
            ("coverage", self.coverage if self.coverage is not None else "undefined"),
            ("coverage (population)", self.coverage_population if self.coverage_population is not None else "undefined"),
            ("bias", self.bias),
            ("variance", self.variance),
            ("mean gamma_rms", self.mean_gamma_rms),
            ("mean variance estimate", self.mean_variance_estimate),
            ("degenerate", self.degenerate),
            ("excluded", self.excluded),
        ]
        return format_table(("quantity", "value"), rows)


def replication_seeds(seed: int, count: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


@dataclass(frozen=True)
class ConvergenceConfig:
    dgp: DGPSpec = field(default_factory=DGPSpec)
    sizes: tuple = (200, 800, 3200)
    replications: int = 200
    basis: BasisSpec = field(default_factory=BasisSpec)
    weighting: WeightingConfig = field(default_factory=lambda: WeightingConfig(method="minimax-l2", sigma2=1.0))
    negative_control: bool = True
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.replications < 1:
            raise InputError(f"replications must be at least 1, got {self.replications}")
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise InputError(f"sizes must be at least two increasing values, got {list(sizes)}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ConvergenceConfig":
        return cls(
            dgp=DGPSpec.from_dict(payload.get("dgp", {})),
            sizes=tuple(payload.get("sizes", (200, 800, 3200))),
            replications=int(payload.get("replications", 200)),
            basis=BasisSpec.from_dict(payload.get("basis", {})),
            weighting=WeightingConfig.from_dict(payload.get("weighting", {"method": "minimax-l2", "sigma2": 1.0}),
                                                payload.get("solver")),
            negative_control=bool(payload.get("negative_control", True)),
            seed=int(payload.get("seed", DEFAULT_SEED)),
        )

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp.to_dict(),
            "sizes": list(self.sizes),
            "replications": self.replications,
            "basis": self.basis.to_dict(),
            "weighting": self.weighting.to_dict(),
            "negative_control": self.negative_control,
            "seed": self.seed,
        }


def _weight_rmse(dgp: DGPSpec, basis: BasisSpec, weighting: WeightingConfig, free_only_intercept: bool):
    table, oracles = generate(dgp)
    fm = build_features(table, basis)
    if free_only_intercept:
        fm = fm.with_scales([math.inf if j == fm.intercept else 0.0 for j in range(fm.p)])
    fit = require_converged(fit_weights(table, fm, full_sample_target(fm), "treated", weighting))
    arm = table.treatment == 1.0
    error = fit.weights.values[arm] - 1.0 / oracles.propensity[arm]
    return math.sqrt(math.fsum(error ** 2) / error.size)


def _rmse_curve(config: ConvergenceConfig, negative: bool, threads: int):
    rows = []
    for n in config.sizes:
        seeds = replication_seeds(config.seed + n, config.replications)

        def run(seed):
            try:
                return _weight_rmse(replace(config.dgp, n=n, seed=seed), config.basis, config.weighting, negative)
            except ConvergenceError as e:
                LOGGER.warning(f"Replication with seed {seed} at n={n} excluded: {e}")
                return None

        values = run_parallel(run, seeds, threads)
        used = [v for v in values if v is not None]
        rows.append({"n": n, "rmse": fsum_mean(used), "reps_used": len(used), "excluded": len(values) - len(used)})
    return rows


def convergence_experiment(config: ConvergenceConfig, threads: int = 1) -> SimResult:
    rows = _rmse_curve(config, False, threads)
    rmse = [r["rmse"] for r in rows]
    violation = any(not b < a for a, b in zip(rmse, rmse[1:]))
    if violation:
        LOGGER.warning(f"Weight RMSE is not strictly decreasing across n: {rmse}")
    details = {}
    if config.negative_control:
        control = _rmse_curve(config, True, threads)
        for row, other in zip(rows, control):
            row["negative_control_rmse"] = other["rmse"]
        first, last = control[0]["rmse"], control[-1]["rmse"]
        details["negative_control_decreases"] = bool(last < 0.9 * first)
    return SimResult(
        kind="convergence",
        replications=config.replications,
        rows=tuple(rows),
        rmse_weights={str(r["n"]): r["rmse"] for r in rows},
        excluded=sum(r["excluded"] for r in rows),
        violation=violation,
        details=details,
    )


@dataclass(frozen=True)
class CoverageConfig:
    dgp: DGPSpec = field(default_factory=DGPSpec)
    replications: int = 1000
    level: float = DEFAULT_LEVEL
    estimand: str = "treated-mean"
    basis: BasisSpec = field(default_factory=BasisSpec)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    outcome: OutcomeConfig = field(default_factory=OutcomeConfig)
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.replications < 100:
            raise InputError(f"coverage needs at least 100 replications, got {self.replications}")
        if not 0.0 < self.level < 1.0:
            raise InputError(f"level must lie in (0, 1), got {self.level}")
        if self.estimand not in ("treated-mean", "control-mean", "ate"):
            raise InputError(f"coverage supports treated-mean, control-mean and ate, got {self.estimand!r}")

    @classmethod
    def from_dict(cls, payload: Mapping) -> "CoverageConfig":
        return cls(
            dgp=DGPSpec.from_dict(payload.get("dgp", {})),
            replications=int(payload.get("replications", 1000)),
            level=float(payload.get("level", DEFAULT_LEVEL)),
            estimand=payload.get("estimand", "treated-mean"),
            basis=BasisSpec.from_dict(payload.get("basis", {})),
            weighting=WeightingConfig.from_dict(payload.get("weighting", {}), payload.get("solver")),
            outcome=OutcomeConfig.from_dict(payload.get("outcome_model")),
            seed=int(payload.get("seed", DEFAULT_SEED)),
        )

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp.to_dict(),
            "replications": self.replications,
            "level": self.level,
            "estimand": self.estimand,
            "basis": self.basis.to_dict(),
            "weighting": self.weighting.to_dict(),
            "outcome_model": self.outcome.to_dict(),
            "seed": self.seed,
        }


def _coverage_replication(config: CoverageConfig, seed: int):
    table, oracles = generate(replace(config.dgp, seed=seed))
    fm = build_features(table, config.basis)
    run = run_estimand(
        table, fm, EstimandSpec(config.estimand), config.weighting, config.outcome, config.level, seed,
        propensity=oracles.propensity,
    )
    if not run.converged:
        raise ConvergenceError(f"weights did not converge for replication seed {seed}")
    estimate = run.estimate
    identity = 0.0
    for group, fit in run.fits.items():
        parts = error_decomposition(table, fit.weights, run.models[group], oracles.regression(group), target=run.target)
        identity = max(identity, abs(parts.imbalance + parts.noise + parts.sampling - parts.total))
    sample_truth = oracles.truth(config.estimand, sample=True)
    population_truth = oracles.truth(config.estimand, sample=False)
    return {
        "seed": seed,
        "point": estimate.point,
        "variance": estimate.variance,
        "gamma_rms": estimate.gamma_rms,
        "ci": list(estimate.ci) if estimate.ci is not None else None,
        "status": estimate.status,
        "hit": estimate.covers(sample_truth),
        "hit_population": estimate.covers(population_truth),
        "error": estimate.point - population_truth,
        "identity_residual": identity,
    }


def coverage_experiment(config: CoverageConfig, threads: int = 1) -> SimResult:
    seeds = replication_seeds(config.seed, config.replications)

    def run(seed):
        try:
            return _coverage_replication(config, seed)
        except ConvergenceError as e:
            LOGGER.warning(f"Replication excluded: {e}")
            return None

    results = run_parallel(run, seeds, threads)
    rows = [r for r in results if r is not None]
    excluded = len(results) - len(rows)
    valid = [r for r in rows if r["status"] == "ok"]
    degenerate = len(rows) - len(valid)
    if degenerate:
        LOGGER.warning(f"{degenerate} replications produced a degenerate interval")
    coverage = fsum_mean(float(r["hit"]) for r in valid) if valid else None
    coverage_population = fsum_mean(float(r["hit_population"]) for r in valid) if valid else None
    errors = [r["error"] for r in rows]
    bias = fsum_mean(errors) if errors else None
    points = [r["point"] for r in rows]
    mean_point = fsum_mean(points) if points else None
    variance = math.fsum((x - mean_point) ** 2 for x in points) / max(len(points) - 1, 1) if points else None
    return SimResult(
        kind="coverage",
        replications=config.replications,
        rows=tuple(rows),
        coverage=coverage,
        coverage_population=coverage_population,
        bias=bias,
        variance=variance,
        mean_gamma_rms=fsum_mean(r["gamma_rms"] for r in rows) if rows else None,
        mean_variance_estimate=fsum_mean(r["variance"] for r in rows) if rows else None,
        degenerate=degenerate,
        excluded=excluded,
        details={
            "level": config.level,
            "estimand": config.estimand,
            "max_identity_residual": max((r["identity_residual"] for r in rows), default=0.0),
        },
    )
