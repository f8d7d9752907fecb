import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from balweights.core.dataset import FeatureMatrix, ObservationTable, arm_indicator
from balweights.core.dual_solvers import (
    DispersionSpec,
    PenaltySpec,
    SolverOptions,
    solve_dual,
    solve_minimax_l2,
    weights_from_theta,
)
from balweights.core.errors import ConvergenceError, InfeasibleError, InputError
from balweights.core.estimators import (
    EstimandSpec,
    aipw_estimate,
    assign_folds,
    build_balance_target,
    combine_contrast,
    fit_crossfit_ridge,
    hajek_normalize,
    imputed_target_mean,
    ipw_estimate,
    wald_ci,
)
from balweights.core.imbalance import BalanceTarget, WeightVector, imbalance_report, uniform_weights
from balweights.core.kernel_solver import (
    KernelSpec,
    KernelWeightProblem,
    gram,
    heuristic_sigma2,
    solve_kernel_minimax,
)
from balweights.helpers.logger import LOGGER
from balweights.helpers.utils import run_parallel
from config import DEFAULT_FOLDS, DEFAULT_LEVEL, DEFAULT_RIDGE_PENALTY, DEFAULT_SEED, KERNEL_MAX_ITER, KERNEL_TOLERANCE

METHODS = ("dual", "minimax-l2", "kernel", "oracle", "uniform")


@dataclass(frozen=True)
class WeightingConfig:
    method: str = "dual"
    dispersion: DispersionSpec = field(default_factory=DispersionSpec)
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    sigma2: Optional[float] = None
    kernel: KernelSpec = field(default_factory=KernelSpec)
    constraints: str = "none"
    hajek: bool = False
    crossfit: bool = False
    folds: int = DEFAULT_FOLDS
    allow_jitter: bool = False
    kernel_tolerance: float = KERNEL_TOLERANCE
    kernel_max_iter: int = KERNEL_MAX_ITER
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown weighting method {self.method!r}, expected one of {METHODS}")
        if self.crossfit and self.method not in ("dual", "minimax-l2"):
            raise InputError("cross-fit weights are available for the dual and minimax-l2 methods only")
        if self.sigma2 is not None and (not self.sigma2 >= 0 or math.isinf(self.sigma2)):
            raise InputError(f"sigma2 must be finite and nonnegative, got {self.sigma2}")

    @classmethod
    def from_dict(cls, payload: Optional[Mapping], solver: Optional[Mapping] = None) -> "WeightingConfig":
        payload = dict(payload or {})
        penalty = payload.get("penalty", "l1-scaled")
        if isinstance(penalty, Mapping):
            penalty = PenaltySpec(penalty.get("kind", "l1-scaled"), float(penalty.get("sigma2", 0.0)))
        else:
            penalty = PenaltySpec(penalty, float(payload.get("sigma2") or 0.0))
        sigma2 = payload.get("sigma2")
        return cls(
            method=payload.get("method", "dual"),
            dispersion=DispersionSpec(payload.get("dispersion", "quadratic")),
            penalty=penalty,
            sigma2=None if sigma2 is None else float(sigma2),
            kernel=KernelSpec.from_dict(payload.get("kernel", {})),
            constraints=payload.get("constraints", "none"),
            hajek=bool(payload.get("hajek", False)),
            crossfit=bool(payload.get("crossfit", False)),
            folds=int(payload.get("folds", DEFAULT_FOLDS)),
            allow_jitter=bool(payload.get("allow_jitter", False)),
            kernel_tolerance=float(payload.get("kernel_tolerance", KERNEL_TOLERANCE)),
            kernel_max_iter=int(payload.get("kernel_max_iter", KERNEL_MAX_ITER)),
            solver=SolverOptions.from_dict(solver if solver is not None else payload.get("solver")),
        )

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dispersion": self.dispersion.kind,
            "penalty": self.penalty.to_dict(),
            "sigma2": self.sigma2,
            "kernel": self.kernel.to_dict(),
            "constraints": self.constraints,
            "hajek": self.hajek,
            "crossfit": self.crossfit,
            "folds": self.folds,
            "allow_jitter": self.allow_jitter,
            "kernel_tolerance": self.kernel_tolerance,
            "kernel_max_iter": self.kernel_max_iter,
            "solver": self.solver.to_dict(),
        }


@dataclass(frozen=True)
class WeightFit:
    weights: WeightVector
    method: str
    converged: bool
    status: str
    solution: object = None
    sigma2: Optional[float] = None
    gram: Optional[np.ndarray] = None
    kernel: Optional[KernelSpec] = None
    fold_solutions: tuple = ()

    def to_dict(self) -> dict:
        payload = {
            "method": self.method,
            "converged": self.converged,
            "status": self.status,
            "sigma2": self.sigma2,
            "group": self.weights.group,
            "sum_to_one": self.weights.sum_to_one,
            "nonnegative": self.weights.nonnegative,
        }
        if self.solution is not None:
            payload["solution"] = self.solution.to_dict()
        if self.kernel is not None:
            payload["kernel"] = self.kernel.to_dict()
        if self.fold_solutions:
            payload["folds"] = [s.to_dict() for s in self.fold_solutions]
        return payload


def require_converged(fit: WeightFit) -> WeightFit:
    if not fit.converged:
        trace = getattr(fit.solution, "objective_trace", ())
        if fit.status == "infeasible":
            raise InfeasibleError(f"{fit.method} weights cannot meet the balance constraints", trace=trace)
        raise ConvergenceError(f"{fit.method} weights did not converge ({fit.status})", trace=trace)
    return fit


def _resolve_sigma2(table, fm, group, config: WeightingConfig) -> float:
    if config.sigma2 is not None:
        return config.sigma2
    return heuristic_sigma2(table, fm, group)


def kernel_mean(spec: KernelSpec, A, B, block_rows: int = 512) -> np.ndarray:
    A = np.atleast_2d(A)
    return np.concatenate([gram(spec, A[s:s + block_rows], B).mean(axis=1) for s in range(0, A.shape[0], block_rows)])


def _kernel_fit(table, fm, target: BalanceTarget, group, config: WeightingConfig, threads) -> WeightFit:
    spec = config.kernel.resolved(table.covariates)
    K = gram(spec, table.covariates, threads=threads)
    sigma2 = _resolve_sigma2(table, fm, group, config)
    extra = {}
    if target.points is not None:
        extra["target_cross"] = kernel_mean(spec, table.covariates, target.points)
        extra["target_energy"] = float(np.mean(kernel_mean(spec, target.points, target.points)))
    else:
        extra["target_weights"] = target.unit_weights
    problem = KernelWeightProblem(
        gram=K, treatment=table.treatment, sigma2=sigma2, constraints=config.constraints, group=group,
        allow_jitter=config.allow_jitter, **extra,
    )
    solution = solve_kernel_minimax(problem, tolerance=config.kernel_tolerance, max_iter=config.kernel_max_iter)
    return WeightFit(
        weights=solution.weights, method="kernel", converged=solution.converged, status=solution.status,
        solution=solution, sigma2=sigma2, gram=K, kernel=spec,
    )


def fit_weights(
    table: ObservationTable,
    fm: FeatureMatrix,
    target: BalanceTarget,
    group: str = "treated",
    config: Optional[WeightingConfig] = None,
    propensity=None,
    threads: int = 1,
    seed: int = DEFAULT_SEED,
) -> WeightFit:
    config = config or WeightingConfig()
    table.require_arms(group)
    target.check(fm.p)
    if config.crossfit:
        fit = crossfit_weights(table, fm, target, group, config, seed=seed, threads=threads)
    elif config.method == "dual":
        solution = solve_dual(fm, table.treatment, target, config.dispersion, config.penalty, config.solver, group)
        fit = WeightFit(solution.weights, "dual", solution.converged, solution.status, solution,
                        sigma2=config.penalty.sigma2 if config.penalty.kind == "l2-scaled" else None)
    elif config.method == "minimax-l2":
        sigma2 = _resolve_sigma2(table, fm, group, config)
        solution = solve_minimax_l2(fm, table.treatment, target, sigma2, group, min_norm=config.solver.min_norm)
        fit = WeightFit(solution.weights, "minimax-l2", True, "converged", solution, sigma2=sigma2)
    elif config.method == "kernel":
        fit = _kernel_fit(table, fm, target, group, config, threads)
    elif config.method == "oracle":
        if propensity is None:
            raise InputError("oracle weights need the true propensity")
        e = np.asarray(propensity, dtype=float)
        inverse = 1.0 / e if group == "treated" else 1.0 / (1.0 - e)
        fit = WeightFit(WeightVector.on_arm(inverse, table.treatment, group, nonnegative=True), "oracle", True, "converged")
    else:
        fit = WeightFit(uniform_weights(table.treatment, group), "uniform", True, "converged")
    if config.hajek:
        fit = replace(fit, weights=hajek_normalize(fit.weights, table.treatment))
    return fit


def crossfit_weights(
    table: ObservationTable,
    fm: FeatureMatrix,
    target: BalanceTarget,
    group: str = "treated",
    config: Optional[WeightingConfig] = None,
    seed: int = DEFAULT_SEED,
    threads: int = 1,
) -> WeightFit:
    """Fit the dual on all folds but one and apply each fitted index to the held-out fold."""
    config = config or WeightingConfig(crossfit=True)
    assignment = assign_folds(table.treatment, config.folds, seed)
    chi = config.dispersion if config.method == "dual" else DispersionSpec("quadratic")

    def fit_fold(k):
        train = assignment != k
        sub_fm = fm.with_values(fm.values[train])
        w_train = table.treatment[train]
        if arm_indicator(w_train, group).sum() < 1:
            raise InputError(f"fold {k} leaves no {group} units to fit weights on")
        if config.method == "dual":
            return solve_dual(sub_fm, w_train, target, chi, config.penalty, config.solver, group)
        sigma2 = _resolve_sigma2(table, fm, group, config)
        return solve_minimax_l2(sub_fm, w_train, target, sigma2, group, min_norm=config.solver.min_norm)

    solutions = run_parallel(fit_fold, range(config.folds), threads)
    values = np.zeros(table.n)
    for k, solution in enumerate(solutions):
        held = assignment == k
        values[held] = weights_from_theta(fm.values[held], table.treatment[held], solution.theta, chi, group).values
    weights = WeightVector.on_arm(values, table.treatment, group, nonnegative=True if chi.nonnegative else None)
    converged = all(s.converged for s in solutions)
    status = "converged" if converged else next(s.status for s in solutions if not s.converged)
    LOGGER.info(f"Cross-fit {config.method} weights on the {group} arm over {config.folds} folds: {status}")
    return WeightFit(weights, config.method, converged, status, None, fold_solutions=tuple(solutions))


@dataclass(frozen=True)
class OutcomeConfig:
    enabled: bool = True
    folds: int = DEFAULT_FOLDS
    penalty: float = DEFAULT_RIDGE_PENALTY

    @classmethod
    def from_dict(cls, payload: Optional[Mapping]) -> "OutcomeConfig":
        payload = dict(payload or {})
        return cls(
            enabled=bool(payload.get("enabled", True)),
            folds=int(payload.get("folds", DEFAULT_FOLDS)),
            penalty=float(payload.get("penalty", DEFAULT_RIDGE_PENALTY)),
        )

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "folds": self.folds, "penalty": self.penalty}


@dataclass(frozen=True)
class EstimateRun:
    estimate: object
    fits: dict
    models: dict
    target: BalanceTarget

    @property
    def converged(self) -> bool:
        return all(fit.converged for fit in self.fits.values())


def run_estimand(
    table: ObservationTable,
    fm: FeatureMatrix,
    estimand: EstimandSpec,
    weighting: Optional[WeightingConfig] = None,
    outcome: Optional[OutcomeConfig] = None,
    level: float = DEFAULT_LEVEL,
    seed: int = DEFAULT_SEED,
    threads: int = 1,
    propensity=None,
) -> EstimateRun:
    weighting = weighting or WeightingConfig()
    outcome = outcome or OutcomeConfig()
    table.require_outcome()
    table.require_arms(*estimand.groups)
    target = build_balance_target(estimand, table, fm)
    fits, models, per_arm = {}, {}, {}
    for group in estimand.groups:
        if estimand.kind == "att" and group == "treated":
            fit = WeightFit(uniform_weights(table.treatment, "treated"), "uniform", True, "converged")
        else:
            fit = fit_weights(table, fm, target, group, weighting, propensity=propensity, threads=threads, seed=seed)
        g = fit.weights
        model = None
        if outcome.enabled:
            model = fit_crossfit_ridge(table, fm, outcome.folds, outcome.penalty, group, seed, threads)
        ipw = ipw_estimate(table, g)
        point = aipw_estimate(table, g, model, target, fm) if model is not None else ipw
        before = imbalance_report(table, fm, uniform_weights(table.treatment, group), target, fit.gram)
        after = imbalance_report(table, fm, g, target, fit.gram)
        arm_estimate = wald_ci(table, g, model, level, point=point, estimand={"kind": f"{group}-mean"})
        components = {
            "ipw": ipw,
            "method": fit.method,
            "converged": fit.converged,
            "solver_status": fit.status,
        }
        if model is not None:
            components["imputation"] = imputed_target_mean(model, target, fm)
            components["correction"] = point - ipw
        per_arm[group] = replace(
            arm_estimate,
            imbalance_before={group: before.to_dict()},
            imbalance_after={group: after.to_dict()},
            components=components,
        )
        fits[group] = fit
        models[group] = model
    if len(per_arm) == 1:
        (estimate,) = per_arm.values()
        estimate = replace(estimate, estimand=estimand.to_dict())
    else:
        scale = float(np.max(np.abs(table.outcome)))
        estimate = combine_contrast(per_arm["treated"], per_arm["control"], estimand.to_dict(), scale)
    estimate = replace(estimate, components={**estimate.components, "target": target.to_dict()})
    LOGGER.info(f"Estimated {estimand.kind}: {estimate.point:.6g} (status {estimate.status})")
    return EstimateRun(estimate=estimate, fits=fits, models=models, target=target)
